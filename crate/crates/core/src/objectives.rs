//! Loss terms of the training objective.
//!
//! Reductions: pixel terms are means over pixels, latent terms are sums over
//! latent dimensions, and every batch reduction is a mean over samples.
//!
//! Each term exists in two forms: a plain function over vectors (used by
//! callers and tests) and a batched kernel returning the value together with
//! its gradient, which the training graph consumes through
//! [`Graph::scalar_fn`].

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{GaussianLatent, StepTrace};
use crate::signal::Domain;

/// Probability floor applied inside the logarithm of cross-entropy terms.
pub const PROB_EPS: f64 = 1e-12;

/// Gaussian RBF kernel `k(x, y) = exp(−‖x − y‖² / (2σ²))`, summed over
/// one or more bandwidths σ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSpec {
    Fixed(Vec<f64>),
    /// σ₀ is chosen so that `k = e⁻¹` at the median pairwise squared distance
    /// of the pooled sample; the bandwidths are `σ₀ · multiplier`.
    MedianHeuristic(Vec<f64>),
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::MedianHeuristic(vec![0.25, 0.5, 1.0, 2.0, 4.0])
    }
}

impl KernelSpec {
    /// Resolves the concrete bandwidths for a pooled sample.
    pub fn bandwidths(&self, xs: &[f64], xt: &[f64], dim: usize) -> Result<Vec<f64>> {
        let sigmas = match self {
            KernelSpec::Fixed(s) => s.clone(),
            KernelSpec::MedianHeuristic(mults) => {
                let base = median_sigma(xs, xt, dim);
                mults.iter().map(|m| m * base).collect()
            }
        };
        if sigmas.is_empty() || sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config(format!("kernel bandwidths must be positive, got {sigmas:?}")));
        }
        Ok(sigmas)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median_sigma(xs: &[f64], xt: &[f64], dim: usize) -> f64 {
    let pooled: Vec<&[f64]> = xs.chunks(dim).chain(xt.chunks(dim)).collect();
    let mut d: Vec<f64> = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let median = if d.len() % 2 == 0 { 0.5 * (d[mid - 1] + d[mid]) } else { d[mid] };
    if median > 0.0 {
        (median / 2.0).sqrt()
    } else {
        1.0
    }
}

/// A cross-entropy value and the number of probabilities that hit the floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClampedLoss {
    pub value: f64,
    pub clamped: usize,
}

/// Weights of the MMD, discriminative and classification terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.2,
            gamma: 0.3,
        }
    }
}

/// Every loss component of one optimization step, plus the weighted total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub elbo_recon: f64,
    pub elbo_kl: f64,
    pub mmd: f64,
    pub dis: f64,
    pub cls: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn elbo(&self) -> f64 {
        self.elbo_recon + self.elbo_kl
    }

    pub fn is_finite(&self) -> bool {
        [self.elbo_recon, self.elbo_kl, self.mmd, self.dis, self.cls, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn total_loss(elbo_recon: f64, elbo_kl: f64, mmd: f64, dis: f64, cls: f64, weights: LossWeights) -> Result<LossBreakdown> {
    if weights.alpha < 0.0 || weights.beta < 0.0 || weights.gamma < 0.0 {
        return Err(Error::InvalidArgument(format!("negative loss weight in {weights:?}")));
    }
    let total = elbo_recon + elbo_kl + weights.alpha * mmd + weights.beta * dis + weights.gamma * cls;
    Ok(LossBreakdown {
        elbo_recon,
        elbo_kl,
        mmd,
        dis,
        cls,
        total,
        weights,
    })
}

// ---------------------------------------------------------------------------
// KL divergence

/// Row-wise KL(q ‖ p) between diagonal Gaussians, summed over dimensions and
/// averaged over rows. Returns the value and gradients with respect to
/// `(q_mean, q_log_var, p_mean, p_log_var)`.
pub(crate) fn kl_batch(
    q_mean: &[f64],
    q_log_var: &[f64],
    p_mean: &[f64],
    p_log_var: &[f64],
    rows: usize,
) -> (f64, [Vec<f64>; 4]) {
    let n = q_mean.len();
    let inv_rows = 1.0 / rows as f64;
    let mut value = 0.0;
    let mut g = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        let var_q = q_log_var[i].exp();
        let inv_var_p = (-p_log_var[i]).exp();
        let diff = q_mean[i] - p_mean[i];
        let ratio = (var_q + diff * diff) * inv_var_p;
        value += 0.5 * (p_log_var[i] - q_log_var[i] + ratio - 1.0);
        g[0][i] = diff * inv_var_p * inv_rows;
        g[1][i] = 0.5 * (var_q * inv_var_p - 1.0) * inv_rows;
        g[2][i] = -diff * inv_var_p * inv_rows;
        g[3][i] = 0.5 * (1.0 - ratio) * inv_rows;
    }
    (value * inv_rows, g)
}

/// Closed-form KL divergence between two diagonal Gaussians, summed over
/// dimensions.
pub fn kl_diag_gaussians(q: &GaussianLatent, p: &GaussianLatent) -> Result<f64> {
    q.check()?;
    p.check()?;
    if q.dim() != p.dim() {
        return Err(Error::dims("kl_diag_gaussians", q.dim(), p.dim()));
    }
    Ok(kl_batch(&q.mean, &q.log_variance, &p.mean, &p.log_variance, 1).0.max(0.0))
}

// ---------------------------------------------------------------------------
// Reconstruction

/// Row-wise `0.5 · mean((pred − target)²)`, averaged over rows, with the
/// gradient with respect to `pred`.
pub(crate) fn half_mse_batch(pred: &[f64], target: &[f64], rows: usize) -> (f64, Vec<f64>) {
    let per_row = pred.len() / rows;
    let scale = 1.0 / (per_row * rows) as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            value += d * d;
            d * scale
        })
        .collect();
    (0.5 * value * scale, grad)
}

/// Negative Gaussian log-likelihood with unit variance, up to a constant:
/// half the mean squared pixel error.
pub fn reconstruction_loss(original: &[f64], reconstructed: &[f64]) -> Result<f64> {
    if original.len() != reconstructed.len() {
        return Err(Error::dims("reconstruction_loss", original.len(), reconstructed.len()));
    }
    if original.is_empty() {
        return Err(Error::Empty("image"));
    }
    Ok(half_mse_batch(reconstructed, original, 1).0)
}

/// Per-step ELBO terms summed over the stages of one sequence:
/// `(Σ_t recon_t, Σ_t [KL(s) + KL(r)])`.
pub fn elbo_loss(traces: &[StepTrace]) -> Result<(f64, f64)> {
    if traces.is_empty() {
        return Err(Error::Empty("step traces"));
    }
    let mut recon = 0.0;
    let mut kl = 0.0;
    for tr in traces {
        recon += reconstruction_loss(&tr.target_image.pixels, &tr.recon_image.pixels)?;
        kl += kl_diag_gaussians(&tr.post_s, &tr.prior_s)?;
        kl += kl_diag_gaussians(&tr.post_r, &tr.prior_r)?;
    }
    Ok((recon, kl))
}

// ---------------------------------------------------------------------------
// MMD

/// Squared MMD between row sets `xs` (`ns × dim`) and `xt` (`nt × dim`),
/// including the i = j terms, summed over bandwidths. Returns gradients with
/// respect to both sets.
pub(crate) fn mmd_batch(xs: &[f64], xt: &[f64], dim: usize, sigmas: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let ns = xs.len() / dim;
    let nt = xt.len() / dim;
    let mut gs = vec![0.0; xs.len()];
    let mut gt = vec![0.0; xt.len()];
    let mut value = 0.0;
    let inv2: Vec<f64> = sigmas.iter().map(|s| 1.0 / (2.0 * s * s)).collect();
    // Σ_σ k_σ(d²) and its derivative with respect to d².
    let kernel = |d2: f64| -> (f64, f64) {
        inv2.iter().fold((0.0, 0.0), |(k, dk), c| {
            let e = (-c * d2).exp();
            (k + e, dk - c * e)
        })
    };
    // Pairs inside one set; every unordered pair appears twice.
    let mut within = |x: &[f64], g: &mut [f64], n: usize, w: f64| {
        for i in 0..n {
            let xi = &x[i * dim..(i + 1) * dim];
            value += w * kernel(0.0).0;
            for j in i + 1..n {
                let xj = &x[j * dim..(j + 1) * dim];
                let (k, dk) = kernel(sq_dist(xi, xj));
                value += 2.0 * w * k;
                for d in 0..dim {
                    let diff = xi[d] - xj[d];
                    // ∂/∂xi of 2w·k(‖xi − xj‖²) = 4w·k'·(xi − xj)
                    g[i * dim + d] += 4.0 * w * dk * diff;
                    g[j * dim + d] -= 4.0 * w * dk * diff;
                }
            }
        }
    };
    within(xs, &mut gs, ns, 1.0 / (ns * ns) as f64);
    within(xt, &mut gt, nt, 1.0 / (nt * nt) as f64);
    let wc = -2.0 / (ns * nt) as f64;
    for i in 0..ns {
        let xi = &xs[i * dim..(i + 1) * dim];
        for j in 0..nt {
            let yj = &xt[j * dim..(j + 1) * dim];
            let (k, dk) = kernel(sq_dist(xi, yj));
            value += wc * k;
            for d in 0..dim {
                let diff = xi[d] - yj[d];
                gs[i * dim + d] += 2.0 * wc * dk * diff;
                gt[j * dim + d] -= 2.0 * wc * dk * diff;
            }
        }
    }
    (value, gs, gt)
}

fn flatten(rows: &[Vec<f64>], what: &'static str) -> Result<(Vec<f64>, usize)> {
    let dim = rows.first().map(Vec::len).ok_or(Error::Empty(what))?;
    let mut flat = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        if r.len() != dim {
            return Err(Error::dims(what, dim, r.len()));
        }
        flat.extend_from_slice(r);
    }
    Ok((flat, dim))
}

/// Empirical squared maximum mean discrepancy between two sample sets.
pub fn mmd(xs: &[Vec<f64>], xt: &[Vec<f64>], kernel: &KernelSpec) -> Result<f64> {
    let (fs, ds) = flatten(xs, "mmd source set")?;
    let (ft, dt) = flatten(xt, "mmd target set")?;
    if ds != dt {
        return Err(Error::dims("mmd", ds, dt));
    }
    let sigmas = kernel.bandwidths(&fs, &ft, ds)?;
    Ok(mmd_batch(&fs, &ft, ds, &sigmas).0)
}

// ---------------------------------------------------------------------------
// Cross-entropy terms

/// Mean negative log-probability of the true class, with the gradient with
/// respect to the probability matrix.
pub(crate) fn nll_batch(probs: &[f64], width: usize, labels: &[usize]) -> (ClampedLoss, Vec<f64>) {
    let m = labels.len() as f64;
    let mut grad = vec![0.0; probs.len()];
    let mut value = 0.0;
    let mut clamped = 0;
    for (i, &y) in labels.iter().enumerate() {
        let p = probs[i * width + y];
        if p > PROB_EPS {
            value -= p.ln();
            grad[i * width + y] = -1.0 / (m * p);
        } else if p.is_nan() {
            value = f64::NAN;
        } else {
            value -= PROB_EPS.ln();
            clamped += 1;
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} probabilities clamped at {PROB_EPS:e} in cross-entropy");
    }
    (ClampedLoss { value: value / m, clamped }, grad)
}

fn check_probs(pred: &[Vec<f64>], labels: usize, width: Option<usize>, sum_tol: Option<f64>) -> Result<(Vec<f64>, usize)> {
    if pred.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if pred.len() != labels {
        return Err(Error::dims("cross-entropy labels", pred.len(), labels));
    }
    let (flat, w) = flatten(pred, "predictions")?;
    if let Some(expected) = width {
        if w != expected {
            return Err(Error::dims("cross-entropy width", expected, w));
        }
    }
    for (i, row) in pred.iter().enumerate() {
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument(format!("row {i} has a probability outside [0, 1]")));
        }
        if let Some(tol) = sum_tol {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::InvalidArgument(format!("row {i} sums to {s}")));
            }
        }
    }
    Ok((flat, w))
}

/// Domain cross-entropy over `(p_source, p_target)` pairs.
pub fn discriminative_loss(pred: &[[f64; 2]], z_true: &[Domain]) -> Result<ClampedLoss> {
    let rows: Vec<Vec<f64>> = pred.iter().map(|p| p.to_vec()).collect();
    let (flat, w) = check_probs(&rows, z_true.len(), Some(2), None)?;
    let labels: Vec<usize> = z_true.iter().map(|z| z.index()).collect();
    Ok(nll_batch(&flat, w, &labels).0)
}

/// Fault-class cross-entropy over probability vectors.
pub fn classification_loss(pred: &[Vec<f64>], y_true: &[usize]) -> Result<ClampedLoss> {
    let (flat, w) = check_probs(pred, y_true.len(), None, Some(1e-6))?;
    if let Some(&y) = y_true.iter().find(|&&y| y >= w) {
        return Err(Error::InvalidArgument(format!("label {y} outside [0, {w})")));
    }
    Ok(nll_batch(&flat, w, y_true).0)
}

// ---------------------------------------------------------------------------
// Graph adapters

pub(crate) fn kl_node(g: &mut Graph, q: (NodeId, NodeId), p: (NodeId, NodeId)) -> Result<NodeId> {
    let rows = g.shape(q.0)[0];
    for n in [q.1, p.0, p.1] {
        if g.shape(n) != g.shape(q.0) {
            return Err(Error::dims("kl", format!("{:?}", g.shape(q.0)), format!("{:?}", g.shape(n))));
        }
    }
    let (value, grads) = kl_batch(
        g.value(q.0).data(),
        g.value(q.1).data(),
        g.value(p.0).data(),
        g.value(p.1).data(),
        rows,
    );
    Ok(g.scalar_fn(&[q.0, q.1, p.0, p.1], value, grads.into()))
}

pub(crate) fn recon_node(g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId> {
    if g.value(pred).numel() != g.value(target).numel() {
        return Err(Error::dims("reconstruction", g.value(target).numel(), g.value(pred).numel()));
    }
    let rows = g.shape(pred)[0];
    let (value, grad) = half_mse_batch(g.value(pred).data(), g.value(target).data(), rows);
    let zeros = vec![0.0; grad.len()];
    Ok(g.scalar_fn(&[pred, target], value, vec![grad, zeros]))
}

pub(crate) fn nll_node(g: &mut Graph, probs: NodeId, labels: &[usize]) -> Result<(NodeId, usize)> {
    let s = g.shape(probs);
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::dims("nll", labels.len(), format!("{s:?}")));
    }
    let width = s[1];
    let (loss, grad) = nll_batch(g.value(probs).data(), width, labels);
    Ok((g.scalar_fn(&[probs], loss.value, vec![grad]), loss.clamped))
}

pub(crate) fn mmd_node(g: &mut Graph, xs: NodeId, xt: NodeId, kernel: &KernelSpec) -> Result<NodeId> {
    let dim = g.shape(xs)[1];
    if g.shape(xt)[1] != dim {
        return Err(Error::dims("mmd", dim, g.shape(xt)[1]));
    }
    let sigmas = kernel.bandwidths(g.value(xs).data(), g.value(xt).data(), dim)?;
    let (value, gs, gt) = mmd_batch(g.value(xs).data(), g.value(xt).data(), dim, &sigmas);
    Ok(g.scalar_fn(&[xs, xt], value, vec![gs, gt]))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn latent(mean: &[f64], log_var: &[f64]) -> GaussianLatent {
        GaussianLatent::new(mean.to_vec(), log_var.to_vec()).unwrap()
    }

    /// ∫ q·ln(q/p) by composite Simpson over ±12 posterior std.
    fn kl_by_quadrature(mq: f64, vq: f64, mp: f64, vp: f64) -> f64 {
        let log_pdf = |x: f64, m: f64, v: f64| -(x - m).powi(2) / (2.0 * v) - 0.5 * (2.0 * std::f64::consts::PI * v).ln();
        let lo = mq - 12.0 * vq.sqrt();
        let hi = mq + 12.0 * vq.sqrt();
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        let f = |x: f64| {
            let lq = log_pdf(x, mq, vq);
            lq.exp() * (lq - log_pdf(x, mp, vp))
        };
        let mut s = f(lo) + f(hi);
        for i in 1..n {
            s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn kl_identities_and_oracle_values() {
        let q = latent(&[0.3, -1.0], &[0.2, -0.5]);
        assert_eq!(kl_diag_gaussians(&q, &q).unwrap(), 0.0);
        let shifted = kl_diag_gaussians(&latent(&[1.0], &[0.0]), &latent(&[0.0], &[0.0])).unwrap();
        assert!((shifted - kl_by_quadrature(1.0, 1.0, 0.0, 1.0)).abs() < 1e-9);
        assert!((shifted - 0.5).abs() < 1e-12);
        let wide = kl_diag_gaussians(&latent(&[0.0], &[4f64.ln()]), &latent(&[0.0], &[0.0])).unwrap();
        assert!((wide - kl_by_quadrature(0.0, 4.0, 0.0, 1.0)).abs() < 1e-9);
        assert!((wide - 0.806_853).abs() < 1e-6);
        assert!(kl_diag_gaussians(&latent(&[0.0], &[0.0]), &latent(&[0.0, 1.0], &[0.0, 0.0])).is_err());
    }

    #[test]
    fn reconstruction_examples() {
        let b: Vec<f64> = (0..16).map(|i| (i as f64 * 0.2).sin()).collect();
        assert_eq!(reconstruction_loss(&b, &b).unwrap(), 0.0);
        let shifted: Vec<f64> = b.iter().map(|v| v + 2.0).collect();
        assert!((reconstruction_loss(&b, &shifted).unwrap() - 2.0).abs() < 1e-12);
        let other: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut naive = 0.0;
        for i in 0..16 {
            naive += (b[i] - other[i]) * (b[i] - other[i]);
        }
        naive = 0.5 * naive / 16.0;
        assert!((reconstruction_loss(&b, &other).unwrap() - naive).abs() < 1e-12);
        assert!(reconstruction_loss(&b, &other[..3]).is_err());
    }

    #[test]
    fn mmd_examples() {
        let x = vec![vec![0.1, 0.2], vec![-0.4, 1.0], vec![2.0, -1.0]];
        assert!(mmd(&x, &x, &KernelSpec::default()).unwrap().abs() < 1e-12);
        let sigma = 0.7;
        // ‖x − y‖² = 2σ²
        let a = vec![vec![0.0, 0.0]];
        let b = vec![vec![sigma * 2f64.sqrt(), 0.0]];
        let v = mmd(&a, &b, &KernelSpec::Fixed(vec![sigma])).unwrap();
        assert!((v - 2.0 * (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        assert!(mmd(&a, &[vec![1.0]], &KernelSpec::default()).is_err());
        assert!(mmd(&[], &a, &KernelSpec::default()).is_err());
        assert!(mmd(&a, &b, &KernelSpec::Fixed(vec![])).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let perfect = discriminative_loss(&[[1.0, 0.0], [0.0, 1.0]], &[Domain::Source, Domain::Target]).unwrap();
        assert_eq!(perfect.value, 0.0);
        let half = discriminative_loss(&[[0.5, 0.5]; 3], &[Domain::Source, Domain::Target, Domain::Source]).unwrap();
        assert!((half.value - std::f64::consts::LN_2).abs() < 1e-12);
        let pred = [[0.9, 0.1], [0.3, 0.7], [0.6, 0.4], [0.2, 0.8]];
        let z = [Domain::Source, Domain::Target, Domain::Target, Domain::Source];
        let expected = -(0.9f64.ln() + 0.7f64.ln() + 0.4f64.ln() + 0.2f64.ln()) / 4.0;
        assert!((discriminative_loss(&pred, &z).unwrap().value - expected).abs() < 1e-12);
        let clamped = discriminative_loss(&[[0.0, 1.0]], &[Domain::Source]).unwrap();
        assert_eq!(clamped.clamped, 1);
        assert!((clamped.value + PROB_EPS.ln()).abs() < 1e-9);

        let onehot = classification_loss(&[vec![0.0, 1.0, 0.0]], &[1]).unwrap();
        assert_eq!(onehot.value, 0.0);
        let uniform = classification_loss(&[vec![0.25; 4], vec![0.25; 4]], &[0, 3]).unwrap();
        assert!((uniform.value - 4f64.ln()).abs() < 1e-12);
        let p = vec![
            vec![0.1, 0.2, 0.3, 0.4],
            vec![0.7, 0.1, 0.1, 0.1],
            vec![0.25, 0.25, 0.45, 0.05],
        ];
        let y = [3, 0, 2];
        let expected = -(0.4f64.ln() + 0.7f64.ln() + 0.45f64.ln()) / 3.0;
        assert!((classification_loss(&p, &y).unwrap().value - expected).abs() < 1e-12);
        assert!(classification_loss(&p, &[4, 0, 0]).is_err());
        assert!(classification_loss(&[vec![0.5, 0.6]], &[0]).is_err());
    }

    #[test]
    fn total_loss_weighting() {
        let w = LossWeights::default();
        let b = total_loss(0.5, 0.5, 1.0, 1.0, 1.0, w).unwrap();
        assert!((b.total - 2.0).abs() < 1e-15);
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        };
        assert_eq!(total_loss(0.3, 0.4, 9.0, 9.0, 9.0, zero).unwrap().total, 0.7);
        let base = total_loss(0.1, 0.2, 0.7, 0.3, 0.4, w).unwrap();
        let doubled = total_loss(0.1, 0.2, 1.4, 0.3, 0.4, w).unwrap();
        assert!((doubled.total - base.total - w.alpha * 0.7).abs() < 1e-15);
        assert!(total_loss(0.0, 0.0, 0.0, 0.0, 0.0, LossWeights { alpha: -1.0, ..w }).is_err());
    }

    #[test]
    fn batch_kernel_gradients_match_finite_differences() {
        let xs: Vec<f64> = (0..9).map(|i| (i as f64 * 0.61).sin()).collect();
        let xt: Vec<f64> = (0..6).map(|i| (i as f64 * 0.37).cos() + 0.3).collect();
        let sig = [0.5, 1.3];
        let (_, gs, gt) = mmd_batch(&xs, &xt, 3, &sig);
        let h = 1e-6;
        for k in 0..xs.len() {
            let mut p = xs.clone();
            p[k] += h;
            let mut m = xs.clone();
            m[k] -= h;
            let fd = (mmd_batch(&p, &xt, 3, &sig).0 - mmd_batch(&m, &xt, 3, &sig).0) / (2.0 * h);
            assert!((fd - gs[k]).abs() < 1e-7);
        }
        for k in 0..xt.len() {
            let mut p = xt.clone();
            p[k] += h;
            let mut m = xt.clone();
            m[k] -= h;
            let fd = (mmd_batch(&xs, &p, 3, &sig).0 - mmd_batch(&xs, &m, 3, &sig).0) / (2.0 * h);
            assert!((fd - gt[k]).abs() < 1e-7);
        }
        let a = [0.2, -0.3, 0.9, 0.1];
        let b = [0.1, 0.4, -0.2, 0.3];
        let c = [-0.5, 0.2, 0.3, 0.0];
        let d = [0.3, -0.1, 0.5, -0.4];
        let (_, g) = kl_batch(&a, &b, &c, &d, 2);
        for (which, grad) in g.iter().enumerate() {
            for k in 0..4 {
                let eval = |delta: f64| {
                    let mut v = [a, b, c, d];
                    v[which][k] += delta;
                    kl_batch(&v[0], &v[1], &v[2], &v[3], 2).0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((fd - grad[k]).abs() < 1e-7);
            }
        }
    }

    proptest! {
        #[test]
        fn mmd_symmetry_permutation_translation(
            raw_s in proptest::collection::vec(-2.0f64..2.0, 3..24),
            raw_t in proptest::collection::vec(-2.0f64..2.0, 3..24),
            shift in proptest::collection::vec(-5.0f64..5.0, 3),
        ) {
            let rows = |raw: &[f64]| raw.chunks_exact(3).map(<[f64]>::to_vec).collect::<Vec<_>>();
            let xs = rows(&raw_s);
            let xt = rows(&raw_t);
            let k = KernelSpec::Fixed(vec![0.5, 1.0, 2.0]);
            let forward = mmd(&xs, &xt, &k).unwrap();
            prop_assert!(forward >= -1e-12);
            prop_assert!((forward - mmd(&xt, &xs, &k).unwrap()).abs() <= 1e-12 * forward.abs().max(1.0));
            let mut rev = xs.clone();
            rev.reverse();
            prop_assert!((mmd(&rev, &xt, &k).unwrap() - forward).abs() < 1e-12);
            let moved = |s: &[Vec<f64>]| s.iter().map(|r| r.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect::<Vec<Vec<f64>>>();
            prop_assert!((mmd(&moved(&xs), &moved(&xt), &k).unwrap() - forward).abs() < 1e-10);
        }

        #[test]
        fn kl_matches_quadrature(mq in -3.0f64..3.0, mp in -3.0f64..3.0, lq in -2.0f64..2.0, lp in -2.0f64..2.0) {
            let analytic = kl_diag_gaussians(&latent(&[mq], &[lq]), &latent(&[mp], &[lp])).unwrap();
            let numeric = kl_by_quadrature(mq, lq.exp(), mp, lp.exp());
            prop_assert!((analytic - numeric).abs() <= 1e-6);
            prop_assert!(analytic >= 0.0);
        }
    }
}
