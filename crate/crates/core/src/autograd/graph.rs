//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a [`Node`] holding its forward value. Nodes are
//! created in topological order, so [`Graph::backward`] walks the tape in
//! reverse once. Only nodes that transitively depend on a parameter carry
//! gradients.

use std::collections::HashMap;

use super::tensor::{col2im, gemm, im2col, ConvGeom, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Index of a trainable tensor inside a parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Concat {
        parts: Vec<NodeId>,
        widths: Vec<usize>,
    },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Exp(NodeId),
    Reshape(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    GlobalAvgPool(NodeId),
    Softmax(NodeId),
    RowNormalize(NodeId),
    Reparameterize {
        mean: NodeId,
        log_var: NodeId,
        noise: Vec<f64>,
    },
    /// Scalar-valued function whose local gradients were computed in the
    /// forward pass.
    ScalarFn {
        inputs: Vec<NodeId>,
        local_grads: Vec<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Batch statistics from a training-mode batch-norm, for running averages.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
}

/// Gradients of a scalar with respect to every tracked node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&[f64]> {
        self.grads.get(node).and_then(|g| g.as_deref())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> NodeId {
        self.nodes.push(Node { value, op, tracked });
        self.nodes.len() - 1
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Leaf for a parameter. Repeated calls with the same id return the same
    /// node so gradients from every use accumulate in one place.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> NodeId {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        let node = self.push(value.clone(), Op::Param, true);
        self.params.insert(id, node);
        node
    }

    /// Parameter nodes registered on this tape.
    pub fn param_nodes(&self) -> impl Iterator<Item = (ParamId, NodeId)> + '_ {
        self.params.iter().map(|(&p, &n)| (p, n))
    }

    fn check_same_shape(&self, ctx: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims(
                ctx,
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        let data = self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Tensor::new(shape, data).expect("same shape"), op, tracked)
    }

    fn map(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(a);
        self.push(Tensor::new(shape, data).expect("same shape"), op, tracked)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.map(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        self.map(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(a).clone().reshaped(shape)?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Reshape(a), tracked))
    }

    /// `x·wᵀ + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dims(
                "linear",
                format!("[n, {}]", ws.get(1).copied().unwrap_or(0)),
                format!("{xs:?}"),
            ));
        }
        let (n, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0; n * out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != out {
                return Err(Error::dims("linear bias", out, bias.len()));
            }
            for row in y.chunks_mut(out) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(n, inp, out, self.value(x).data(), false, self.value(w).data(), true, &mut y, beta);
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        Ok(self.push(
            Tensor::new(vec![n, out], y).expect("shape"),
            Op::Linear { x, w, b },
            tracked,
        ))
    }

    /// Concatenates 2-D nodes along the feature axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let n = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != n {
                return Err(Error::dims("concat", format!("[{n}, _]"), format!("{s:?}")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            Tensor::new(vec![n, total], data).expect("shape"),
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
            tracked,
        ))
    }

    /// 2-D convolution, `x: [n, c, h, w]`, `w: [o, c, kh, kw]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != geom.kh || ws[3] != geom.kw {
            return Err(Error::dims("conv2d", format!("weight {ws:?}"), format!("input {xs:?}")));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let o = ws[0];
        let (ho, wo) = geom
            .out_size(h, wd)
            .ok_or_else(|| Error::dims("conv2d", "input at least kernel size", format!("{h}x{wd}")))?;
        let p = ho * wo;
        let ck = c * geom.kh * geom.kw;
        let mut out = vec![0.0; n * o * p];
        let mut cols = vec![0.0; ck * p];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for i in 0..n {
            im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, &geom, ho, wo, &mut cols);
            gemm(o, ck, p, wv, false, &cols, false, &mut out[i * o * p..(i + 1) * o * p], 0.0);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n, o, p);
        }
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        Ok(self.push(
            Tensor::new(vec![n, o, ho, wo], out).expect("shape"),
            Op::Conv2d { x, w, b, geom },
            tracked,
        ))
    }

    /// Transposed 2-D convolution, `x: [n, ci, h, w]`, `w: [ci, co, kh, kw]`.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] || ws[2] != geom.kh || ws[3] != geom.kw {
            return Err(Error::dims(
                "conv_transpose2d",
                format!("weight {ws:?}"),
                format!("input {xs:?}"),
            ));
        }
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let co = ws[1];
        let (ho, wo) = geom
            .transposed_out_size(h, wd)
            .ok_or_else(|| Error::dims("conv_transpose2d", "positive output", format!("{h}x{wd}")))?;
        let hw = h * wd;
        let ck = co * geom.kh * geom.kw;
        let mut out = vec![0.0; n * co * ho * wo];
        let mut cols = vec![0.0; ck * hw];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for i in 0..n {
            gemm(ck, ci, hw, wv, true, &xv[i * ci * hw..(i + 1) * ci * hw], false, &mut cols, 0.0);
            col2im(&cols, co, ho, wo, &geom, h, wd, &mut out[i * co * ho * wo..(i + 1) * co * ho * wo]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n, co, ho * wo);
        }
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        Ok(self.push(
            Tensor::new(vec![n, co, ho, wo], out).expect("shape"),
            Op::ConvTranspose2d { x, w, b, geom },
            tracked,
        ))
    }

    /// Per-channel batch normalization over axis 1 of `x: [n, c, ...]`.
    ///
    /// In training mode the batch statistics are used and returned; in
    /// evaluation mode `running` supplies `(mean, var)`.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::dims("batch_norm", "[n, c, ...]", format!("{xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::dims("batch_norm affine", c, self.value(gamma).numel()));
        }
        let xv = self.value(x).data();
        let count = (n * s) as f64;
        let (mean, var, stats) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), None),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * s;
                        mean[ch] += xv[base..base + s].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * s;
                        var[ch] += xv[base..base + s].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                let unbiased = var
                    .iter()
                    .map(|v| if count > 1.0 { v / (count - 1.0) } else { 0.0 })
                    .collect();
                var.iter_mut().for_each(|v| *v /= count);
                let stats = BatchStats {
                    mean: mean.clone(),
                    unbiased_var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut y = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for k in base..base + s {
                    xhat[k] = (xv[k] - mean[ch]) * inv_std[ch];
                    y[k] = gv[ch] * xhat[k] + bv[ch];
                }
            }
        }
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        let train = stats.is_some();
        let id = self.push(
            Tensor::new(xs, y).expect("shape"),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            tracked,
        );
        Ok((id, stats))
    }

    /// Mean over all spatial positions: `[n, c, ...] → [n, c]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(Error::dims("global_avg_pool", "[n, c, ...]", format!("{xs:?}")));
        }
        let s: usize = xs[2..].iter().product();
        let data = self
            .value(x)
            .data()
            .chunks(s)
            .map(|plane| plane.iter().sum::<f64>() / s as f64)
            .collect();
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor::new(vec![xs[0], xs[1]], data).expect("shape"),
            Op::GlobalAvgPool(x),
            tracked,
        ))
    }

    /// Row-wise softmax of a 2-D node.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().expect("non-empty shape");
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let tracked = self.tracked(x);
        self.push(Tensor::new(shape, data).expect("shape"), Op::Softmax(x), tracked)
    }

    /// Divides each row of a positive 2-D node by its sum.
    pub fn row_normalize(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().expect("non-empty shape");
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(width) {
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let tracked = self.tracked(x);
        self.push(Tensor::new(shape, data).expect("shape"), Op::RowNormalize(x), tracked)
    }

    /// `mean + exp(0.5·log_var) ⊙ noise`.
    pub fn reparameterize(&mut self, mean: NodeId, log_var: NodeId, noise: Vec<f64>) -> Result<NodeId> {
        self.check_same_shape("reparameterize", mean, log_var)?;
        if noise.len() != self.value(mean).numel() {
            return Err(Error::dims("reparameterize noise", self.value(mean).numel(), noise.len()));
        }
        let data = self
            .value(mean)
            .data()
            .iter()
            .zip(self.value(log_var).data())
            .zip(&noise)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        let shape = self.shape(mean).to_vec();
        let tracked = self.tracked(mean) || self.tracked(log_var);
        Ok(self.push(
            Tensor::new(shape, data).expect("shape"),
            Op::Reparameterize { mean, log_var, noise },
            tracked,
        ))
    }

    /// Registers a scalar computed outside the graph together with its
    /// gradient with respect to each input.
    pub fn scalar_fn(&mut self, inputs: &[NodeId], value: f64, local_grads: Vec<Vec<f64>>) -> NodeId {
        debug_assert_eq!(inputs.len(), local_grads.len());
        let tracked = inputs.iter().any(|&i| self.tracked(i));
        self.push(
            Tensor::scalar(value),
            Op::ScalarFn {
                inputs: inputs.to_vec(),
                local_grads,
            },
            tracked,
        )
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let value = terms.iter().map(|&(n, w)| w * self.value(n).item()).sum();
        let inputs: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let grads = terms.iter().map(|t| vec![t.1]).collect();
        self.scalar_fn(&inputs, value, grads)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0; self.value(root).numel()]);
        for id in (0..=root).rev() {
            if !self.nodes[id].tracked {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.propagate(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Gradients { grads }
    }

    fn propagate(&self, id: NodeId, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        let send = |grads: &mut [Option<Vec<f64>>], target: NodeId, f: &dyn Fn(&mut [f64])| {
            if self.nodes[target].tracked {
                let len = self.nodes[target].value.numel();
                f(accumulate(&mut grads[target], len));
            }
        };
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                send(grads, *a, &|g| add_into(g, dy));
                send(grads, *b, &|g| add_into(g, dy));
            }
            Op::Sub(a, b) => {
                send(grads, *a, &|g| add_into(g, dy));
                send(grads, *b, &|g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                send(grads, *a, &|g| {
                    for ((g, d), bb) in g.iter_mut().zip(dy).zip(bv) {
                        *g += d * bb;
                    }
                });
                send(grads, *b, &|g| {
                    for ((g, d), aa) in g.iter_mut().zip(dy).zip(av) {
                        *g += d * aa;
                    }
                });
            }
            Op::Scale(a, k) => send(grads, *a, &|g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += k * d)),
            Op::AddScalar(a) | Op::Reshape(a) => send(grads, *a, &|g| add_into(g, dy)),
            Op::Sigmoid(a) => send(grads, *a, &|g| {
                for ((g, d), s) in g.iter_mut().zip(dy).zip(y) {
                    *g += d * s * (1.0 - s);
                }
            }),
            Op::Tanh(a) => send(grads, *a, &|g| {
                for ((g, d), t) in g.iter_mut().zip(dy).zip(y) {
                    *g += d * (1.0 - t * t);
                }
            }),
            Op::Relu(a) => send(grads, *a, &|g| {
                for ((g, d), o) in g.iter_mut().zip(dy).zip(y) {
                    if *o > 0.0 {
                        *g += d;
                    }
                }
            }),
            Op::LeakyRelu(a, slope) => {
                let xv = self.value(*a).data();
                send(grads, *a, &|g| {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(xv) {
                        *g += if *x > 0.0 { *d } else { slope * d };
                    }
                })
            }
            Op::Exp(a) => send(grads, *a, &|g| {
                for ((g, d), e) in g.iter_mut().zip(dy).zip(y) {
                    *g += d * e;
                }
            }),
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, inp) = (xs[0], xs[1]);
                let out = self.shape(*w)[0];
                let wv = self.value(*w).data();
                let xv = self.value(*x).data();
                send(grads, *x, &|g| gemm(n, out, inp, dy, false, wv, false, g, 1.0));
                send(grads, *w, &|g| gemm(out, n, inp, dy, true, xv, false, g, 1.0));
                if let Some(b) = b {
                    send(grads, *b, &|g| {
                        for row in dy.chunks(out) {
                            add_into(g, row);
                        }
                    });
                }
            }
            Op::Concat { parts, widths } => {
                let total: usize = widths.iter().sum();
                let n = dy.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    send(grads, p, &|g| {
                        for i in 0..n {
                            let src = &dy[i * total + offset..i * total + offset + w];
                            add_into(&mut g[i * w..(i + 1) * w], src);
                        }
                    });
                    offset += w;
                }
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(*x, *w, *b, geom, id, dy, grads),
            Op::ConvTranspose2d { x, w, b, geom } => {
                self.conv_transpose2d_backward(*x, *w, *b, geom, id, dy, grads)
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let s: usize = xs[2..].iter().product();
                let gv = self.value(*gamma).data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * s;
                        for k in base..base + s {
                            sum_dy[ch] += dy[k];
                            sum_dy_xhat[ch] += dy[k] * xhat[k];
                        }
                    }
                }
                send(grads, *gamma, &|g| add_into(g, &sum_dy_xhat));
                send(grads, *beta, &|g| add_into(g, &sum_dy));
                let m = (n * s) as f64;
                send(grads, *x, &|g| {
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * s;
                            let scale = gv[ch] * inv_std[ch];
                            for k in base..base + s {
                                g[k] += if *train {
                                    scale * (dy[k] - sum_dy[ch] / m - xhat[k] * sum_dy_xhat[ch] / m)
                                } else {
                                    scale * dy[k]
                                };
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let s: usize = xs[2..].iter().product();
                send(grads, *x, &|g| {
                    for (plane, d) in g.chunks_mut(s).zip(dy) {
                        plane.iter_mut().for_each(|v| *v += d / s as f64);
                    }
                });
            }
            Op::Softmax(x) => {
                let width = *self.shape(*x).last().expect("shape");
                send(grads, *x, &|g| {
                    for ((gr, dr), yr) in g.chunks_mut(width).zip(dy.chunks(width)).zip(y.chunks(width)) {
                        let dot: f64 = dr.iter().zip(yr).map(|(d, p)| d * p).sum();
                        for ((g, d), p) in gr.iter_mut().zip(dr).zip(yr) {
                            *g += p * (d - dot);
                        }
                    }
                });
            }
            Op::RowNormalize(x) => {
                let width = *self.shape(*x).last().expect("shape");
                let xv = self.value(*x).data();
                send(grads, *x, &|g| {
                    for (((gr, dr), yr), xr) in g
                        .chunks_mut(width)
                        .zip(dy.chunks(width))
                        .zip(y.chunks(width))
                        .zip(xv.chunks(width))
                    {
                        let sum: f64 = xr.iter().sum();
                        let dot: f64 = dr.iter().zip(yr).map(|(d, p)| d * p).sum();
                        for (g, d) in gr.iter_mut().zip(dr) {
                            *g += (d - dot) / sum;
                        }
                    }
                });
            }
            Op::Reparameterize { mean, log_var, noise } => {
                let lv = self.value(*log_var).data();
                send(grads, *mean, &|g| add_into(g, dy));
                send(grads, *log_var, &|g| {
                    for (((g, d), l), e) in g.iter_mut().zip(dy).zip(lv).zip(noise) {
                        *g += d * 0.5 * (0.5 * l).exp() * e;
                    }
                });
            }
            Op::ScalarFn { inputs, local_grads } => {
                let d = dy[0];
                for (&inp, local) in inputs.iter().zip(local_grads) {
                    send(grads, inp, &|g| {
                        for (g, l) in g.iter_mut().zip(local) {
                            *g += d * l;
                        }
                    });
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: &ConvGeom,
        id: NodeId,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xs = self.shape(x);
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let ys = self.shape(id);
        let (o, ho, wo) = (ys[1], ys[2], ys[3]);
        let p = ho * wo;
        let ck = c * geom.kh * geom.kw;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        if let Some(b) = b.filter(|&b| self.tracked(b)) {
            let g = accumulate(&mut grads[b], o);
            sum_channels(g, dy, n, o, p);
        }
        let need_w = self.tracked(w);
        let need_x = self.tracked(x);
        if !need_w && !need_x {
            return;
        }
        let mut cols = vec![0.0; ck * p];
        let mut dw = vec![0.0; o * ck];
        let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
        for i in 0..n {
            let dyi = &dy[i * o * p..(i + 1) * o * p];
            if need_w {
                im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, geom, ho, wo, &mut cols);
                gemm(o, p, ck, dyi, false, &cols, true, &mut dw, 1.0);
            }
            if need_x {
                gemm(ck, o, p, wv, true, dyi, false, &mut cols, 0.0);
                col2im(&cols, c, h, wd, geom, ho, wo, &mut dx[i * c * h * wd..(i + 1) * c * h * wd]);
            }
        }
        if need_w {
            add_into(accumulate(&mut grads[w], dw.len()), &dw);
        }
        if need_x {
            add_into(accumulate(&mut grads[x], dx.len()), &dx);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_transpose2d_backward(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: &ConvGeom,
        id: NodeId,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xs = self.shape(x);
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let ys = self.shape(id);
        let (co, ho, wo) = (ys[1], ys[2], ys[3]);
        let hw = h * wd;
        let ck = co * geom.kh * geom.kw;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        if let Some(b) = b.filter(|&b| self.tracked(b)) {
            let g = accumulate(&mut grads[b], co);
            sum_channels(g, dy, n, co, ho * wo);
        }
        let need_w = self.tracked(w);
        let need_x = self.tracked(x);
        if !need_w && !need_x {
            return;
        }
        let mut cols = vec![0.0; ck * hw];
        let mut dw = vec![0.0; ci * ck];
        let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
        for i in 0..n {
            im2col(&dy[i * co * ho * wo..(i + 1) * co * ho * wo], co, ho, wo, geom, h, wd, &mut cols);
            if need_x {
                gemm(ci, ck, hw, wv, false, &cols, false, &mut dx[i * ci * hw..(i + 1) * ci * hw], 0.0);
            }
            if need_w {
                gemm(ci, hw, ck, &xv[i * ci * hw..(i + 1) * ci * hw], false, &cols, true, &mut dw, 1.0);
            }
        }
        if need_w {
            add_into(accumulate(&mut grads[w], dw.len()), &dw);
        }
        if need_x {
            add_into(accumulate(&mut grads[x], dx.len()), &dx);
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], n: usize, c: usize, p: usize) {
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * p;
            out[base..base + p].iter_mut().for_each(|v| *v += bias[ch]);
        }
    }
}

fn sum_channels(g: &mut [f64], dy: &[f64], n: usize, c: usize, p: usize) {
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * p;
            g[ch] += dy[base..base + p].iter().sum::<f64>();
        }
    }
}
