//! Accuracy and confusion matrices, plus the experiment runners built on
//! them.

mod experiment;
mod plot;
mod report;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BatchInput, Network};
use crate::signal::PreparedSequence;

pub use experiment::{
    prepare_experiment_data, run_ablation, run_snr_sweep, run_transfer, AblationVariant, DataSpec, ExperimentConfig, ExperimentData,
    ExperimentReport, RunResult, SnrSeries, SnrSweepReport, VERSION,
};
pub use plot::{confusion_svg, line_chart_svg, loss_curve_svg, Series};
pub use report::{confusion_csv, snr_csv, spearman, write_json};

/// Counts of (true class, predicted class) pairs; rows are true classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; num_classes]; num_classes],
            class_names: (0..num_classes).map(|c| format!("class{c}")).collect(),
        }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::dims("confusion matrix", truth.len(), predicted.len()));
        }
        let mut m = Self::new(num_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::InvalidArgument(format!("class pair ({t}, {p}) outside [0, {num_classes})")));
            }
            m.counts[t][p] += 1;
        }
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Percentage of correct predictions.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => 100.0 * self.correct() as f64 / n as f64,
        }
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::dims("confusion merge", self.num_classes(), other.num_classes()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

const EVAL_BATCH: usize = 64;

/// Argmax class of every sequence, in evaluation mode.
pub fn predict(net: &Network, items: &[PreparedSequence]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(EVAL_BATCH) {
        let refs: Vec<&PreparedSequence> = chunk.iter().collect();
        let probs = net.predict(&BatchInput::new(&refs)?)?;
        for row in probs.data().chunks(net.config().num_classes) {
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            out.push(best);
        }
    }
    Ok(out)
}

/// Accuracy (%) and confusion matrix on a labeled test set.
pub fn evaluate(net: &Network, test: &[PreparedSequence]) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let truth = test
        .iter()
        .map(|s| {
            s.label()
                .ok_or_else(|| Error::InvalidArgument(format!("test sequence {} has no label", s.sequence.sample_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let predicted = predict(net, test)?;
    let confusion = ConfusionMatrix::from_predictions(&truth, &predicted, net.config().num_classes)?;
    Ok(Evaluation {
        accuracy: confusion.accuracy(),
        confusion,
    })
}
