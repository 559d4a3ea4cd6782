use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LabeledSignal, PreparedSequence, WindowSequence};
use crate::error::{Error, Result};

/// Anything carrying an optional fault class.
pub trait Labeled {
    fn class(&self) -> Option<usize>;
}

impl Labeled for LabeledSignal {
    fn class(&self) -> Option<usize> {
        self.label
    }
}

impl Labeled for WindowSequence {
    fn class(&self) -> Option<usize> {
        self.label
    }
}

impl Labeled for PreparedSequence {
    fn class(&self) -> Option<usize> {
        self.sequence.label
    }
}

/// Stratified split: each class contributes `round(ratio · n_c)` items
/// (kept within `[1, n_c − 1]`) to the training side. Both halves keep the
/// input order.
pub fn split_train_test<T: Labeled + Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        let class = item
            .class()
            .ok_or_else(|| Error::InvalidArgument(format!("item {i} has no label; cannot stratify")))?;
        by_class.entry(class).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; items.len()];
    for (class, mut idx) in by_class {
        if idx.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {} sample(s); at least 2 are needed to split",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_train = ((ratio * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        for &i in &idx[..n_train] {
            in_train[i] = true;
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (item, &tr) in items.iter().zip(&in_train) {
        if tr {
            train.push(item.clone());
        } else {
            test.push(item.clone());
        }
    }
    Ok((train, test))
}
