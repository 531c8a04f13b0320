//! Labeled image datasets: IDX ingestion, synthetic source/downstream
//! tasks, and deterministic stratified subsampling.

mod idx;
mod synth;

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub use idx::{load_idx, save_idx, IMAGES_MAGIC, LABELS_MAGIC};
pub use synth::{synthesize_task, synthesize_task_with, SynthParams, TaskKind, NOISE_SIGMA, SIDE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    name: String,
    split: Split,
}

impl Dataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        name: impl Into<String>,
        split: Split,
    ) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::shape(
                "dataset",
                format!("images must be (N, C, H, W), got {:?}", images.shape()),
            ));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} images, {} labels", images.shape()[0], labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(invalid!("label {bad} outside {num_classes} classes"));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid!("pixel values must lie in [0, 1]"));
        }
        let ds = Self {
            images,
            labels,
            num_classes,
            name: name.into(),
            split,
        };
        if split == Split::Train {
            if let Some(k) = ds.class_counts().iter().position(|&c| c == 0) {
                return Err(invalid!("class {k} has no training samples"));
            }
        }
        Ok(ds)
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// (C, H, W)
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        if indices.is_empty() {
            return Err(invalid!("empty subset of {}", self.name));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(
            self.images.select_rows(indices),
            labels,
            self.num_classes,
            self.name.clone(),
            split,
        )
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Images and labels for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (
            self.images.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Contiguous batches in storage order.
    pub fn chunks(&self, batch_size: usize) -> impl Iterator<Item = (Tensor<f32>, Vec<usize>)> + '_ {
        let n = self.len();
        let bs = batch_size.max(1);
        (0..n.div_ceil(bs)).map(move |b| {
            let (s, e) = (b * bs, ((b + 1) * bs).min(n));
            (self.images.slice_rows(s, e), self.labels[s..e].to_vec())
        })
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionSpec {
    pub fraction: f64,
    pub seed: u64,
}

const ROUNDING_SLACK: f64 = 1e-9;

/// Per-class sample counts at `fraction`: floors of `fraction·count_k`, with
/// the `round(fraction·N) − Σ floors` leftover samples going to the largest
/// fractional parts (ties to the lower class index).
pub fn stratified_counts(class_counts: &[usize], fraction: f64) -> Vec<usize> {
    let exact: Vec<f64> = class_counts.iter().map(|&c| fraction * c as f64).collect();
    let mut counts: Vec<usize> = exact
        .iter()
        .map(|&e| (e + ROUNDING_SLACK).floor() as usize)
        .collect();
    let n: usize = class_counts.iter().sum();
    let total = ((fraction * n as f64) + 0.5 + ROUNDING_SLACK).floor() as usize;
    let mut leftover = total.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..class_counts.len()).collect();
    let frac = |k: usize| exact[k] - counts[k] as f64;
    order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
    for k in order {
        if leftover == 0 {
            break;
        }
        if counts[k] < class_counts[k] {
            counts[k] += 1;
            leftover -= 1;
        }
    }
    counts
}

/// Deterministic stratified subsample. Within each class the kept samples are
/// a prefix of a seeded shuffle; the output preserves original order.
pub fn stratified_subsample(ds: &Dataset, spec: FractionSpec) -> Result<Dataset> {
    if !(spec.fraction > 0.0 && spec.fraction <= 1.0) {
        return Err(invalid!("fraction {} outside (0, 1]", spec.fraction));
    }
    let chosen = stratified_pick(ds, spec.fraction, spec.seed, false)?;
    ds.subset(&chosen, ds.split)
}

fn stratified_pick(ds: &Dataset, fraction: f64, seed_value: u64, at_least_one: bool) -> Result<Vec<usize>> {
    let class_counts = ds.class_counts();
    let mut counts = stratified_counts(&class_counts, fraction);
    if at_least_one {
        for (c, &avail) in counts.iter_mut().zip(&class_counts) {
            if *c == 0 && avail > 1 {
                *c = 1;
            }
        }
    }
    if let Some(k) = counts
        .iter()
        .zip(&class_counts)
        .position(|(&c, &avail)| c == 0 && avail > 0)
    {
        return Err(invalid!(
            "fraction {fraction} leaves class {k} of {} without samples",
            ds.name
        ));
    }
    let mut chosen = Vec::with_capacity(counts.iter().sum());
    for (k, mut idx) in ds.indices_by_class().into_iter().enumerate() {
        let mut rng = seed::stream(seed_value, &format!("subsample/class{k}"));
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..counts[k]]);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Holds out a stratified validation split (at least one sample per class
/// where the class has two or more). Returns (train, val).
pub fn split_validation(ds: &Dataset, fraction: f64, seed_value: u64) -> Result<(Dataset, Dataset)> {
    let val_idx = stratified_pick(ds, fraction, seed_value, true)?;
    let mut is_val = vec![false; ds.len()];
    for &i in &val_idx {
        is_val[i] = true;
    }
    let train_idx: Vec<usize> = (0..ds.len()).filter(|&i| !is_val[i]).collect();
    Ok((ds.subset(&train_idx, Split::Train)?, ds.subset(&val_idx, Split::Val)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(counts: &[usize]) -> Dataset {
        let labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(k, &c)| std::iter::repeat_n(k, c))
            .collect();
        let n = labels.len();
        let images = Tensor::from_fn(&[n, 1, 1, 1], |i| i as f32 / n as f32);
        Dataset::new(images, labels, counts.len(), "toy", Split::Train).unwrap()
    }

    #[test]
    fn balanced_tenth() {
        let ds = toy(&[100; 10]);
        let sub = stratified_subsample(&ds, FractionSpec { fraction: 0.1, seed: 4 }).unwrap();
        assert_eq!(sub.len(), 100);
        assert_eq!(sub.class_counts(), vec![10; 10]);
    }

    #[test]
    fn full_fraction_is_identity() {
        let ds = toy(&[3, 5, 2]);
        let sub = stratified_subsample(&ds, FractionSpec { fraction: 1.0, seed: 4 }).unwrap();
        assert_eq!(sub, ds);
    }

    #[test]
    fn remainder_goes_to_lower_class_on_ties() {
        assert_eq!(stratified_counts(&[7, 5], 0.5), vec![4, 2]);
    }

    #[test]
    fn too_small_fraction_errors() {
        let ds = toy(&[10, 10]);
        assert!(stratified_subsample(&ds, FractionSpec { fraction: 0.01, seed: 0 }).is_err());
        assert!(stratified_subsample(&ds, FractionSpec { fraction: 0.0, seed: 0 }).is_err());
    }

    #[test]
    fn subsample_is_seeded() {
        let ds = toy(&[50, 50]);
        let a = stratified_subsample(&ds, FractionSpec { fraction: 0.3, seed: 1 }).unwrap();
        let b = stratified_subsample(&ds, FractionSpec { fraction: 0.3, seed: 1 }).unwrap();
        let c = stratified_subsample(&ds, FractionSpec { fraction: 0.3, seed: 2 }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn validation_split_partitions() {
        let ds = toy(&[40, 40, 20]);
        let (tr, va) = split_validation(&ds, 0.05, 9).unwrap();
        assert_eq!(tr.len() + va.len(), ds.len());
        assert_eq!(va.class_counts(), vec![2, 2, 1]);
        assert_eq!(va.split(), Split::Val);
    }

    #[test]
    fn dataset_invariants() {
        let images = Tensor::from_fn(&[2, 1, 1, 1], |_| 0.5);
        assert!(Dataset::new(images.clone(), vec![0], 2, "x", Split::Test).is_err());
        assert!(Dataset::new(images.clone(), vec![0, 2], 2, "x", Split::Test).is_err());
        assert!(Dataset::new(images.clone(), vec![0, 0], 2, "x", Split::Train).is_err());
        assert!(Dataset::new(images, vec![0, 0], 2, "x", Split::Test).is_ok());
        let bad = Tensor::from_fn(&[1, 1, 1, 1], |_| 1.5);
        assert!(Dataset::new(bad, vec![0], 1, "x", Split::Test).is_err());
    }

    proptest! {
        #[test]
        fn nested_subsample_tracks_direct(
            counts in proptest::collection::vec(20usize..200, 1..6),
            f1 in 0.2f64..1.0,
            f2 in 0.2f64..1.0,
        ) {
            let ds = toy(&counts);
            let once = stratified_subsample(&ds, FractionSpec { fraction: f1, seed: 3 }).unwrap();
            let twice = stratified_subsample(&once, FractionSpec { fraction: f2, seed: 5 }).unwrap();
            let direct = stratified_subsample(&ds, FractionSpec { fraction: f1 * f2, seed: 7 }).unwrap();
            for (a, b) in twice.class_counts().iter().zip(direct.class_counts()) {
                prop_assert!(a.abs_diff(b) <= 1, "{:?} vs {:?}", twice.class_counts(), direct.class_counts());
            }
            prop_assert_eq!(twice.num_classes(), ds.num_classes());
            prop_assert!(twice.class_counts().iter().all(|&c| c > 0));
        }
    }
}
