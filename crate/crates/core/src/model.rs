//! Small convolutional classifiers with an explicit registry of prunable
//! weights.
//!
//! The architecture is `depth` stages of 3x3 conv → ReLU → 2x2 max-pool, a
//! global average pool and a linear head. Stage `s` (1-based) has
//! `width · 2^(s-1)` channels. Parameters are named `conv{s}.weight`,
//! `conv{s}.bias`, `head.weight` and `head.bias`; the prunable set is every
//! conv weight. Biases and the task-specific head are never pruned.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::Classifier;
use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::mask::Mask;
use crate::seed;
use crate::tensor::Tensor;

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";
const KERNEL: usize = 3;

/// Which pre-training produced a set of weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Provenance {
    #[serde(rename = "STD")]
    Std,
    #[serde(rename = "FAT")]
    Fat,
    #[serde(rename = "AT")]
    At,
    #[serde(rename = "random")]
    Random,
}

impl Provenance {
    pub const ALL: [Provenance; 4] = [Self::Std, Self::Fat, Self::At, Self::Random];

    pub fn tag(self) -> u8 {
        match self {
            Self::Std => 0,
            Self::Fat => 1,
            Self::At => 2,
            Self::Random => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.tag() == tag)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Std => "STD",
            Self::Fat => "FAT",
            Self::At => "AT",
            Self::Random => "random",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown provenance {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// (channels, height, width)
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub width: usize,
    pub depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_shape: (1, 16, 16),
            num_classes: 8,
            width: 8,
            depth: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(invalid!("input shape {:?} has a zero extent", self.input_shape));
        }
        if self.width == 0 || self.depth == 0 {
            return Err(invalid!("width and depth must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(invalid!("need at least 2 classes, got {}", self.num_classes));
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.width << stage
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }
}

/// Position of the 2-D kernels inside a conv weight tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelLayout {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kernel_len: usize,
}

impl KernelLayout {
    pub fn range(&self, out_ch: usize, in_ch: usize) -> std::ops::Range<usize> {
        let start = (out_ch * self.in_ch + in_ch) * self.kernel_len;
        start..start + self.kernel_len
    }

    pub fn count(&self) -> usize {
        self.out_ch * self.in_ch
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamRegistry {
    shapes: BTreeMap<String, Vec<usize>>,
    prunable: Vec<String>,
    kernels: BTreeMap<String, KernelLayout>,
    stages: BTreeMap<String, usize>,
}

impl ParamRegistry {
    pub fn prunable(&self) -> &[String] {
        &self.prunable
    }

    pub fn is_prunable(&self, name: &str) -> bool {
        self.prunable.iter().any(|n| n == name)
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.shapes.get(name).map(Vec::as_slice)
    }

    pub fn numel(&self, name: &str) -> usize {
        self.shapes.get(name).map_or(0, |s| s.iter().product())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.shapes.keys().map(String::as_str)
    }

    /// Kernel map of each prunable conv tensor.
    pub fn kernel_map(&self) -> &BTreeMap<String, KernelLayout> {
        &self.kernels
    }

    /// 1-based stage index of a conv tensor.
    pub fn stage_of(&self, name: &str) -> Option<usize> {
        self.stages.get(name).copied()
    }

    pub fn total_prunable(&self) -> usize {
        self.prunable.iter().map(|n| self.numel(n)).sum()
    }
}

/// Named weights plus the frozen anchor they rewind to.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor<f32>>,
    anchor: BTreeMap<String, Tensor<f32>>,
    provenance: Provenance,
}

impl ParamSet {
    /// Fresh set whose anchor is a copy of `tensors`.
    pub fn new(tensors: BTreeMap<String, Tensor<f32>>) -> Self {
        Self {
            anchor: tensors.clone(),
            tensors,
            provenance: Provenance::Random,
        }
    }

    pub fn from_parts(
        tensors: BTreeMap<String, Tensor<f32>>,
        anchor: BTreeMap<String, Tensor<f32>>,
        provenance: Provenance,
    ) -> Result<Self> {
        let same = tensors.len() == anchor.len()
            && tensors
                .iter()
                .zip(&anchor)
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape());
        if !same {
            return Err(invalid!("anchor layout does not mirror live tensors"));
        }
        Ok(Self {
            tensors,
            anchor,
            provenance,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.tensors
    }

    pub fn anchor(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.anchor
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Freezes the current weights as θ_p and records the pre-training tag.
    /// Allowed once per set.
    pub fn freeze_anchor(&mut self, provenance: Provenance) -> Result<()> {
        if self.provenance != Provenance::Random {
            return Err(invalid!(
                "provenance already set to {}; anchor is frozen",
                self.provenance
            ));
        }
        self.anchor = self.tensors.clone();
        self.provenance = provenance;
        Ok(())
    }

    /// Same anchor and provenance, new live weights.
    pub fn with_tensors(&self, tensors: BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        Self::from_parts(tensors, self.anchor.clone(), self.provenance)
    }

    /// Live weights with masked positions materialized as zeros.
    pub fn masked(&self, mask: &Mask) -> Self {
        let mut out = self.clone();
        for (name, bits) in mask.tensors() {
            if let Some(t) = out.tensors.get_mut(name) {
                for (v, &k) in t.data_mut().iter_mut().zip(bits) {
                    if !k {
                        *v = 0.0;
                    }
                }
            }
        }
        out
    }
}

/// Counts of kept prunable weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Census {
    pub total: usize,
    pub remaining: usize,
    pub per_tensor: Vec<TensorCensus>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorCensus {
    pub name: String,
    pub total: usize,
    pub remaining: usize,
}

impl Census {
    pub fn sparsity(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        1.0 - self.remaining as f64 / self.total as f64
    }
}

pub fn param_census(registry: &ParamRegistry, mask: &Mask) -> Result<Census> {
    mask.check_covers(registry)?;
    let per_tensor: Vec<TensorCensus> = mask
        .tensors()
        .map(|(name, bits)| TensorCensus {
            name: name.to_owned(),
            total: bits.len(),
            remaining: bits.iter().filter(|&&k| k).count(),
        })
        .collect();
    Ok(Census {
        total: per_tensor.iter().map(|t| t.total).sum(),
        remaining: per_tensor.iter().map(|t| t.remaining).sum(),
        per_tensor,
    })
}

/// Graph handles produced by one forward pass.
pub struct ForwardTrace {
    pub logits: Var,
    /// Parameter leaves in name order.
    pub params: Vec<(String, Var)>,
    /// Conv outputs before the ReLU, one per stage.
    pub preacts: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    registry: ParamRegistry,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut shapes = BTreeMap::new();
        let mut prunable = Vec::new();
        let mut kernels = BTreeMap::new();
        let mut stages = BTreeMap::new();
        let mut in_ch = cfg.input_shape.0;
        for s in 0..cfg.depth {
            let out_ch = cfg.stage_channels(s);
            let w = format!("conv{}.weight", s + 1);
            shapes.insert(w.clone(), vec![out_ch, in_ch, KERNEL, KERNEL]);
            shapes.insert(format!("conv{}.bias", s + 1), vec![out_ch]);
            kernels.insert(
                w.clone(),
                KernelLayout {
                    out_ch,
                    in_ch,
                    kernel_len: KERNEL * KERNEL,
                },
            );
            stages.insert(w.clone(), s + 1);
            prunable.push(w);
            in_ch = out_ch;
        }
        shapes.insert(HEAD_WEIGHT.into(), vec![cfg.num_classes, in_ch]);
        shapes.insert(HEAD_BIAS.into(), vec![cfg.num_classes]);
        prunable.sort();
        Ok(Self {
            cfg,
            registry: ParamRegistry {
                shapes,
                prunable,
                kernels,
                stages,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn registry(&self) -> &ParamRegistry {
        &self.registry
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    /// Kaiming-uniform conv weights, a 1/√fan_in head and fan-in-scaled biases, one seeded
    /// substream per tensor.
    pub fn init(&self, seed: u64) -> ParamSet {
        let tensors = self
            .registry
            .shapes
            .iter()
            .map(|(name, shape)| (name.clone(), self.init_tensor(name, shape, seed)))
            .collect();
        ParamSet::new(tensors)
    }

    fn init_tensor(&self, name: &str, shape: &[usize], seed: u64) -> Tensor<f32> {
        let fan_in = self.fan_in(name);
        // The head feeds no ReLU, so it gets the plain 1/√fan_in bound.
        let bound = if name.ends_with(".weight") && name != HEAD_WEIGHT {
            (6.0 / fan_in as f64).sqrt()
        } else {
            1.0 / (fan_in as f64).sqrt()
        } as f32;
        let mut rng = seed::stream(seed, &format!("init/{name}"));
        Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
    }

    fn fan_in(&self, name: &str) -> usize {
        let layer = name.rsplit_once('.').map_or(name, |(l, _)| l);
        let w = self.registry.shapes[&format!("{layer}.weight")].as_slice();
        w[1..].iter().product()
    }

    /// New parameter set for this model that takes every non-head tensor from
    /// `source` and draws a fresh head. Provenance carries over and the anchor
    /// is the returned starting point.
    pub fn transfer_from(&self, source: &ParamSet, seed: u64) -> Result<ParamSet> {
        let mut tensors = BTreeMap::new();
        for (name, shape) in &self.registry.shapes {
            let t = if name == HEAD_WEIGHT || name == HEAD_BIAS {
                self.init_tensor(name, shape, seed)
            } else {
                let t = source
                    .get(name)
                    .ok_or_else(|| invalid!("source weights lack {name}"))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::shape(
                        "transfer",
                        format!("{name}: source {:?}, target {shape:?}", t.shape()),
                    ));
                }
                t.clone()
            };
            tensors.insert(name.clone(), t);
        }
        ParamSet::from_parts(tensors.clone(), tensors, source.provenance())
    }

    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        for (name, shape) in &self.registry.shapes {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::shape(
                        "params",
                        format!("{name} has shape {:?}, registry says {shape:?}", t.shape()),
                    ))
                }
                None => return Err(invalid!("params lack {name}")),
            }
        }
        if params.tensors().len() != self.registry.shapes.len() {
            return Err(invalid!("params contain tensors outside the registry"));
        }
        Ok(())
    }

    /// Records `f(x; m⊙θ)` on `g`. Parameter leaves get gradients only when
    /// `track_params` is set.
    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        params: &ParamSet,
        mask: Option<&Mask>,
        x: Var,
        track_params: bool,
    ) -> Result<ForwardTrace> {
        let (c, h, w) = self.cfg.input_shape;
        let xs = g.shape(x);
        if xs.len() != 4 || xs[1..] != [c, h, w] {
            return Err(Error::shape(
                "model input",
                format!("got {xs:?}, model expects (N, {c}, {h}, {w})"),
            ));
        }
        if let Some(m) = mask {
            m.check_covers(&self.registry)?;
        }
        let mut leaves = Vec::with_capacity(self.registry.shapes.len());
        let mut leaf = |g: &mut Graph<f32>, name: &str| -> Result<Var> {
            let t = params
                .get(name)
                .ok_or_else(|| invalid!("params lack {name}"))?;
            if Some(t.shape()) != self.registry.shape(name) {
                return Err(Error::shape(
                    "params",
                    format!("{name} has shape {:?}", t.shape()),
                ));
            }
            let v = g.param(name, t.clone(), track_params);
            leaves.push((name.to_owned(), v));
            match mask.and_then(|m| m.get(name)) {
                Some(bits) => g.select(v, bits),
                None => Ok(v),
            }
        };

        let mut h = x;
        let mut preacts = Vec::with_capacity(self.cfg.depth);
        for s in 1..=self.cfg.depth {
            let wv = leaf(g, &format!("conv{s}.weight"))?;
            let bv = leaf(g, &format!("conv{s}.bias"))?;
            let z = g.conv2d(h, wv, Some(bv), 1, KERNEL / 2)?;
            preacts.push(z);
            h = g.relu(z)?;
            let sh = g.shape(h);
            if sh[2] >= 2 && sh[3] >= 2 {
                h = g.max_pool2(h)?;
            }
        }
        let pooled = g.global_avg_pool(h)?;
        let hw = leaf(g, HEAD_WEIGHT)?;
        let hb = leaf(g, HEAD_BIAS)?;
        let logits = g.linear(pooled, hw, Some(hb))?;
        leaves.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(ForwardTrace {
            logits,
            params: leaves,
            preacts,
        })
    }

    pub fn logits(&self, params: &ParamSet, mask: Option<&Mask>, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let trace = self.forward(&mut g, params, mask, x, false)?;
        Ok(g.value(trace.logits).clone())
    }

    /// Mean cross-entropy and its gradient for every parameter.
    pub fn loss_and_param_grads(
        &self,
        params: &ParamSet,
        mask: Option<&Mask>,
        batch: &Tensor<f32>,
        labels: &[usize],
    ) -> Result<(f32, BTreeMap<String, Tensor<f32>>)> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let trace = self.forward(&mut g, params, mask, x, true)?;
        let loss = g.softmax_cross_entropy(trace.logits, labels)?;
        let value = g.value(loss).item()?;
        let grads = g.backward(loss)?;
        Ok((value, grads.into_named()))
    }

    pub fn subnetwork<'a>(&'a self, params: &'a ParamSet, mask: Option<&'a Mask>) -> Subnetwork<'a> {
        Subnetwork {
            model: self,
            params,
            mask,
        }
    }
}

/// `f(x; m⊙θ)` as a [`Classifier`].
#[derive(Clone, Copy)]
pub struct Subnetwork<'a> {
    pub model: &'a Model,
    pub params: &'a ParamSet,
    pub mask: Option<&'a Mask>,
}

impl Classifier<f32> for Subnetwork<'_> {
    fn logits(&self, inputs: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.model.logits(self.params, self.mask, inputs)
    }

    fn loss_and_input_grad(&self, inputs: &Tensor<f32>, labels: &[usize]) -> Result<(f32, Tensor<f32>)> {
        let mut g = Graph::new();
        let x = g.input(inputs.clone(), true);
        let trace = self.model.forward(&mut g, self.params, self.mask, x, false)?;
        let loss = g.softmax_cross_entropy(trace.logits, labels)?;
        let value = g.value(loss).item()?;
        let mut grads = g.backward(loss)?;
        let gx = grads.take(x).expect("input leaf tracked");
        Ok((value, gx))
    }
}
