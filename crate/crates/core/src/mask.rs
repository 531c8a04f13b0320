use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamRegistry, Provenance};

/// How a mask was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PruneMethod {
    /// Iterative magnitude pruning with standard retraining.
    #[serde(rename = "IMP-ST")]
    ImpSt,
    /// Iterative magnitude pruning with adversarial retraining.
    #[serde(rename = "IMP-AT")]
    ImpAt,
    /// One-shot magnitude pruning of the anchor weights.
    #[serde(rename = "OMP")]
    Omp,
    /// Layerwise-uniform random pruning.
    #[serde(rename = "RP")]
    Rp,
}

impl PruneMethod {
    pub const ALL: [PruneMethod; 4] = [Self::ImpSt, Self::ImpAt, Self::Omp, Self::Rp];

    pub fn tag(self) -> u8 {
        match self {
            Self::ImpSt => 0,
            Self::ImpAt => 1,
            Self::Omp => 2,
            Self::Rp => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.tag() == tag)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ImpSt => "IMP-ST",
            Self::ImpAt => "IMP-AT",
            Self::Omp => "OMP",
            Self::Rp => "RP",
        }
    }

    pub fn is_iterative(self) -> bool {
        matches!(self, Self::ImpSt | Self::ImpAt)
    }
}

impl fmt::Display for PruneMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PruneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown prune method {s:?}")))
    }
}

/// Binary keep/prune flags for every prunable tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    bits: BTreeMap<String, Vec<bool>>,
    round: u32,
    method: PruneMethod,
    provenance: Provenance,
}

impl Mask {
    pub fn new(
        bits: BTreeMap<String, Vec<bool>>,
        round: u32,
        method: PruneMethod,
        provenance: Provenance,
    ) -> Self {
        Self {
            bits,
            round,
            method,
            provenance,
        }
    }

    /// All-ones mask over the registry's prunable tensors.
    pub fn full(registry: &ParamRegistry, method: PruneMethod, provenance: Provenance) -> Self {
        let bits = registry
            .prunable()
            .iter()
            .map(|name| (name.clone(), vec![true; registry.numel(name)]))
            .collect();
        Self::new(bits, 0, method, provenance)
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn method(&self) -> PruneMethod {
        self.method
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn get(&self, name: &str) -> Option<&[bool]> {
        self.bits.get(name).map(Vec::as_slice)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &[bool])> {
        self.bits.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.bits.keys().map(String::as_str)
    }

    pub fn total(&self) -> usize {
        self.bits.values().map(Vec::len).sum()
    }

    pub fn kept(&self) -> usize {
        self.bits
            .values()
            .map(|b| b.iter().filter(|&&k| k).count())
            .sum()
    }

    pub fn sparsity(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        1.0 - self.kept() as f64 / total as f64
    }

    /// True when every kept position of `self` is also kept in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.iter().all(|(name, bits)| match other.bits.get(name) {
            Some(o) => o.len() == bits.len() && bits.iter().zip(o).all(|(&a, &b)| !a || b),
            None => false,
        })
    }

    /// Same tensor names and lengths as the registry's prunable set.
    pub fn check_covers(&self, registry: &ParamRegistry) -> Result<()> {
        let names: Vec<&str> = self.names().collect();
        let expected: Vec<&str> = registry.prunable().iter().map(String::as_str).collect();
        if names != expected {
            return Err(Error::MaskMismatch(format!(
                "mask tensors {names:?}, registry prunable {expected:?}"
            )));
        }
        for (name, bits) in &self.bits {
            let n = registry.numel(name);
            if bits.len() != n {
                return Err(Error::MaskMismatch(format!(
                    "{name}: {} bits for {n} weights",
                    bits.len()
                )));
            }
        }
        Ok(())
    }

    pub fn same_layout(&self, other: &Mask) -> bool {
        self.bits.len() == other.bits.len()
            && self
                .bits
                .iter()
                .zip(&other.bits)
                .all(|((na, a), (nb, b))| na == nb && a.len() == b.len())
    }

    pub(crate) fn with_bits(&self, bits: BTreeMap<String, Vec<bool>>, round: u32) -> Self {
        Self::new(bits, round, self.method, self.provenance)
    }
}
