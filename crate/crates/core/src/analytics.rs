//! Mask overlap, zero-kernel census, loss-surface grids and training
//! trajectory projections.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{perturb, AttackConfig};
use crate::autodiff::Graph;
use crate::error::{invalid, Error, Result};
use crate::mask::Mask;
use crate::model::{Model, ParamRegistry, ParamSet};
use crate::seed;
use crate::store::atomic_write;
use crate::tensor::Tensor;

/// Jaccard index of the kept sets; 1.0 when both are empty.
pub fn relative_similarity(a: &Mask, b: &Mask) -> Result<f64> {
    if !a.same_layout(b) {
        return Err(Error::MaskMismatch("masks cover different tensors".into()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for ((_, x), (_, y)) in a.tensors().zip(b.tensors()) {
        for (&p, &q) in x.iter().zip(y) {
            inter += (p && q) as usize;
            union += (p || q) as usize;
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorKernelCensus {
    pub name: String,
    pub stage: usize,
    pub zero_kernels: usize,
    pub total_kernels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelCensus {
    pub tensors: Vec<TensorKernelCensus>,
}

impl KernelCensus {
    pub fn zero_kernels(&self) -> usize {
        self.tensors.iter().map(|t| t.zero_kernels).sum()
    }

    pub fn total_kernels(&self) -> usize {
        self.tensors.iter().map(|t| t.total_kernels).sum()
    }

    /// Rebuilds the census from heatmap rows.
    pub fn from_heatmap(rows: &[KernelState], registry: &ParamRegistry) -> Result<Self> {
        let mut tensors: Vec<TensorKernelCensus> = registry
            .kernel_map()
            .keys()
            .map(|name| {
                let stage = registry.stage_of(name).unwrap_or(0);
                TensorKernelCensus {
                    name: name.clone(),
                    stage,
                    zero_kernels: 0,
                    total_kernels: 0,
                }
            })
            .collect();
        for r in rows {
            let t = tensors
                .iter_mut()
                .find(|t| t.stage == r.stage)
                .ok_or_else(|| invalid!("heatmap stage {} not in registry", r.stage))?;
            t.total_kernels += 1;
            if r.alive == 0 {
                t.zero_kernels += 1;
            }
        }
        Ok(Self { tensors })
    }
}

/// A kernel is zero when every one of its weights is masked.
pub fn zero_kernel_census(mask: &Mask, registry: &ParamRegistry) -> Result<KernelCensus> {
    Ok(KernelCensus {
        tensors: kernel_states(mask, registry)?
            .into_iter()
            .map(|(name, stage, states)| TensorKernelCensus {
                name,
                stage,
                zero_kernels: states.iter().filter(|s| s.alive == 0).count(),
                total_kernels: states.len(),
            })
            .collect(),
    })
}

/// One heatmap cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelState {
    pub stage: usize,
    pub out_ch: usize,
    pub in_ch: usize,
    pub alive: u8,
}

fn kernel_states(mask: &Mask, registry: &ParamRegistry) -> Result<Vec<(String, usize, Vec<KernelState>)>> {
    let mut out = Vec::new();
    for (name, layout) in registry.kernel_map() {
        let bits = mask
            .get(name)
            .ok_or_else(|| Error::MaskMismatch(format!("mask lacks {name}")))?;
        if bits.len() != layout.count() * layout.kernel_len {
            return Err(Error::MaskMismatch(format!("{name}: {} bits", bits.len())));
        }
        let stage = registry.stage_of(name).unwrap_or(0);
        let mut states = Vec::with_capacity(layout.count());
        for o in 0..layout.out_ch {
            for i in 0..layout.in_ch {
                let alive = bits[layout.range(o, i)].iter().any(|&b| b);
                states.push(KernelState {
                    stage,
                    out_ch: o,
                    in_ch: i,
                    alive: alive as u8,
                });
            }
        }
        out.push((name.clone(), stage, states));
    }
    Ok(out)
}

/// CSV `stage,out_ch,in_ch,alive`, one row per conv kernel.
pub fn kernel_heatmap_export(mask: &Mask, registry: &ParamRegistry, path: &Path) -> Result<()> {
    // Header written by hand so an empty census still gets one.
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["stage", "out_ch", "in_ch", "alive"])?;
    for (_, _, states) in kernel_states(mask, registry)? {
        for s in states {
            w.serialize(s)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    atomic_write(path, &bytes)
}

pub fn kernel_heatmap_import(path: &Path) -> Result<Vec<KernelState>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["stage", "out_ch", "in_ch", "alive"] {
        return Err(Error::format(path, format!("unexpected header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// `−1 + 2i/(R − 1)` for `i` in `0..R`.
pub fn grid_coords(resolution: usize) -> Vec<f64> {
    let d = (resolution - 1) as f64;
    (0..resolution).map(|i| -1.0 + (2 * i) as f64 / d).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceOptions {
    pub resolution: usize,
    pub seed: u64,
    /// Evaluate on PGD-perturbed inputs.
    pub attack: Option<AttackConfig>,
    /// Re-attack at every grid point instead of once at the center.
    pub reattack: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossSurfaceGrid {
    pub resolution: usize,
    pub coords: Vec<f64>,
    /// `values[i * R + j]` is the loss at `(coords[i], coords[j])`.
    pub values: Vec<f64>,
    pub d1: BTreeMap<String, Tensor<f32>>,
    pub d2: BTreeMap<String, Tensor<f32>>,
    pub batch_id: String,
    pub attacked: bool,
}

impl LossSurfaceGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.resolution + j]
    }

    pub fn center(&self) -> f64 {
        let c = self.resolution / 2;
        self.at(c, c)
    }

    /// CSV `a,b,loss`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["a", "b", "loss"])?;
        for (i, &a) in self.coords.iter().enumerate() {
            for (j, &b) in self.coords.iter().enumerate() {
                w.write_record([a.to_string(), b.to_string(), self.at(i, j).to_string()])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
        atomic_write(path, &bytes)
    }
}

/// Row slices used for filter normalization: conv (out, in) kernels, linear
/// output rows. `None` for tensors that get no direction (biases).
fn slices(name: &str, shape: &[usize]) -> Option<(usize, usize)> {
    if !name.ends_with(".weight") {
        return None;
    }
    match shape.len() {
        4 => Some((shape[0] * shape[1], shape[2] * shape[3])),
        2 => Some((shape[0], shape[1])),
        _ => None,
    }
}

/// Seeded Gaussian direction, masked, with every slice rescaled to the norm of
/// the matching slice of `m ⊙ θ`.
pub fn filter_normalized_direction(
    params: &ParamSet,
    mask: Option<&Mask>,
    seed_value: u64,
) -> BTreeMap<String, Tensor<f32>> {
    let live = match mask {
        Some(m) => params.masked(m),
        None => params.clone(),
    };
    let mut out = BTreeMap::new();
    for (name, w) in live.iter() {
        let Some((count, len)) = slices(name, w.shape()) else {
            out.insert(name.to_owned(), Tensor::zeros(w.shape()));
            continue;
        };
        let mut rng = seed::stream(seed_value, &format!("direction/{name}"));
        let bits = mask.and_then(|m| m.get(name));
        let mut d: Vec<f64> = (0..w.numel())
            .map(|i| {
                let v: f64 = StandardNormal.sample(&mut rng);
                if bits.is_some_and(|b| !b[i]) {
                    0.0
                } else {
                    v
                }
            })
            .collect();
        for s in 0..count {
            let r = s * len..(s + 1) * len;
            let wn = w.data()[r.clone()].iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let dn = d[r.clone()].iter().map(|x| x * x).sum::<f64>().sqrt();
            let f = if dn > 0.0 { wn / dn } else { 0.0 };
            d[r].iter_mut().for_each(|x| *x *= f);
        }
        let data = d.into_iter().map(|x| x as f32).collect();
        out.insert(name.to_owned(), Tensor::new(w.shape().to_vec(), data).expect("finite direction"));
    }
    out
}

fn mean_loss(model: &Model, params: &ParamSet, mask: Option<&Mask>, x: &Tensor<f32>, y: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let trace = model.forward(&mut g, params, mask, xv, false)?;
    let loss = g.softmax_cross_entropy(trace.logits, y)?;
    Ok(g.value(loss).item()? as f64)
}

/// Mean loss on `(x, y)` under `m ⊙ θ`.
pub fn batch_loss(model: &Model, params: &ParamSet, mask: Option<&Mask>, x: &Tensor<f32>, y: &[usize]) -> Result<f64> {
    mean_loss(model, params, mask, x, y)
}

fn offset(params: &ParamSet, d1: &BTreeMap<String, Tensor<f32>>, d2: &BTreeMap<String, Tensor<f32>>, a: f64, b: f64) -> Result<ParamSet> {
    if a == 0.0 && b == 0.0 {
        return Ok(params.clone());
    }
    let (a, b) = (a as f32, b as f32);
    let tensors = params
        .iter()
        .map(|(name, w)| {
            let (u, v) = (&d1[name], &d2[name]);
            let data = w
                .data()
                .iter()
                .zip(u.data().iter().zip(v.data()))
                .map(|(&x, (&p, &q))| {
                    let mut r = x;
                    if a != 0.0 {
                        r += a * p;
                    }
                    if b != 0.0 {
                        r += b * q;
                    }
                    r
                })
                .collect();
            (name.to_owned(), Tensor::new(w.shape().to_vec(), data).expect("finite offset"))
        })
        .collect::<BTreeMap<_, _>>();
    params.with_tensors(tensors)
}

/// Loss over `θ + a·d1 + b·d2` for `(a, b)` on an odd `R × R` grid over
/// `[−1, 1]²`.
pub fn loss_surface_grid(
    model: &Model,
    params: &ParamSet,
    mask: Option<&Mask>,
    batch: (&Tensor<f32>, &[usize]),
    batch_id: &str,
    opts: &SurfaceOptions,
) -> Result<LossSurfaceGrid> {
    let r = opts.resolution;
    if r.is_multiple_of(2) || r < 3 {
        return Err(invalid!("grid resolution {r} must be odd and >= 3"));
    }
    model.check_params(params)?;
    let (x, y) = batch;
    let d1 = filter_normalized_direction(params, mask, seed::substream(opts.seed, "d1"));
    let d2 = filter_normalized_direction(params, mask, seed::substream(opts.seed, "d2"));
    let attack_seed = seed::substream(opts.seed, "attack");
    let frozen = match (&opts.attack, opts.reattack) {
        (Some(cfg), false) => {
            let net = model.subnetwork(params, mask);
            perturb(&net, x, y, cfg, attack_seed)?.apply(x)
        }
        _ => x.clone(),
    };
    let coords = grid_coords(r);
    let cells: Vec<(usize, usize)> = (0..r).flat_map(|i| (0..r).map(move |j| (i, j))).collect();
    let values = cells
        .par_iter()
        .map(|&(i, j)| {
            let p = offset(params, &d1, &d2, coords[i], coords[j])?;
            match (&opts.attack, opts.reattack) {
                (Some(cfg), true) => {
                    let net = model.subnetwork(&p, mask);
                    let xa = perturb(&net, x, y, cfg, attack_seed)?.apply(x);
                    mean_loss(model, &p, mask, &xa, y)
                }
                _ => mean_loss(model, &p, mask, &frozen, y),
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(LossSurfaceGrid {
        resolution: r,
        coords,
        values,
        d1,
        d2,
        batch_id: batch_id.to_owned(),
        attacked: opts.attack.is_some(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryProjection {
    /// One (x, y) per checkpoint, in input order.
    pub coords: Vec<(f64, f64)>,
    /// Top-2 Gram eigenvalues.
    pub eigenvalues: [f64; 2],
}

impl TrajectoryProjection {
    /// CSV `epoch,x,y` with epochs counted from 1.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "x", "y"])?;
        for (e, (x, y)) in self.coords.iter().enumerate() {
            w.write_record([(e + 1).to_string(), x.to_string(), y.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
        atomic_write(path, &bytes)
    }
}

fn flatten(p: &ParamSet, mask: Option<&Mask>) -> Vec<f64> {
    let mut out = Vec::with_capacity(p.numel());
    for (name, t) in p.iter() {
        let bits = mask.and_then(|m| m.get(name));
        out.extend(t.data().iter().enumerate().map(|(i, &v)| {
            if bits.is_some_and(|b| !b[i]) {
                0.0
            } else {
                v as f64
            }
        }));
    }
    out
}

/// Projects `θ_i − θ_final` onto its top-2 principal directions, found via
/// the eigendecomposition of the checkpoint Gram matrix.
pub fn trajectory_projection(checkpoints: &[ParamSet], mask: Option<&Mask>) -> Result<TrajectoryProjection> {
    if checkpoints.len() < 3 {
        return Err(invalid!("trajectory needs >= 3 checkpoints, got {}", checkpoints.len()));
    }
    let fin = flatten(checkpoints.last().expect("nonempty"), mask);
    let diffs: Vec<Vec<f64>> = checkpoints
        .iter()
        .map(|c| {
            let v = flatten(c, mask);
            if v.len() != fin.len() {
                return Err(Error::shape("trajectory", "checkpoints differ in layout"));
            }
            Ok(v.iter().zip(&fin).map(|(a, b)| a - b).collect())
        })
        .collect::<Result<_>>()?;
    let n = diffs.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let gram = DMatrix::from_fn(n, n, |i, j| dot(&diffs[i], &diffs[j]));
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(l1 > 0.0 && l2 > l1 * 1e-12) {
        return Err(invalid!("checkpoint differences have rank < 2"));
    }
    let dim = fin.len();
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&k| {
            let v = eig.eigenvectors.column(k);
            // deterministic sign: largest-magnitude weight positive
            let pivot = (0..n).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).expect("n >= 3");
            let sgn = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            let scale = sgn / eig.eigenvalues[k].sqrt();
            let mut u = vec![0.0; dim];
            for (i, d) in diffs.iter().enumerate() {
                let c = v[i] * scale;
                u.iter_mut().zip(d).for_each(|(a, &b)| *a += c * b);
            }
            u
        })
        .collect();
    let coords = diffs.iter().map(|d| (dot(d, &axes[0]), dot(d, &axes[1]))).collect();
    Ok(TrajectoryProjection {
        coords,
        eigenvalues: [l1, l2],
    })
}
