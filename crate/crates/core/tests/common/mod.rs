//! Oracles and fixtures shared by the integration tests and the acceptance
//! harness.
#![allow(dead_code)]

use rand::Rng;
use ticketlab::attack::Classifier;
use ticketlab::autodiff::{Graph, Var};
use ticketlab::data::{synthesize_task, Dataset, Split, TaskKind};
use ticketlab::model::{Model, ModelConfig};
use ticketlab::seed;
use ticketlab::tensor::Tensor;
use ticketlab::Result;

pub type Rng64 = seed::StreamRng;

pub const FD_STEP: f64 = 1e-5;

pub fn uniform(rng: &mut Rng64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Entries with |v| ≥ 0.05 so ReLU kinks stay out of the difference stencil.
fn off_kink(rng: &mut Rng64, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random::<bool>() { v } else { -v }
    })
}

/// 4-D tensor whose 2×2 pooling windows have a unique max by a wide margin.
fn pool_safe(rng: &mut Rng64, shape: &[usize]) -> Tensor<f64> {
    loop {
        let t = uniform(rng, shape, -1.0, 1.0);
        let (h, w) = (shape[2], shape[3]);
        let d = t.data();
        let ok = (0..shape[0] * shape[1]).all(|p| {
            (0..h / 2).all(|i| {
                (0..w / 2).all(|j| {
                    let mut v: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(a, b)| d[p * h * w + (2 * i + a) * w + 2 * j + b])
                        .collect();
                    v.sort_by(f64::total_cmp);
                    v[3] - v[2] > 1e-3
                })
            })
        });
        if ok {
            return t;
        }
    }
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

pub const OPS: [&str; 15] = [
    "matmul",
    "linear",
    "linear_nobias",
    "conv2d_pad1",
    "conv2d_stride2",
    "conv2d_nobias",
    "relu",
    "max_pool2",
    "global_avg_pool",
    "softmax_cross_entropy",
    "select",
    "add",
    "scale",
    "sum",
    "reshape",
];

pub fn case(op: &str, rng: &mut Rng64) -> Case {
    let mut d = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (n, a, b, c) = (d(1, 3), d(1, 4), d(1, 4), d(1, 3));
    let (h, w, o) = (d(3, 6), d(3, 6), d(1, 3));
    match op {
        "matmul" => Case {
            inputs: vec![uniform(rng, &[a, b], -1.0, 1.0), uniform(rng, &[b, c], -1.0, 1.0)],
            build: Box::new(|g, v| g.matmul(v[0], v[1])),
        },
        "linear" => Case {
            inputs: vec![
                uniform(rng, &[n, a], -1.0, 1.0),
                uniform(rng, &[b, a], -1.0, 1.0),
                uniform(rng, &[b], -1.0, 1.0),
            ],
            build: Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
        },
        "linear_nobias" => Case {
            inputs: vec![uniform(rng, &[n, a], -1.0, 1.0), uniform(rng, &[b, a], -1.0, 1.0)],
            build: Box::new(|g, v| g.linear(v[0], v[1], None)),
        },
        "conv2d_pad1" => Case {
            inputs: vec![
                uniform(rng, &[n, c, h, w], -1.0, 1.0),
                uniform(rng, &[o, c, 3, 3], -1.0, 1.0),
                uniform(rng, &[o], -1.0, 1.0),
            ],
            build: Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        },
        "conv2d_stride2" => Case {
            inputs: vec![
                uniform(rng, &[n, c, h + 1, w + 1], -1.0, 1.0),
                uniform(rng, &[o, c, 2, 3], -1.0, 1.0),
                uniform(rng, &[o], -1.0, 1.0),
            ],
            build: Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 0)),
        },
        "conv2d_nobias" => Case {
            inputs: vec![uniform(rng, &[n, c, h, w], -1.0, 1.0), uniform(rng, &[o, c, 2, 2], -1.0, 1.0)],
            build: Box::new(|g, v| g.conv2d(v[0], v[1], None, 1, 1)),
        },
        "relu" => Case {
            inputs: vec![off_kink(rng, &[n, a, b])],
            build: Box::new(|g, v| g.relu(v[0])),
        },
        "max_pool2" => Case {
            inputs: vec![pool_safe(rng, &[n, c, h, w])],
            build: Box::new(|g, v| g.max_pool2(v[0])),
        },
        "global_avg_pool" => Case {
            inputs: vec![uniform(rng, &[n, c, h, w], -1.0, 1.0)],
            build: Box::new(|g, v| g.global_avg_pool(v[0])),
        },
        "softmax_cross_entropy" => {
            let k = c + 1;
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            Case {
                inputs: vec![uniform(rng, &[n, k], -3.0, 3.0)],
                build: Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels)),
            }
        }
        "select" => {
            let keep: Vec<bool> = (0..a * b).map(|_| rng.random()).collect();
            Case {
                inputs: vec![uniform(rng, &[a, b], -1.0, 1.0)],
                build: Box::new(move |g, v| g.select(v[0], &keep)),
            }
        }
        "add" => Case {
            inputs: vec![uniform(rng, &[a, b], -1.0, 1.0), uniform(rng, &[a, b], -1.0, 1.0)],
            build: Box::new(|g, v| g.add(v[0], v[1])),
        },
        "scale" => {
            let f: f64 = rng.random_range(-2.0..2.0);
            Case {
                inputs: vec![uniform(rng, &[a, b], -1.0, 1.0)],
                build: Box::new(move |g, v| g.scale(v[0], f)),
            }
        }
        "sum" => Case {
            inputs: vec![uniform(rng, &[a, b, c], -1.0, 1.0)],
            build: Box::new(|g, v| g.sum(v[0])),
        },
        "reshape" => Case {
            inputs: vec![uniform(rng, &[a, b, c], -1.0, 1.0)],
            build: Box::new(move |g, v| g.reshape(v[0], &[c, a * b])),
        },
        other => panic!("unknown op {other}"),
    }
}

/// Scalar `⟨op(inputs), r⟩` plus the leaves, so every output entry is weighted.
fn projected_loss(case: &Case, inputs: &[Tensor<f64>], r: &mut Option<Tensor<f64>>, rng: &mut Rng64) -> Result<(Graph<f64>, Var, Vec<Var>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = (case.build)(&mut g, &vars)?;
    let n = g.value(out).numel();
    let proj = r.get_or_insert_with(|| uniform(rng, &[n, 1], -1.0, 1.0)).clone();
    let flat = g.reshape(out, &[1, n])?;
    let rv = g.constant(proj);
    let m = g.matmul(flat, rv)?;
    let loss = g.sum(m)?;
    Ok((g, loss, vars))
}

/// Worst norm-wise relative error ‖a − n‖ / (‖a‖ + ‖n‖) over the inputs of
/// one case, `n` being the central difference with step [`FD_STEP`].
pub fn fd_relative_error(case: &Case, rng: &mut Rng64) -> Result<f64> {
    let mut r = None;
    let (g, loss, vars) = projected_loss(case, &case.inputs, &mut r, rng)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).expect("leaf gradient").data().to_vec();
        let mut diff2 = 0.0;
        let (mut an2, mut nn2) = (0.0, 0.0);
        for j in 0..case.inputs[i].numel() {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut ins = case.inputs.clone();
                ins[i].data_mut()[j] += delta;
                let (g, loss, _) = projected_loss(case, &ins, &mut r, rng)?;
                g.value(loss).item()
            };
            let num = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            diff2 += (analytic[j] - num).powi(2);
            an2 += analytic[j].powi(2);
            nn2 += num.powi(2);
        }
        let denom = an2.sqrt() + nn2.sqrt();
        if denom > 0.0 {
            worst = worst.max(diff2.sqrt() / denom);
        }
    }
    Ok(worst)
}

/// Max relative error per op over `instances` random cases.
pub fn gradcheck_all(instances: usize, seed_value: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = seed::stream(seed_value, "gradcheck");
    OPS.iter()
        .map(|&op| {
            let mut worst: f64 = 0.0;
            for _ in 0..instances {
                let c = case(op, &mut rng);
                worst = worst.max(fd_relative_error(&c, &mut rng)?);
            }
            Ok((op, worst))
        })
        .collect()
}

/// Per-sample loss `−y (w·x + b)` with `y = ±1` from labels 1 / 0; the batch
/// loss is the mean. Logits are `(−s, s)` with `s = w·x + b`.
pub struct LinearLoss {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LinearLoss {
    fn score(&self, row: &[f64]) -> f64 {
        row.iter().zip(&self.w).map(|(x, w)| x * w).sum::<f64>() + self.b
    }

    pub fn sign(label: usize) -> f64 {
        if label == 1 { 1.0 } else { -1.0 }
    }

    pub fn loss(&self, x: &Tensor<f64>, labels: &[usize]) -> f64 {
        let d = self.w.len();
        let total: f64 = x
            .data()
            .chunks(d)
            .zip(labels)
            .map(|(row, &y)| -Self::sign(y) * self.score(row))
            .sum();
        total / labels.len() as f64
    }
}

impl Classifier<f64> for LinearLoss {
    fn logits(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let d = self.w.len();
        let data = x.data().chunks(d).flat_map(|r| {
            let s = self.score(r);
            [-s, s]
        });
        Tensor::new(vec![x.shape()[0], 2], data.collect())
    }

    fn loss_and_input_grad(&self, x: &Tensor<f64>, labels: &[usize]) -> Result<(f64, Tensor<f64>)> {
        let d = self.w.len();
        let n = labels.len() as f64;
        let grad: Vec<f64> = labels
            .iter()
            .flat_map(|&y| self.w.iter().map(move |w| -LinearLoss::sign(y) * w / n))
            .collect();
        Ok((self.loss(x, labels), Tensor::new(vec![labels.len(), d], grad)?))
    }
}

/// Small default-architecture model for `kind`.
pub fn small_model(classes: usize) -> Model {
    Model::new(ModelConfig::default().with_classes(classes)).expect("valid config")
}

/// Downstream-A train/test pair at `n` and `m` samples per class.
pub fn task_a(n: usize, m: usize, seed_value: u64) -> (Dataset, Dataset) {
    let train = synthesize_task(TaskKind::DownstreamA, n, seed_value).expect("synth");
    let test = synthesize_task(TaskKind::DownstreamA, m, seed_value + 1)
        .expect("synth")
        .with_split(Split::Test);
    (train, test)
}
