//! ℓ∞-bounded adversaries: FGSM (optionally with random start) and PGD.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seed;
use crate::tensor::{sign, Real, Tensor};

/// Valid pixel range.
pub const DOMAIN: (f64, f64) = (0.0, 1.0);

/// Anything attacks and evaluation can query: logits, and the mean loss with
/// its gradient with respect to the inputs.
pub trait Classifier<T: Real> {
    fn logits(&self, inputs: &Tensor<T>) -> Result<Tensor<T>>;

    fn loss_and_input_grad(&self, inputs: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// ℓ∞ radius in pixel units.
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub random_init: bool,
}

impl AttackConfig {
    pub const EPS: f64 = 8.0 / 255.0;
    pub const ALPHA: f64 = 2.0 / 255.0;

    pub fn pgd(steps: usize) -> Self {
        Self {
            epsilon: Self::EPS,
            alpha: Self::ALPHA,
            steps,
            random_init: true,
        }
    }

    /// Single step from a uniform random start, step 1.25·ε.
    pub fn fast() -> Self {
        Self {
            epsilon: Self::EPS,
            alpha: 1.25 * Self::EPS,
            steps: 1,
            random_init: true,
        }
    }

    /// Evaluation adversary: PGD-20.
    pub fn eval() -> Self {
        Self::pgd(20)
    }

    pub fn identity() -> Self {
        Self {
            epsilon: 0.0,
            alpha: Self::ALPHA,
            steps: 0,
            random_init: false,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn is_identity(&self) -> bool {
        self.epsilon == 0.0 || self.steps == 0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(invalid!("epsilon {} must be finite and >= 0", self.epsilon));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(invalid!("alpha {} must be finite and > 0", self.alpha));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation<T: Real = f32> {
    pub delta: Tensor<T>,
    /// Input-gradient evaluations spent producing `delta`.
    pub grad_evals: usize,
}

impl<T: Real> Perturbation<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            delta: Tensor::zeros(shape),
            grad_evals: 0,
        }
    }

    /// `x + δ`.
    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        let data = x
            .data()
            .iter()
            .zip(self.delta.data())
            .map(|(&a, &d)| a + d)
            .collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }
}

/// Clamps δ to `[−ε, ε]`, then shifts it so `x + δ` lies in `domain`. The
/// result satisfies both constraints exactly in floating point.
pub fn project_linf<T: Real>(
    delta: &Tensor<T>,
    epsilon: T,
    x: &Tensor<T>,
    domain: (T, T),
) -> Result<Tensor<T>> {
    if delta.shape() != x.shape() {
        return Err(Error::shape(
            "project_linf",
            format!("delta {:?}, input {:?}", delta.shape(), x.shape()),
        ));
    }
    let (lo, hi) = domain;
    let data = delta
        .data()
        .iter()
        .zip(x.data())
        .map(|(&d, &xv)| project_one(d, epsilon, xv, lo, hi))
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

fn project_one<T: Real>(d: T, eps: T, x: T, lo: T, hi: T) -> T {
    let mut d = d.max(-eps).min(eps);
    if x + d > hi || x + d < lo {
        d = (x + d).max(lo).min(hi) - x;
    }
    // Rounding in `target - x` can overshoot by an ulp; walk back toward zero.
    while d.abs() > eps || x + d > hi || x + d < lo {
        if d == T::zero() {
            break;
        }
        d = d.step_toward_zero();
    }
    d
}

fn domain<T: Real>() -> (T, T) {
    (T::from_f64_lossy(DOMAIN.0), T::from_f64_lossy(DOMAIN.1))
}

fn check_labels(labels: &[usize], batch: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::shape(
            "attack",
            format!("{} labels for batch of {batch}", labels.len()),
        ));
    }
    Ok(())
}

fn random_start<T: Real>(x: &Tensor<T>, eps: T, seed: u64) -> Result<Tensor<T>> {
    let mut rng = seed::rng(seed);
    let raw = Tensor::from_fn(x.shape(), |_| {
        let u: f64 = rng.random();
        T::from_f64_lossy(2.0 * u - 1.0) * eps
    });
    project_linf(&raw, eps, x, domain())
}

fn signed_steps<T: Real, C: Classifier<T> + ?Sized>(
    model: &C,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    steps: usize,
    seed: u64,
) -> Result<Perturbation<T>> {
    cfg.validate()?;
    check_labels(labels, x.shape()[0])?;
    if cfg.epsilon == 0.0 || steps == 0 {
        return Ok(Perturbation::zeros(x.shape()));
    }
    let eps = T::from_f64_lossy(cfg.epsilon);
    let alpha = T::from_f64_lossy(cfg.alpha);
    let mut delta = if cfg.random_init {
        random_start(x, eps, seed)?
    } else {
        Tensor::zeros(x.shape())
    };
    for _ in 0..steps {
        let adv = Perturbation {
            delta: delta.clone(),
            grad_evals: 0,
        }
        .apply(x);
        let (_, grad) = model.loss_and_input_grad(&adv, labels)?;
        if !grad.is_finite() {
            return Err(Error::NonFinite {
                op: "attack input gradient".into(),
            });
        }
        for (d, &g) in delta.data_mut().iter_mut().zip(grad.data()) {
            *d += alpha * sign(g);
        }
        delta = project_linf(&delta, eps, x, domain())?;
    }
    Ok(Perturbation {
        delta,
        grad_evals: steps,
    })
}

/// One signed-gradient step, from a uniform start when `random_init` is set.
pub fn fgsm_perturb<T: Real, C: Classifier<T> + ?Sized>(
    model: &C,
    batch: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Perturbation<T>> {
    if cfg.steps != 1 {
        return Err(invalid!("FGSM takes exactly one step, config has {}", cfg.steps));
    }
    signed_steps(model, batch, labels, cfg, 1, seed)
}

/// `cfg.steps` iterations of `δ ← proj(δ + α·sgn ∇ₓL(x + δ))`. Zero steps
/// is the identity adversary.
pub fn pgd_attack<T: Real, C: Classifier<T> + ?Sized>(
    model: &C,
    batch: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Perturbation<T>> {
    signed_steps(model, batch, labels, cfg, cfg.steps, seed)
}

/// Dispatches on the step count: 0 → identity, 1 → FGSM, otherwise PGD.
pub fn perturb<T: Real, C: Classifier<T> + ?Sized>(
    model: &C,
    batch: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Perturbation<T>> {
    match cfg.steps {
        0 => {
            check_labels(labels, batch.shape()[0])?;
            Ok(Perturbation::zeros(batch.shape()))
        }
        1 => fgsm_perturb(model, batch, labels, cfg, seed),
        _ => pgd_attack(model, batch, labels, cfg, seed),
    }
}
