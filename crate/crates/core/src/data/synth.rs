//! Procedural shape renderer on a 16×16 canvas.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{invalid, Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const SIDE: usize = 16;
pub const NOISE_SIGMA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "source")]
    Source,
    #[serde(rename = "downstreamA")]
    DownstreamA,
    #[serde(rename = "downstreamB")]
    DownstreamB,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Source => "source",
            Self::DownstreamA => "downstreamA",
            Self::DownstreamB => "downstreamB",
        }
    }

    pub fn num_classes(self) -> usize {
        self.families().len()
    }

    fn families(self) -> &'static [Family] {
        use Family::*;
        match self {
            Self::Source => &[HBar, VBar, DiagDown, DiagUp, Plus, Cross, Blob, Ring],
            Self::DownstreamA => &[Corner, Tee, DoubleH, Square],
            Self::DownstreamB => &[TwoBlobs, Triangle, Chevron, DoubleV],
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Source, Self::DownstreamA, Self::DownstreamB]
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown task kind {s:?}")))
    }
}

/// Renderer knobs. Defaults are used by [`synthesize_task`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub noise_sigma: f64,
    /// Max center offset in pixels along each axis.
    pub jitter: f64,
    /// Max rotation in degrees.
    pub rotation: f64,
    /// Scale drawn uniformly from `[1 − s, 1 + s]`.
    pub scale_spread: f64,
    /// Stroke intensity above background, drawn from `[contrast_min, contrast_max]`.
    pub contrast_min: f64,
    pub contrast_max: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            noise_sigma: NOISE_SIGMA,
            jitter: 2.5,
            rotation: 12.0,
            scale_spread: 0.25,
            contrast_min: 0.3,
            contrast_max: 0.6,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Family {
    HBar,
    VBar,
    DiagDown,
    DiagUp,
    Plus,
    Cross,
    Blob,
    Ring,
    Corner,
    Tee,
    DoubleH,
    Square,
    TwoBlobs,
    Triangle,
    Chevron,
    DoubleV,
}

type P = (f64, f64);

enum Prim {
    Seg(P, P),
    Disk(P, f64),
    Circle(P, f64),
}

fn seg_dist(p: P, a: P, b: P) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Primitives in a unit frame centered at the origin, roughly within ±5 px.
fn primitives(f: Family) -> Vec<Prim> {
    use Prim::*;
    let r = 5.0;
    match f {
        Family::HBar => vec![Seg((-r, 0.0), (r, 0.0))],
        Family::VBar => vec![Seg((0.0, -r), (0.0, r))],
        Family::DiagDown => vec![Seg((-r * 0.75, -r * 0.75), (r * 0.75, r * 0.75))],
        Family::DiagUp => vec![Seg((-r * 0.75, r * 0.75), (r * 0.75, -r * 0.75))],
        Family::Plus => vec![Seg((-r, 0.0), (r, 0.0)), Seg((0.0, -r), (0.0, r))],
        Family::Cross => {
            let q = r * 0.75;
            vec![Seg((-q, -q), (q, q)), Seg((-q, q), (q, -q))]
        }
        Family::Blob => vec![Disk((0.0, 0.0), 2.6)],
        Family::Ring => vec![Circle((0.0, 0.0), 3.8)],
        Family::Corner => vec![Seg((-4.0, -4.0), (-4.0, 4.0)), Seg((-4.0, 4.0), (4.0, 4.0))],
        Family::Tee => vec![Seg((-4.5, -4.0), (4.5, -4.0)), Seg((0.0, -4.0), (0.0, 4.5))],
        Family::DoubleH => vec![Seg((-4.5, -2.5), (4.5, -2.5)), Seg((-4.5, 2.5), (4.5, 2.5))],
        Family::Square => vec![
            Seg((-3.5, -3.5), (3.5, -3.5)),
            Seg((3.5, -3.5), (3.5, 3.5)),
            Seg((3.5, 3.5), (-3.5, 3.5)),
            Seg((-3.5, 3.5), (-3.5, -3.5)),
        ],
        Family::TwoBlobs => vec![Disk((-2.8, 0.0), 1.7), Disk((2.8, 0.0), 1.7)],
        Family::Triangle => vec![
            Seg((0.0, -4.0), (4.2, 3.5)),
            Seg((4.2, 3.5), (-4.2, 3.5)),
            Seg((-4.2, 3.5), (0.0, -4.0)),
        ],
        Family::Chevron => vec![Seg((-4.5, -3.5), (0.0, 3.5)), Seg((0.0, 3.5), (4.5, -3.5))],
        Family::DoubleV => vec![Seg((-2.5, -4.5), (-2.5, 4.5)), Seg((2.5, -4.5), (2.5, 4.5))],
    }
}

struct Pose {
    center: P,
    cos: f64,
    sin: f64,
    scale: f64,
    half_width: f64,
    contrast: f64,
    background: f64,
}

impl Pose {
    fn place(&self, p: P) -> P {
        let (x, y) = (p.0 * self.scale, p.1 * self.scale);
        (
            self.center.0 + self.cos * x - self.sin * y,
            self.center.1 + self.sin * x + self.cos * y,
        )
    }
}

fn render(f: Family, pose: &Pose, out: &mut [f32]) {
    let prims: Vec<Prim> = primitives(f)
        .into_iter()
        .map(|p| match p {
            Prim::Seg(a, b) => Prim::Seg(pose.place(a), pose.place(b)),
            Prim::Disk(c, r) => Prim::Disk(pose.place(c), r * pose.scale),
            Prim::Circle(c, r) => Prim::Circle(pose.place(c), r * pose.scale),
        })
        .collect();
    for row in 0..SIDE {
        for col in 0..SIDE {
            let p = (col as f64 + 0.5, row as f64 + 0.5);
            let mut v: f64 = 0.0;
            for prim in &prims {
                let ink = match *prim {
                    Prim::Seg(a, b) => 1.0 - (seg_dist(p, a, b) - pose.half_width).max(0.0),
                    Prim::Disk(c, r) => {
                        let d2 = (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2);
                        (-d2 / (2.0 * r * r)).exp() * 1.2
                    }
                    Prim::Circle(c, r) => {
                        let d = ((p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)).sqrt();
                        1.0 - ((d - r).abs() - pose.half_width).max(0.0)
                    }
                };
                v = v.max(ink.clamp(0.0, 1.0));
            }
            out[row * SIDE + col] = (pose.background + pose.contrast * v) as f32;
        }
    }
}

/// `n_per_class` samples per class, interleaved by class, with default knobs.
pub fn synthesize_task(kind: TaskKind, n_per_class: usize, seed_value: u64) -> Result<Dataset> {
    synthesize_task_with(kind, n_per_class, seed_value, &SynthParams::default())
}

pub fn synthesize_task_with(
    kind: TaskKind,
    n_per_class: usize,
    seed_value: u64,
    params: &SynthParams,
) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(invalid!("n_per_class must be >= 1"));
    }
    if !(0.0 <= params.contrast_min && params.contrast_min <= params.contrast_max && params.contrast_max <= 0.7) {
        return Err(invalid!(
            "contrast range [{}, {}] must sit inside [0, 0.7]",
            params.contrast_min,
            params.contrast_max
        ));
    }
    if !(params.noise_sigma >= 0.0 && params.noise_sigma.is_finite()) {
        return Err(invalid!("noise sigma {} must be finite and >= 0", params.noise_sigma));
    }
    let families = kind.families();
    let k = families.len();
    let n = n_per_class * k;
    let pix = SIDE * SIDE;
    let mut rng = seed::stream(seed_value, &format!("synth/{}", kind.as_str()));
    let noise = Normal::new(0.0, params.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| invalid!("noise distribution: {e}"))?;
    let mid = SIDE as f64 / 2.0;
    let mut data = vec![0f32; n * pix];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % k;
        let angle = rng.random_range(-params.rotation..=params.rotation).to_radians();
        let pose = Pose {
            center: (
                mid + rng.random_range(-params.jitter..=params.jitter),
                mid + rng.random_range(-params.jitter..=params.jitter),
            ),
            cos: angle.cos(),
            sin: angle.sin(),
            scale: rng.random_range(1.0 - params.scale_spread..=1.0 + params.scale_spread),
            half_width: rng.random_range(0.35..0.8),
            contrast: rng.random_range(params.contrast_min..=params.contrast_max),
            background: rng.random_range(0.0..0.3),
        };
        let img = &mut data[i * pix..(i + 1) * pix];
        render(families[y], &pose, img);
        if params.noise_sigma > 0.0 {
            for v in img.iter_mut() {
                *v = (*v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
        }
        labels.push(y);
    }
    Dataset::new(
        Tensor::new(vec![n, 1, SIDE, SIDE], data)?,
        labels,
        k,
        kind.as_str(),
        Split::Train,
    )
}
