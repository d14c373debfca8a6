//! Synthetic data-generating processes, standardization and k-fold splits.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use libm::erf;
use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::elbo::special::sigmoid;
use crate::elbo::Task;
use crate::error::{Error, Result};
use crate::nncore::Matrix;

pub const DEFAULT_N: usize = 8000;
/// Observation noise variance of synth3 and synth5.
pub const NOISE_VAR: f64 = 0.01;
const X_RANGE: f64 = 4.0;

/// Per-feature ground truth kept alongside a synthetic dataset; never used for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    /// Mean attribution component of each feature, before centering.
    pub mean: Matrix,
    /// Variance of each feature's attribution draw (zero for deterministic components).
    pub variance: Matrix,
    /// Realized per-feature components (SSV draws where the DGP is stochastic).
    pub ssv: Matrix,
    /// `E_x[mean_d]` under the input distribution, for centering.
    pub offsets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetTabular {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub task: Task,
    pub latent: Option<Latent>,
}

impl DatasetTabular {
    pub fn new(x: Matrix, y: Vec<f64>, task: Task) -> Result<Self> {
        let d = DatasetTabular {
            x,
            y,
            task,
            latent: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.rows() != self.y.len() {
            return Err(Error::shape("dataset targets", self.x.rows(), self.y.len()));
        }
        if !self.x.is_finite() || self.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("dataset entries".into()));
        }
        if self.task == Task::Classification && self.y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain("classification targets must be 0 or 1".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    /// Rows `idx` (including any latent record).
    pub fn subset(&self, idx: &[usize]) -> DatasetTabular {
        DatasetTabular {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            task: self.task,
            latent: self.latent.as_ref().map(|l| Latent {
                mean: l.mean.select_rows(idx),
                variance: l.variance.select_rows(idx),
                ssv: l.ssv.select_rows(idx),
                offsets: l.offsets.clone(),
            }),
        }
    }
}

/// Adaptive Simpson quadrature on `[a, b]` to absolute tolerance `tol`.
fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, max_depth: u32) -> f64 {
    fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, max_depth)
}

/// Fresnel sine integral `S(z) = ∫₀ᶻ sin(πt²/2) dt`.
pub fn fresnel_s(z: f64) -> f64 {
    let sign = z.signum();
    sign * adaptive_simpson(&|t| (PI * t * t / 2.0).sin(), 0.0, z.abs(), 1e-15, 40)
}

/// `(√π/8)·erf(4)` and `(√(2π)/8)·S(4√(2/π))`, the synth1 centering constants.
pub fn synth1_constants() -> (f64, f64) {
    static C: OnceLock<(f64, f64)> = OnceLock::new();
    *C.get_or_init(|| {
        (
            PI.sqrt() / 8.0 * erf(4.0),
            (2.0 * PI).sqrt() / 8.0 * fresnel_s(4.0 * (2.0 / PI).sqrt()),
        )
    })
}

fn uniform_inputs(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let u = Uniform::new(-X_RANGE, X_RANGE).expect("valid range");
    Matrix::from_fn(n, d, |_, _| u.sample(rng))
}

fn synth_mean(k: u8, x: &[f64]) -> ([f64; 3], f64) {
    let (x1, x2, x3) = (x[0], x[1], x[2]);
    match k {
        1 => {
            let (c1, c2) = synth1_constants();
            let m = [
                2.0 + (-x1 * x1).exp() - c1,
                1.0 + (-x2 * x2).sin() + c2,
                3.0 * (3.0 * x3).cos() + 4.0 * (5.0 * x3).sin(),
            ];
            (m, 0.0)
        }
        2 => (
            [
                (-x1 * x1).exp() * x1,
                0.5 * x2 * x2.sin(),
                (3.0 * x3).cos() * x3.sin(),
            ],
            0.0,
        ),
        3 => {
            let f12 = (-(x1 + x2).powi(2)).exp();
            let f13 = (x1 - 3.0) * x3 * x1.sin() * x3.cos() / 2.0;
            let f23 = x2 * x3 / 2.0;
            (
                [
                    4.0 * x1.sin() + 2.0 * (2.0 * x1).sin(),
                    3.0 * (3.0 * x2).cos() * (5.0 * x2).sin(),
                    (2.0 * x3).cos() + x3 * x3 / 7.0,
                ],
                f12 + f13 + f23,
            )
        }
        4 => {
            let f1 = if x1 == 0.0 {
                0.0
            } else {
                (-1.0 / (x1 * x1)).exp() + (100.0 / x1).sin()
            };
            let f2 = (-(x2.abs().cos() + 0.5 * (2.0 * x2).sin()).abs()).exp() + x2 / 4.0;
            let f12 = (x1 * x1 + x2 * x2).sin() / 2.0;
            ([f1, f2, (x3 * x3).tanh()], f12)
        }
        5 => {
            let f12 = 5.0 * (x1.powi(10) + x2.powi(10)).powf(0.1) / 2.0;
            (
                [
                    x1.abs() / 10.0 + x1 * x1 / 10.0 + x1.sin(),
                    (5.0 * x2).cos() + (2.0 * x2).sin() + x2,
                    (-x3.powi(100)).exp(),
                ],
                // The observation model sums f1, f2, f3 and f12 only.
                f12,
            )
        }
        _ => unreachable!(),
    }
}

/// Expected main effects of `synth_mean(k, ·)` under `U(−4, 4)³`.
fn synth_offsets(k: u8) -> Vec<f64> {
    if k == 1 {
        // Exact by construction of the centering constants.
        return vec![2.0, 1.0, 3.0 * 12f64.sin() / 12.0];
    }
    (0..3)
        .map(|d| {
            let g = move |t: f64| {
                let mut x = [0.5, 0.5, 0.5];
                x[d] = t;
                synth_mean(k, &x).0[d]
            };
            adaptive_simpson(&g, -X_RANGE, X_RANGE, 1e-10, 20) / (2.0 * X_RANGE)
        })
        .collect()
}

/// Synthetic dataset `k ∈ 1..=5` with `n` rows.
pub fn gen_synth(k: u8, n: usize, seed: u64) -> Result<DatasetTabular> {
    if !(1..=5).contains(&k) {
        return Err(Error::Domain(format!("synthetic dataset id must be 1..=5, got {k}")));
    }
    if n == 0 {
        return Err(Error::Domain("dataset size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform_inputs(n, 3, &mut rng);
    let mut mean = Matrix::zeros(n, 3);
    let mut variance = Matrix::zeros(n, 3);
    let mut ssv = Matrix::zeros(n, 3);
    let mut y = Vec::with_capacity(n);
    let noise = Normal::new(0.0, NOISE_VAR.sqrt()).expect("valid noise");
    for i in 0..n {
        let xi = x.row(i);
        let (m, interaction) = synth_mean(k, xi);
        let v = if k == 1 {
            [
                0.6 * (0.03 * xi[0]).cos().powi(800),
                0.2 * xi[1].abs(),
                0.0,
            ]
        } else {
            [0.0; 3]
        };
        let mut s = [0.0; 3];
        for d in 0..3 {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            s[d] = m[d] + v[d].sqrt() * z;
        }
        mean.row_mut(i).copy_from_slice(&m);
        variance.row_mut(i).copy_from_slice(&v);
        ssv.row_mut(i).copy_from_slice(&s);
        let det = s[0] + s[1] + s[2];
        let target = match k {
            1 | 2 | 4 => det + interaction,
            _ => det + interaction + noise.sample(&mut rng),
        };
        y.push(target);
    }
    Ok(DatasetTabular {
        x,
        y,
        task: Task::Regression,
        latent: Some(Latent {
            mean,
            variance,
            ssv,
            offsets: synth_offsets(k),
        }),
    })
}

/// Per-feature logit weights of [`gen_logit`].
pub const LOGIT_WEIGHTS: [f64; 3] = [2.5, -2.0, 1.5];

/// Binary classification data: additive logit `Σ w_d x_d`, labels `~ Bernoulli(sigmoid(logit))`.
pub fn gen_logit(n: usize, seed: u64) -> Result<DatasetTabular> {
    if n == 0 {
        return Err(Error::Domain("dataset size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = LOGIT_WEIGHTS.len();
    let x = uniform_inputs(n, d, &mut rng);
    let mean = Matrix::from_fn(n, d, |i, j| LOGIT_WEIGHTS[j] * x.get(i, j));
    let y = (0..n)
        .map(|i| {
            let logit: f64 = mean.row(i).iter().sum();
            f64::from(u8::from(rng.random_bool(sigmoid(logit))))
        })
        .collect();
    Ok(DatasetTabular {
        x,
        y,
        task: Task::Classification,
        latent: Some(Latent {
            ssv: mean.clone(),
            mean,
            variance: Matrix::zeros(n, d),
            offsets: vec![0.0; d],
        }),
    })
}

/// Column-wise z-scoring fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    /// Target statistics; `None` for classification.
    pub y_mean: Option<f64>,
    pub y_std: Option<f64>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Standardizer {
    pub fn fit(data: &DatasetTabular) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Config("cannot standardize an empty dataset".into()));
        }
        let mut x_mean = Vec::new();
        let mut x_std = Vec::new();
        for j in 0..data.n_features() {
            let (m, s) = mean_std((0..data.len()).map(|i| data.x.get(i, j)));
            if !(s > 0.0) {
                return Err(Error::Config(format!("feature column x{} is constant", j + 1)));
            }
            x_mean.push(m);
            x_std.push(s);
        }
        let (y_mean, y_std) = match data.task {
            Task::Regression => {
                let (m, s) = mean_std(data.y.iter().copied());
                if !(s > 0.0) {
                    return Err(Error::Config("target column y is constant".into()));
                }
                (Some(m), Some(s))
            }
            Task::Classification => (None, None),
        };
        Ok(Standardizer {
            x_mean,
            x_std,
            y_mean,
            y_std,
        })
    }

    pub fn apply_x(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |i, j| (x.get(i, j) - self.x_mean[j]) / self.x_std[j])
    }

    pub fn invert_x(&self, z: &Matrix) -> Matrix {
        Matrix::from_fn(z.rows(), z.cols(), |i, j| z.get(i, j) * self.x_std[j] + self.x_mean[j])
    }

    pub fn apply_y(&self, y: f64) -> f64 {
        match (self.y_mean, self.y_std) {
            (Some(m), Some(s)) => (y - m) / s,
            _ => y,
        }
    }

    pub fn invert_y(&self, z: f64) -> f64 {
        match (self.y_mean, self.y_std) {
            (Some(m), Some(s)) => z * s + m,
            _ => z,
        }
    }

    /// Scale of the target (1 for classification); attributions rescale by it.
    pub fn y_scale(&self) -> f64 {
        self.y_std.unwrap_or(1.0)
    }

    pub fn apply(&self, data: &DatasetTabular) -> DatasetTabular {
        DatasetTabular {
            x: self.apply_x(&data.x),
            y: data.y.iter().map(|&v| self.apply_y(v)).collect(),
            task: data.task,
            latent: data.latent.clone(),
        }
    }

    pub fn invert(&self, data: &DatasetTabular) -> DatasetTabular {
        DatasetTabular {
            x: self.invert_x(&data.x),
            y: data.y.iter().map(|&v| self.invert_y(v)).collect(),
            task: data.task,
            latent: data.latent.clone(),
        }
    }
}

/// Fits on `data` and returns the standardized copy with the statistics.
pub fn standardize_fit_apply(data: &DatasetTabular) -> Result<(DatasetTabular, Standardizer)> {
    let s = Standardizer::fit(data)?;
    Ok((s.apply(data), s))
}

/// `(train, test)` index pairs of a shuffled k-fold partition.
pub fn kfold_split(n: usize, folds: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    if folds > n {
        return Err(Error::Config(format!("{folds} folds requested for {n} rows")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / folds;
    let extra = n % folds;
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for k in 0..folds {
        let len = base + usize::from(k < extra);
        let mut test = order[start..start + len].to_vec();
        let mut train: Vec<usize> = order[..start].iter().chain(&order[start + len..]).copied().collect();
        test.sort_unstable();
        train.sort_unstable();
        out.push((train, test));
        start += len;
    }
    Ok(out)
}
