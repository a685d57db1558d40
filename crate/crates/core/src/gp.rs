//! Exact Gaussian-process regression of a scalar against arc length with a
//! rational quadratic kernel.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{DemoLog, Variable};
use crate::io::{fmt_f64, read_json, write_atomic, write_json, CsvTable};

/// Two-sided 99% Gaussian quantile.
pub const CI_MULTIPLIER: f64 = 2.576;
pub const JITTER: f64 = 1e-8;
/// Points kept for conditioning.
pub const TRAINING_CAP: usize = 2000;
/// Points used for the hyperparameter search (each step inverts the Gram matrix).
pub const HYPER_CAP: usize = 300;
pub const GRID_SPACING: f64 = 5.0;
pub const COVERAGE_TARGET: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RqParams {
    pub signal_var: f64,
    pub length_scale: f64,
    pub alpha: f64,
}

impl RqParams {
    fn to_log(self) -> [f64; 3] {
        [self.signal_var.ln(), self.length_scale.ln(), self.alpha.ln()]
    }

    fn from_log(v: [f64; 3]) -> Self {
        RqParams {
            signal_var: v[0].exp(),
            length_scale: v[1].exp(),
            alpha: v[2].exp(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.signal_var) && ok(self.length_scale) && ok(self.alpha) {
            Ok(())
        } else {
            Err(Error::Invalid(format!("kernel parameters must be positive: {self:?}")))
        }
    }
}

pub fn rq_kernel(x: f64, x2: f64, p: &RqParams) -> f64 {
    let r = x - x2;
    p.signal_var * (1.0 + r * r / (2.0 * p.alpha * p.length_scale * p.length_scale)).powf(-p.alpha)
}

/// Kernel value and its derivatives with respect to the log parameters.
fn rq_kernel_grad(r: f64, p: &RqParams) -> (f64, [f64; 3]) {
    let u = r * r / (2.0 * p.alpha * p.length_scale * p.length_scale);
    let k = p.signal_var * (1.0 + u).powf(-p.alpha);
    let d_ell = k * 2.0 * p.alpha * u / (1.0 + u);
    let d_alpha = k * p.alpha * (u / (1.0 + u) - u.ln_1p());
    (k, [k, d_ell, d_alpha])
}

fn gram(x: &[f64], p: &RqParams, noise_var: f64) -> DMatrix<f64> {
    let n = x.len();
    let diag = noise_var + JITTER * p.signal_var;
    DMatrix::from_fn(n, n, |i, j| {
        rq_kernel(x[i], x[j], p) + if i == j { diag } else { 0.0 }
    })
}

fn cross(x: &[f64], xs: &[f64], p: &RqParams) -> DMatrix<f64> {
    DMatrix::from_fn(x.len(), xs.len(), |i, j| rq_kernel(x[i], xs[j], p))
}

fn factor(m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or_else(|| Error::Numerical("Gram matrix is not positive definite".into()))
}

/// Log marginal likelihood and its gradient in log-parameter space
/// (signal variance, length scale, alpha). Noise and prior mean are held fixed.
pub fn log_marginal_likelihood(
    x: &[f64],
    y: &[f64],
    p: &RqParams,
    noise_var: f64,
    prior_mean: f64,
) -> Result<(f64, [f64; 3])> {
    let n = x.len();
    let chol = factor(gram(x, p, noise_var))?;
    let r = DVector::from_iterator(n, y.iter().map(|v| v - prior_mean));
    let a = chol.solve(&r);
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let lml = -0.5 * r.dot(&a) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if !lml.is_finite() {
        return Err(Error::NonFinite(format!("log marginal likelihood at {p:?}")));
    }
    let kinv = chol.inverse();
    let mut grad = [0.0; 3];
    for i in 0..n {
        for j in 0..n {
            let (_, dk) = rq_kernel_grad(x[i] - x[j], p);
            let w = a[i] * a[j] - kinv[(i, j)];
            for g in 0..3 {
                grad[g] += w * dk[g];
            }
        }
        // jitter scales with the signal variance
        grad[0] += (a[i] * a[i] - kinv[(i, i)]) * JITTER * p.signal_var;
    }
    for g in &mut grad {
        *g *= 0.5;
    }
    Ok((lml, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Starting points; `None` derives five from the data.
    pub inits: Option<Vec<RqParams>>,
    /// Fixed observation noise during the search; `None` estimates it from
    /// neighbouring differences.
    pub noise_var: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
    pub hyper_cap: usize,
    pub cap: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            inits: None,
            noise_var: None,
            max_iter: 200,
            tol: 1e-6,
            hyper_cap: HYPER_CAP,
            cap: TRAINING_CAP,
        }
    }
}

/// Extra bookkeeping stored alongside a model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub variable: Option<Variable>,
    pub track_id: String,
    pub lap_length: f64,
}

#[derive(Debug, Clone)]
pub struct GpModel {
    pub params: RqParams,
    pub noise_var: f64,
    pub prior_mean: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub info: ModelInfo,
    chol: Cholesky<f64, Dyn>,
    weights: DVector<f64>,
}

impl PartialEq for GpModel {
    fn eq(&self, o: &Self) -> bool {
        self.params == o.params
            && self.noise_var == o.noise_var
            && self.prior_mean == o.prior_mean
            && self.x == o.x
            && self.y == o.y
            && self.info == o.info
    }
}

impl GpModel {
    pub fn new(x: Vec<f64>, y: Vec<f64>, params: RqParams, noise_var: f64, prior_mean: f64) -> Result<Self> {
        params.validate()?;
        if x.len() != y.len() {
            return Err(Error::Dimension {
                what: "GP targets",
                expected: x.len(),
                got: y.len(),
            });
        }
        if x.is_empty() {
            return Err(Error::Invalid("GP needs at least one point".into()));
        }
        if !(noise_var.is_finite() && noise_var > 0.0) {
            return Err(Error::Invalid(format!("noise variance must be positive, got {noise_var}")));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) || !prior_mean.is_finite() {
            return Err(Error::NonFinite("GP training data".into()));
        }
        let chol = factor(gram(&x, &params, noise_var))?;
        let r = DVector::from_iterator(y.len(), y.iter().map(|v| v - prior_mean));
        let weights = chol.solve(&r);
        Ok(GpModel {
            params,
            noise_var,
            prior_mean,
            x,
            y,
            info: ModelInfo::default(),
            chol,
            weights,
        })
    }

    pub fn with_noise(&self, noise_var: f64) -> Result<Self> {
        let mut m = GpModel::new(self.x.clone(), self.y.clone(), self.params, noise_var, self.prior_mean)?;
        m.info = self.info.clone();
        Ok(m)
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.x.len() as f64;
        let r = DVector::from_iterator(self.y.len(), self.y.iter().map(|v| v - self.prior_mean));
        let log_det: f64 = self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        -0.5 * r.dot(&self.weights) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    pub fn posterior_mean(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter()
            .map(|&q| {
                self.prior_mean
                    + self
                        .x
                        .iter()
                        .zip(self.weights.iter())
                        .map(|(x, w)| rq_kernel(*x, q, &self.params) * w)
                        .sum::<f64>()
            })
            .collect()
    }

    /// Latent posterior means and variances at `xs`.
    pub fn posterior(&self, xs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        if xs.is_empty() {
            return (vec![], vec![]);
        }
        let ks = cross(&self.x, xs, &self.params);
        let mean = ks.tr_mul(&self.weights);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .expect("factor has a nonzero diagonal");
        let var = (0..xs.len())
            .map(|j| (self.params.signal_var - v.column(j).norm_squared()).max(0.0))
            .collect();
        (mean.iter().map(|m| m + self.prior_mean).collect(), var)
    }

    /// Joint latent posterior mean and covariance at `xs`.
    pub fn posterior_cov(&self, xs: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let ks = cross(&self.x, xs, &self.params);
        let mean = ks.tr_mul(&self.weights);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .expect("factor has a nonzero diagonal");
        let prior = DMatrix::from_fn(xs.len(), xs.len(), |i, j| rq_kernel(xs[i], xs[j], &self.params));
        let cov = prior - v.tr_mul(&v);
        (mean.iter().map(|m| m + self.prior_mean).collect(), cov)
    }

    /// Mean and 99% band of the predictive distribution (latent variance plus noise).
    pub fn band(&self, xs: &[f64]) -> Band {
        let (mean, var) = self.posterior(xs);
        let half: Vec<f64> = var
            .iter()
            .map(|v| CI_MULTIPLIER * (v + self.noise_var).sqrt())
            .collect();
        Band {
            grid: xs.to_vec(),
            lower: mean.iter().zip(&half).map(|(m, h)| m - h).collect(),
            upper: mean.iter().zip(&half).map(|(m, h)| m + h).collect(),
            mean,
        }
    }

    /// Predictive standard deviation at `xs`.
    pub fn predictive_std(&self, xs: &[f64]) -> Vec<f64> {
        self.posterior(xs).1.iter().map(|v| (v + self.noise_var).sqrt()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &ModelFile::from(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: ModelFile = read_json(path)?;
        if f.format != MODEL_FORMAT {
            return Err(Error::Invalid(format!(
                "{}: unsupported model format `{}`",
                path.display(),
                f.format
            )));
        }
        let mut m = GpModel::new(f.x, f.y, f.params, f.noise_var, f.prior_mean)?;
        m.info = f.info;
        Ok(m)
    }
}

const MODEL_FORMAT: &str = "gp-rq-1";

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    info: ModelInfo,
    params: RqParams,
    noise_var: f64,
    prior_mean: f64,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl From<&GpModel> for ModelFile {
    fn from(m: &GpModel) -> Self {
        ModelFile {
            format: MODEL_FORMAT.into(),
            info: m.info.clone(),
            params: m.params,
            noise_var: m.noise_var,
            prior_mean: m.prior_mean,
            x: m.x.clone(),
            y: m.y.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Evenly spaced indices, keeping both ends when thinning.
fn stratified(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    (0..cap)
        .map(|i| ((i as f64) * (n - 1) as f64 / (cap - 1) as f64).round() as usize)
        .collect()
}

fn sorted_pairs(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));
    (idx.iter().map(|&i| x[i]).collect(), idx.iter().map(|&i| y[i]).collect())
}

fn subsample(x: &[f64], y: &[f64], cap: usize) -> (Vec<f64>, Vec<f64>) {
    let keep = stratified(x.len(), cap);
    (keep.iter().map(|&i| x[i]).collect(), keep.iter().map(|&i| y[i]).collect())
}

/// Noise level from first differences of arc-length-sorted targets.
pub fn difference_noise_estimate(ys_sorted: &[f64]) -> f64 {
    let n = ys_sorted.len();
    if n < 2 {
        return 1e-2;
    }
    let s: f64 = ys_sorted.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    (s / (2.0 * (n - 1) as f64)).max(1e-6)
}

fn mean_var(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let m = y.iter().sum::<f64>() / n;
    let v = y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    (m, v)
}

/// The five default starting points, scaled to the data.
pub fn default_inits(x: &[f64], y: &[f64]) -> Vec<RqParams> {
    let (_, var) = mean_var(y);
    let var = var.max(1e-4);
    let span = (x.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - x.iter().cloned().fold(f64::INFINITY, f64::min))
    .max(1.0);
    let p = |s: f64, l: f64, a: f64| RqParams {
        signal_var: var * s,
        length_scale: span * l,
        alpha: a,
    };
    vec![
        p(1.0, 0.02, 1.0),
        p(1.0, 0.005, 1.0),
        p(1.0, 0.05, 1.0),
        p(0.5, 0.01, 0.3),
        p(2.0, 0.01, 5.0),
    ]
}

const LOG_BOUNDS: [(f64, f64); 3] = [(-18.4, 13.8), (-4.6, 16.0), (-6.9, 6.9)];

fn clamp_log(mut v: [f64; 3]) -> [f64; 3] {
    for (x, (lo, hi)) in v.iter_mut().zip(LOG_BOUNDS) {
        *x = x.clamp(lo, hi);
    }
    v
}

fn lml_value(x: &[f64], y: &[f64], p: &RqParams, noise_var: f64, prior_mean: f64) -> Option<f64> {
    let chol = Cholesky::new(gram(x, p, noise_var))?;
    let r = DVector::from_iterator(x.len(), y.iter().map(|v| v - prior_mean));
    let a = chol.solve(&r);
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let v = -0.5 * r.dot(&a) - 0.5 * log_det - 0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI).ln();
    v.is_finite().then_some(v)
}

/// Quasi-Newton (BFGS) ascent in log-parameter space with a backtracking
/// line search. Gradients are only evaluated at accepted points.
fn ascend(
    x: &[f64],
    y: &[f64],
    init: RqParams,
    noise_var: f64,
    mean: f64,
    opts: &FitOptions,
) -> Result<(RqParams, f64)> {
    let mut theta = clamp_log(init.to_log());
    let (mut lml, mut grad) = log_marginal_likelihood(x, y, &RqParams::from_log(theta), noise_var, mean)?;
    // inverse Hessian estimate of the negated objective
    let mut h = [[0.0; 3]; 3];
    let reset = |h: &mut [[f64; 3]; 3], g: &[f64; 3]| {
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        *h = [[0.0; 3]; 3];
        for (i, row) in h.iter_mut().enumerate() {
            row[i] = 0.5 / gn;
        }
    };
    reset(&mut h, &grad);
    for _ in 0..opts.max_iter {
        let mut dir: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| h[i][j] * grad[j]).sum());
        let mut slope: f64 = (0..3).map(|i| dir[i] * grad[i]).sum();
        if slope <= 0.0 {
            reset(&mut h, &grad);
            dir = std::array::from_fn(|i| h[i][i] * grad[i]);
            slope = (0..3).map(|i| dir[i] * grad[i]).sum();
        }
        // keep single steps within a factor of e^2 per parameter
        let big = dir.iter().map(|d| d.abs()).fold(0.0, f64::max);
        let mut t = if big > 2.0 { 2.0 / big } else { 1.0 };
        let mut accepted = None;
        while t > 1e-10 {
            let cand = clamp_log(std::array::from_fn(|i| theta[i] + t * dir[i]));
            if let Some(l) = lml_value(x, y, &RqParams::from_log(cand), noise_var, mean) {
                if l >= lml + 1e-4 * t * slope {
                    accepted = Some((cand, l));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((cand, l)) = accepted else { break };
        let (_, g) = log_marginal_likelihood(x, y, &RqParams::from_log(cand), noise_var, mean)?;
        let gain = l - lml;
        let s: [f64; 3] = std::array::from_fn(|i| cand[i] - theta[i]);
        // curvature pair for the minimization of -lml
        let yv: [f64; 3] = std::array::from_fn(|i| grad[i] - g[i]);
        let sy: f64 = (0..3).map(|i| s[i] * yv[i]).sum();
        if sy > 1e-12 {
            let hy: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| h[i][j] * yv[j]).sum());
            let yhy: f64 = (0..3).map(|i| yv[i] * hy[i]).sum();
            for i in 0..3 {
                for j in 0..3 {
                    h[i][j] += (sy + yhy) * s[i] * s[j] / (sy * sy) - (hy[i] * s[j] + s[i] * hy[j]) / sy;
                }
            }
        }
        theta = cand;
        lml = l;
        grad = g;
        if gain < opts.tol {
            break;
        }
    }
    Ok((RqParams::from_log(theta), lml))
}

/// Fits kernel hyperparameters by multi-start ascent on a thinned copy of the
/// data, then conditions on up to `opts.cap` points. Noise stays at its
/// initial value; use [`tune_noise`] afterwards.
pub fn fit(x: &[f64], y: &[f64], opts: &FitOptions) -> Result<GpModel> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            what: "GP targets",
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::Invalid("GP fit needs at least two points".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("GP training data".into()));
    }
    let (xs, ys) = sorted_pairs(x, y);
    let noise = match opts.noise_var {
        Some(v) => v,
        None => difference_noise_estimate(&ys),
    };
    let (cx, cy) = subsample(&xs, &ys, opts.cap);
    let (hx, hy) = subsample(&cx, &cy, opts.hyper_cap);
    let (mean, _) = mean_var(&cy);
    let inits = opts.inits.clone().unwrap_or_else(|| default_inits(&cx, &cy));
    let mut best: Option<(RqParams, f64)> = None;
    let mut last_err = None;
    for init in inits {
        init.validate()?;
        match ascend(&hx, &hy, init, noise, mean, opts) {
            Ok((p, l)) => {
                if best.is_none_or(|(_, b)| l > b) {
                    best = Some((p, l));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let (params, _) = best.ok_or_else(|| {
        last_err.unwrap_or_else(|| Error::Numerical("no initialization produced a finite likelihood".into()))
    })?;
    GpModel::new(cx, cy, params, noise, mean)
}

/// Candidate noise variances: 1e-6 to 1e2 in steps of sqrt(10).
pub fn noise_grid() -> Vec<f64> {
    (0..=16).map(|k| 1e-6 * 10f64.powf(k as f64 / 2.0)).collect()
}

/// Fraction of `(sigma, value)` points inside the predictive 99% band.
/// Means are exact; the latent variance, which varies on the kernel length
/// scale, is taken from a 5 m grid and interpolated linearly.
pub fn coverage(model: &GpModel, points: &[(f64, f64)]) -> f64 {
    if points.is_empty() {
        return 1.0;
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let mean = model.posterior_mean(&xs);
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = ((hi - lo) / GRID_SPACING).ceil().max(1.0) as usize;
    let h = (hi - lo) / n as f64;
    let grid: Vec<f64> = (0..=n).map(|i| lo + h * i as f64).collect();
    let (_, var) = model.posterior(&grid);
    let inside = points
        .iter()
        .zip(&mean)
        .filter(|((s, v), m)| {
            let va = if h > 0.0 {
                let f = ((s - lo) / h).clamp(0.0, n as f64);
                let i = (f.floor() as usize).min(n - 1);
                let w = f - i as f64;
                var[i] * (1.0 - w) + var[i + 1] * w
            } else {
                var[0]
            };
            (v - *m).abs() <= CI_MULTIPLIER * (va + model.noise_var).sqrt()
        })
        .count();
    inside as f64 / points.len() as f64
}

/// Smallest grid noise whose predictive band covers 99% of the raw rounds.
/// Returns the refactored model.
pub fn tune_noise(model: &GpModel, rounds: &[Vec<(f64, f64)>]) -> Result<GpModel> {
    if rounds.len() < 2 {
        return Err(Error::Invalid(format!(
            "noise tuning needs at least 2 rounds, got {}",
            rounds.len()
        )));
    }
    let points: Vec<(f64, f64)> = rounds.iter().flatten().copied().collect();
    let mut best = 0.0f64;
    for noise in noise_grid() {
        let Ok(m) = model.with_noise(noise) else { continue };
        let c = coverage(&m, &points);
        if c >= COVERAGE_TARGET {
            return Ok(m);
        }
        best = best.max(c);
    }
    Err(Error::Coverage { coverage: best })
}

/// Demo pipeline: pair (sigma, value) per round, fit, tune noise.
pub fn fit_demo(demo: &DemoLog, variable: Variable, lap_length: f64) -> Result<GpModel> {
    let rounds: Vec<Vec<(f64, f64)>> = demo
        .rounds
        .iter()
        .map(|r| r.iter().map(|rec| (rec.sigma, variable.of(rec))).collect())
        .collect();
    fit_rounds(&rounds, variable, &demo.track_id, lap_length)
}

pub fn fit_rounds(
    rounds: &[Vec<(f64, f64)>],
    variable: Variable,
    track_id: &str,
    lap_length: f64,
) -> Result<GpModel> {
    let (x, y): (Vec<f64>, Vec<f64>) = rounds.iter().flatten().copied().unzip();
    let model = fit(&x, &y, &FitOptions::default())?;
    let mut tuned = tune_noise(&model, rounds)?;
    tuned.info = ModelInfo {
        variable: Some(variable),
        track_id: track_id.to_string(),
        lap_length,
    };
    Ok(tuned)
}

/// Grid on `[0, lap_length)` with spacing as close to 5 m as divides the lap.
pub fn sample_grid(lap_length: f64) -> Vec<f64> {
    let n = (lap_length / GRID_SPACING).round().max(1.0) as usize;
    let h = lap_length / n as f64;
    (0..n).map(|i| i as f64 * h).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub j: usize,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

pub const MAX_SAMPLE_ATTEMPTS: usize = 100_000;
pub const MIN_ACCEPTANCE: f64 = 1e-3;

/// Joint sampler on a fixed grid. The noise part of the covariance is
/// correlated like the kernel so that draws are smooth paths.
pub struct PathSampler {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    /// Pointwise predictive standard deviation.
    pub sd: Vec<f64>,
    factor: DMatrix<f64>,
}

impl PathSampler {
    pub fn new(model: &GpModel, grid: &[f64]) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::Invalid("empty sample grid".into()));
        }
        let g = grid.len();
        let (mean, latent) = model.posterior_cov(grid);
        let scale = model.noise_var / model.params.signal_var;
        let mut cov = DMatrix::from_fn(g, g, |i, j| {
            latent[(i, j)] + scale * rq_kernel(grid[i], grid[j], &model.params)
        });
        let sd = (0..g)
            .map(|i| (latent[(i, i)].max(0.0) + model.noise_var).sqrt())
            .collect();
        for i in 0..g {
            cov[(i, i)] += JITTER * model.params.signal_var;
        }
        Ok(PathSampler {
            grid: grid.to_vec(),
            mean,
            sd,
            factor: factor(cov)?.l(),
        })
    }

    /// One unrestricted draw.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_fn(self.grid.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let d = &self.factor * z;
        self.mean.iter().zip(d.iter()).map(|(m, d)| m + d).collect()
    }

    pub fn within_band(&self, values: &[f64]) -> bool {
        values
            .iter()
            .zip(&self.mean)
            .zip(&self.sd)
            .all(|((v, m), s)| (v - m).abs() <= CI_MULTIPLIER * s)
    }
}

/// Draws until `n` samples lie inside the pointwise 99% band everywhere.
pub fn sample_trajectories<R: Rng + ?Sized>(
    model: &GpModel,
    grid: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<Vec<TrajectorySample>> {
    if n == 0 {
        return Err(Error::Invalid("n must be >= 1".into()));
    }
    let sampler = PathSampler::new(model, grid)?;
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        if attempts >= MAX_SAMPLE_ATTEMPTS {
            let rate = out.len() as f64 / attempts as f64;
            if rate < MIN_ACCEPTANCE {
                return Err(Error::Acceptance { rate, attempts });
            }
        }
        attempts += 1;
        let values = sampler.draw(rng);
        if sampler.within_band(&values) {
            out.push(TrajectorySample {
                j: out.len(),
                grid: grid.to_vec(),
                values,
            });
        }
    }
    Ok(out)
}

/// Writes samples as CSV `j,sigma,value` with metadata comments.
pub fn save_samples(path: &Path, samples: &[TrajectorySample], info: &ModelInfo) -> Result<()> {
    write_atomic(path, samples_to_csv(samples, info).as_bytes())
}

pub fn samples_to_csv(samples: &[TrajectorySample], info: &ModelInfo) -> String {
    let mut out = String::new();
    if let Some(v) = info.variable {
        out.push_str(&format!("# variable={v}\n"));
    }
    out.push_str(&format!("# track={}\n", info.track_id));
    out.push_str(&format!("# lap_length={}\n", fmt_f64(info.lap_length)));
    out.push_str("j,sigma,value\n");
    for s in samples {
        for (x, v) in s.grid.iter().zip(&s.values) {
            out.push_str(&format!("{},{},{}\n", s.j, fmt_f64(*x), fmt_f64(*v)));
        }
    }
    out
}

pub fn load_samples(path: &Path) -> Result<(Vec<TrajectorySample>, ModelInfo)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_samples(path, &text)
}

pub fn parse_samples(path: &Path, text: &str) -> Result<(Vec<TrajectorySample>, ModelInfo)> {
    let table = CsvTable::parse(path, text)?;
    let meta = |k: &str| {
        table
            .comments
            .iter()
            .find_map(|c| c.strip_prefix(&format!("{k}=")).map(str::to_string))
    };
    let info = ModelInfo {
        variable: meta("variable").map(|v| v.parse()).transpose()?,
        track_id: meta("track").unwrap_or_default(),
        lap_length: meta("lap_length").and_then(|v| v.parse().ok()).unwrap_or(0.0),
    };
    let col = |n: &str| {
        table
            .column(n)
            .ok_or_else(|| Error::Invalid(format!("{}: missing column `{n}`", path.display())))
    };
    let (cj, cs, cv) = (col("j")?, col("sigma")?, col("value")?);
    let mut samples: Vec<TrajectorySample> = Vec::new();
    for row in &table.rows {
        let j: usize = row.1[cj].parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: row.0,
            msg: format!("bad sample index `{}`", row.1[cj]),
        })?;
        if samples.last().is_none_or(|s| s.j != j) {
            if j != samples.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: row.0,
                    msg: format!("sample index {j} out of order"),
                });
            }
            samples.push(TrajectorySample {
                j,
                grid: vec![],
                values: vec![],
            });
        }
        let s = samples.last_mut().expect("pushed");
        s.grid.push(table.f64_at(path, row, cs)?);
        s.values.push(table.f64_at(path, row, cv)?);
    }
    if samples.is_empty() {
        return Err(Error::Invalid(format!("{}: no samples", path.display())));
    }
    if samples.iter().any(|s| s.grid != samples[0].grid) {
        return Err(Error::Invalid(format!("{}: samples use different grids", path.display())));
    }
    Ok((samples, info))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit() -> RqParams {
        RqParams {
            signal_var: 1.0,
            length_scale: 1.0,
            alpha: 1.0,
        }
    }

    #[test]
    fn kernel_values() {
        let p = unit();
        assert_eq!(rq_kernel(2.0, 2.0, &p), 1.0);
        assert!((rq_kernel(0.0, 1.0, &p) - 2.0 / 3.0).abs() < 1e-15);
        let q = RqParams {
            signal_var: 2.3,
            length_scale: 0.7,
            alpha: 3.1,
        };
        assert_eq!(rq_kernel(0.3, -1.9, &q), rq_kernel(-1.9, 0.3, &q));
    }

    #[test]
    fn kernel_gradient_matches_differences() {
        let p = RqParams {
            signal_var: 1.7,
            length_scale: 2.2,
            alpha: 0.6,
        };
        let (_, g) = rq_kernel_grad(1.3, &p);
        let l = p.to_log();
        for i in 0..3 {
            let h = 1e-6;
            let mut a = l;
            let mut b = l;
            a[i] += h;
            b[i] -= h;
            let fd = (rq_kernel(1.3, 0.0, &RqParams::from_log(a)) - rq_kernel(1.3, 0.0, &RqParams::from_log(b)))
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn two_point_posterior_by_hand() {
        let p = unit();
        let noise = 0.1;
        let m = GpModel::new(vec![0.0, 1.0], vec![1.0, -1.0], p, noise, 0.0).unwrap();
        let d = 1.0 + noise + JITTER;
        let o = 2.0 / 3.0;
        let det = d * d - o * o;
        let inv = [[d / det, -o / det], [-o / det, d / det]];
        let xs = 0.4;
        let k = [rq_kernel(xs, 0.0, &p), rq_kernel(xs, 1.0, &p)];
        let y = [1.0, -1.0];
        let mut mean = 0.0;
        let mut quad = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                mean += k[i] * inv[i][j] * y[j];
                quad += k[i] * inv[i][j] * k[j];
            }
        }
        let (pm, pv) = m.posterior(&[xs]);
        assert!((pm[0] - mean).abs() < 1e-10);
        assert!((pv[0] - (1.0 - quad)).abs() < 1e-10);
    }

    #[test]
    fn interpolates_with_tiny_noise_and_reverts_far_away() {
        let x = vec![0.0, 3.0, 7.0];
        let y = vec![1.0, 2.0, -1.0];
        let m = GpModel::new(x.clone(), y.clone(), unit(), 1e-12, 0.5).unwrap();
        let (mu, var) = m.posterior(&x);
        for i in 0..3 {
            assert!((mu[i] - y[i]).abs() < 1e-6);
            assert!(var[i] <= 1.0);
        }
        let (mu, var) = m.posterior(&[1e4]);
        assert!((mu[0] - 0.5).abs() < 1e-6);
        assert!((var[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tune_noise_picks_smallest_for_exact_data() {
        let x: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| (v / 6.0).sin()).collect();
        let p = RqParams {
            signal_var: 1.0,
            length_scale: 6.0,
            alpha: 2.0,
        };
        let m = GpModel::new(x.clone(), y.clone(), p, 1e-6, 0.0).unwrap();
        let rounds = vec![x.iter().copied().zip(y.iter().copied()).collect::<Vec<_>>(); 2];
        let t = tune_noise(&m, &rounds).unwrap();
        assert_eq!(t.noise_var, 1e-6);
    }

    #[test]
    fn tune_noise_needs_two_rounds() {
        let m = GpModel::new(vec![0.0, 1.0], vec![0.0, 0.0], unit(), 0.1, 0.0).unwrap();
        assert!(tune_noise(&m, &[vec![(0.0, 0.0)]]).is_err());
    }

    #[test]
    fn samples_round_trip() {
        let m = GpModel::new(vec![0.0, 10.0, 20.0], vec![0.0, 1.0, 0.0], RqParams { signal_var: 1.0, length_scale: 8.0, alpha: 1.0 }, 0.01, 0.0).unwrap();
        let grid = sample_grid(20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_trajectories(&m, &grid, 5, &mut rng).unwrap();
        assert_eq!(s.len(), 5);
        let info = ModelInfo {
            variable: Some(Variable::Trackpos),
            track_id: "desk".into(),
            lap_length: 20.0,
        };
        let text = samples_to_csv(&s, &info);
        let (back, binfo) = parse_samples(Path::new("s.csv"), &text).unwrap();
        assert_eq!(back, s);
        assert_eq!(binfo, info);
    }

    #[test]
    fn grid_spacing_divides_lap() {
        let g = sample_grid(600.0);
        assert_eq!(g.len(), 120);
        assert_eq!(g[1], 5.0);
        let g = sample_grid(4699.6);
        assert_eq!(g.len(), 940);
        assert!((g[1] - 4699.6 / 940.0).abs() < 1e-12);
    }
}
