//! Two-dimensional Bayesian optimisation in log10 space.
//!
//! A Gaussian process with an RBF-ARD kernel models the objective (PSNR)
//! in the unit square; Expected Improvement picks the next batch, with
//! constant-liar fantasies keeping the batch members apart.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{invalid, Error, Result};
use crate::rng::{stream, Stream};
use crate::trainer::Method;

/// Largest diagonal jitter tried before a factorisation is declared singular.
pub const MAX_JITTER: f64 = 1e-4;
/// Observation jitter used by the fitted surrogate.
pub const DEFAULT_JITTER: f64 = 1e-6;
pub const FIT_RESTARTS: usize = 8;
pub const ACQ_RESTARTS: usize = 64;
pub const GRID_SIDE: usize = 101;
pub const MAX_BATCH: usize = 4;
pub const DEFAULT_THREADS: usize = 4;

const LOG_SIGNAL_BOUNDS: (f64, f64) = (-4.0, 4.0);
const LOG_LENGTH_BOUNDS: (f64, f64) = (-4.0, 2.5);
const FIT_STEPS: usize = 150;
const ACQ_STEPS: usize = 60;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub name: String,
    /// log10 lower bound.
    pub lower: f64,
    /// log10 upper bound.
    pub upper: f64,
}

impl Axis {
    pub fn new(name: &str, lower: f64, upper: f64) -> Self {
        Axis { name: name.to_string(), lower, upper }
    }

    fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Rectangle in log10 coordinates. Points handed to objectives are log10
/// values; `values` maps them back through `10^v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub axes: [Axis; 2],
}

impl SearchSpace {
    pub fn new(x: Axis, y: Axis) -> Result<Self> {
        let s = SearchSpace { axes: [x, y] };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for a in &self.axes {
            if !(a.lower.is_finite() && a.upper.is_finite() && a.lower < a.upper) {
                return Err(invalid!("axis {} needs finite lower < upper, got [{}, {}]", a.name, a.lower, a.upper));
            }
        }
        Ok(())
    }

    /// Standard log10 bounds for a Bayesian method; DIP has nothing to tune.
    pub fn for_method(method: Method) -> Result<Self> {
        match method {
            Method::Potobim => SearchSpace::new(Axis::new("temperature", -12.0, -2.0), Axis::new("sigma_prior", -10.0, 0.0)),
            Method::Mcd => SearchSpace::new(Axis::new("weight_decay", -10.0, 0.0), Axis::new("dropout", -4.0, -0.1)),
            Method::Sgld => SearchSpace::new(Axis::new("weight_decay", -12.0, -2.0), Axis::new("lr_decay", -4e-4, 0.0)),
            Method::Dip => Err(invalid!("dip has no hyperparameters to optimise")),
        }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.axes.iter().zip(p).all(|(a, v)| v >= a.lower && v <= a.upper)
    }

    pub fn to_unit(&self, p: [f64; 2]) -> [f64; 2] {
        [0, 1].map(|i| (p[i] - self.axes[i].lower) / self.axes[i].width())
    }

    pub fn from_unit(&self, u: [f64; 2]) -> [f64; 2] {
        [0, 1].map(|i| self.axes[i].lower + u[i].clamp(0.0, 1.0) * self.axes[i].width())
    }

    pub fn values(&self, p: [f64; 2]) -> [f64; 2] {
        p.map(|v| 10f64.powf(v))
    }
}

/// The four BO seed points (log10), the product of two candidates per axis.
pub fn init_points(method: Method) -> Result<Vec<[f64; 2]>> {
    let (a, b): ([f64; 2], [f64; 2]) = match method {
        Method::Potobim => ([1e-4, 1e-7], [0.1, 1e-6]),
        Method::Mcd => ([0.1, 1e-6], [0.02, 0.2]),
        Method::Sgld => ([1e-4, 1e-8], [0.9995, 0.999999]),
        Method::Dip => return Err(invalid!("dip has no hyperparameters to optimise")),
    };
    Ok(grid_product(a, b))
}

pub fn grid_product(a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    a.iter().flat_map(|&x| b.iter().map(move |&y| [x.log10(), y.log10()])).collect()
}

/// RBF kernel with one length scale per axis, in unit-square coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub signal_variance: f64,
    pub length_scales: [f64; 2],
    pub jitter: f64,
}

impl Default for Kernel {
    fn default() -> Self {
        Kernel { signal_variance: 1.0, length_scales: [0.3, 0.3], jitter: DEFAULT_JITTER }
    }
}

impl Kernel {
    pub fn eval(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let d0 = (a[0] - b[0]) / self.length_scales[0];
        let d1 = (a[1] - b[1]) / self.length_scales[1];
        self.signal_variance * (-0.5 * (d0 * d0 + d1 * d1)).exp()
    }

    fn validate(&self) -> Result<()> {
        let ok = self.signal_variance > 0.0 && self.length_scales.iter().all(|&l| l > 0.0) && self.jitter >= 0.0;
        if !ok || !self.signal_variance.is_finite() || self.length_scales.iter().any(|l| !l.is_finite()) {
            return Err(invalid!("kernel hyperparameters must be positive and finite: {self:?}"));
        }
        Ok(())
    }
}

/// Lower-triangular Cholesky factor, row-major.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s.is_nan() || s <= 0.0 || s.is_infinite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solves `L z = b` in place.
fn forward_sub(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves `Lᵀ z = b` in place.
fn backward_sub(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Exact GP regression posterior on standardized outputs.
#[derive(Clone, Debug)]
pub struct Gp {
    kernel: Kernel,
    /// Jitter actually used after escalation.
    jitter: f64,
    x: Vec<[f64; 2]>,
    y: Vec<f64>,
    y_mean: f64,
    y_std: f64,
    chol: Vec<f64>,
    alpha: Vec<f64>,
}

impl Gp {
    /// Conditions on unit-square inputs `x` and raw outputs `y` with fixed
    /// kernel hyperparameters. Outputs are standardized internally; a
    /// constant set keeps unit scale.
    pub fn new(x: Vec<[f64; 2]>, y: &[f64], kernel: Kernel) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(invalid!("GP needs matching, non-empty inputs ({} points, {} values)", x.len(), y.len()));
        }
        if y.iter().any(|v| !v.is_finite()) || x.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid!("GP observations must be finite"));
        }
        kernel.validate()?;
        let n = y.len() as f64;
        let y_mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n;
        let y_std = if var > 1e-24 { var.sqrt() } else { 1.0 };
        let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_std).collect();
        Self::standardized(x, ys, y_mean, y_std, kernel)
    }

    fn standardized(x: Vec<[f64; 2]>, y: Vec<f64>, y_mean: f64, y_std: f64, kernel: Kernel) -> Result<Self> {
        let (chol, jitter) = factorize(&x, &kernel)?;
        let n = x.len();
        let mut alpha = y.clone();
        forward_sub(&chol, n, &mut alpha);
        backward_sub(&chol, n, &mut alpha);
        Ok(Gp { kernel, jitter, x, y, y_mean, y_std, chol, alpha })
    }

    /// Fits kernel hyperparameters by multi-start gradient ascent on the log
    /// marginal likelihood, then conditions on the data.
    pub fn fit(x: Vec<[f64; 2]>, y: &[f64], rng: &mut ChaCha8Rng) -> Result<Self> {
        let base = Gp::new(x, y, Kernel::default())?;
        let mut best: Option<(f64, Kernel)> = None;
        for restart in 0..FIT_RESTARTS {
            let start = if restart == 0 {
                [0.0, 0.3f64.ln(), 0.3f64.ln()]
            } else {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-2.5..0.5),
                    rng.gen_range(-2.5..0.5),
                ]
            };
            if let Some((lml, k)) = ascend_marginal(&base.x, &base.y, start) {
                if best.is_none_or(|(b, _)| lml > b) {
                    best = Some((lml, k));
                }
            }
        }
        let kernel = best.map(|(_, k)| k).unwrap_or_default();
        Self::standardized(base.x, base.y, base.y_mean, base.y_std, kernel)
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn inputs(&self) -> &[[f64; 2]] {
        &self.x
    }

    /// Observations in standardized units.
    pub fn standardized_outputs(&self) -> &[f64] {
        &self.y
    }

    pub fn standardize(&self, v: f64) -> f64 {
        (v - self.y_mean) / self.y_std
    }

    pub fn unstandardize(&self, v: f64) -> f64 {
        v * self.y_std + self.y_mean
    }

    /// Posterior mean and variance at `u` in standardized units; rounding
    /// residue below zero is clamped to zero.
    pub fn predict(&self, u: [f64; 2]) -> (f64, f64) {
        let (mean, var, _, _) = self.predict_grad(u, false);
        (mean, var)
    }

    /// Posterior mean and standard deviation in raw output units.
    pub fn predict_raw(&self, u: [f64; 2]) -> (f64, f64) {
        let (m, v) = self.predict(u);
        (self.unstandardize(m), v.sqrt() * self.y_std)
    }

    fn predict_grad(&self, u: [f64; 2], grad: bool) -> (f64, f64, [f64; 2], [f64; 2]) {
        let n = self.x.len();
        let k: Vec<f64> = self.x.iter().map(|&xi| self.kernel.eval(u, xi)).collect();
        let mean: f64 = k.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        let mut v = k.clone();
        forward_sub(&self.chol, n, &mut v);
        let var = (self.kernel.signal_variance - v.iter().map(|a| a * a).sum::<f64>()).max(0.0);
        if !grad {
            return (mean, var, [0.0; 2], [0.0; 2]);
        }
        // β = K⁻¹ k
        let mut beta = v;
        backward_sub(&self.chol, n, &mut beta);
        let mut dm = [0.0; 2];
        let mut dv = [0.0; 2];
        for (i, xi) in self.x.iter().enumerate() {
            for d in 0..2 {
                let l2 = self.kernel.length_scales[d].powi(2);
                let dk = -k[i] * (u[d] - xi[d]) / l2;
                dm[d] += dk * self.alpha[i];
                dv[d] -= 2.0 * beta[i] * dk;
            }
        }
        (mean, var, dm, dv)
    }

    fn with_fantasy(&self, u: [f64; 2], y_std_units: f64) -> Result<Gp> {
        let mut x = self.x.clone();
        let mut y = self.y.clone();
        x.push(u);
        y.push(y_std_units);
        Self::standardized(x, y, self.y_mean, self.y_std, self.kernel)
    }
}

fn gram(x: &[[f64; 2]], kernel: &Kernel, jitter: f64) -> Vec<f64> {
    let n = x.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.eval(x[i], x[j]);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
        k[i * n + i] += jitter;
    }
    k
}

/// Cholesky of the Gram matrix, escalating jitter tenfold up to `MAX_JITTER`.
fn factorize(x: &[[f64; 2]], kernel: &Kernel) -> Result<(Vec<f64>, f64)> {
    let mut jitter = kernel.jitter;
    loop {
        if let Some(l) = cholesky(&gram(x, kernel, jitter), x.len()) {
            return Ok((l, jitter));
        }
        if jitter >= MAX_JITTER {
            return Err(Error::NumericalFailure(format!("GP kernel matrix singular at jitter {jitter:e}")));
        }
        jitter = if jitter > 0.0 { (jitter * 10.0).min(MAX_JITTER) } else { 1e-12 };
    }
}

fn kernel_from_log(theta: [f64; 3]) -> Kernel {
    Kernel {
        signal_variance: theta[0].exp(),
        length_scales: [theta[1].exp(), theta[2].exp()],
        jitter: DEFAULT_JITTER,
    }
}

/// Log marginal likelihood and its gradient w.r.t. (log s², log ℓ₀, log ℓ₁).
fn log_marginal(x: &[[f64; 2]], y: &[f64], theta: [f64; 3]) -> Option<(f64, [f64; 3])> {
    let kernel = kernel_from_log(theta);
    let n = x.len();
    let (l, _) = factorize(x, &kernel).ok()?;
    let mut alpha = y.to_vec();
    forward_sub(&l, n, &mut alpha);
    backward_sub(&l, n, &mut alpha);
    let logdet: f64 = (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0;
    let fit: f64 = y.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    let lml = -0.5 * fit - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    // W = ααᵀ − K⁻¹
    let mut kinv = vec![0.0; n * n];
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        forward_sub(&l, n, &mut e);
        backward_sub(&l, n, &mut e);
        for i in 0..n {
            kinv[i * n + j] = e[i];
        }
    }
    let mut g = [0.0; 3];
    for i in 0..n {
        for j in 0..n {
            let w = alpha[i] * alpha[j] - kinv[i * n + j];
            let k = kernel.eval(x[i], x[j]);
            g[0] += w * k;
            for d in 0..2 {
                let r = (x[i][d] - x[j][d]) / kernel.length_scales[d];
                g[d + 1] += w * k * r * r;
            }
        }
    }
    let g = g.map(|v| 0.5 * v);
    lml.is_finite().then_some((lml, g))
}

fn clamp_theta(t: [f64; 3]) -> [f64; 3] {
    [
        t[0].clamp(LOG_SIGNAL_BOUNDS.0, LOG_SIGNAL_BOUNDS.1),
        t[1].clamp(LOG_LENGTH_BOUNDS.0, LOG_LENGTH_BOUNDS.1),
        t[2].clamp(LOG_LENGTH_BOUNDS.0, LOG_LENGTH_BOUNDS.1),
    ]
}

/// Projected gradient ascent with a backtracking step.
fn ascend_marginal(x: &[[f64; 2]], y: &[f64], start: [f64; 3]) -> Option<(f64, Kernel)> {
    let mut theta = clamp_theta(start);
    let (mut f, mut g) = log_marginal(x, y, theta)?;
    let mut step = 0.1;
    for _ in 0..FIT_STEPS {
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-9 {
            break;
        }
        let mut accepted = false;
        while step > 1e-8 {
            let cand = clamp_theta([0, 1, 2].map(|i| theta[i] + step * g[i] / norm));
            if let Some((fc, gc)) = log_marginal(x, y, cand) {
                if fc > f {
                    theta = cand;
                    f = fc;
                    g = gc;
                    step *= 1.5;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Some((f, kernel_from_log(theta)))
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Expected Improvement of `y ~ N(mu, sd²)` over the incumbent `f_star`.
pub fn ei(mu: f64, sd: f64, f_star: f64) -> f64 {
    if sd <= 0.0 {
        return (mu - f_star).max(0.0);
    }
    let z = (mu - f_star) / sd;
    ((mu - f_star) * std_normal_cdf(z) + sd * std_normal_pdf(z)).max(0.0)
}

/// EI at `u` and its gradient in the unit square.
fn ei_grad(gp: &Gp, u: [f64; 2], f_star: f64) -> (f64, [f64; 2]) {
    let (m, v, dm, dv) = gp.predict_grad(u, true);
    let sd = v.sqrt();
    if sd < 1e-12 {
        return ((m - f_star).max(0.0), if m > f_star { dm } else { [0.0; 2] });
    }
    let z = (m - f_star) / sd;
    let (cdf, pdf) = (std_normal_cdf(z), std_normal_pdf(z));
    let val = ((m - f_star) * cdf + sd * pdf).max(0.0);
    // dEI/dm = Φ(z), dEI/dsd = φ(z), dsd = dv / (2 sd)
    let g = [0, 1].map(|d| cdf * dm[d] + pdf * dv[d] / (2.0 * sd));
    (val, g)
}

fn ascend_ei(gp: &Gp, start: [f64; 2], f_star: f64) -> ([f64; 2], f64) {
    let mut u = start;
    let (mut f, mut g) = ei_grad(gp, u, f_star);
    let mut step = 0.05;
    for _ in 0..ACQ_STEPS {
        let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        if norm < 1e-14 {
            break;
        }
        let mut accepted = false;
        while step > 1e-7 {
            let cand = [0, 1].map(|d| (u[d] + step * g[d] / norm).clamp(0.0, 1.0));
            let (fc, gc) = ei_grad(gp, cand, f_star);
            if fc > f {
                u = cand;
                f = fc;
                g = gc;
                step *= 1.5;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (u, f)
}

/// Maximizer of `score` over a `GRID_SIDE`² lattice of the unit square.
fn grid_argmax(score: impl Fn([f64; 2]) -> f64) -> ([f64; 2], f64) {
    let mut best = ([0.5, 0.5], f64::NEG_INFINITY);
    let step = 1.0 / (GRID_SIDE - 1) as f64;
    for i in 0..GRID_SIDE {
        for j in 0..GRID_SIDE {
            let u = [i as f64 * step, j as f64 * step];
            let s = score(u);
            if s > best.1 {
                best = (u, s);
            }
        }
    }
    best
}

/// Maximizes EI once: 64 projected-ascent restarts, with a grid search when
/// the EI surface is numerically flat.
pub fn maximize_ei(gp: &Gp, f_star: f64, rng: &mut ChaCha8Rng) -> [f64; 2] {
    let mut best = ([0.5, 0.5], f64::NEG_INFINITY);
    for _ in 0..ACQ_RESTARTS {
        let start = [rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0)];
        let (u, f) = ascend_ei(gp, start, f_star);
        if f > best.1 {
            best = (u, f);
        }
    }
    if best.1.is_finite() && best.1 > 1e-12 {
        return best.0;
    }
    let (u, f) = grid_argmax(|u| {
        let (m, v) = gp.predict(u);
        ei(m, v.sqrt(), f_star)
    });
    if f > 1e-12 {
        return u;
    }
    grid_argmax(|u| gp.predict(u).1).0
}

/// Proposes `batch` unit-square candidates. After each pick the surrogate is
/// conditioned on a fantasy observation at the incumbent value `f_star`
/// (standardized units).
pub fn propose(gp: &Gp, f_star: f64, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<[f64; 2]>> {
    if batch == 0 || batch > MAX_BATCH {
        return Err(invalid!("batch size must be in 1..={MAX_BATCH}, got {batch}"));
    }
    let mut model = gp.clone();
    let mut out = Vec::with_capacity(batch);
    for b in 0..batch {
        let u = maximize_ei(&model, f_star, rng);
        out.push(u);
        if b + 1 < batch {
            model = model.with_fantasy(u, f_star)?;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub round: usize,
    /// log10 coordinates.
    pub point: [f64; 2],
    /// `None` when the objective failed at this point.
    pub value: Option<f64>,
    /// Seconds since the loop started, at completion of this evaluation.
    pub wall_time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoConfig {
    /// Fit-propose-evaluate rounds after the initial points.
    pub iterations: usize,
    pub batch: usize,
    /// Concurrent objective evaluations per batch.
    pub threads: usize,
    pub seed: u64,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig { iterations: 11, batch: MAX_BATCH, threads: DEFAULT_THREADS, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct BoOutcome {
    pub best_point: [f64; 2],
    pub best_value: f64,
    pub history: Vec<HistoryRow>,
    /// Incumbent value after each round, starting with the initial points.
    pub incumbents: Vec<f64>,
    /// Surrogate fitted to every successful observation.
    pub surrogate: Gp,
}

impl BoOutcome {
    pub fn write_history(&self, w: &mut impl Write) -> Result<()> {
        for row in &self.history {
            serde_json::to_writer(&mut *w, row)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

fn evaluate_batch<F>(objective: &F, points: &[[f64; 2]], threads: usize, t0: Instant) -> Vec<(Option<f64>, f64)>
where
    F: Fn([f64; 2]) -> Result<f64> + Sync,
{
    let run = |p: [f64; 2]| {
        let v = objective(p).ok().filter(|v| v.is_finite());
        (v, t0.elapsed().as_secs_f64())
    };
    let mut out = Vec::with_capacity(points.len());
    for chunk in points.chunks(threads.max(1)) {
        if chunk.len() == 1 {
            out.push(run(chunk[0]));
            continue;
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&p| s.spawn(move || run(p))).collect();
            out.extend(handles.into_iter().map(|h| h.join().unwrap_or((None, t0.elapsed().as_secs_f64()))));
        });
    }
    out
}

/// Maximizes `objective` (a log10 point to a score) over `space`.
///
/// Failed or non-finite evaluations are recorded as missing and skipped by
/// the surrogate. Fails only if every evaluation failed.
pub fn bo_loop<F>(space: &SearchSpace, objective: F, init: &[[f64; 2]], cfg: &BoConfig) -> Result<BoOutcome>
where
    F: Fn([f64; 2]) -> Result<f64> + Sync,
{
    space.validate()?;
    if init.is_empty() {
        return Err(invalid!("BO needs at least one initial point"));
    }
    if let Some(p) = init.iter().find(|p| !space.contains(**p)) {
        return Err(invalid!("initial point {p:?} lies outside the search space"));
    }
    if cfg.batch == 0 || cfg.batch > MAX_BATCH {
        return Err(invalid!("batch size must be in 1..={MAX_BATCH}, got {}", cfg.batch));
    }
    let mut rng = stream(cfg.seed, Stream::Bo);
    let t0 = Instant::now();
    let mut history = Vec::new();
    let mut incumbents = Vec::new();
    let record = |round: usize, points: &[[f64; 2]], history: &mut Vec<HistoryRow>| {
        for (&point, (value, wall_time)) in points.iter().zip(evaluate_batch(&objective, points, cfg.threads, t0)) {
            history.push(HistoryRow { round, point, value, wall_time });
        }
    };
    record(0, init, &mut history);
    incumbents.push(incumbent(&history).map_or(f64::NEG_INFINITY, |(_, v)| v));
    for round in 1..=cfg.iterations {
        let points: Vec<[f64; 2]> = match surrogate(space, &history, &mut rng)? {
            Some(gp) => {
                let f_star = gp.standardized_outputs().iter().copied().fold(f64::NEG_INFINITY, f64::max);
                propose(&gp, f_star, cfg.batch, &mut rng)?.into_iter().map(|u| space.from_unit(u)).collect()
            }
            None => (0..cfg.batch)
                .map(|_| space.from_unit([rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0)]))
                .collect(),
        };
        record(round, &points, &mut history);
        incumbents.push(incumbent(&history).map_or(f64::NEG_INFINITY, |(_, v)| v));
    }
    let (best_point, best_value) =
        incumbent(&history).ok_or_else(|| Error::NumericalFailure("every BO evaluation failed".into()))?;
    let surrogate = surrogate(space, &history, &mut rng)?.expect("at least one successful observation");
    Ok(BoOutcome { best_point, best_value, history, incumbents, surrogate })
}

fn incumbent(history: &[HistoryRow]) -> Option<([f64; 2], f64)> {
    history
        .iter()
        .filter_map(|r| r.value.map(|v| (r.point, v)))
        .fold(None, |best, (p, v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((p, v)),
        })
}

/// GP fitted to the successful rows, or `None` if there are none.
pub fn surrogate(space: &SearchSpace, history: &[HistoryRow], rng: &mut ChaCha8Rng) -> Result<Option<Gp>> {
    let (x, y): (Vec<[f64; 2]>, Vec<f64>) =
        history.iter().filter_map(|r| r.value.map(|v| (space.to_unit(r.point), v))).unzip();
    if x.is_empty() {
        return Ok(None);
    }
    Gp::fit(x, &y, rng).map(Some)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GridRow {
    /// log10 coordinates.
    pub x: f64,
    pub y: f64,
    /// Posterior mean and standard deviation in objective units.
    pub mean: f64,
    pub sd: f64,
}

/// Posterior on a `GRID_SIDE`² lattice covering the search space, x-major.
pub fn posterior_grid(gp: &Gp, space: &SearchSpace) -> Vec<GridRow> {
    let step = 1.0 / (GRID_SIDE - 1) as f64;
    let mut rows = Vec::with_capacity(GRID_SIDE * GRID_SIDE);
    for i in 0..GRID_SIDE {
        for j in 0..GRID_SIDE {
            let u = [i as f64 * step, j as f64 * step];
            let p = space.from_unit(u);
            let (mean, sd) = gp.predict_raw(u);
            rows.push(GridRow { x: p[0], y: p[1], mean, sd });
        }
    }
    rows
}

pub fn write_grid_csv(rows: &[GridRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(crate::forward_ops::csv_err)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_points(n: usize, seed: u64) -> Vec<[f64; 2]> {
        let mut r = rng(seed);
        (0..n).map(|_| [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)]).collect()
    }

    #[test]
    fn space_round_trip_and_bounds() {
        let s = SearchSpace::for_method(Method::Potobim).unwrap();
        let p = [-7.0, -3.0];
        let back = s.from_unit(s.to_unit(p));
        assert!((back[0] - p[0]).abs() < 1e-12 && (back[1] - p[1]).abs() < 1e-12);
        assert!(s.contains(p) && !s.contains([-1.0, -3.0]));
        assert!(SearchSpace::new(Axis::new("a", 1.0, 1.0), Axis::new("b", 0.0, 1.0)).is_err());
        assert!(SearchSpace::for_method(Method::Dip).is_err());
        let v = s.values([-4.0, -1.0]);
        assert!((v[0] - 1e-4).abs() < 1e-18 && (v[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn init_points_lie_in_bounds() {
        for m in [Method::Potobim, Method::Mcd, Method::Sgld] {
            let s = SearchSpace::for_method(m).unwrap();
            let pts = init_points(m).unwrap();
            assert_eq!(pts.len(), 4);
            assert!(pts.iter().all(|p| s.contains(*p)), "{m:?}");
        }
        let p = init_points(Method::Potobim).unwrap();
        assert!((p[0][0] + 4.0).abs() < 1e-12 && (p[0][1] + 1.0).abs() < 1e-12);
        assert!((p[3][0] + 7.0).abs() < 1e-12 && (p[3][1] + 6.0).abs() < 1e-12);
    }

    #[test]
    fn single_observation_interpolates() {
        let gp = Gp::new(vec![[0.4, 0.6]], &[3.0], Kernel::default()).unwrap();
        let (m, _) = gp.predict([0.4, 0.6]);
        assert!((gp.unstandardize(m) - 3.0).abs() < 1e-4);
    }

    #[test]
    fn prior_reversion_far_from_data() {
        let k = Kernel { signal_variance: 2.0, length_scales: [0.01, 0.01], jitter: 1e-6 };
        let gp = Gp::new(random_points(3, 1).iter().map(|p| [p[0] * 0.1, p[1] * 0.1]).collect(), &[1.0, 2.0, 4.0], k)
            .unwrap();
        let (m, v) = gp.predict([0.9, 0.9]);
        assert!(m.abs() < 1e-2);
        assert!((v - 2.0).abs() < 0.02);
    }

    #[test]
    fn training_inputs_interpolate_within_jitter() {
        let x = random_points(6, 2);
        let y: Vec<f64> = x.iter().map(|p| (3.0 * p[0]).sin() + p[1]).collect();
        let gp = Gp::fit(x.clone(), &y, &mut rng(3)).unwrap();
        for (p, &t) in x.iter().zip(gp.standardized_outputs()) {
            let (m, _) = gp.predict(*p);
            assert!((m - t).abs() <= 3.0 * gp.jitter().sqrt(), "{m} vs {t}");
        }
    }

    #[test]
    fn duplicate_inputs_escalate_jitter() {
        let k = Kernel { jitter: 0.0, ..Kernel::default() };
        let gp = Gp::new(vec![[0.5, 0.5], [0.5, 0.5]], &[1.0, 2.0], k).unwrap();
        assert!(gp.jitter() > 0.0 && gp.jitter() <= MAX_JITTER);
        assert!(Gp::new(vec![], &[], Kernel::default()).is_err());
    }

    #[test]
    fn marginal_gradient_matches_finite_difference() {
        let x = random_points(5, 4);
        let y = [0.3, -1.0, 0.8, 0.1, -0.2];
        let theta = [0.2, -1.1, -0.7];
        let (_, g) = log_marginal(&x, &y, theta).unwrap();
        for d in 0..3 {
            let mut tp = theta;
            let mut tm = theta;
            tp[d] += 1e-6;
            tm[d] -= 1e-6;
            let fd = (log_marginal(&x, &y, tp).unwrap().0 - log_marginal(&x, &y, tm).unwrap().0) / 2e-6;
            assert!((fd - g[d]).abs() < 1e-5 * (1.0 + fd.abs()), "{d}: {fd} vs {}", g[d]);
        }
    }

    #[test]
    fn fit_does_not_lower_marginal_likelihood() {
        let x = random_points(8, 5);
        let y: Vec<f64> = x.iter().map(|p| (p[0] - 0.3).powi(2) + 0.5 * p[1]).collect();
        let gp = Gp::fit(x.clone(), &y, &mut rng(6)).unwrap();
        let k = gp.kernel();
        let fitted = [k.signal_variance.ln(), k.length_scales[0].ln(), k.length_scales[1].ln()];
        let ys = gp.standardized_outputs().to_vec();
        let at = |t| log_marginal(&x, &ys, t).unwrap().0;
        assert!(at(fitted) >= at([0.0, 0.3f64.ln(), 0.3f64.ln()]));
    }

    #[test]
    fn ei_spot_values() {
        assert!((ei(2.5, 0.0, 2.0) - 0.5).abs() < 1e-15);
        assert_eq!(ei(1.0, 0.0, 2.0), 0.0);
        assert!((ei(0.0, 1.0, 0.0) - 0.398942).abs() < 1e-6);
    }

    #[test]
    fn ei_gradient_matches_finite_difference() {
        let x = random_points(5, 7);
        let y = [0.1, 0.9, -0.4, 0.3, 0.0];
        let gp = Gp::new(x, &y, Kernel::default()).unwrap();
        let f_star = 1.2;
        let u = [0.37, 0.61];
        let (_, g) = ei_grad(&gp, u, f_star);
        for d in 0..2 {
            let (mut up, mut um) = (u, u);
            up[d] += 1e-6;
            um[d] -= 1e-6;
            let fd = (ei_grad(&gp, up, f_star).0 - ei_grad(&gp, um, f_star).0) / 2e-6;
            assert!((fd - g[d]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[d]);
        }
    }

    #[test]
    fn proposals_stay_inside_and_differ() {
        let gp = Gp::new(vec![[0.5, 0.5]], &[1.0], Kernel::default()).unwrap();
        let batch = propose(&gp, 0.0, 4, &mut rng(8)).unwrap();
        assert_eq!(batch.len(), 4);
        for (i, a) in batch.iter().enumerate() {
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
            for b in &batch[i + 1..] {
                assert!(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() > 0.0);
            }
        }
        assert!(propose(&gp, 0.0, 5, &mut rng(8)).is_err());
    }

    #[test]
    fn constant_objective_history_length() {
        let space = SearchSpace::for_method(Method::Potobim).unwrap();
        let init = init_points(Method::Potobim).unwrap();
        let cfg = BoConfig { iterations: 2, threads: 2, ..BoConfig::default() };
        let out = bo_loop(&space, |_| Ok(7.0), &init, &cfg).unwrap();
        assert_eq!(out.history.len(), 4 + 4 * 2);
        assert_eq!(out.best_value, 7.0);
        assert!(out.history.iter().all(|r| space.contains(r.point)));
    }

    #[test]
    fn failures_are_recorded_as_missing() {
        let space = SearchSpace::for_method(Method::Mcd).unwrap();
        let init = init_points(Method::Mcd).unwrap();
        let cfg = BoConfig { iterations: 3, threads: 1, ..BoConfig::default() };
        let f = |p: [f64; 2]| if p[0] > -3.0 { Err(Error::NumericalFailure("nan".into())) } else { Ok(-p[1].powi(2)) };
        let out = bo_loop(&space, f, &init, &cfg).unwrap();
        assert!(out.history.iter().any(|r| r.value.is_none()));
        assert!(out.incumbents.windows(2).all(|w| w[1] >= w[0]));
        let max = out.history.iter().filter_map(|r| r.value).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best_value, max);
        assert!(bo_loop(&space, |_| Err(Error::NumericalFailure("x".into())), &init, &cfg).is_err());
    }

    #[test]
    fn loop_is_deterministic_across_thread_counts() {
        let space = SearchSpace::for_method(Method::Sgld).unwrap();
        let init = init_points(Method::Sgld).unwrap();
        let f = |p: [f64; 2]| Ok(-((p[0] + 6.0).powi(2)) - 1e6 * (p[1] + 1e-4).powi(2));
        let a = bo_loop(&space, f, &init, &BoConfig { iterations: 2, threads: 1, ..BoConfig::default() }).unwrap();
        let b = bo_loop(&space, f, &init, &BoConfig { iterations: 2, threads: 4, ..BoConfig::default() }).unwrap();
        let pts = |o: &BoOutcome| o.history.iter().map(|r| (r.point, r.value)).collect::<Vec<_>>();
        assert_eq!(pts(&a), pts(&b));
    }

    #[test]
    fn grid_covers_the_space() {
        let space = SearchSpace::for_method(Method::Potobim).unwrap();
        let gp = Gp::new(vec![[0.2, 0.3], [0.8, 0.1]], &[10.0, 20.0], Kernel::default()).unwrap();
        let rows = posterior_grid(&gp, &space);
        assert_eq!(rows.len(), GRID_SIDE * GRID_SIDE);
        assert_eq!((rows[0].x, rows[0].y), (-12.0, -10.0));
        assert_eq!((rows.last().unwrap().x, rows.last().unwrap().y), (-2.0, 0.0));
        assert!(rows.iter().all(|r| r.sd >= 0.0 && r.mean.is_finite()));
        let mut buf = Vec::new();
        write_grid_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), GRID_SIDE * GRID_SIDE + 1);
    }

    proptest::proptest! {
        #[test]
        fn ei_nonnegative_and_monotone(mu in -5.0f64..5.0, d in 0.0f64..3.0, sd in 0.0f64..3.0, f in -5.0f64..5.0) {
            let a = ei(mu, sd, f);
            proptest::prop_assert!(a >= 0.0);
            proptest::prop_assert!(ei(mu + d, sd, f) >= a - 1e-12);
        }

        #[test]
        fn posterior_variance_nonnegative(seed in 0u64..500, u0 in 0.0f64..1.0, u1 in 0.0f64..1.0) {
            let x = random_points(6, seed);
            let y: Vec<f64> = x.iter().map(|p| p[0] - p[1]).collect();
            let gp = Gp::new(x, &y, Kernel::default()).unwrap();
            proptest::prop_assert!(gp.predict([u0, u1]).1 >= 0.0);
        }
    }
}
