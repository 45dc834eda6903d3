//! Optimisation loops for the four reconstruction methods and extraction of
//! the posterior-predictive reconstruction.
//!
//! | method    | weights     | update | loss                 | output                  |
//! |-----------|-------------|--------|----------------------|-------------------------|
//! | `potobim` | mean-field  | AdamW  | `T · KL + NLL`       | moments of S draws      |
//! | `mcd`     | dropout     | AdamW  | NLL                  | moments of S dropout passes |
//! | `sgld`    | point       | SGLD   | NLL                  | moments of the last S iterates |
//! | `dip`     | point       | AdamW  | NLL                  | final point output      |
//!
//! The ground truth, when given, is only used to fill the PSNR column of
//! the trace.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::forward_ops::{ForwardOperator, Task};
use crate::image::Image;
use crate::metrics;
use crate::net::{NetConfig, Network, NoiseInput, Prediction, WeightMode};
use crate::objectives::{
    graph_hetero_nll, graph_kl_to_prior, graph_mse, predictive_moments, tempered_loss, Likelihood, LossReport,
    TemperConfig,
};
use crate::rng::{self, Stream};
use crate::tensor::{Graph, LinearMap, Tensor, Var};

pub const DEFAULT_LR: f64 = 2e-3;
pub const DEFAULT_EVAL_EVERY: usize = 50;
pub const DEFAULT_EVAL_SAMPLES: usize = 25;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Potobim,
    Mcd,
    Sgld,
    Dip,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Potobim => "potobim",
            Self::Mcd => "mcd",
            Self::Sgld => "sgld",
            Self::Dip => "dip",
        }
    }

    pub fn is_bayesian(&self) -> bool {
        !matches!(self, Self::Dip)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "potobim" => Ok(Self::Potobim),
            "mcd" => Ok(Self::Mcd),
            "sgld" => Ok(Self::Sgld),
            "dip" => Ok(Self::Dip),
            other => Err(invalid!("unknown method {other:?}")),
        }
    }
}

fn default_eval_every() -> usize {
    DEFAULT_EVAL_EVERY
}

fn default_eval_samples() -> usize {
    DEFAULT_EVAL_SAMPLES
}

fn default_lr() -> f64 {
    DEFAULT_LR
}

fn default_one() -> f64 {
    1.0
}

fn default_mc() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub iterations: usize,
    /// Initial learning rate `ε₀`.
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Decoupled weight decay `λ` (mcd, sgld, dip).
    #[serde(default)]
    pub weight_decay: Option<f64>,
    /// Learning-rate decay `γ`, `ε_t = γ^t ε₀` (sgld).
    #[serde(default)]
    pub lr_decay: Option<f64>,
    /// Dropout rate `p` (mcd).
    #[serde(default)]
    pub dropout: Option<f64>,
    /// Temperature and prior (potobim).
    #[serde(default)]
    pub temper: Option<TemperConfig>,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Posterior samples `S` for the predictive moments.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// Weight draws per training step (potobim).
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    /// Multiplier on the Langevin noise variance `2 ε_t` (sgld).
    #[serde(default = "default_one")]
    pub sgld_noise: f64,
    /// Overrides the method's likelihood; variance heads are dropped for
    /// operators that sum pixels.
    #[serde(default)]
    pub likelihood: Option<Likelihood>,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn new(method: Method, iterations: usize) -> Self {
        Self {
            method,
            iterations,
            lr: DEFAULT_LR,
            weight_decay: None,
            lr_decay: None,
            dropout: None,
            temper: None,
            eval_every: DEFAULT_EVAL_EVERY,
            eval_samples: DEFAULT_EVAL_SAMPLES,
            mc_samples: 1,
            sgld_noise: 1.0,
            likelihood: None,
            net: NetConfig::default(),
            seed: 0,
        }
    }

    pub fn potobim(iterations: usize, temper: TemperConfig) -> Self {
        Self { temper: Some(temper), ..Self::new(Method::Potobim, iterations) }
    }

    pub fn mcd(iterations: usize, dropout: f64, weight_decay: f64) -> Self {
        Self { dropout: Some(dropout), weight_decay: Some(weight_decay), ..Self::new(Method::Mcd, iterations) }
    }

    pub fn sgld(iterations: usize, lr_decay: f64, weight_decay: f64) -> Self {
        Self { lr_decay: Some(lr_decay), weight_decay: Some(weight_decay), ..Self::new(Method::Sgld, iterations) }
    }

    pub fn dip(iterations: usize) -> Self {
        Self::new(Method::Dip, iterations)
    }

    pub fn with_net(self, net: NetConfig) -> Self {
        Self { net, ..self }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.method.name();
        let need = |present: bool, field: &str, required: bool| -> Result<()> {
            match (present, required) {
                (false, true) => Err(invalid!("{m} requires `{field}`")),
                (true, false) => Err(invalid!("`{field}` does not apply to {m}")),
                _ => Ok(()),
            }
        };
        need(self.temper.is_some(), "temper", self.method == Method::Potobim)?;
        need(self.dropout.is_some(), "dropout", self.method == Method::Mcd)?;
        need(self.lr_decay.is_some(), "lr_decay", self.method == Method::Sgld)?;
        match self.method {
            Method::Potobim => need(self.weight_decay.is_some(), "weight_decay", false)?,
            Method::Mcd | Method::Sgld => need(self.weight_decay.is_some(), "weight_decay", true)?,
            Method::Dip => {}
        }
        if let Some(t) = &self.temper {
            t.validate()?;
        }
        if let Some(p) = self.dropout {
            WeightMode::Dropout(p).validate()?;
        }
        if let Some(g) = self.lr_decay {
            if !(g > 0.0 && g <= 1.0) {
                return Err(invalid!("lr_decay must lie in (0,1], got {g}"));
            }
        }
        if let Some(l) = self.weight_decay {
            if !(0.0..1.0).contains(&l) {
                return Err(invalid!("weight_decay must lie in [0,1), got {l}"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid!("learning rate must be positive, got {}", self.lr));
        }
        if self.iterations == 0 {
            return Err(invalid!("iterations must be positive"));
        }
        if self.eval_every == 0 {
            return Err(invalid!("eval_every must be positive"));
        }
        if self.mc_samples == 0 {
            return Err(invalid!("mc_samples must be positive"));
        }
        if self.sgld_noise < 0.0 {
            return Err(invalid!("sgld_noise must be non-negative"));
        }
        if self.method.is_bayesian() {
            if self.eval_samples < 2 {
                return Err(invalid!("eval_samples must be at least 2"));
            }
            if self.method == Method::Sgld && self.eval_samples > self.iterations / 2 {
                return Err(invalid!(
                    "sgld collects {} iterates after a burn-in of half of {} iterations",
                    self.eval_samples,
                    self.iterations
                ));
            }
        }
        self.net.validate()
    }

    pub fn weight_mode(&self) -> WeightMode {
        match self.method {
            Method::Potobim => WeightMode::MeanField,
            Method::Mcd => WeightMode::Dropout(self.dropout.unwrap_or(0.5)),
            Method::Sgld | Method::Dip => WeightMode::Point,
        }
    }

    /// The likelihood actually used with `op`.
    pub fn likelihood(&self, op: &ForwardOperator) -> Likelihood {
        if !op.carries_variance() {
            return Likelihood::Mse;
        }
        self.likelihood.unwrap_or(match self.method {
            Method::Dip => Likelihood::Mse,
            _ => Likelihood::Hetero,
        })
    }

    /// `ε_t = γ^t ε₀`; constant unless a decay is set.
    pub fn lr_at(&self, t: usize) -> f64 {
        self.lr * self.lr_decay.unwrap_or(1.0).powf(t as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    /// PSNR of the deterministic reconstruction against the ground truth.
    pub psnr: Option<f64>,
    pub wall_time: f64,
}

/// First and second moment estimates of AdamW.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn steps(&self) -> u64 {
        self.t
    }
}

fn check_shapes(params: &[&mut Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(invalid!("{} parameters vs {} gradients", params.len(), grads.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(invalid!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()));
        }
    }
    Ok(())
}

/// One AdamW step: `w ← (1-λ) w`, then the bias-corrected Adam step.
pub fn step_adamw(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    check_shapes(params, grads)?;
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != grads.len() || state.m.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
        return Err(Error::InvalidState("optimizer state does not match parameters".into()));
    }
    state.t += 1;
    let c1 = 1.0 - BETA1.powf(state.t as f64);
    let c2 = 1.0 - BETA2.powf(state.t as f64);
    let keep = 1.0 - weight_decay;
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
            *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w = keep * *w - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// One Langevin step: `w ← (1-λ) w - ε ∇L + N(0, 2 ε · noise)`.
///
/// With `noise == 0` no random numbers are drawn and the update is plain
/// SGD with decoupled decay.
pub fn step_sgld(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    lr: f64,
    weight_decay: f64,
    noise: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    check_shapes(params, grads)?;
    if lr.is_nan() || lr <= 0.0 {
        return Err(invalid!("SGLD step size must be positive, got {lr}"));
    }
    let keep = 1.0 - weight_decay;
    let std = (2.0 * lr * noise).sqrt();
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, &gi) in p.data_mut().iter_mut().zip(g.data()) {
            *w = keep * *w - lr * gi;
            if noise > 0.0 {
                *w += std * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub reconstruction: Image,
    /// Predictive variance: epistemic plus aleatoric. For `dip` with a
    /// variance head, the aleatoric part alone.
    pub uncertainty: Option<Image>,
    pub trace: Vec<TraceRow>,
    pub network: Network,
    pub noise_input: NoiseInput,
    /// Loss components of the last training step.
    pub final_loss: LossReport,
}

struct Problem {
    map: Option<Arc<dyn LinearMap>>,
    obs_shape: [usize; 4],
    y: Tensor,
    likelihood: Likelihood,
    image_dims: (usize, usize),
}

impl Problem {
    fn new(cfg: &RunConfig, task: &Task, y: &Image) -> Result<Self> {
        let image_dims = task.image_dims(y.dims());
        let op = task.operator(image_dims.0, image_dims.1)?;
        let obs = op.output_dims(image_dims.0, image_dims.1)?;
        if obs != y.dims() {
            return Err(invalid!("observation {:?} does not match the {} operator output {obs:?}", y.dims(), task.name()));
        }
        let m = cfg.net.size_multiple();
        if !image_dims.0.is_multiple_of(m) || !image_dims.1.is_multiple_of(m) {
            return Err(invalid!("image {image_dims:?} must be divisible by {m} for depth {}", cfg.net.depth));
        }
        // occluded pixels carry no information
        let y = match &op {
            ForwardOperator::Mask(_) => op.apply(y)?,
            _ => y.clone(),
        };
        let map = match &op {
            ForwardOperator::Identity => None,
            other => Some(other.linear_map(image_dims.0, image_dims.1)?),
        };
        Ok(Self {
            likelihood: cfg.likelihood(&op),
            map,
            obs_shape: [1, 1, obs.0, obs.1],
            y: y.to_tensor(),
            image_dims,
        })
    }

    fn observe(&self, g: &mut Graph, v: Var) -> Result<Var> {
        match &self.map {
            None => Ok(v),
            Some(map) => g.linear(v, map.clone(), &self.obs_shape),
        }
    }
}

/// Trains a network on the observation `y` of `task` and extracts the
/// reconstruction.
pub fn run(cfg: &RunConfig, task: &Task, y: &Image, gt: Option<&Image>) -> Result<RunOutput> {
    run_with(cfg, task, y, gt, |_| Ok(()))
}

/// [`run`], calling `on_row` for every trace row as it is produced.
pub fn run_with(
    cfg: &RunConfig,
    task: &Task,
    y: &Image,
    gt: Option<&Image>,
    mut on_row: impl FnMut(&TraceRow) -> Result<()>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let problem = Problem::new(cfg, task, y)?;
    if let Some(gt) = gt {
        if gt.dims() != problem.image_dims {
            return Err(invalid!("ground truth {:?} vs reconstruction {:?}", gt.dims(), problem.image_dims));
        }
    }
    let net_cfg = NetConfig { heteroscedastic: problem.likelihood == Likelihood::Hetero, ..cfg.net.clone() };
    let mut net = Network::build(&net_cfg, cfg.method == Method::Potobim, cfg.seed)?;
    let (h, w) = problem.image_dims;
    let z = NoiseInput::new(net_cfg.in_channels, h, w, cfg.seed);
    let mode = cfg.weight_mode();
    let decay = cfg.weight_decay.unwrap_or(0.0);

    let mut train_rng = rng::stream(cfg.seed, Stream::Sampling);
    let mut eval_rng = rng::stream(cfg.seed, Stream::Evaluation);
    let mut adam = AdamState::default();
    let mut trace = Vec::new();
    let mut sgld_samples: Vec<Prediction> = Vec::new();
    let started = Instant::now();
    let mut last = LossReport { nll: f64::NAN, kl: 0.0, elbo_t: f64::NAN, mc_samples: cfg.mc_samples };

    for it in 1..=cfg.iterations {
        let (report, grads) = loss_and_grads(cfg, &problem, &net, &z, mode, &mut train_rng)?;
        if !report.elbo_t.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "{} loss became non-finite at iteration {it} (nll {}, kl {})",
                cfg.method.name(),
                report.nll,
                report.kl
            )));
        }
        last = report;
        let mut params = net.trainable_mut();
        match cfg.method {
            Method::Sgld => {
                step_sgld(&mut params, &grads, cfg.lr_at(it - 1), decay, cfg.sgld_noise, &mut train_rng)?
            }
            _ => step_adamw(&mut params, &grads, &mut adam, cfg.lr, decay)?,
        }
        if cfg.method == Method::Sgld && it > cfg.iterations - cfg.eval_samples {
            sgld_samples.push(net.predict(&z, WeightMode::Point, &mut eval_rng)?);
        }
        if it % cfg.eval_every == 0 || it == cfg.iterations {
            let psnr = match gt {
                Some(gt) => {
                    // deterministic: means only, no dropout
                    let p = net.predict(&z, WeightMode::Point, &mut eval_rng)?;
                    Some(metrics::psnr(gt, &p.x_hat)?)
                }
                None => None,
            };
            let row = TraceRow {
                iteration: it,
                loss: report.elbo_t,
                nll: report.nll,
                kl: report.kl,
                psnr,
                wall_time: started.elapsed().as_secs_f64(),
            };
            on_row(&row)?;
            trace.push(row);
        }
    }

    let (reconstruction, uncertainty) = match cfg.method {
        Method::Dip => {
            let p = net.predict(&z, WeightMode::Point, &mut eval_rng)?;
            (p.x_hat.clone(), p.variance())
        }
        Method::Sgld => moments(&sgld_samples)?,
        Method::Potobim | Method::Mcd => {
            let samples = (0..cfg.eval_samples)
                .map(|_| net.predict(&z, mode, &mut eval_rng))
                .collect::<Result<Vec<_>>>()?;
            moments(&samples)?
        }
    };
    Ok(RunOutput { reconstruction, uncertainty, trace, network: net, noise_input: z, final_loss: last })
}

fn moments(samples: &[Prediction]) -> Result<(Image, Option<Image>)> {
    let x: Vec<Image> = samples.iter().map(|p| p.x_hat.clone()).collect();
    let s2: Option<Vec<Image>> = samples.iter().map(|p| p.variance()).collect();
    let m = predictive_moments(&x, s2.as_deref())?;
    Ok((m.mean, Some(m.variance)))
}

/// Loss of one training step and the gradient of every trainable tensor,
/// in [`Network::trainable`] order.
fn loss_and_grads(
    cfg: &RunConfig,
    problem: &Problem,
    net: &Network,
    z: &NoiseInput,
    mode: WeightMode,
    rng: &mut impl Rng,
) -> Result<(LossReport, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = net.bind(&mut g);
    let zv = g.constant(z.tensor().clone());
    let yv = g.constant(problem.y.clone());
    let mut forward = |g: &mut Graph| -> Result<(Var, Option<Var>)> {
        let out = net.forward_graph(g, &vars, zv, mode, rng)?;
        let y_hat = problem.observe(g, out.x_hat)?;
        let s = out.neg_log_s2.map(|s| problem.observe(g, s)).transpose()?;
        Ok((y_hat, s))
    };
    let (loss, report) = if let Some(temper) = &cfg.temper {
        let kl = graph_kl_to_prior(&mut g, &vars.mu, &vars.rho, temper)?;
        let t = tempered_loss(&mut g, yv, &mut forward, kl, temper, cfg.mc_samples, problem.likelihood)?;
        (t.loss, t.report)
    } else {
        let (y_hat, s) = forward(&mut g)?;
        let nll = match (problem.likelihood, s) {
            (Likelihood::Hetero, Some(s)) => graph_hetero_nll(&mut g, yv, y_hat, s)?,
            _ => graph_mse(&mut g, yv, y_hat)?,
        };
        let v = g.value(nll).item();
        (nll, LossReport { nll: v, kl: 0.0, elbo_t: v, mc_samples: 1 })
    };
    let grads = g.backward(loss)?;
    let all: Vec<Var> = vars.mu.iter().chain(&vars.rho).copied().collect();
    let out = all.iter().map(|&v| grads.get_or_zeros(v, g.value(v).shape())).collect();
    Ok((report, out))
}
