//! Loss terms: Gaussian likelihoods, Gaussian KL divergences, the
//! tempered evidence bound and posterior-predictive moments.
//!
//! Every objective exists twice: a plain `f64` version used for reporting
//! and testing, and a graph version used for training.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::rng::{self, Stream};
use crate::tensor::{Graph, Tensor, Var};

/// How the temperature enters the prior `N(0, σ_T²)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorForm {
    /// `σ_T = √T · σ`.
    #[default]
    ScaledStd,
    /// `σ_T² = σ² / T`.
    InverseVariance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperConfig {
    pub temperature: f64,
    pub sigma_prior: f64,
    #[serde(default)]
    pub prior_form: PriorForm,
}

impl TemperConfig {
    pub fn new(temperature: f64, sigma_prior: f64) -> Result<Self> {
        let t = Self { temperature, sigma_prior, prior_form: PriorForm::ScaledStd };
        t.validate()?;
        Ok(t)
    }

    pub fn with_form(self, prior_form: PriorForm) -> Self {
        Self { prior_form, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.sigma_prior > 0.0 && self.sigma_prior.is_finite()) {
            return Err(invalid!("prior std must be positive, got {}", self.sigma_prior));
        }
        Ok(())
    }
}

/// Standard deviation of the tempered prior.
pub fn tempered_prior_std(temper: &TemperConfig) -> f64 {
    match temper.prior_form {
        PriorForm::ScaledStd => temper.temperature.sqrt() * temper.sigma_prior,
        PriorForm::InverseVariance => temper.sigma_prior / temper.temperature.sqrt(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    /// Gaussian with a predicted per-pixel variance.
    Hetero,
    /// Unit-variance Gaussian, i.e. mean squared error.
    Mse,
}

/// `mean(exp(s) (y - ŷ)² - s)` with `s = -log σ̂²`.
pub fn hetero_nll(y: &Image, y_hat: &Image, neg_log_s2: &Image) -> Result<f64> {
    y.check_same(y_hat)?;
    y.check_same(neg_log_s2)?;
    let sum: f64 = y
        .pixels()
        .iter()
        .zip(y_hat.pixels())
        .zip(neg_log_s2.pixels())
        .map(|((a, b), s)| s.exp() * (a - b) * (a - b) - s)
        .sum();
    Ok(sum / y.len() as f64)
}

pub fn mse(y: &Image, y_hat: &Image) -> Result<f64> {
    crate::metrics::mse(y, y_hat)
}

fn check_sigma(s: f64) -> Result<()> {
    if s > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("Gaussian std must be positive, got {s}")))
    }
}

/// `Σ_i KL(N(μ_i, σ_i²) ‖ N(μ_p, σ_p²))`.
pub fn kl_gauss_closed(mu_q: &[f64], sigma_q: &[f64], mu_p: f64, sigma_p: f64) -> Result<f64> {
    if mu_q.len() != sigma_q.len() {
        return Err(invalid!("{} means vs {} stds", mu_q.len(), sigma_q.len()));
    }
    check_sigma(sigma_p)?;
    let mut total = 0.0;
    for (&m, &s) in mu_q.iter().zip(sigma_q) {
        check_sigma(s)?;
        total += (sigma_p / s).ln() + (s * s + (m - mu_p) * (m - mu_p)) / (2.0 * sigma_p * sigma_p) - 0.5;
    }
    Ok(total)
}

pub fn gaussian_log_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// A Monte-Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// `(1/S) Σ log q(w_s) - log p(w_s)` with `w_s ~ q`.
pub fn kl_mc(
    mut sample_q: impl FnMut(&mut ChaCha8Rng) -> f64,
    log_q: impl Fn(f64) -> f64,
    log_p: impl Fn(f64) -> f64,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if n_samples == 0 {
        return Err(invalid!("Monte-Carlo KL needs at least one sample"));
    }
    let mut rng = rng::stream(seed, Stream::Sampling);
    let (mut mean, mut m2) = (0.0, 0.0);
    for i in 0..n_samples {
        let w = sample_q(&mut rng);
        let v = log_q(w) - log_p(w);
        let d = v - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (v - mean);
    }
    let stderr = if n_samples > 1 { (m2 / (n_samples - 1) as f64 / n_samples as f64).sqrt() } else { f64::NAN };
    Ok(McEstimate { mean, stderr, samples: n_samples })
}

/// Draws from `N(mu, sigma²)`.
pub fn gaussian_sampler(mu: f64, sigma: f64) -> impl FnMut(&mut ChaCha8Rng) -> f64 {
    move |rng| mu + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal)
}

/// `mean(exp(s) (y - ŷ)² - s)` on the graph; `y` is a constant.
pub fn graph_hetero_nll(g: &mut Graph, y: Var, y_hat: Var, neg_log_s2: Var) -> Result<Var> {
    let r = g.sub(y, y_hat)?;
    let r2 = g.square(r);
    let prec = g.exp(neg_log_s2);
    let weighted = g.mul(prec, r2)?;
    let per_pixel = g.sub(weighted, neg_log_s2)?;
    Ok(g.mean(per_pixel))
}

pub fn graph_mse(g: &mut Graph, y: Var, y_hat: Var) -> Result<Var> {
    let r = g.sub(y, y_hat)?;
    let r2 = g.square(r);
    Ok(g.mean(r2))
}

/// `Σ KL(N(μ, softplus(ρ)²) ‖ N(0, σ_p²))` on the graph.
pub fn graph_kl_closed(g: &mut Graph, mu: Var, rho: Var, sigma_p: f64) -> Result<Var> {
    check_sigma(sigma_p)?;
    let sigma = g.softplus(rho);
    let log_sigma = g.log(sigma)?;
    let s2 = g.square(sigma);
    let m2 = g.square(mu);
    let quad = g.add(s2, m2)?;
    let quad = g.scale(quad, 1.0 / (2.0 * sigma_p * sigma_p));
    let per = g.sub(quad, log_sigma)?;
    let n = g.value(mu).len() as f64;
    let total = g.sum(per);
    // constant part: Σ (ln σ_p - 1/2)
    let offset = g.constant(Tensor::scalar(n * (sigma_p.ln() - 0.5)));
    g.add(total, offset)
}

/// Closed-form KL of all variational tensors against the tempered prior.
pub fn graph_kl_to_prior(g: &mut Graph, mu: &[Var], rho: &[Var], temper: &TemperConfig) -> Result<Var> {
    if mu.len() != rho.len() || mu.is_empty() {
        return Err(invalid!("KL needs matching, non-empty mean and scale tensors"));
    }
    let sigma_p = tempered_prior_std(temper);
    let mut total: Option<Var> = None;
    for (&m, &r) in mu.iter().zip(rho) {
        let kl = graph_kl_closed(g, m, r, sigma_p)?;
        total = Some(match total {
            Some(t) => g.add(t, kl)?,
            None => kl,
        });
    }
    Ok(total.expect("non-empty"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub nll: f64,
    pub kl: f64,
    /// `T · kl + nll`.
    pub elbo_t: f64,
    pub mc_samples: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct TemperedLoss {
    pub loss: Var,
    pub report: LossReport,
}

/// One predicted observation: the mean and, for the heteroscedastic head,
/// `-log σ̂²`, both already mapped into observation space.
pub type ObservedPrediction = (Var, Option<Var>);

/// Records `T · KL + NLL` on the graph. `forward` is called once per
/// Monte-Carlo draw; the NLL is averaged over draws.
pub fn tempered_loss(
    g: &mut Graph,
    y: Var,
    mut forward: impl FnMut(&mut Graph) -> Result<ObservedPrediction>,
    kl: Var,
    temper: &TemperConfig,
    mc_samples: usize,
    likelihood: Likelihood,
) -> Result<TemperedLoss> {
    temper.validate()?;
    if mc_samples == 0 {
        return Err(invalid!("need at least one Monte-Carlo sample"));
    }
    let mut nll: Option<Var> = None;
    for _ in 0..mc_samples {
        let (y_hat, s) = forward(g)?;
        let term = match (likelihood, s) {
            (Likelihood::Hetero, Some(s)) => graph_hetero_nll(g, y, y_hat, s)?,
            (Likelihood::Hetero, None) => {
                return Err(Error::InvalidState("heteroscedastic likelihood without a variance head".into()))
            }
            (Likelihood::Mse, _) => graph_mse(g, y, y_hat)?,
        };
        nll = Some(match nll {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let nll = g.scale(nll.expect("at least one draw"), 1.0 / mc_samples as f64);
    let tkl = g.scale(kl, temper.temperature);
    let loss = g.add(tkl, nll)?;
    let report = LossReport {
        nll: g.value(nll).item(),
        kl: g.value(kl).item(),
        elbo_t: g.value(loss).item(),
        mc_samples,
    };
    Ok(TemperedLoss { loss, report })
}

/// Pixel-wise posterior-predictive moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean: Image,
    /// `epistemic + aleatoric`.
    pub variance: Image,
    /// Spread of the sampled means.
    pub epistemic: Image,
    /// Mean predicted variance; zero without a variance head.
    pub aleatoric: Image,
}

/// Mean of the samples and `Var[x̂] + E[σ̂²]`, with population (1/S)
/// normalisation of the epistemic term.
pub fn predictive_moments(x_hats: &[Image], sigma2: Option<&[Image]>) -> Result<Moments> {
    if x_hats.len() < 2 {
        return Err(invalid!("predictive moments need at least 2 samples, got {}", x_hats.len()));
    }
    let (h, w) = x_hats[0].dims();
    let n = h * w;
    let mut mean = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    for (k, x) in x_hats.iter().enumerate() {
        x_hats[0].check_same(x)?;
        for ((m, s), &v) in mean.iter_mut().zip(m2.iter_mut()).zip(x.pixels()) {
            let d = v - *m;
            *m += d / (k + 1) as f64;
            *s += d * (v - *m);
        }
    }
    let count = x_hats.len() as f64;
    let epistemic: Vec<f64> = m2.iter().map(|s| (s / count).max(0.0)).collect();
    let mut aleatoric = vec![0.0; n];
    if let Some(s2) = sigma2 {
        if s2.len() != x_hats.len() {
            return Err(invalid!("{} variance maps for {} samples", s2.len(), x_hats.len()));
        }
        for v in s2 {
            x_hats[0].check_same(v)?;
            for (a, &p) in aleatoric.iter_mut().zip(v.pixels()) {
                *a += p;
            }
        }
        aleatoric.iter_mut().for_each(|a| *a /= count);
    }
    let variance = epistemic.iter().zip(&aleatoric).map(|(e, a)| e + a).collect();
    Ok(Moments {
        mean: Image::new(h, w, mean)?,
        variance: Image::new(h, w, variance)?,
        epistemic: Image::new(h, w, epistemic)?,
        aleatoric: Image::new(h, w, aleatoric)?,
    })
}
