//! The image generator: an encoder-decoder with skip connections mapping a
//! frozen noise tensor to an image (and optionally a per-pixel
//! log-precision map).
//!
//! Layout for `depth` levels, `c` channels and `s` skip channels:
//!
//! ```text
//! x_0 = z
//! level i:  e_i  = B(conv3x3(B(conv3x3/2(x_i))))    -> x_{i+1}
//!           s_i  = B(conv1x1(x_i))                  (s channels)
//! decoder:  d_depth = e_{depth-1}
//!           d_i  = B(conv1x1(B(conv3x3([up2(d_{i+1}), s_i]))))
//! output:   conv1x1(d_0) + bias: channel 0 through a sigmoid gives x̂,
//!           channel 1 (heteroscedastic only) is -log σ̂²
//!
//! B(y) = lrelu(γ ⊙ norm(y) + β), norm over the spatial plane of each channel
//! ```
//!
//! Weights are either point estimates or factorised Gaussians
//! `N(μ, softplus(ρ)²)` sampled by reparameterisation on every forward pass.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::rng::{self, Stream};
use crate::tensor::{softplus, softplus_inv, Graph, Tensor, Var};

/// Added to the plane variance before normalising.
pub const NORM_EPS: f64 = 1e-5;

/// Weight standard deviation of a freshly built mean-field network.
pub const SIGMA_INIT: f64 = 1e-4;

/// Upper bound (exclusive) of the uniform noise input.
pub const NOISE_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub depth: usize,
    pub channels: usize,
    pub skip_channels: usize,
    pub in_channels: usize,
    pub heteroscedastic: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { depth: 4, channels: 32, skip_channels: 4, in_channels: 8, heteroscedastic: true }
    }
}

impl NetConfig {
    pub fn out_channels(&self) -> usize {
        if self.heteroscedastic {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(invalid!("network depth must be at least 2, got {}", self.depth));
        }
        if self.channels == 0 || self.skip_channels == 0 || self.in_channels == 0 {
            return Err(invalid!("channel counts must be positive"));
        }
        Ok(())
    }

    /// Image sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Closed-form parameter count (one copy): kernels, two affine
    /// vectors per normalised layer and the output bias.
    pub fn parameter_count(&self) -> usize {
        let (c, s, d) = (self.channels, self.skip_channels, self.depth);
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + 2 * o;
        let encoder = conv(self.in_channels, c, 3) + (d - 1) * conv(c, c, 3) + d * conv(c, c, 3);
        let skips = conv(self.in_channels, s, 1) + (d - 1) * conv(c, s, 1);
        let decoder = d * (conv(c + s, c, 3) + conv(c, c, 1));
        let out = self.out_channels();
        encoder + skips + decoder + out * c + out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Point,
    /// Inverted dropout with rate `p` on the input of every convolution.
    Dropout(f64),
    MeanField,
}

impl WeightMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Dropout(p) if !(*p > 0.0 && *p < 1.0) => Err(invalid!("dropout rate {p} outside (0,1)")),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Normalised with a learned affine map and activated; otherwise a
    /// plain biased convolution.
    pub normalized: bool,
}

impl ConvLayer {
    fn new(name: String, in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self { name, in_channels, out_channels, kernel, stride, normalized: true }
    }

    /// Parameter tensor suffixes, in storage order.
    pub fn tensor_names(&self) -> &'static [&'static str] {
        if self.normalized {
            &["weight", "gamma", "beta"]
        } else {
            &["weight", "bias"]
        }
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Mean and softplus-parameterised scale of every weight tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalParams {
    pub mu: Vec<Tensor>,
    pub rho: Vec<Tensor>,
}

impl VariationalParams {
    pub fn sigma(&self) -> Vec<Tensor> {
        self.rho.iter().map(|r| r.map(softplus)).collect()
    }
}

/// The fixed network input `z ~ U(0, 0.1)`, drawn once.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseInput {
    z: Tensor,
}

impl NoiseInput {
    pub fn new(channels: usize, height: usize, width: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Stream::NoiseInput);
        let dist = Uniform::new(0.0, NOISE_SCALE);
        let data = (0..channels * height * width).map(|_| dist.sample(&mut rng)).collect();
        Self { z: Tensor::new(&[1, channels, height, width], data).expect("consistent dims") }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.z
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.z.shape();
        (s[1], s[2], s[3])
    }
}

/// Graph handles of the network parameters.
#[derive(Clone, Debug)]
pub struct NetVars {
    pub mu: Vec<Var>,
    pub rho: Vec<Var>,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct NetOutput {
    pub x_hat: Var,
    pub neg_log_s2: Option<Var>,
    /// The concrete weights used, one per parameter tensor.
    pub weights: Vec<Var>,
}

/// A forward pass evaluated outside of training.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub x_hat: Image,
    pub neg_log_s2: Option<Image>,
}

impl Prediction {
    /// Per-pixel aleatoric variance `σ̂² = exp(-output)`, if predicted.
    pub fn variance(&self) -> Option<Image> {
        self.neg_log_s2.as_ref().map(|s| s.map(|v| (-v).exp()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    cfg: NetConfig,
    layers: Vec<ConvLayer>,
    /// Index of each layer's kernel in `mu`.
    first: Vec<usize>,
    /// Point weights, or variational means, in [`ConvLayer::tensor_names`]
    /// order per layer.
    mu: Vec<Tensor>,
    rho: Option<Vec<Tensor>>,
}

impl Network {
    /// Builds and initialises a network; deterministic in `seed`.
    ///
    /// Kernels start from `N(0, 2 / fan_in)`, `γ` from one, `β` and biases
    /// from zero. A
    /// mean-field network additionally carries `ρ` with
    /// `softplus(ρ) = 1e-4`.
    pub fn build(cfg: &NetConfig, mean_field: bool, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layers = Self::layout(cfg);
        let mut rng = rng::stream(seed, Stream::NetInit);
        let mut mu = Vec::with_capacity(3 * layers.len());
        let mut first = Vec::with_capacity(layers.len());
        for layer in &layers {
            first.push(mu.len());
            let std = (2.0 / layer.fan_in() as f64).sqrt();
            let shape = layer.kernel_shape();
            let n = shape.iter().product();
            let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
            mu.push(Tensor::new(&shape, data)?);
            if layer.normalized {
                mu.push(Tensor::full(&[layer.out_channels], 1.0));
            }
            mu.push(Tensor::zeros(&[layer.out_channels]));
        }
        let rho = mean_field.then(|| {
            let r0 = softplus_inv(SIGMA_INIT);
            mu.iter().map(|t| Tensor::full(t.shape(), r0)).collect()
        });
        Ok(Self { cfg: cfg.clone(), layers, first, mu, rho })
    }

    fn layout(cfg: &NetConfig) -> Vec<ConvLayer> {
        let (c, s) = (cfg.channels, cfg.skip_channels);
        let mut layers = Vec::new();
        for i in 0..cfg.depth {
            let input = if i == 0 { cfg.in_channels } else { c };
            layers.push(ConvLayer::new(format!("enc{i}.down"), input, c, 3, 2));
            layers.push(ConvLayer::new(format!("enc{i}.conv"), c, c, 3, 1));
            layers.push(ConvLayer::new(format!("skip{i}"), input, s, 1, 1));
        }
        for i in (0..cfg.depth).rev() {
            layers.push(ConvLayer::new(format!("dec{i}.conv"), c + s, c, 3, 1));
            layers.push(ConvLayer::new(format!("dec{i}.mix"), c, c, 1, 1));
        }
        layers.push(ConvLayer { normalized: false, ..ConvLayer::new("out".into(), c, cfg.out_channels(), 1, 1) });
        layers
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn is_mean_field(&self) -> bool {
        self.rho.is_some()
    }

    /// Point weights or variational means, in layer order.
    pub fn mu(&self) -> &[Tensor] {
        &self.mu
    }

    pub fn rho(&self) -> Option<&[Tensor]> {
        self.rho.as_deref()
    }

    pub fn variational_params(&self) -> Option<VariationalParams> {
        self.rho.as_ref().map(|rho| VariationalParams { mu: self.mu.clone(), rho: rho.clone() })
    }

    /// Every trainable tensor: all `μ` (or point weights), then all `ρ`.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.mu.iter_mut().collect();
        if let Some(rho) = &mut self.rho {
            out.extend(rho.iter_mut());
        }
        out
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.mu.iter().collect();
        if let Some(rho) = &self.rho {
            out.extend(rho.iter());
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    /// Registers all parameters as graph leaves.
    pub fn bind(&self, g: &mut Graph) -> NetVars {
        let mu = self.mu.iter().map(|t| g.param(t.clone())).collect();
        let rho = self.rho.iter().flatten().map(|t| g.param(t.clone())).collect();
        NetVars { mu, rho }
    }

    /// Draws one concrete weight set `μ + softplus(ρ) ⊙ ε`.
    pub fn sample_weights(&self, eps_seed: u64) -> Result<Vec<Tensor>> {
        let rho = self.rho.as_ref().ok_or_else(|| Error::InvalidState("sampling weights of a point network".into()))?;
        let mut rng = rng::stream(eps_seed, Stream::Sampling);
        Ok(self
            .mu
            .iter()
            .zip(rho)
            .map(|(m, r)| {
                let data = m
                    .data()
                    .iter()
                    .zip(r.data())
                    .map(|(&mv, &rv)| mv + softplus(rv) * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Tensor::new(m.shape(), data).expect("same shape")
            })
            .collect())
    }

    /// Records a forward pass on `g`. Randomness (weight noise, dropout
    /// masks) is drawn from `rng`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &NetVars,
        z: Var,
        mode: WeightMode,
        rng: &mut impl Rng,
    ) -> Result<NetOutput> {
        mode.validate()?;
        let weights: Vec<Var> = match mode {
            WeightMode::MeanField => {
                if vars.rho.len() != vars.mu.len() {
                    return Err(Error::InvalidState("mean-field forward on a point network".into()));
                }
                let mut ws = Vec::with_capacity(vars.mu.len());
                for (&m, &r) in vars.mu.iter().zip(&vars.rho) {
                    let shape = g.value(m).shape().to_vec();
                    let n = g.value(m).len();
                    let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                    let eps = g.constant(Tensor::new(&shape, eps)?);
                    let sigma = g.softplus(r);
                    let noise = g.mul(sigma, eps)?;
                    ws.push(g.add(m, noise)?);
                }
                ws
            }
            _ => vars.mu.clone(),
        };
        let dropout = match mode {
            WeightMode::Dropout(p) => Some(p),
            _ => None,
        };
        let [_, zc, zh, zw] = match g.value(z).shape() {
            &[n, c, h, w] => [n, c, h, w],
            s => return Err(invalid!("noise input must be [1,C,H,W], got {s:?}")),
        };
        let m = self.cfg.size_multiple();
        if zc != self.cfg.in_channels || zh % m != 0 || zw % m != 0 {
            return Err(invalid!(
                "noise input {zc}x{zh}x{zw} incompatible with {} input channels and depth {}",
                self.cfg.in_channels,
                self.cfg.depth
            ));
        }

        let mut li = 0;
        let mut conv = |g: &mut Graph, x: Var, rng: &mut dyn rand::RngCore| -> Result<Var> {
            let layer = &self.layers[li];
            let w = &weights[self.first[li]..];
            li += 1;
            let x = match dropout {
                Some(p) => {
                    let mask = dropout_mask_from(g.value(x).shape(), p, rng)?;
                    let mask = g.constant(mask);
                    g.mul(x, mask)?
                }
                None => x,
            };
            let y = g.conv2d(x, w[0], layer.stride, layer.kernel / 2)?;
            if !layer.normalized {
                return g.add_channel_bias(y, w[1]);
            }
            let y = g.channel_norm(y, NORM_EPS)?;
            let y = g.mul_channel(y, w[1])?;
            let y = g.add_channel_bias(y, w[2])?;
            Ok(g.leaky_relu(y))
        };

        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut x = z;
        for _ in 0..self.cfg.depth {
            let down = conv(g, x, rng)?;
            let enc = conv(g, down, rng)?;
            skips.push(conv(g, x, rng)?);
            x = enc;
        }
        for skip in skips.into_iter().rev() {
            let up = g.upsample_nearest2x(x)?;
            let cat = g.concat_channels(&[up, skip])?;
            let h = conv(g, cat, rng)?;
            x = conv(g, h, rng)?;
        }
        let out = conv(g, x, rng)?;
        let (x_hat, neg_log_s2) = if self.cfg.heteroscedastic {
            let mean = g.slice_channels(out, 0, 1)?;
            (g.sigmoid(mean), Some(g.slice_channels(out, 1, 1)?))
        } else {
            (g.sigmoid(out), None)
        };
        Ok(NetOutput { x_hat, neg_log_s2, weights })
    }

    /// Evaluates the network without keeping the graph.
    pub fn forward(&self, z: &NoiseInput, mode: WeightMode, seed: u64) -> Result<Prediction> {
        let mut rng = rng::stream(seed, Stream::Sampling);
        self.predict(z, mode, &mut rng)
    }

    pub fn predict(&self, z: &NoiseInput, mode: WeightMode, rng: &mut impl Rng) -> Result<Prediction> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let zv = g.constant(z.tensor().clone());
        let out = self.forward_graph(&mut g, &vars, zv, mode, rng)?;
        Ok(Prediction {
            x_hat: Image::from_tensor(g.value(out.x_hat))?,
            neg_log_s2: out.neg_log_s2.map(|v| Image::from_tensor(g.value(v))).transpose()?,
        })
    }

    /// Writes a checkpoint: little-endian `u64` header length, a JSON
    /// header naming every tensor, then all values as little-endian `f64`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn write_checkpoint(&self, out: &mut impl Write) -> Result<()> {
        let header = CheckpointHeader {
            mode: if self.is_mean_field() { "meanfield" } else { "point" }.to_string(),
            config: self.cfg.clone(),
            tensors: self.named_tensors().map(|(name, t)| TensorEntry { name, shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for (_, t) in self.named_tensors() {
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(&mut &bytes[..])
    }

    pub fn read_checkpoint(input: &mut impl Read) -> Result<Self> {
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        let mean_field = match header.mode.as_str() {
            "meanfield" => true,
            "point" => false,
            other => return Err(Error::Parse(format!("unknown checkpoint mode {other}"))),
        };
        let mut net = Self::build(&header.config, mean_field, 0)?;
        let expected: Vec<(String, Vec<usize>)> =
            net.named_tensors().map(|(n, t)| (n, t.shape().to_vec())).collect();
        let found: Vec<(String, Vec<usize>)> = header.tensors.into_iter().map(|e| (e.name, e.shape)).collect();
        if expected != found {
            return Err(Error::Parse("checkpoint tensors do not match the configured layout".into()));
        }
        for t in net.trainable_mut() {
            let mut raw = vec![0u8; 8 * t.len()];
            input.read_exact(&mut raw)?;
            for (v, b) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
            }
        }
        Ok(net)
    }

    fn named_tensors(&self) -> impl Iterator<Item = (String, &Tensor)> {
        let suffix = if self.is_mean_field() { ".mu" } else { "" };
        let names = |suffix: &'static str| {
            self.layers
                .iter()
                .flat_map(move |l| l.tensor_names().iter().map(move |t| format!("{}.{t}{suffix}", l.name)))
        };
        let mu = names(suffix).zip(self.mu.iter());
        let rho = names(".rho").zip(self.rho.iter().flatten());
        mu.chain(rho)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    mode: String,
    config: NetConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Inverted-dropout mask: each entry is `1/(1-p)` with probability `1-p`,
/// else 0.
pub fn dropout_mask(shape: &[usize], p: f64, seed: u64) -> Result<Tensor> {
    let mut rng = rng::stream(seed, Stream::Sampling);
    dropout_mask_from(shape, p, &mut rng)
}

fn dropout_mask_from(shape: &[usize], p: f64, rng: &mut (impl Rng + ?Sized)) -> Result<Tensor> {
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid!("dropout rate {p} outside (0,1)"));
    }
    let keep = 1.0 / (1.0 - p);
    let n = shape.iter().product();
    let data = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
    Tensor::new(shape, data)
}
