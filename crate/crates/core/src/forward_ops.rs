//! Degradation operators and the classical reconstruction baselines.
//!
//! Every operator here is linear. Each one can act on an [`Image`]
//! directly ([`ForwardOperator::apply`], [`ForwardOperator::adjoint`]) or
//! be inserted into an autodiff graph through [`ForwardOperator::linear_map`],
//! where its adjoint serves as the backward pass.
//!
//! Radon geometry: parallel rays, one detector per image column with unit
//! spacing, rotation about the image centre `((S-1)/2, (S-1)/2)`. Angle
//! `θ` has detector normal `n = (cos θ, sin θ)` in `(column, row)`
//! coordinates; each ray is sampled at unit steps along `(-sin θ, cos θ)`
//! with bilinear interpolation and zero outside the image.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{invalid, Error, Result};
use crate::image::{Image, Mask};
use crate::rng::{self, Stream};
use crate::tensor::LinearMap;

/// Noise level of the denoising experiments.
pub const DENOISE_SIGMA: f64 = 0.1;

/// Integer factor of the super-resolution operator.
pub const SR_FACTOR: usize = 4;

/// Projection angles for the sparse-view setup.
pub const CT_ANGLES: usize = 45;

/// `n` angles evenly covering `[0, π)`; 45 angles give 4° spacing.
pub fn uniform_angles(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 * PI / n as f64).collect()
}

/// Line integrals stacked by angle: row `a` holds the projection at `angles[a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    angles: Vec<f64>,
    values: Image,
}

impl Sinogram {
    pub fn new(angles: Vec<f64>, values: Image) -> Result<Self> {
        if angles.is_empty() || angles.len() != values.height() {
            return Err(invalid!(
                "{} angles for a sinogram with {} rows",
                angles.len(),
                values.height()
            ));
        }
        Ok(Self { angles, values })
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn n_detectors(&self) -> usize {
        self.values.width()
    }

    pub fn values(&self) -> &Image {
        &self.values
    }

    pub fn into_values(self) -> Image {
        self.values
    }

    /// One CSV row per angle, no header.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
        for a in 0..self.n_angles() {
            let row = &self.values.pixels()[a * self.n_detectors()..(a + 1) * self.n_detectors()];
            w.write_record(row.iter().map(|v| format!("{v:e}"))).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, angles: Vec<f64>) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
        let mut values = Vec::new();
        let mut width = None;
        let mut rows = 0;
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            if *width.get_or_insert(rec.len()) != rec.len() {
                return Err(Error::Parse("ragged sinogram CSV".into()));
            }
            for field in rec.iter() {
                values.push(field.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{e}")))?);
            }
            rows += 1;
        }
        Self::new(angles, Image::new(rows, width.unwrap_or(0), values)?)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// Sparse parallel-beam system matrix with one row per (angle, detector).
pub struct RadonOperator {
    size: usize,
    angles: Vec<f64>,
    offsets: Vec<usize>,
    index: Vec<u32>,
    weight: Vec<f64>,
}

impl std::fmt::Debug for RadonOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RadonOperator")
            .field("size", &self.size)
            .field("n_angles", &self.angles.len())
            .field("nnz", &self.weight.len())
            .finish()
    }
}

impl RadonOperator {
    pub fn new(size: usize, angles: &[f64]) -> Result<Self> {
        if angles.is_empty() {
            return Err(invalid!("radon transform needs at least one angle"));
        }
        if size == 0 {
            return Err(invalid!("radon transform of an empty image"));
        }
        let centre = (size as f64 - 1.0) / 2.0;
        let reach = (size as f64 * std::f64::consts::SQRT_2 / 2.0).ceil() as i64 + 1;
        let mut offsets = vec![0];
        let mut index = Vec::new();
        let mut weight = Vec::new();
        for &theta in angles {
            let (sn, cs) = theta.sin_cos();
            for d in 0..size {
                let t = d as f64 - centre;
                for step in -reach..=reach {
                    let s = step as f64;
                    let x = centre + t * cs - s * sn;
                    let y = centre + t * sn + s * cs;
                    push_bilinear(size, x, y, 1.0, &mut index, &mut weight);
                }
                offsets.push(index.len());
            }
        }
        Ok(Self { size, angles: angles.to_vec(), offsets, index, weight })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn forward(&self, x: &Image) -> Result<Sinogram> {
        if x.dims() != (self.size, self.size) {
            return Err(invalid!("radon operator for {0}x{0} applied to {1:?}", self.size, x.dims()));
        }
        let mut out = vec![0.0; self.output_len()];
        self.apply(x.pixels(), &mut out);
        Sinogram::new(self.angles.clone(), Image::new(self.angles.len(), self.size, out)?)
    }

    /// Unfiltered backprojection, the exact adjoint of [`Self::forward`].
    pub fn backproject(&self, s: &Sinogram) -> Result<Image> {
        if s.n_angles() != self.angles.len() || s.n_detectors() != self.size {
            return Err(invalid!("sinogram shape does not match operator"));
        }
        let mut out = vec![0.0; self.input_len()];
        self.adjoint(s.values().pixels(), &mut out);
        Image::new(self.size, self.size, out)
    }
}

fn push_bilinear(size: usize, x: f64, y: f64, scale: f64, index: &mut Vec<u32>, weight: &mut Vec<f64>) {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let n = size as i64;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let (r, c) = (y0 + dy, x0 + dx);
            let w = wx * wy * scale;
            if w != 0.0 && r >= 0 && r < n && c >= 0 && c < n {
                index.push((r * n + c) as u32);
                weight.push(w);
            }
        }
    }
}

impl LinearMap for RadonOperator {
    fn input_len(&self) -> usize {
        self.size * self.size
    }

    fn output_len(&self) -> usize {
        self.angles.len() * self.size
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (ray, o) in out.iter_mut().enumerate() {
            let (a, b) = (self.offsets[ray], self.offsets[ray + 1]);
            *o = self.index[a..b].iter().zip(&self.weight[a..b]).map(|(&i, &w)| w * x[i as usize]).sum();
        }
    }

    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (ray, &g) in y.iter().enumerate() {
            let (a, b) = (self.offsets[ray], self.offsets[ray + 1]);
            for (&i, &w) in self.index[a..b].iter().zip(&self.weight[a..b]) {
                out[i as usize] += w * g;
            }
        }
    }
}

struct IdentityMap(usize);

impl LinearMap for IdentityMap {
    fn input_len(&self) -> usize {
        self.0
    }
    fn output_len(&self) -> usize {
        self.0
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }
    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(y);
    }
}

struct NearestDownsample {
    height: usize,
    width: usize,
    factor: usize,
}

impl LinearMap for NearestDownsample {
    fn input_len(&self) -> usize {
        self.height * self.width
    }
    fn output_len(&self) -> usize {
        self.input_len() / (self.factor * self.factor)
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let ow = self.width / self.factor;
        for (k, o) in out.iter_mut().enumerate() {
            let (r, c) = (k / ow, k % ow);
            *o = x[r * self.factor * self.width + c * self.factor];
        }
    }
    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let ow = self.width / self.factor;
        for (k, &g) in y.iter().enumerate() {
            let (r, c) = (k / ow, k % ow);
            out[r * self.factor * self.width + c * self.factor] = g;
        }
    }
}

struct MaskMap(Vec<f64>);

impl LinearMap for MaskMap {
    fn input_len(&self) -> usize {
        self.0.len()
    }
    fn output_len(&self) -> usize {
        self.0.len()
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for ((o, &v), &m) in out.iter_mut().zip(x).zip(&self.0) {
            *o = v * m;
        }
    }
    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        self.apply(y, out);
    }
}

/// The forward process `F` mapping a clean image to its observation.
#[derive(Clone, Debug)]
pub enum ForwardOperator {
    Identity,
    /// Keeps the top-left pixel of every `factor x factor` block.
    DownsampleNearest { factor: usize },
    Mask(Mask),
    Radon(Arc<RadonOperator>),
}

impl ForwardOperator {
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match self {
            Self::Identity => Ok((h, w)),
            Self::DownsampleNearest { factor } => {
                if *factor == 0 || !h.is_multiple_of(*factor) || !w.is_multiple_of(*factor) {
                    return Err(invalid!("{h}x{w} is not divisible by {factor}"));
                }
                Ok((h / factor, w / factor))
            }
            Self::Mask(m) => {
                if m.dims() != (h, w) {
                    return Err(invalid!("mask {:?} for image {h}x{w}", m.dims()));
                }
                Ok((h, w))
            }
            Self::Radon(r) => {
                if (h, w) != (r.size(), r.size()) {
                    return Err(invalid!("radon operator for {0}x{0} applied to {h}x{w}", r.size()));
                }
                Ok((r.angles().len(), r.size()))
            }
        }
    }

    /// Whether a per-pixel variance can be pushed through the operator and
    /// stay a per-pixel Gaussian variance. False once pixels are summed.
    pub fn carries_variance(&self) -> bool {
        !matches!(self, Self::Radon(_))
    }

    pub fn linear_map(&self, h: usize, w: usize) -> Result<Arc<dyn LinearMap>> {
        self.output_dims(h, w)?;
        Ok(match self {
            Self::Identity => Arc::new(IdentityMap(h * w)),
            Self::DownsampleNearest { factor } => Arc::new(NearestDownsample { height: h, width: w, factor: *factor }),
            Self::Mask(m) => Arc::new(MaskMap(m.weights().into_pixels())),
            Self::Radon(r) => r.clone(),
        })
    }

    pub fn apply(&self, x: &Image) -> Result<Image> {
        let (oh, ow) = self.output_dims(x.height(), x.width())?;
        let map = self.linear_map(x.height(), x.width())?;
        let mut out = vec![0.0; oh * ow];
        map.apply(x.pixels(), &mut out);
        Image::new(oh, ow, out)
    }

    /// Adjoint applied to an observation; `(h, w)` is the image domain.
    pub fn adjoint(&self, y: &Image, h: usize, w: usize) -> Result<Image> {
        let (oh, ow) = self.output_dims(h, w)?;
        if y.dims() != (oh, ow) {
            return Err(invalid!("observation {:?} does not match operator output {oh}x{ow}", y.dims()));
        }
        let map = self.linear_map(h, w)?;
        let mut out = vec![0.0; h * w];
        map.adjoint(y.pixels(), &mut out);
        Image::new(h, w, out)
    }
}

pub fn op_identity(x: &Image) -> Image {
    x.clone()
}

/// Nearest-neighbour 4x downsampling (top-left of each 4x4 block).
pub fn op_downsample_nn(x: &Image) -> Result<Image> {
    ForwardOperator::DownsampleNearest { factor: SR_FACTOR }.apply(x)
}

pub fn op_mask(x: &Image, m: &Mask) -> Result<Image> {
    if x.dims() != m.dims() {
        return Err(invalid!("mask {:?} vs image {:?}", m.dims(), x.dims()));
    }
    ForwardOperator::Mask(m.clone()).apply(x)
}

pub fn op_radon(x: &Image, angles: &[f64]) -> Result<Sinogram> {
    if x.height() != x.width() {
        return Err(invalid!("radon transform needs a square image, got {:?}", x.dims()));
    }
    RadonOperator::new(x.height(), angles)?.forward(x)
}

/// Ram-Lak filtered backprojection, clipped to `[0,1]`.
pub fn op_fbp(s: &Sinogram) -> Result<Image> {
    Ok(filtered_backprojection(s)?.clip01())
}

/// Filtered backprojection without the final clip.
///
/// Each projection is zero-padded to the next power of two at or above
/// twice the detector count and multiplied in frequency by the transform
/// of the band-limited spatial ramp kernel (`1/4` at 0, `-1/(π n)^2` at
/// odd `n`). Backprojection interpolates linearly along the detector.
pub fn filtered_backprojection(s: &Sinogram) -> Result<Image> {
    let size = s.n_detectors();
    let npad = (2 * size).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(npad);
    let ifft = planner.plan_fft_inverse(npad);

    let mut kernel: Vec<Complex<f64>> = (0..npad)
        .map(|i| {
            let n = if i <= npad / 2 { i as i64 } else { i as i64 - npad as i64 };
            let v = if n == 0 {
                0.25
            } else if n % 2 != 0 {
                -1.0 / (PI * PI * (n * n) as f64)
            } else {
                0.0
            };
            Complex::new(v, 0.0)
        })
        .collect();
    fft.process(&mut kernel);

    let centre = (size as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; size * size];
    let mut buf = vec![Complex::new(0.0, 0.0); npad];
    for (a, &theta) in s.angles().iter().enumerate() {
        buf.iter_mut().for_each(|v| *v = Complex::new(0.0, 0.0));
        for (d, v) in buf.iter_mut().enumerate().take(size) {
            v.re = s.values().get(a, d);
        }
        fft.process(&mut buf);
        buf.iter_mut().zip(&kernel).for_each(|(v, k)| *v *= k);
        ifft.process(&mut buf);
        let q: Vec<f64> = buf[..size].iter().map(|v| v.re / npad as f64).collect();
        let (sn, cs) = theta.sin_cos();
        for r in 0..size {
            for c in 0..size {
                let u = (c as f64 - centre) * cs + (r as f64 - centre) * sn + centre;
                let i0 = u.floor();
                let f = u - i0;
                let i0 = i0 as i64;
                let at = |i: i64| if i >= 0 && (i as usize) < size { q[i as usize] } else { 0.0 };
                out[r * size + c] += (1.0 - f) * at(i0) + f * at(i0 + 1);
            }
        }
    }
    let scale = PI / s.n_angles() as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    Image::new(size, size, out)
}

/// Bilinear 4x upsampling with half-pixel centres and edge clamping.
pub fn op_upsample_bilinear4x(x: &Image) -> Image {
    upsample_bilinear(x, SR_FACTOR)
}

pub fn upsample_bilinear(x: &Image, factor: usize) -> Image {
    let (h, w) = x.dims();
    let src = |v: usize, n: usize| {
        let s = ((v as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    Image::from_fn(h * factor, w * factor, |r, c| {
        let (r0, r1, fr) = src(r, h);
        let (c0, c1, fc) = src(c, w);
        let top = (1.0 - fc) * x.get(r0, c0) + fc * x.get(r0, c1);
        let bot = (1.0 - fc) * x.get(r1, c0) + fc * x.get(r1, c1);
        (1.0 - fr) * top + fr * bot
    })
}

/// Maps `[0,1]` intensities onto a normalised log scale, for speckle-type
/// noise that is additive in the log domain.
pub fn log_transform(x: &Image) -> Image {
    let k = 255.0_f64;
    x.map(|v| (1.0 + k * v.max(0.0)).ln() / (1.0 + k).ln())
}

/// The inverse problem being solved, with its forward model.
#[derive(Clone, Debug)]
pub enum Task {
    Denoise { noise_std: f64 },
    SuperResolution,
    Inpaint(Mask),
    Ct { angles: Vec<f64> },
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Denoise { .. } => "denoise",
            Self::SuperResolution => "sr",
            Self::Inpaint(_) => "inpaint",
            Self::Ct { .. } => "ct",
        }
    }

    pub fn operator(&self, h: usize, w: usize) -> Result<ForwardOperator> {
        let op = match self {
            Self::Denoise { .. } => ForwardOperator::Identity,
            Self::SuperResolution => ForwardOperator::DownsampleNearest { factor: SR_FACTOR },
            Self::Inpaint(m) => ForwardOperator::Mask(m.clone()),
            Self::Ct { angles } => {
                if h != w {
                    return Err(invalid!("CT needs a square image, got {h}x{w}"));
                }
                ForwardOperator::Radon(Arc::new(RadonOperator::new(h, angles)?))
            }
        };
        op.output_dims(h, w)?;
        Ok(op)
    }

    /// Dimensions of the reconstruction for an observation of `obs_dims`.
    pub fn image_dims(&self, obs_dims: (usize, usize)) -> (usize, usize) {
        match self {
            Self::SuperResolution => (obs_dims.0 * SR_FACTOR, obs_dims.1 * SR_FACTOR),
            Self::Ct { .. } => (obs_dims.1, obs_dims.1),
            _ => obs_dims,
        }
    }
}

/// Simulates the observation `y = F[x] (+ noise)`.
pub fn corrupt(x: &Image, task: &Task, seed: u64) -> Result<Image> {
    let op = task.operator(x.height(), x.width())?;
    let y = op.apply(x)?;
    match task {
        Task::Denoise { noise_std } if *noise_std > 0.0 => {
            let mut rng = rng::stream(seed, Stream::Corruption);
            let normal = Normal::new(0.0, *noise_std).map_err(|e| invalid!("{e}"))?;
            let noisy = y.pixels().iter().map(|v| v + normal.sample(&mut rng)).collect();
            Image::new(y.height(), y.width(), noisy)
        }
        Task::Denoise { noise_std } if *noise_std < 0.0 => Err(invalid!("negative noise level")),
        _ => Ok(y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
        Image::from_fn(h, w, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_is_identity() {
        let x = Image::from_fn(3, 4, |r, c| (r * c) as f64);
        assert_eq!(op_identity(&x), x);
        assert_eq!(op_identity(&op_identity(&x)), x);
        assert_eq!(ForwardOperator::Identity.adjoint(&x, 3, 4).unwrap(), x);
    }

    #[test]
    fn downsample_selects_block_corners() {
        let x = Image::from_fn(8, 8, |r, c| (r * 8 + c) as f64);
        let y = op_downsample_nn(&x).unwrap();
        assert_eq!(y.pixels(), &[0.0, 4.0, 32.0, 36.0]);
        let constant = Image::filled(8, 4, 0.3);
        assert!(op_downsample_nn(&constant).unwrap().pixels().iter().all(|&v| v == 0.3));
        assert!(op_downsample_nn(&Image::zeros(6, 8)).is_err());
        let back = ForwardOperator::DownsampleNearest { factor: 4 }.adjoint(&Image::filled(2, 2, 1.0), 8, 8).unwrap();
        assert_eq!(back.pixels().iter().sum::<f64>(), 4.0);
        assert_eq!(back.get(0, 0), 1.0);
        assert_eq!(back.get(0, 1), 0.0);
        assert_eq!(back.get(4, 4), 1.0);
    }

    #[test]
    fn mask_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(6, 6, &mut rng);
        assert_eq!(op_mask(&x, &Mask::all(6, 6, true)).unwrap(), x);
        assert!(op_mask(&x, &Mask::all(6, 6, false)).unwrap().pixels().iter().all(|&v| v == 0.0));
        let m = Mask::from_fn(6, 6, |r, c| (r + c) % 2 == 0);
        let once = op_mask(&x, &m).unwrap();
        assert_eq!(op_mask(&once, &m).unwrap(), once);
        assert!(op_mask(&x, &Mask::all(5, 6, true)).is_err());
    }

    #[test]
    fn adjoint_identity_for_every_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 16;
        let ops = [
            ForwardOperator::Identity,
            ForwardOperator::DownsampleNearest { factor: 4 },
            ForwardOperator::Mask(Mask::from_fn(n, n, |r, c| (r * 3 + c) % 5 != 0)),
            ForwardOperator::Radon(Arc::new(RadonOperator::new(n, &uniform_angles(7)).unwrap())),
        ];
        for op in &ops {
            let (oh, ow) = op.output_dims(n, n).unwrap();
            let x = random_image(n, n, &mut rng);
            let u = random_image(oh, ow, &mut rng);
            let lhs = dot(op.apply(&x).unwrap().pixels(), u.pixels());
            let rhs = dot(x.pixels(), op.adjoint(&u, n, n).unwrap().pixels());
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{op:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn radon_of_zero_is_zero() {
        let s = op_radon(&Image::zeros(16, 16), &uniform_angles(5)).unwrap();
        assert!(s.values().pixels().iter().all(|&v| v == 0.0));
        assert!(op_radon(&Image::zeros(16, 16), &[]).is_err());
        assert!(op_radon(&Image::zeros(16, 8), &[0.0]).is_err());
    }

    #[test]
    fn radon_of_centred_disk_is_rotation_invariant() {
        let size = 64;
        let r = 20.0;
        let disk = phantom::disk(size, r);
        let s = op_radon(&disk, &uniform_angles(12)).unwrap();
        let nd = s.n_detectors();
        // centre of the detector row sits between detectors 31 and 32
        for a in 0..s.n_angles() {
            let centre_ray = 0.5 * (s.values().get(a, nd / 2 - 1) + s.values().get(a, nd / 2));
            assert!((centre_ray - 2.0 * r).abs() / (2.0 * r) < 0.02, "angle {a}: {centre_ray}");
        }
        let row0: Vec<f64> = (0..nd).map(|d| s.values().get(0, d)).collect();
        for a in 1..s.n_angles() {
            for (d, v0) in row0.iter().enumerate() {
                assert!((s.values().get(a, d) - v0).abs() < 0.05 * 2.0 * r);
            }
        }
    }

    #[test]
    fn radon_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let op = RadonOperator::new(12, &uniform_angles(9)).unwrap();
        let x = random_image(12, 12, &mut rng);
        let z = random_image(12, 12, &mut rng);
        let (a, b) = (0.7, -2.3);
        let combo = x.zip_map(&z, |p, q| a * p + b * q).unwrap();
        let lhs = op.forward(&combo).unwrap();
        let sx = op.forward(&x).unwrap();
        let sz = op.forward(&z).unwrap();
        for i in 0..lhs.values().len() {
            let expect = a * sx.values().pixels()[i] + b * sz.values().pixels()[i];
            assert!((lhs.values().pixels()[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn fbp_of_zero_is_zero() {
        let s = Sinogram::new(uniform_angles(10), Image::zeros(10, 16)).unwrap();
        assert!(op_fbp(&s).unwrap().pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilinear_upsampling_properties() {
        let c = Image::filled(3, 5, 0.42);
        assert!(op_upsample_bilinear4x(&c).pixels().iter().all(|&v| (v - 0.42).abs() < 1e-15));
        let ramp = Image::from_fn(4, 6, |r, c| (r * 6 + c) as f64 * 0.1);
        let up = op_upsample_bilinear4x(&ramp);
        assert_eq!(up.dims(), (16, 24));
        for r in 0..16 {
            for c in 1..24 {
                assert!(up.get(r, c) >= up.get(r, c - 1));
            }
        }
        let smooth = Image::from_fn(8, 8, |r, c| ((r as f64) * 0.3).sin() + (c as f64 * 0.2).cos());
        let round = op_downsample_nn(&op_upsample_bilinear4x(&smooth)).unwrap();
        for (a, b) in round.pixels().iter().zip(smooth.pixels()) {
            // top-left of each block sits 3/8 px before the source centre
            assert!((a - b).abs() < 0.15);
        }
    }

    #[test]
    fn denoise_corruption_statistics() {
        let x = Image::filled(400, 250, 0.5);
        assert_eq!(corrupt(&x, &Task::Denoise { noise_std: 0.0 }, 3).unwrap(), x);
        let y = corrupt(&x, &Task::Denoise { noise_std: 0.1 }, 3).unwrap();
        let res: Vec<f64> = y.pixels().iter().map(|v| v - 0.5).collect();
        let mean = res.iter().sum::<f64>() / res.len() as f64;
        let sd = (res.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / res.len() as f64).sqrt();
        assert!((sd - 0.1).abs() < 0.002, "{sd}");
        assert_eq!(corrupt(&x, &Task::Denoise { noise_std: 0.1 }, 3).unwrap(), y);
    }

    #[test]
    fn ct_corruption_is_the_radon_transform() {
        let x = phantom::shepp_logan(32);
        let angles = uniform_angles(CT_ANGLES);
        assert!((angles[1] - angles[0] - 4f64.to_radians()).abs() < 1e-12);
        let y = corrupt(&x, &Task::Ct { angles: angles.clone() }, 0).unwrap();
        assert_eq!(&y, op_radon(&x, &angles).unwrap().values());
    }

    #[test]
    fn sinogram_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let s = op_radon(&phantom::shepp_logan(16), &uniform_angles(4)).unwrap();
        s.write_csv(&p).unwrap();
        assert_eq!(Sinogram::read_csv(&p, uniform_angles(4)).unwrap(), s);
    }
}
