//! Seeded synthetic clean patches and the six on-the-fly degradation families.
//!
//! All images are `C×H×W` with values in `[0, 1]`. Each generator is a pure
//! function of its inputs and seed.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, derive_seed, DetRng};
use crate::routing::FIXED_PROMPTS;
use crate::tensor::Tensor;

/// The synthetic restoration tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Denoise,
    Deblur,
    Destripe,
    Brightness,
    Histeq,
    Linstretch,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Denoise,
        Task::Deblur,
        Task::Destripe,
        Task::Brightness,
        Task::Histeq,
        Task::Linstretch,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Task::Denoise => "denoise",
            Task::Deblur => "deblur",
            Task::Destripe => "destripe",
            Task::Brightness => "brightness",
            Task::Histeq => "histeq",
            Task::Linstretch => "linstretch",
        }
    }

    /// Label in the fixed prompt table.
    pub fn class_index(self) -> usize {
        let code = match self {
            Task::Denoise => "DN",
            Task::Deblur => "DB",
            Task::Destripe => "DS",
            Task::Brightness => "BE",
            Task::Histeq => "EQ",
            Task::Linstretch => "LS",
        };
        FIXED_PROMPTS
            .iter()
            .position(|(c, _)| *c == code)
            .expect("every task has a fixed prompt")
    }

    pub fn fixed_prompt(self) -> &'static str {
        FIXED_PROMPTS[self.class_index()].1
    }

    /// Built-in training prompt pool; the fixed evaluation prompt is excluded.
    pub fn default_pool(self) -> &'static [&'static str] {
        match self {
            Task::Denoise => &[
                "Remove the noise from this image.",
                "Denoise the scene while keeping edges sharp.",
                "Suppress the grainy noise in this capture.",
            ],
            Task::Deblur => &[
                "Sharpen this blurry image.",
                "Remove the blur caused by camera motion.",
                "Restore focus to the out-of-focus scene.",
            ],
            Task::Destripe => &[
                "Remove the stripe artifacts from this image.",
                "Clean up the striping noise across the scene.",
                "Eliminate the periodic stripes from the sensor.",
            ],
            Task::Brightness => &[
                "Correct the brightness of this image.",
                "Fix the exposure so the scene looks natural.",
                "Adjust the overall brightness to a normal level.",
            ],
            Task::Histeq => &[
                "Undo the histogram equalization on this image.",
                "Restore the original tones after equalization.",
                "Recover natural contrast from the equalized scene.",
            ],
            Task::Linstretch => &[
                "Undo the linear stretch applied to this image.",
                "Restore the original levels after the contrast stretch.",
                "Recover natural intensities from the stretched scene.",
            ],
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.id() == s)
            .ok_or_else(|| Error::config(format!("unknown task {s:?}")))
    }
}

fn check_image(x: &Tensor, op: &'static str) -> Result<()> {
    if x.rank() != 3 {
        return Err(Error::shape(op, x.shape(), &[]));
    }
    Ok(())
}

fn clamp01(x: &Tensor) -> Tensor {
    x.map(|v| v.clamp(0.0, 1.0))
}

/// One octave of bilinear value noise on a `cell`-spaced lattice.
fn value_noise<R: Rng + ?Sized>(h: usize, w: usize, cell: f64, rng: &mut R) -> Vec<f64> {
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let fy = i as f64 / cell;
        let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for j in 0..w {
            let fx = j as f64 / cell;
            let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let at = |y: usize, x: usize| lattice[y * gw + x];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Multi-octave texture rescaled to span `[0, 1]`.
fn texture<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Vec<f64> {
    let mut acc = vec![0.0; h * w];
    let mut cell = h.max(w) as f64 / 2.0;
    let mut amp = 1.0;
    while cell >= 1.0 {
        for (a, v) in acc.iter_mut().zip(value_noise(h, w, cell, rng)) {
            *a += amp * v;
        }
        cell /= 2.0;
        amp *= 0.5;
    }
    let lo = acc.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    acc.into_iter().map(|v| (v - lo) / span).collect()
}

/// Seeded clean patch: two shared textures mixed and affinely recoloured per
/// channel, so bands are correlated but distinct.
pub fn gen_clean_patch(seed: u64, channels: usize, height: usize, width: usize) -> Result<Tensor> {
    if channels == 0 || height < 8 || width < 8 {
        return Err(Error::config(format!(
            "clean patches need C >= 1 and H, W >= 8, got {channels}x{height}x{width}"
        )));
    }
    let mut r = rng::stream(seed, 0);
    let a = texture(height, width, &mut r);
    let b = texture(height, width, &mut r);
    let mut data = Vec::with_capacity(channels * height * width);
    for _ in 0..channels {
        let mixw: f64 = r.random_range(0.2..0.8);
        let gain: f64 = r.random_range(0.5..0.95);
        let offset: f64 = r.random_range(0.0..1.0 - gain);
        data.extend(
            a.iter()
                .zip(&b)
                .map(|(u, v)| offset + gain * (mixw * u + (1.0 - mixw) * v)),
        );
    }
    Tensor::new(&[channels, height, width], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlurKind {
    Gaussian,
    Motion,
    Mean,
    Disk,
}

impl BlurKind {
    pub const ALL: [BlurKind; 4] = [BlurKind::Gaussian, BlurKind::Motion, BlurKind::Mean, BlurKind::Disk];
}

/// Normalised `size×size` kernel. `strength ∈ [0, 1]` blends a delta with the
/// family kernel, so strength 0 is the identity. Gaussian uses `σ = size/4`;
/// motion is a one-pixel-wide centred line through the whole window at `angle`
/// degrees counter-clockwise from the +x axis.
pub fn blur_kernel(kind: BlurKind, size: usize, strength: f64, angle: f64) -> Result<Tensor> {
    if size % 2 == 0 || !(3..=9).contains(&size) {
        return Err(Error::config(format!("blur size must be odd in [3, 9], got {size}")));
    }
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::config(format!("blur strength must lie in [0, 1], got {strength}")));
    }
    let c = (size / 2) as f64;
    let mut k = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            let (dy, dx) = (i as f64 - c, j as f64 - c);
            k[i * size + j] = match kind {
                BlurKind::Mean => 1.0,
                BlurKind::Gaussian => {
                    let sigma = size as f64 / 4.0;
                    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
                }
                BlurKind::Disk => {
                    if (dx * dx + dy * dy).sqrt() <= c + 1e-9 {
                        1.0
                    } else {
                        0.0
                    }
                }
                BlurKind::Motion => {
                    // rows grow downwards, so the +y axis of the line is -dy
                    let (s, co) = angle.to_radians().sin_cos();
                    let along = dx * co - dy * s;
                    let across = dx * s + dy * co;
                    // the line runs corner to corner on diagonals
                    let reach = c / co.abs().max(s.abs()) + 0.5;
                    if along.abs() <= reach {
                        (1.0 - 2.0 * across.abs()).max(0.0)
                    } else {
                        0.0
                    }
                }
            };
        }
    }
    let total: f64 = k.iter().sum();
    let centre = (size / 2) * size + size / 2;
    for (idx, v) in k.iter_mut().enumerate() {
        let delta = if idx == centre { 1.0 } else { 0.0 };
        *v = (1.0 - strength) * delta + strength * *v / total;
    }
    Tensor::new(&[size, size], k)
}

/// Per-channel correlation with edge-replicated borders.
pub fn convolve_channels(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    check_image(x, "convolve_channels")?;
    let (ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ks = kernel.shape()[0];
    let r = (ks / 2) as isize;
    let mut out = Tensor::zeros(x.shape());
    for c in 0..ch {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for a in 0..ks {
                    let y = (i as isize + a as isize - r).clamp(0, h as isize - 1) as usize;
                    for b in 0..ks {
                        let xx = (j as isize + b as isize - r).clamp(0, w as isize - 1) as usize;
                        acc += kernel.data()[a * ks + b] * src[y * w + xx];
                    }
                }
                dst[i * w + j] = acc;
            }
        }
    }
    Ok(out)
}

pub fn apply_blur(x: &Tensor, kind: BlurKind, size: usize, strength: f64, angle: f64) -> Result<Tensor> {
    let k = blur_kernel(kind, size, strength, angle)?;
    Ok(clamp01(&convolve_channels(x, &k)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    Uniform,
    Poisson,
    Rayleigh,
    Gamma,
    SaltPepper,
    Impulse,
    Speckle,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 8] = [
        NoiseKind::Gaussian,
        NoiseKind::Uniform,
        NoiseKind::Poisson,
        NoiseKind::Rayleigh,
        NoiseKind::Gamma,
        NoiseKind::SaltPepper,
        NoiseKind::Impulse,
        NoiseKind::Speckle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Uniform => "uniform",
            NoiseKind::Poisson => "poisson",
            NoiseKind::Rayleigh => "rayleigh",
            NoiseKind::Gamma => "gamma",
            NoiseKind::SaltPepper => "salt_pepper",
            NoiseKind::Impulse => "impulse",
            NoiseKind::Speckle => "speckle",
        }
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', ' '], "_");
        let norm = if norm == "salt_and_pepper" { "salt_pepper".to_string() } else { norm };
        NoiseKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::config(format!("unknown noise distribution {s:?}")))
    }
}

/// One named distribution of a noise mixture. `strength` is the standard
/// deviation for the additive kinds and speckle, the photon-noise level
/// `1/√peak` for Poisson, and the corrupted-pixel rate for salt-and-pepper and
/// impulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseComponent {
    pub kind: NoiseKind,
    pub strength: f64,
}

/// Applies each component in order, then clamps to `[0, 1]`.
pub fn apply_noise<R: Rng + ?Sized>(x: &Tensor, mixture: &[NoiseComponent], rng: &mut R) -> Result<Tensor> {
    check_image(x, "apply_noise")?;
    let mut out = x.clone();
    for comp in mixture {
        let s = comp.strength;
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::config(format!("noise strength must be nonnegative, got {s}")));
        }
        if s == 0.0 {
            continue;
        }
        let data = out.data_mut();
        match comp.kind {
            NoiseKind::Gaussian => {
                let n = Normal::new(0.0, s).map_err(|e| Error::config(e.to_string()))?;
                data.iter_mut().for_each(|v| *v += n.sample(rng));
            }
            NoiseKind::Uniform => {
                let half = s * 3f64.sqrt();
                data.iter_mut().for_each(|v| *v += rng.random_range(-half..half));
            }
            NoiseKind::Poisson => {
                if s > 1.0 {
                    return Err(Error::config("poisson noise level must be at most 1"));
                }
                let peak = 1.0 / (s * s);
                for v in data.iter_mut() {
                    let lambda = v.max(0.0) * peak;
                    if lambda > 0.0 {
                        let p = Poisson::new(lambda).map_err(|e| Error::config(e.to_string()))?;
                        *v = p.sample(rng) / peak;
                    }
                }
            }
            NoiseKind::Rayleigh => {
                // inverse CDF, centred on the distribution mean
                let scale = s / (2.0 - PI / 2.0).sqrt();
                let mean = scale * (PI / 2.0).sqrt();
                for v in data.iter_mut() {
                    let u: f64 = rng.random();
                    *v += scale * (-2.0 * (1.0 - u).ln()).sqrt() - mean;
                }
            }
            NoiseKind::Gamma => {
                let shape: f64 = 2.0;
                let scale = s / shape.sqrt();
                let g = Gamma::new(shape, scale).map_err(|e| Error::config(e.to_string()))?;
                data.iter_mut().for_each(|v| *v += g.sample(rng) - shape * scale);
            }
            NoiseKind::SaltPepper | NoiseKind::Impulse => {
                if s > 1.0 {
                    return Err(Error::config("corruption rate must be at most 1"));
                }
                for v in data.iter_mut() {
                    if rng.random_bool(s) {
                        *v = if comp.kind == NoiseKind::SaltPepper {
                            if rng.random_bool(0.5) { 1.0 } else { 0.0 }
                        } else {
                            rng.random()
                        };
                    }
                }
            }
            NoiseKind::Speckle => {
                let n = Normal::new(0.0, s).map_err(|e| Error::config(e.to_string()))?;
                data.iter_mut().for_each(|v| *v *= 1.0 + n.sample(rng));
            }
        }
    }
    Ok(clamp01(&out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StripeSpec {
    pub period: f64,
    pub amplitude: f64,
    /// Degrees; 0 gives stripes that vary across columns.
    pub angle: f64,
    pub nonuniform: bool,
}

/// The additive stripe field for an `h×w` plane. Each stripe (one period wide)
/// gets a seeded gain in `[0.5, 1.5]` when `nonuniform` is set.
pub fn stripe_field(h: usize, w: usize, spec: &StripeSpec, seed: u64) -> Result<Vec<f64>> {
    if !(spec.period >= 2.0) {
        return Err(Error::config(format!("stripe period must be >= 2, got {}", spec.period)));
    }
    let (s, c) = spec.angle.to_radians().sin_cos();
    let mut field = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let u = j as f64 * c + i as f64 * s;
            let mut v = spec.amplitude * (2.0 * PI * u / spec.period).sin();
            if spec.nonuniform {
                let stripe = (u / spec.period + 1e-9).floor() as i64;
                let mut r = rng::stream(derive_seed(seed, &[stripe as u64]), 7);
                v *= r.random_range(0.5..1.5);
            }
            field.push(v);
        }
    }
    Ok(field)
}

pub fn apply_stripes(x: &Tensor, spec: &StripeSpec, seed: u64) -> Result<Tensor> {
    check_image(x, "apply_stripes")?;
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let field = stripe_field(h, w, spec, seed)?;
    let mut out = x.clone();
    for c in 0..x.shape()[0] {
        for (v, f) in out.channel_mut(c).iter_mut().zip(&field) {
            *v += f;
        }
    }
    Ok(clamp01(&out))
}

pub fn apply_brightness(x: &Tensor, gain: f64) -> Result<Tensor> {
    if !(gain > 0.0 && gain.is_finite()) {
        return Err(Error::config(format!("brightness gain must be positive, got {gain}")));
    }
    Ok(clamp01(&x.scale(gain)))
}

fn is_constant(p: &[f64]) -> bool {
    p.iter().all(|&v| v == p[0])
}

/// Per-channel empirical-CDF remap: each value goes to the fraction of pixels in
/// its channel that are less than or equal to it. Constant channels pass through.
pub fn apply_histeq(x: &Tensor) -> Result<Tensor> {
    check_image(x, "apply_histeq")?;
    let mut out = x.clone();
    for c in 0..x.shape()[0] {
        let src = x.channel(c);
        if is_constant(src) {
            continue;
        }
        let mut sorted = src.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        for (dst, &v) in out.channel_mut(c).iter_mut().zip(src) {
            *dst = sorted.partition_point(|&s| s <= v) as f64 / n;
        }
    }
    Ok(out)
}

/// Linear-interpolated percentile of sorted data, `q ∈ [0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-channel affine map sending the `lo`/`hi` percentiles to 0/1, clamped.
/// Channels whose percentiles coincide pass through.
pub fn apply_linstretch(x: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    check_image(x, "apply_linstretch")?;
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::config(format!("stretch percentiles must satisfy 0 <= lo < hi <= 1, got {lo}, {hi}")));
    }
    let mut out = x.clone();
    for c in 0..x.shape()[0] {
        let mut sorted = x.channel(c).to_vec();
        sorted.sort_by(f64::total_cmp);
        let (p_lo, p_hi) = (percentile(&sorted, lo), percentile(&sorted, hi));
        if p_hi - p_lo <= 1e-12 {
            continue;
        }
        for v in out.channel_mut(c) {
            *v = ((*v - p_lo) / (p_hi - p_lo)).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Parameters of one degradation. Histogram and stretch mappings carry a blend
/// `strength` with the identity so that every family has a zero-severity point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DegradationSpec {
    Blur { kind: BlurKind, size: usize, strength: f64, angle: f64 },
    Noise { components: Vec<NoiseComponent> },
    Stripes(StripeSpec),
    Brightness { gain: f64 },
    Histeq { strength: f64 },
    Linstretch { lo: f64, hi: f64, strength: f64 },
}

impl DegradationSpec {
    /// Range checks for the declared parameter domains of each family.
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64, what: &str| -> Result<()> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{what} must lie in [0, 1], got {v}")))
            }
        };
        match self {
            DegradationSpec::Blur { size, strength, .. } => {
                if size % 2 == 0 || !(3..=9).contains(size) {
                    return Err(Error::config(format!("blur size must be odd in [3, 9], got {size}")));
                }
                unit(*strength, "blur strength")
            }
            DegradationSpec::Noise { components } => {
                for c in components {
                    if !(c.strength >= 0.0) {
                        return Err(Error::config("noise strength must be nonnegative"));
                    }
                    if matches!(c.kind, NoiseKind::SaltPepper | NoiseKind::Impulse | NoiseKind::Poisson) {
                        unit(c.strength, c.kind.name())?;
                    }
                }
                Ok(())
            }
            DegradationSpec::Stripes(s) => {
                if s.period < 2.0 {
                    return Err(Error::config("stripe period must be >= 2"));
                }
                if !(s.amplitude >= 0.0) {
                    return Err(Error::config("stripe amplitude must be nonnegative"));
                }
                Ok(())
            }
            DegradationSpec::Brightness { gain } => {
                if *gain > 0.0 && gain.is_finite() {
                    Ok(())
                } else {
                    Err(Error::config("brightness gain must be positive"))
                }
            }
            DegradationSpec::Histeq { strength } => unit(*strength, "histeq strength"),
            DegradationSpec::Linstretch { lo, hi, strength } => {
                if !(0.0 <= *lo && lo < hi && *hi <= 1.0) {
                    return Err(Error::config("stretch percentiles must satisfy 0 <= lo < hi <= 1"));
                }
                unit(*strength, "stretch strength")
            }
        }
    }

    /// Degrades `clean`; `seed` drives any sampling.
    pub fn apply(&self, clean: &Tensor, seed: u64) -> Result<Tensor> {
        self.validate()?;
        let blend = |mapped: Tensor, s: f64| -> Result<Tensor> {
            mapped.zip_map(clean, |m, c| s * m + (1.0 - s) * c)
        };
        match self {
            DegradationSpec::Blur { kind, size, strength, angle } => {
                apply_blur(clean, *kind, *size, *strength, *angle)
            }
            DegradationSpec::Noise { components } => {
                apply_noise(clean, components, &mut rng::stream(seed, 2))
            }
            DegradationSpec::Stripes(s) => apply_stripes(clean, s, seed),
            DegradationSpec::Brightness { gain } => apply_brightness(clean, *gain),
            DegradationSpec::Histeq { strength } => blend(apply_histeq(clean)?, *strength),
            DegradationSpec::Linstretch { lo, hi, strength } => {
                blend(apply_linstretch(clean, *lo, *hi)?, *strength)
            }
        }
    }
}

/// Training-time degradation for `task` at `severity ∈ [0, 1]`; severity 0 is
/// the identity.
pub fn training_spec(task: Task, severity: f64, r: &mut DetRng) -> DegradationSpec {
    match task {
        Task::Denoise => {
            let kind = if r.random_bool(0.6) {
                NoiseKind::Gaussian
            } else {
                NoiseKind::ALL[r.random_range(0..NoiseKind::ALL.len())]
            };
            let max = match kind {
                NoiseKind::SaltPepper | NoiseKind::Impulse => 0.1,
                NoiseKind::Poisson => 0.2,
                _ => 0.1,
            };
            DegradationSpec::Noise {
                components: vec![NoiseComponent {
                    kind,
                    strength: severity * max,
                }],
            }
        }
        Task::Deblur => DegradationSpec::Blur {
            kind: BlurKind::ALL[r.random_range(0..BlurKind::ALL.len())],
            size: [3, 5, 7][r.random_range(0..3)],
            strength: severity,
            angle: r.random_range(0.0..180.0),
        },
        Task::Destripe => DegradationSpec::Stripes(StripeSpec {
            period: r.random_range(2.0..8.0),
            amplitude: 0.15 * severity,
            angle: [0.0, 90.0, r.random_range(0.0..180.0)][r.random_range(0..3)],
            nonuniform: r.random_bool(0.5),
        }),
        Task::Brightness => {
            let dir = if r.random_bool(0.5) { 1.0 } else { -1.0 };
            DegradationSpec::Brightness {
                gain: 1.0 + dir * 0.4 * severity,
            }
        }
        Task::Histeq => DegradationSpec::Histeq { strength: severity },
        Task::Linstretch => DegradationSpec::Linstretch {
            lo: 0.02,
            hi: 0.98,
            strength: severity,
        },
    }
}

/// Fixed evaluation degradation: Gaussian σ = 0.05, 5×5 motion blur at 45°,
/// period-4 stripes, brightness gains alternating 1.2 and 0.7, and full-strength
/// histogram and stretch mappings.
pub fn evaluation_spec(task: Task, index: usize) -> DegradationSpec {
    match task {
        Task::Denoise => DegradationSpec::Noise {
            components: vec![NoiseComponent {
                kind: NoiseKind::Gaussian,
                strength: 0.05,
            }],
        },
        Task::Deblur => DegradationSpec::Blur {
            kind: BlurKind::Motion,
            size: 5,
            strength: 1.0,
            angle: 45.0,
        },
        Task::Destripe => DegradationSpec::Stripes(StripeSpec {
            period: 4.0,
            amplitude: 0.1,
            angle: 0.0,
            nonuniform: false,
        }),
        Task::Brightness => DegradationSpec::Brightness {
            gain: if index % 2 == 0 { 1.2 } else { 0.7 },
        },
        Task::Histeq => DegradationSpec::Histeq { strength: 1.0 },
        Task::Linstretch => DegradationSpec::Linstretch {
            lo: 0.02,
            hi: 0.98,
            strength: 1.0,
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradationSample {
    pub degraded: Tensor,
    pub clean: Tensor,
    pub task: Task,
    pub prompt: String,
    pub seed: u64,
    pub severity: f64,
    pub spec: DegradationSpec,
}

/// Shape of generated patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// A training sample: seeded clean patch, seeded severity in `[0, 1]`, the
/// task's degradation at that severity and a seeded prompt from `pool`.
pub fn make_sample(task: Task, seed: u64, shape: PatchShape, pool: &[String]) -> Result<DegradationSample> {
    let severity = rng::stream(seed, 1).random::<f64>();
    make_sample_at(task, seed, shape, pool, severity)
}

pub fn make_sample_at(
    task: Task,
    seed: u64,
    shape: PatchShape,
    pool: &[String],
    severity: f64,
) -> Result<DegradationSample> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::config(format!("severity must lie in [0, 1], got {severity}")));
    }
    let spec = training_spec(task, severity, &mut rng::stream(seed, 3));
    build_sample(task, seed, shape, pool, severity, spec)
}

/// A held-out sample using the fixed evaluation degradation and prompt.
pub fn make_eval_sample(task: Task, seed: u64, index: usize, shape: PatchShape) -> Result<DegradationSample> {
    let prompt = vec![task.fixed_prompt().to_string()];
    build_sample(task, seed, shape, &prompt, 1.0, evaluation_spec(task, index))
}

fn build_sample(
    task: Task,
    seed: u64,
    shape: PatchShape,
    pool: &[String],
    severity: f64,
    spec: DegradationSpec,
) -> Result<DegradationSample> {
    if pool.is_empty() {
        return Err(Error::config(format!("empty prompt pool for task {task}")));
    }
    let clean = gen_clean_patch(derive_seed(seed, &[0]), shape.channels, shape.height, shape.width)?;
    let degraded = spec.apply(&clean, derive_seed(seed, &[1]))?;
    let prompt = pool[rng::stream(seed, 4).random_range(0..pool.len())].clone();
    Ok(DegradationSample {
        degraded,
        clean,
        task,
        prompt,
        seed,
        severity,
        spec,
    })
}

/// Built-in pools as owned strings, keyed by task id.
/// Paraphrase pools plus each task's fixed evaluation prompt.
pub fn default_pools() -> BTreeMap<String, Vec<String>> {
    Task::ALL
        .iter()
        .map(|t| {
            let mut pool: Vec<String> = t.default_pool().iter().map(|s| s.to_string()).collect();
            pool.push(t.fixed_prompt().to_string());
            (t.id().to_string(), pool)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub task: Task,
    pub seed: u64,
    pub prompt: String,
    pub severity: f64,
    pub spec: DegradationSpec,
    pub degraded: String,
    pub clean: String,
}

/// Writes `degraded.tensor`, `clean.tensor` and `manifest.json` into `dir`.
pub fn write_fixture(sample: &DegradationSample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    sample.degraded.save(dir.join("degraded.tensor"))?;
    sample.clean.save(dir.join("clean.tensor"))?;
    let manifest = FixtureManifest {
        task: sample.task,
        seed: sample.seed,
        prompt: sample.prompt.clone(),
        severity: sample.severity,
        spec: sample.spec.clone(),
        degraded: "degraded.tensor".into(),
        clean: "clean.tensor".into(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_fixture(dir: &Path) -> Result<DegradationSample> {
    let m: FixtureManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    Ok(DegradationSample {
        degraded: Tensor::load(dir.join(&m.degraded))?,
        clean: Tensor::load(dir.join(&m.clean))?,
        task: m.task,
        prompt: m.prompt,
        seed: m.seed,
        severity: m.severity,
        spec: m.spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SHAPE: PatchShape = PatchShape {
        channels: 3,
        height: 16,
        width: 16,
    };

    fn in_unit(t: &Tensor) -> bool {
        t.data().iter().all(|v| (0.0..=1.0).contains(v))
    }

    #[test]
    fn clean_patch_contract() {
        let a = gen_clean_patch(1, 4, 16, 20).unwrap();
        assert_eq!(a, gen_clean_patch(1, 4, 16, 20).unwrap());
        assert!(in_unit(&a));
        let b = gen_clean_patch(2, 4, 16, 20).unwrap();
        let mad = a.zip_map(&b, |x, y| (x - y).abs()).unwrap().mean();
        assert!(mad > 0.01, "{mad}");
        assert!(gen_clean_patch(1, 1, 7, 8).is_err());
    }

    #[test]
    fn blur_preserves_constants_and_mean_plateau() {
        let flat = Tensor::full(&[2, 9, 9], 0.4);
        for kind in BlurKind::ALL {
            let k = blur_kernel(kind, 5, 1.0, 30.0).unwrap();
            assert!((k.sum() - 1.0).abs() < 1e-12);
            let y = apply_blur(&flat, kind, 5, 1.0, 30.0).unwrap();
            assert!(y.max_abs_diff(&flat).unwrap() < 1e-12);
        }
        let mut delta = Tensor::zeros(&[1, 7, 7]);
        delta.set(&[0, 3, 3], 1.0);
        let y = apply_blur(&delta, BlurKind::Mean, 3, 1.0, 0.0).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let inside = (2..=4).contains(&i) && (2..=4).contains(&j);
                let expect = if inside { 1.0 / 9.0 } else { 0.0 };
                assert!((y.at(&[0, i, j]) - expect).abs() < 1e-15);
            }
        }
        assert!(matches!(blur_kernel(BlurKind::Mean, 4, 1.0, 0.0), Err(Error::Config(_))));
        assert!(blur_kernel(BlurKind::Mean, 11, 1.0, 0.0).is_err());
    }

    #[test]
    fn motion_kernel_at_45_degrees_is_antidiagonal() {
        let k = blur_kernel(BlurKind::Motion, 5, 1.0, 45.0).unwrap();
        for i in 0..5 {
            // up-right diagonal in image coordinates
            assert!(k.at(&[i, 4 - i]) > 0.15, "{k:?}");
            if i != 2 {
                assert!(k.at(&[i, i]) < 1e-12);
            }
            for j in 0..5 {
                assert!((k.at(&[i, j]) - k.at(&[4 - i, 4 - j])).abs() < 1e-12);
            }
        }
        let horiz = blur_kernel(BlurKind::Motion, 5, 1.0, 0.0).unwrap();
        for j in 0..5 {
            assert!((horiz.at(&[2, j]) - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_noise_statistics() {
        let x = Tensor::full(&[1, 64, 64], 0.5);
        let spec = [NoiseComponent {
            kind: NoiseKind::Gaussian,
            strength: 0.05,
        }];
        let y = apply_noise(&x, &spec, &mut rng::stream(3, 0)).unwrap();
        let m = y.mean();
        let std = (y.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
        assert!((0.045..=0.055).contains(&std), "{std}");
    }

    #[test]
    fn salt_and_pepper_rate() {
        let x = Tensor::full(&[1, 64, 64], 0.5);
        let kind: NoiseKind = "salt-and-pepper".parse().unwrap();
        let y = apply_noise(&x, &[NoiseComponent { kind, strength: 0.1 }], &mut rng::stream(4, 0)).unwrap();
        let frac = y.data().iter().filter(|&&v| v == 0.0 || v == 1.0).count() as f64 / y.len() as f64;
        assert!((0.08..=0.12).contains(&frac), "{frac}");
        assert!(matches!("pink".parse::<NoiseKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn every_noise_kind_stays_in_range_and_zero_is_identity() {
        let x = gen_clean_patch(5, 2, 16, 16).unwrap();
        for kind in NoiseKind::ALL {
            let y = apply_noise(&x, &[NoiseComponent { kind, strength: 0.1 }], &mut rng::stream(6, 0)).unwrap();
            assert!(in_unit(&y), "{kind:?}");
            assert_ne!(y, x, "{kind:?}");
            let z = apply_noise(&x, &[NoiseComponent { kind, strength: 0.0 }], &mut rng::stream(6, 0)).unwrap();
            assert_eq!(z, x);
        }
    }

    #[test]
    fn period_four_columns_alternate() {
        let x = Tensor::full(&[1, 8, 16], 0.5);
        let spec = StripeSpec {
            period: 4.0,
            amplitude: 0.2,
            angle: 0.0,
            nonuniform: false,
        };
        let y = apply_stripes(&x, &spec, 0).unwrap();
        let col = |j: usize| (0..8).map(|i| y.at(&[0, i, j])).sum::<f64>() / 8.0;
        for j in 0..12 {
            assert!((col(j) - col(j + 4)).abs() < 1e-12);
        }
        assert!((col(1) - 0.7).abs() < 1e-12 && (col(3) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn ninety_degree_stripes_are_transposed() {
        for nonuniform in [false, true] {
            let mk = |angle| StripeSpec {
                period: 5.0,
                amplitude: 0.3,
                angle,
                nonuniform,
            };
            let a = stripe_field(10, 10, &mk(0.0), 9).unwrap();
            let b = stripe_field(10, 10, &mk(90.0), 9).unwrap();
            for i in 0..10 {
                for j in 0..10 {
                    assert!((a[i * 10 + j] - b[j * 10 + i]).abs() < 1e-9);
                }
            }
        }
        let x = gen_clean_patch(1, 1, 8, 8).unwrap();
        let zero = StripeSpec {
            period: 3.0,
            amplitude: 0.0,
            angle: 20.0,
            nonuniform: true,
        };
        assert_eq!(apply_stripes(&x, &zero, 1).unwrap(), x);
    }

    #[test]
    fn brightness_arithmetic() {
        let x = Tensor::full(&[1, 2, 2], 0.5);
        assert_eq!(apply_brightness(&x, 1.0).unwrap(), x);
        assert!((apply_brightness(&x, 0.7).unwrap().data()[0] - 0.35).abs() < 1e-15);
        assert_eq!(apply_brightness(&Tensor::full(&[1, 1, 1], 0.6), 2.0).unwrap().item(), 1.0);
        assert!(apply_brightness(&x, 0.0).is_err());
    }

    #[test]
    fn histeq_fixed_point_and_constant() {
        let n = 64;
        let vals: Vec<f64> = (0..n).map(|k| k as f64 / n as f64).collect();
        let x = Tensor::new(&[1, 8, 8], vals).unwrap();
        let y = apply_histeq(&x).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() <= 1.0 / n as f64 + 1e-15);
        let c = Tensor::full(&[2, 4, 4], 0.3);
        assert_eq!(apply_histeq(&c).unwrap(), c);
        assert_eq!(apply_linstretch(&c, 0.02, 0.98).unwrap(), c);
    }

    #[test]
    fn linstretch_matches_percentile_oracle() {
        // 101 evenly spaced values: the 2%/98% percentiles are 0.02 and 0.98
        let vals: Vec<f64> = (0..=100).map(|k| k as f64 / 100.0).chain(std::iter::repeat(0.5).take(20)).collect();
        let x = Tensor::new(&[1, 11, 11], vals).unwrap();
        let mut sorted = x.data().to_vec();
        sorted.sort_by(f64::total_cmp);
        let (lo, hi) = (percentile(&sorted, 0.02), percentile(&sorted, 0.98));
        let y = apply_linstretch(&x, 0.02, 0.98).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((((a - lo) / (hi - lo)).clamp(0.0, 1.0) - b).abs() < 1e-12);
        }
        assert!(y.max_abs_diff(&x).unwrap() < 0.05);
    }

    #[test]
    fn samples_are_deterministic_and_valid() {
        let pools = default_pools();
        for task in Task::ALL {
            let pool = &pools[task.id()];
            let a = make_sample(task, 42, SHAPE, pool).unwrap();
            assert_eq!(a, make_sample(task, 42, SHAPE, pool).unwrap());
            a.spec.validate().unwrap();
            assert!(in_unit(&a.degraded) && in_unit(&a.clean));
            assert_eq!(a.degraded.shape(), a.clean.shape());
            let zero = make_sample_at(task, 7, SHAPE, pool, 0.0).unwrap();
            assert!(zero.degraded.max_abs_diff(&zero.clean).unwrap() < 1e-12, "{task}");
            let e = make_eval_sample(task, 3, 1, SHAPE).unwrap();
            assert_eq!(e.prompt, task.fixed_prompt());
            assert_ne!(e.degraded, e.clean, "{task}");
        }
        assert!(matches!("cloud".parse::<Task>(), Err(Error::Config(_))));
    }

    #[test]
    fn fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = make_sample(Task::Destripe, 5, SHAPE, &default_pools()["destripe"]).unwrap();
        write_fixture(&s, dir.path()).unwrap();
        assert_eq!(read_fixture(dir.path()).unwrap(), s);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn outputs_stay_in_unit_range(seed in 0u64..1000, sev in 0.0f64..=1.0, t in 0usize..6) {
            let task = Task::ALL[t];
            let s = make_sample_at(task, seed, PatchShape { channels: 2, height: 8, width: 8 }, &[String::from("p")], sev).unwrap();
            prop_assert!(in_unit(&s.degraded));
            prop_assert_eq!(s.degraded.shape(), s.clean.shape());
        }
    }
}
