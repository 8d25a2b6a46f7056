//! Image-quality metrics: PSNR, SSIM, spectral angle and ERGAS on `C×H×W`
//! tensors with unit dynamic range.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Returned for identical images so CSVs stay finite.
pub const PSNR_SENTINEL: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(pred: &Tensor, reference: &Tensor, op: &'static str) -> Result<()> {
    if pred.shape() != reference.shape() {
        return Err(Error::shape(op, pred.shape(), reference.shape()));
    }
    Ok(())
}

fn image_dims(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(op, x.shape(), &[])),
    }
}

pub fn mse(pred: &Tensor, reference: &Tensor) -> Result<f64> {
    same_shape(pred, reference, "mse")?;
    Ok(pred
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
}

/// `10·log10(peak²/MSE)`; [`PSNR_SENTINEL`] when the images are identical.
pub fn psnr(pred: &Tensor, reference: &Tensor, peak: f64) -> Result<f64> {
    let m = mse(pred, reference)?;
    if m == 0.0 {
        return Ok(PSNR_SENTINEL);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.into_iter().map(|v| v / s).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    w
}

fn ssim_from_moments(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Weighted local moments of one window; `weights` covers `wh×ww` at `(i0, j0)`.
fn window_ssim(x: &[f64], y: &[f64], w: usize, i0: usize, j0: usize, wh: usize, ww: usize, weights: &[f64]) -> f64 {
    let (mut mx, mut my) = (0.0, 0.0);
    for a in 0..wh {
        for b in 0..ww {
            let k = weights[a * ww + b];
            let idx = (i0 + a) * w + j0 + b;
            mx += k * x[idx];
            my += k * y[idx];
        }
    }
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for a in 0..wh {
        for b in 0..ww {
            let k = weights[a * ww + b];
            let idx = (i0 + a) * w + j0 + b;
            let (dx, dy) = (x[idx] - mx, y[idx] - my);
            vx += k * dx * dx;
            vy += k * dy * dy;
            cxy += k * dx * dy;
        }
    }
    ssim_from_moments(mx, my, vx, vy, cxy)
}

/// Mean local SSIM over every fully contained 11×11 Gaussian window, averaged
/// over channels. Images smaller than the window use one uniform full-image
/// window.
pub fn ssim(pred: &Tensor, reference: &Tensor) -> Result<f64> {
    same_shape(pred, reference, "ssim")?;
    let (c, h, w) = image_dims(pred, "ssim")?;
    let mut total = 0.0;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        let uniform = vec![1.0 / (h * w) as f64; h * w];
        for ch in 0..c {
            total += window_ssim(pred.channel(ch), reference.channel(ch), w, 0, 0, h, w, &uniform);
        }
        return Ok(total / c as f64);
    }
    let weights = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    for ch in 0..c {
        let (x, y) = (pred.channel(ch), reference.channel(ch));
        let mut acc = 0.0;
        for i in 0..oh {
            for j in 0..ow {
                acc += window_ssim(x, y, w, i, j, SSIM_WINDOW, SSIM_WINDOW, &weights);
            }
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}

/// Spectral-angle statistics of one image pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SamResult {
    /// Mean angle in radians over counted pixels.
    pub mean: f64,
    pub angle_sum: f64,
    pub counted: usize,
    /// Pixels where either spectrum has zero norm.
    pub skipped: usize,
}

/// Angle between two vectors via `2·atan2(‖â−b̂‖, ‖â+b̂‖)`, which stays accurate
/// near 0 and π where `acos` of the cosine does not.
fn vector_angle(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v).powi(2);
        sum += (u + v).powi(2);
    }
    Some(2.0 * diff.sqrt().atan2(sum.sqrt()))
}

pub fn sam(pred: &Tensor, reference: &Tensor) -> Result<SamResult> {
    same_shape(pred, reference, "sam")?;
    let (c, h, w) = image_dims(pred, "sam")?;
    let mut out = SamResult {
        mean: 0.0,
        angle_sum: 0.0,
        counted: 0,
        skipped: 0,
    };
    let mut a = vec![0.0; c];
    let mut b = vec![0.0; c];
    for p in 0..h * w {
        for ch in 0..c {
            a[ch] = pred.data()[ch * h * w + p];
            b[ch] = reference.data()[ch * h * w + p];
        }
        match vector_angle(&a, &b) {
            Some(t) => {
                out.angle_sum += t;
                out.counted += 1;
            }
            None => out.skipped += 1,
        }
    }
    if out.counted == 0 {
        return Err(Error::UndefinedMetric("every pixel has a zero-norm spectrum".into()));
    }
    out.mean = out.angle_sum / out.counted as f64;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErgasResult {
    pub value: f64,
    /// Bands left out because the reference band mean is zero.
    pub excluded_bands: Vec<usize>,
}

/// `100·ratio·sqrt(mean_b RMSE_b² / μ_b²)` over bands with nonzero reference mean.
pub fn ergas(pred: &Tensor, reference: &Tensor, ratio: f64) -> Result<ErgasResult> {
    same_shape(pred, reference, "ergas")?;
    let (c, _, _) = image_dims(pred, "ergas")?;
    let mut acc = 0.0;
    let mut used = 0;
    let mut excluded = Vec::new();
    for b in 0..c {
        let (x, y) = (pred.channel(b), reference.channel(b));
        let n = x.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        if mean == 0.0 {
            excluded.push(b);
            continue;
        }
        let mse = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / n;
        acc += mse / (mean * mean);
        used += 1;
    }
    if used == 0 {
        return Err(Error::UndefinedMetric("every reference band has zero mean".into()));
    }
    Ok(ErgasResult {
        value: 100.0 * ratio * (acc / used as f64).sqrt(),
        excluded_bands: excluded,
    })
}

/// Per-task metric means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub task: String,
    pub n: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Per-image mean angle, averaged over images.
    pub sam: f64,
    pub ergas: f64,
    /// Angle averaged over all counted pixels of all images.
    pub sam_pooled: f64,
    pub sam_skipped_pixels: usize,
    pub ergas_excluded_bands: usize,
}

/// Running per-task accumulator.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    task: String,
    n: usize,
    psnr: f64,
    ssim: f64,
    sam: f64,
    ergas: f64,
    sam_angle_sum: f64,
    sam_pixels: usize,
    sam_skipped: usize,
    ergas_excluded: usize,
}

impl MetricsAccumulator {
    pub fn new(task: impl Into<String>) -> Self {
        Self {
            task: task.into(),
            n: 0,
            psnr: 0.0,
            ssim: 0.0,
            sam: 0.0,
            ergas: 0.0,
            sam_angle_sum: 0.0,
            sam_pixels: 0,
            sam_skipped: 0,
            ergas_excluded: 0,
        }
    }

    pub fn add(&mut self, pred: &Tensor, reference: &Tensor) -> Result<()> {
        let s = sam(pred, reference)?;
        let e = ergas(pred, reference, 1.0)?;
        self.psnr += psnr(pred, reference, 1.0)?;
        self.ssim += ssim(pred, reference)?;
        self.sam += s.mean;
        self.sam_angle_sum += s.angle_sum;
        self.sam_pixels += s.counted;
        self.sam_skipped += s.skipped;
        self.ergas += e.value;
        self.ergas_excluded += e.excluded_bands.len();
        self.n += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricsRecord> {
        if self.n == 0 {
            return Err(Error::UndefinedMetric(format!("no samples for task {}", self.task)));
        }
        let n = self.n as f64;
        Ok(MetricsRecord {
            task: self.task.clone(),
            n: self.n,
            psnr: self.psnr / n,
            ssim: self.ssim / n,
            sam: self.sam / n,
            ergas: self.ergas / n,
            sam_pooled: self.sam_angle_sum / self.sam_pixels as f64,
            sam_skipped_pixels: self.sam_skipped,
            ergas_excluded_bands: self.ergas_excluded,
        })
    }
}

/// `task,n,psnr,ssim,sam,ergas` with six decimals.
pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task", "n", "psnr", "ssim", "sam", "ergas"])?;
    for r in records {
        w.write_record([
            r.task.clone(),
            r.n.to_string(),
            format!("{:.6}", r.psnr),
            format!("{:.6}", r.ssim),
            format!("{:.6}", r.sam),
            format!("{:.6}", r.ergas),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    write_metrics_csv(records, std::fs::File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn psnr_closed_forms() {
        let x = Tensor::full(&[2, 4, 4], 0.3);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_SENTINEL);
        let y = x.map(|v| v + 0.1);
        assert!((psnr(&y, &x, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&x, &Tensor::zeros(&[2, 4, 3]), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let mut r = rng::stream(1, 0);
        let x = Tensor::uniform(&[2, 16, 16], 0.0, 1.0, &mut r);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let c = Tensor::full(&[1, 12, 12], 0.4);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        // checkerboard against its inverse
        let mut board = Tensor::zeros(&[1, 16, 16]);
        for i in 0..16 {
            for j in 0..16 {
                board.set(&[0, i, j], ((i / 2 + j / 2) % 2) as f64);
            }
        }
        let inv = board.map(|v| 1.0 - v);
        assert!(ssim(&inv, &board).unwrap() < 0.5);
        let small = Tensor::uniform(&[1, 6, 6], 0.0, 1.0, &mut r);
        assert!((ssim(&small, &small).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sam_cases() {
        let mut r = rng::stream(2, 0);
        let x = Tensor::uniform(&[3, 5, 5], 0.1, 1.0, &mut r);
        assert!(sam(&x.scale(2.5), &x).unwrap().mean < 1e-12);
        let a = Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        let b = Tensor::new(&[2, 1, 2], vec![0.0, 2.0, 1.0, 0.0]).unwrap();
        assert!((sam(&a, &b).unwrap().mean - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        let mut z = x.clone();
        for ch in 0..3 {
            z.set(&[ch, 0, 0], 0.0);
        }
        let s = sam(&z, &x).unwrap();
        assert_eq!((s.counted, s.skipped), (24, 1));
        assert!(matches!(sam(&Tensor::zeros(&[3, 5, 5]), &x), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ergas_closed_form_and_flags() {
        // a single band whose RMSE is a tenth of its mean
        let y = Tensor::full(&[1, 4, 4], 0.5);
        let x = y.map(|v| v + 0.05);
        assert!((ergas(&x, &y, 1.0).unwrap().value - 10.0).abs() < 1e-9);
        assert_eq!(ergas(&y, &y, 1.0).unwrap().value, 0.0);
        let mut two = Tensor::zeros(&[2, 4, 4]);
        two.channel_mut(1).fill(0.5);
        let e = ergas(&two.map(|v| v + 0.05), &two, 1.0).unwrap();
        assert_eq!(e.excluded_bands, vec![0]);
        assert!((e.value - 10.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_falls_with_noise() {
        let mut r = rng::stream(3, 0);
        let clean = Tensor::uniform(&[2, 32, 32], 0.2, 0.8, &mut r);
        let mut last = f64::INFINITY;
        for sigma in [0.01, 0.05, 0.1] {
            let noisy = clean.zip_map(&Tensor::randn(&[2, 32, 32], sigma, &mut r), |a, b| a + b).unwrap();
            let p = psnr(&noisy, &clean, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn csv_layout() {
        let mut acc = MetricsAccumulator::new("denoise");
        let y = Tensor::full(&[2, 4, 4], 0.5);
        acc.add(&y.map(|v| v + 0.1), &y).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&[acc.finish().unwrap()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("task,n,psnr,ssim,sam,ergas\ndenoise,1,20.000000,"), "{text}");
    }

    fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
        let (c, hw) = (x.shape()[0], perm.len());
        let mut out = x.clone();
        for ch in 0..c {
            for (k, &p) in perm.iter().enumerate() {
                out.data_mut()[ch * hw + k] = x.data()[ch * hw + p];
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn pixel_permutations_leave_metrics_unchanged(seed in 0u64..10_000, shift in 1usize..15) {
            let mut r = rng::stream(seed, 0);
            let x = Tensor::uniform(&[3, 4, 4], 0.05, 1.0, &mut r);
            let y = Tensor::uniform(&[3, 4, 4], 0.05, 1.0, &mut r);
            let perm: Vec<usize> = (0..16).map(|k| (k * 5 + shift) % 16).collect();
            let (xp, yp) = (permute(&x, &perm), permute(&y, &perm));
            prop_assert!((psnr(&x, &y, 1.0).unwrap() - psnr(&xp, &yp, 1.0).unwrap()).abs() < 1e-9);
            prop_assert!((sam(&x, &y).unwrap().mean - sam(&xp, &yp).unwrap().mean).abs() < 1e-12);
            prop_assert!((ergas(&x, &y, 1.0).unwrap().value - ergas(&xp, &yp, 1.0).unwrap().value).abs() < 1e-9);
            // below the window size SSIM uses global moments, so it is permutation-invariant too
            prop_assert!((ssim(&x, &y).unwrap() - ssim(&xp, &yp).unwrap()).abs() < 1e-12);
        }
    }
}
