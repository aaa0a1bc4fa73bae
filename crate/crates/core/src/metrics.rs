//! Image quality metrics and per-iteration metric reports.
//!
//! `perceptual_distance` is a feature-space distance over the encoder's own
//! image tower. It has the shape of LPIPS but none of its pretrained weights,
//! so values are only comparable between runs sharing one evaluator.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
const L: f64 = 255.0;

fn ensure_same_size(a: &GrayImage, b: &GrayImage) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::dim("image pair (width, height)", &[a.width(), a.height()], &[b.width(), b.height()]));
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - c;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.map(|t| t / sum)
}

/// Separable "valid" filtering: output is `(w − 10) × (h − 10)`.
fn filter_valid(src: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            horiz[y * ow + x] = taps.iter().zip(&row[x..x + SSIM_WINDOW]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * horiz[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM with an 11×11 Gaussian window (σ = 1.5), K1 = 0.01,
/// K2 = 0.03, L = 255, over all windows fully inside the image.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    ensure_same_size(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w.min(h) < SSIM_WINDOW {
        return Err(Error::Validation(format!(
            "SSIM needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let taps = gaussian_taps();
    let fa: Vec<f64> = a.pixels().iter().map(|&v| f64::from(v)).collect();
    let fb: Vec<f64> = b.pixels().iter().map(|&v| f64::from(v)).collect();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(&fa, w, h, &taps);
    let mu_b = filter_valid(&fb, w, h, &taps);
    let aa = filter_valid(&prod(&fa, &fa), w, h, &taps);
    let bb = filter_valid(&prod(&fb, &fb), w, h, &taps);
    let ab = filter_valid(&prod(&fa, &fb), w, h, &taps);
    let c1 = (SSIM_K1 * L).powi(2);
    let c2 = (SSIM_K2 * L).powi(2);
    let total: f64 = (0..mu_a.len())
        .map(|i| ssim_local(mu_a[i], mu_b[i], aa[i], bb[i], ab[i], c1, c2))
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// SSIM of one window from its weighted moments.
pub fn ssim_local(mu_a: f64, mu_b: f64, aa: f64, bb: f64, ab: f64, c1: f64, c2: f64) -> f64 {
    let var_a = aa - mu_a * mu_a;
    let var_b = bb - mu_b * mu_b;
    let cov = ab - mu_a * mu_b;
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// `10·log10(255²/MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    ensure_same_size(a, b)?;
    let sse: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse / a.pixels().len() as f64;
    Ok(10.0 * (L * L / mse).log10())
}

fn unit_rows(t: &Tensor) -> Vec<f64> {
    let mut out = Vec::with_capacity(t.numel());
    for r in 0..t.rows() {
        let row = t.row(r);
        let norm = row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        let inv = if norm > 1e-12 { 1.0 / norm } else { 0.0 };
        out.extend(row.iter().map(|&v| f64::from(v) * inv));
    }
    out
}

/// Mean over image-tower layers of the mean squared distance between
/// per-patch unit-normalized feature vectors.
pub fn perceptual_distance(a: &GrayImage, b: &GrayImage, extractor: &EncoderModel) -> Result<f64> {
    ensure_same_size(a, b)?;
    let fa = extractor.image_features(a)?;
    let fb = extractor.image_features(b)?;
    perceptual_from_features(&fa, &fb)
}

/// Same as [`perceptual_distance`] on precomputed features.
pub fn perceptual_from_features(fa: &[Tensor], fb: &[Tensor]) -> Result<f64> {
    if fa.len() != fb.len() || fa.is_empty() {
        return Err(Error::dim("feature layers", &[fa.len()], &[fb.len()]));
    }
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(fb) {
        if x.shape() != y.shape() {
            return Err(Error::dim("feature map", x.shape(), y.shape()));
        }
        let (ux, uy) = (unit_rows(x), unit_rows(y));
        let sq: f64 = ux.iter().zip(&uy).map(|(p, q)| (p - q).powi(2)).sum();
        total += sq / x.rows() as f64;
    }
    Ok(total / fa.len() as f64)
}

// ----- reports ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    GroundTruth,
    PreviousIteration,
}

impl ReferenceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ReferenceKind::GroundTruth => "ground_truth",
            ReferenceKind::PreviousIteration => "previous_iteration",
        }
    }
}

impl fmt::Display for ReferenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReferenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground_truth" => Ok(ReferenceKind::GroundTruth),
            "previous_iteration" => Ok(ReferenceKind::PreviousIteration),
            other => Err(Error::Validation(format!("unknown reference kind {other:?}"))),
        }
    }
}

/// The four metrics of one output image against one reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub ssim: f64,
    /// `+∞` when the images are identical.
    pub psnr: f64,
    /// Cosine between the prompt and output image embeddings.
    pub clip_score: f64,
    pub perceptual_distance: f64,
}

impl MetricValues {
    pub fn compute(output: &GrayImage, reference: &GrayImage, clip_score: f64, evaluator: &EncoderModel) -> Result<Self> {
        Ok(Self {
            ssim: ssim(output, reference)?,
            psnr: psnr(output, reference)?,
            clip_score,
            perceptual_distance: perceptual_distance(output, reference, evaluator)?,
        })
    }
}

/// Per-iteration series of the four metrics against one kind of reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub reference: ReferenceKind,
    pub ssim: Vec<f64>,
    pub psnr: Vec<f64>,
    pub clip_score: Vec<f64>,
    pub perceptual_distance: Vec<f64>,
}

pub const REPORT_HEADER: &str = "iteration\treference\tssim\tpsnr\tclip_score\tperceptual_distance";

impl MetricReport {
    pub fn new(reference: ReferenceKind) -> Self {
        Self {
            reference,
            ssim: Vec::new(),
            psnr: Vec::new(),
            clip_score: Vec::new(),
            perceptual_distance: Vec::new(),
        }
    }

    pub fn from_values(reference: ReferenceKind, values: &[MetricValues]) -> Self {
        let mut r = Self::new(reference);
        for v in values {
            r.push(v);
        }
        r
    }

    pub fn push(&mut self, v: &MetricValues) {
        self.ssim.push(v.ssim);
        self.psnr.push(v.psnr);
        self.clip_score.push(v.clip_score);
        self.perceptual_distance.push(v.perceptual_distance);
    }

    pub fn len(&self) -> usize {
        self.ssim.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ssim.is_empty()
    }

    /// Tab-separated rows without the header; iterations count from 1.
    fn rows(&self) -> String {
        (0..self.len())
            .map(|i| {
                format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\n",
                    i + 1,
                    self.reference,
                    self.ssim[i],
                    self.psnr[i],
                    self.clip_score[i],
                    self.perceptual_distance[i]
                )
            })
            .collect()
    }

    pub fn to_records(&self) -> String {
        format!("{REPORT_HEADER}\n{}", self.rows())
    }
}

/// Writes several reports into one record file under a single header.
pub fn reports_to_records(reports: &[MetricReport]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in reports {
        out.push_str(&r.rows());
    }
    out
}

/// Parses a record file back into reports, one per reference kind in order
/// of first appearance.
pub fn reports_from_records(text: &str) -> Result<Vec<MetricReport>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == REPORT_HEADER => {}
        other => return Err(Error::Validation(format!("unexpected report header {other:?}"))),
    }
    let mut reports: Vec<MetricReport> = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Validation(format!("malformed report line {line:?}"));
        if f.len() != 6 {
            return Err(bad());
        }
        let iteration: usize = f[0].parse().map_err(|_| bad())?;
        let kind: ReferenceKind = f[1].parse()?;
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        let values = MetricValues {
            ssim: num(2)?,
            psnr: num(3)?,
            clip_score: num(4)?,
            perceptual_distance: num(5)?,
        };
        let idx = match reports.iter().position(|r| r.reference == kind) {
            Some(i) => i,
            None => {
                reports.push(MetricReport::new(kind));
                reports.len() - 1
            }
        };
        if iteration != reports[idx].len() + 1 {
            return Err(Error::Validation(format!("report iterations out of order at {line:?}")));
        }
        reports[idx].push(&values);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::tokenizer::Tokenizer;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(w, h, |_, _| rng.gen())
    }

    /// Direct 2-D window sums at every valid position.
    fn naive_ssim(a: &GrayImage, b: &GrayImage) -> f64 {
        let taps = gaussian_taps();
        let c1 = (SSIM_K1 * L).powi(2);
        let c2 = (SSIM_K2 * L).powi(2);
        let (w, h) = (a.width(), a.height());
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wt = taps[dy] * taps[dx];
                        let pa = f64::from(a.get(x0 + dx, y0 + dy));
                        let pb = f64::from(b.get(x0 + dx, y0 + dy));
                        ma += wt * pa;
                        mb += wt * pb;
                        aa += wt * pa * pa;
                        bb += wt * pb * pb;
                        ab += wt * pa * pb;
                    }
                }
                let va = aa - ma * ma;
                let vb = bb - mb * mb;
                let cov = ab - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_of_identical_images_is_exactly_one() {
        let x = random_image(32, 32, 1);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn ssim_of_black_against_white_matches_closed_form() {
        let black = GrayImage::filled(16, 16, 0);
        let white = GrayImage::filled(16, 16, 255);
        let c1 = (SSIM_K1 * L).powi(2);
        let c2 = (SSIM_K2 * L).powi(2);
        let expected = (c1 * c2) / ((255.0f64.powi(2) + c1) * c2);
        assert!((ssim(&black, &white).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_naive_windows() {
        for seed in 0..5 {
            let a = random_image(32, 32, seed);
            let b = random_image(32, 32, seed + 50);
            assert!((ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs() < 1e-6);
        }
    }

    #[test]
    fn ssim_rejects_small_or_mismatched_images() {
        let small = GrayImage::filled(10, 20, 3);
        assert!(ssim(&small, &small).is_err());
        assert!(ssim(&GrayImage::filled(12, 12, 0), &GrayImage::filled(13, 12, 0)).is_err());
    }

    #[test]
    fn psnr_unit_error_and_identity() {
        let a = GrayImage::filled(8, 8, 100);
        let b = GrayImage::filled(8, 8, 101);
        assert!((psnr(&a, &b).unwrap() - 48.1308).abs() < 1e-3);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_falls_as_noise_doubles() {
        let base = GrayImage::filled(16, 16, 128);
        let noisy = |amp: i32| {
            GrayImage::from_fn(16, 16, |x, y| if (x + y) % 2 == 0 { (128 + amp) as u8 } else { (128 - amp) as u8 })
        };
        let p: Vec<f64> = [1, 2, 4, 8, 16].iter().map(|&a| psnr(&base, &noisy(a)).unwrap()).collect();
        assert!(p.windows(2).all(|w| w[1] < w[0]), "{p:?}");
    }

    fn evaluator() -> EncoderModel {
        let cfg = EncoderConfig {
            image_size: 32,
            ..EncoderConfig::default()
        };
        EncoderModel::new(cfg, Tokenizer::build(["a sketch"], 512), 3).unwrap()
    }

    #[test]
    fn perceptual_distance_is_zero_on_identical_images() {
        let m = evaluator();
        let x = random_image(32, 32, 4);
        assert_eq!(perceptual_distance(&x, &x, &m).unwrap(), 0.0);
        assert!(perceptual_distance(&x, &random_image(32, 32, 5), &m).unwrap() > 0.0);
    }

    #[test]
    fn perceptual_distance_rejects_wrong_size() {
        let m = evaluator();
        let x = random_image(16, 16, 4);
        assert!(perceptual_distance(&x, &x, &m).is_err());
    }

    #[test]
    fn report_records_round_trip() {
        let vals = [
            MetricValues { ssim: 0.5, psnr: f64::INFINITY, clip_score: -0.25, perceptual_distance: 0.0 },
            MetricValues { ssim: 1.0 / 3.0, psnr: 27.123456789, clip_score: 0.1, perceptual_distance: 0.2 },
        ];
        let reports = vec![
            MetricReport::from_values(ReferenceKind::GroundTruth, &vals),
            MetricReport::from_values(ReferenceKind::PreviousIteration, &vals[..1]),
        ];
        assert_eq!(reports_from_records(&reports_to_records(&reports)).unwrap(), reports);
        assert_eq!(reports_from_records(&reports[0].to_records()).unwrap(), reports[..1].to_vec());
        assert!(reports_from_records("nope\n").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn ssim_and_psnr_are_symmetric(s1 in any::<u64>(), s2 in any::<u64>()) {
            let a = random_image(16, 16, s1);
            let b = random_image(16, 16, s2);
            let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        }
    }
}
