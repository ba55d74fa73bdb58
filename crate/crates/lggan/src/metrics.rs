//! Pixel-space quality metrics and the evaluation report.
//!
//! Everything here runs without pretrained networks: PSNR, windowed SSIM,
//! and an L1 distance restricted to labeled pixels. Images are expected in
//! `[−1, 1]`, shaped `[H, W]` or `[C, H, W]`; internals accumulate in `f64`
//! so scores are independent of traversal order for all practical sizes.
//! Reference-based scores that need pretrained feature extractors (FID,
//! mIoU, IS, KL, SD) are deliberately out of scope and surface in the
//! report as "unavailable".

use ndarray::{Array2, ArrayD, Ix2, Ix3};
use std::fmt::Write as _;
use thiserror::Error;

/// Full dynamic range of image values in `[−1, 1]`: the PSNR peak and the
/// `L` in the SSIM stabilizers.
pub const DATA_RANGE: f64 = 2.0;

/// Side length of the SSIM window.
pub const SSIM_WINDOW: usize = 11;

/// Standard deviation of the SSIM window's Gaussian weighting.
pub const SSIM_SIGMA: f64 = 1.5;

const SSIM_C1: f64 = (0.01 * DATA_RANGE) * (0.01 * DATA_RANGE);
const SSIM_C2: f64 = (0.03 * DATA_RANGE) * (0.03 * DATA_RANGE);

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("images have different shapes: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("image must be [H, W] or [C, H, W], got rank {0}")]
    BadRank(usize),
    #[error("image {h}x{w} is smaller than the {window}x{window} window")]
    TooSmall { h: usize, w: usize, window: usize },
    #[error("mask shape {mask:?} does not match image plane {h}x{w}")]
    MaskMismatch { mask: Vec<usize>, h: usize, w: usize },
    #[error("mask keeps no pixels")]
    EmptyMask,
}

fn check_shapes(a: &ArrayD<f32>, b: &ArrayD<f32>) -> Result<(), MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in decibels: `10·log10(peak² / MSE)` with
/// peak [`DATA_RANGE`]. Identical images have zero error; that case returns
/// the `+∞` sentinel (`f64::INFINITY`) rather than a huge finite value, so
/// callers can render it distinctly.
pub fn psnr(a: &ArrayD<f32>, b: &ArrayD<f32>) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    let mut se = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x as f64 - y as f64;
        se += d * d;
    }
    if se == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = se / a.len() as f64;
    Ok(10.0 * (DATA_RANGE * DATA_RANGE / mse).log10())
}

/// Collapse to a grayscale `f64` plane: `[H, W]` passes through, `[C, H, W]`
/// averages over channels.
fn to_gray(img: &ArrayD<f32>) -> Result<Array2<f64>, MetricsError> {
    match img.ndim() {
        2 => {
            let v = img.view().into_dimensionality::<Ix2>().unwrap();
            Ok(v.mapv(|x| x as f64))
        }
        3 => {
            let v = img.view().into_dimensionality::<Ix3>().unwrap();
            let (c, h, w) = v.dim();
            let mut g = Array2::<f64>::zeros((h, w));
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        g[[y, x]] += v[[ch, y, x]] as f64;
                    }
                }
            }
            Ok(g / c as f64)
        }
        r => Err(MetricsError::BadRank(r)),
    }
}

/// Normalized 1-D Gaussian; the 2-D window is its outer product, applied as
/// two separable passes.
fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0f64; SSIM_WINDOW];
    let center = (SSIM_WINDOW - 1) as f64 / 2.0;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - center;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid-mode separable blur: output is `(H−10) × (W−10)`, one entry per
/// fully covered window position.
fn blur_valid(p: &Array2<f64>, k: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = p.dim();
    let mut rows = Array2::<f64>::zeros((h, w - SSIM_WINDOW + 1));
    for y in 0..h {
        for x in 0..=w - SSIM_WINDOW {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * p[[y, x + j]];
            }
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1));
    for y in 0..=h - SSIM_WINDOW {
        for x in 0..out.ncols() {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * rows[[y + j, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Structural similarity in `[−1, 1]`, averaged over every fully covered
/// window position of an 11×11 Gaussian window (σ = 1.5). Multichannel
/// images are collapsed to grayscale by channel mean first. Identical
/// images score exactly 1.
pub fn ssim(a: &ArrayD<f32>, b: &ArrayD<f32>) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    let ga = to_gray(a)?;
    let gb = to_gray(b)?;
    let (h, w) = ga.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricsError::TooSmall { h, w, window: SSIM_WINDOW });
    }
    let k = gaussian_kernel();
    let mu_a = blur_valid(&ga, &k);
    let mu_b = blur_valid(&gb, &k);
    let m_aa = blur_valid(&(&ga * &ga), &k);
    let m_bb = blur_valid(&(&gb * &gb), &k);
    let m_ab = blur_valid(&(&ga * &gb), &k);
    let mut total = 0.0;
    for ((y, x), &ma) in mu_a.indexed_iter() {
        let mb = mu_b[[y, x]];
        let var_a = m_aa[[y, x]] - ma * ma;
        let var_b = m_bb[[y, x]] - mb * mb;
        let cov = m_ab[[y, x]] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Mean absolute difference over the pixels a mask keeps. `keep` is an
/// `[H, W]` indicator (1 keeps the pixel across all channels); `None` keeps
/// everything. Errors if the mask keeps nothing.
pub fn masked_l1(
    a: &ArrayD<f32>,
    b: &ArrayD<f32>,
    keep: Option<&Array2<f32>>,
) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    let (channels, h, w) = match a.ndim() {
        2 => (1, a.shape()[0], a.shape()[1]),
        3 => (a.shape()[0], a.shape()[1], a.shape()[2]),
        r => return Err(MetricsError::BadRank(r)),
    };
    let Some(keep) = keep else {
        let total: f64 =
            a.iter().zip(b.iter()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum();
        return Ok(total / a.len() as f64);
    };
    if keep.dim() != (h, w) {
        return Err(MetricsError::MaskMismatch { mask: keep.shape().to_vec(), h, w });
    }
    let kept: f64 = keep.iter().map(|&m| m as f64).sum();
    if kept == 0.0 {
        return Err(MetricsError::EmptyMask);
    }
    let flat_a = a.view().into_shape_with_order((channels, h, w)).unwrap();
    let flat_b = b.view().into_shape_with_order((channels, h, w)).unwrap();
    let mut total = 0.0f64;
    for ch in 0..channels {
        for y in 0..h {
            for x in 0..w {
                total += keep[[y, x]] as f64
                    * (flat_a[[ch, y, x]] as f64 - flat_b[[ch, y, x]] as f64).abs();
            }
        }
    }
    Ok(total / (kept * channels as f64))
}

/// `[H, W]` indicator of pixels the layout labels with any class — exactly
/// the complement of void pixels for a one-hot `[c, H, W]` encoding.
pub fn labeled_mask(onehot: &ndarray::Array3<f32>) -> Array2<f32> {
    onehot.sum_axis(ndarray::Axis(0))
}

/// Scores for one evaluated image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageScores {
    pub name: String,
    /// Decibels; `f64::INFINITY` for a perfect match.
    pub psnr: f64,
    pub ssim: f64,
    /// Mean |difference| over labeled pixels.
    pub masked_l1: f64,
}

/// Metrics that would need pretrained networks or external references, with
/// the reason each is not computed here.
pub const UNAVAILABLE_METRICS: [(&str, &str); 5] = [
    ("FID", "requires a pretrained feature-embedding network"),
    ("mIoU", "requires a pretrained segmentation network"),
    ("IS", "requires a pretrained image classifier"),
    ("KL", "requires a pretrained image classifier"),
    ("SD", "requires an external sharpness reference implementation"),
];

/// Per-image rows of an evaluation run; renders as a text table with an
/// aggregate row and the unavailable-metric notices.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub rows: Vec<ImageScores>,
}

impl Report {
    /// Column means `(psnr, ssim, masked_l1)`. A `+∞` PSNR row makes the
    /// mean `+∞`, which is the honest aggregate of a perfect match.
    pub fn mean(&self) -> Option<(f64, f64, f64)> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        let sum = self.rows.iter().fold((0.0, 0.0, 0.0), |acc, r| {
            (acc.0 + r.psnr, acc.1 + r.ssim, acc.2 + r.masked_l1)
        });
        Some((sum.0 / n, sum.1 / n, sum.2 / n))
    }

    pub fn render(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .chain(["image".len(), "mean".len()])
            .max()
            .unwrap();
        let mut s = String::new();
        let line = |s: &mut String, name: &str, p: f64, ss: f64, l1: f64| {
            writeln!(s, "{name:<name_w$}  {p:>10.4}  {ss:>8.4}  {l1:>10.4}").unwrap();
        };
        writeln!(s, "{:<name_w$}  {:>10}  {:>8}  {:>10}", "image", "psnr_db", "ssim", "masked_l1")
            .unwrap();
        for r in &self.rows {
            line(&mut s, &r.name, r.psnr, r.ssim, r.masked_l1);
        }
        if let Some((p, ss, l1)) = self.mean() {
            line(&mut s, "mean", p, ss, l1);
        }
        for (name, why) in UNAVAILABLE_METRICS {
            writeln!(s, "{name}: unavailable ({why})").unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array3, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, c: usize, h: usize, w: usize) -> ArrayD<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |_| rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn identical_images_hit_the_infinite_sentinel() {
        let a = random_image(1, 3, 16, 16);
        let p = psnr(&a, &a.clone()).unwrap();
        assert!(p.is_infinite() && p > 0.0);
    }

    #[test]
    fn constant_error_matches_the_analytic_value() {
        // |a − b| = 0.2 everywhere → MSE 0.04 → 10·log10(4 / 0.04) = 20 dB.
        // Tolerance reflects that 0.3 and 0.1 are not exact in f32.
        let a = ArrayD::from_elem(IxDyn(&[3, 8, 8]), 0.3f32);
        let b = ArrayD::from_elem(IxDyn(&[3, 8, 8]), 0.1f32);
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-5);
    }

    #[test]
    fn psnr_is_symmetric_and_permutation_invariant() {
        let a = random_image(2, 3, 12, 12);
        let b = random_image(3, 3, 12, 12);
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap(), epsilon = 1e-12);
        let mut af = a.clone();
        let mut bf = b.clone();
        af.invert_axis(ndarray::Axis(2));
        bf.invert_axis(ndarray::Axis(2));
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), psnr(&af, &bf).unwrap(), epsilon = 1e-9);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = random_image(4, 3, 8, 8);
        let b = random_image(5, 3, 8, 10);
        assert!(matches!(psnr(&a, &b), Err(MetricsError::ShapeMismatch { .. })));
        assert!(matches!(ssim(&a, &b), Err(MetricsError::ShapeMismatch { .. })));
    }

    #[test]
    fn identical_images_have_unit_ssim() {
        let a = random_image(6, 3, 24, 24);
        assert_abs_diff_eq!(ssim(&a, &a.clone()).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn negated_image_scores_below_one() {
        let a = random_image(7, 1, 24, 24);
        let b = a.mapv(|v| -v);
        assert!(ssim(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn window_larger_than_image_is_an_error() {
        let a = random_image(8, 3, 8, 8);
        assert!(matches!(
            ssim(&a, &a.clone()),
            Err(MetricsError::TooSmall { window: SSIM_WINDOW, .. })
        ));
    }

    #[test]
    fn grayscale_conversion_averages_channels() {
        // Channel-opposite images share the same gray plane, so SSIM sees
        // them as identical even though the colors differ.
        let base = random_image(9, 1, 16, 16);
        let mut a = Array3::<f32>::zeros((3, 16, 16));
        let mut b = Array3::<f32>::zeros((3, 16, 16));
        for y in 0..16 {
            for x in 0..16 {
                let v = base[[0, y, x]];
                a[[0, y, x]] = v;
                a[[1, y, x]] = -v;
                b[[2, y, x]] = v;
                b[[1, y, x]] = -v;
            }
        }
        let s = ssim(&a.into_dyn(), &b.into_dyn()).unwrap();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
    }

    /// Direct-formula oracle: for every window position, accumulate the
    /// Gaussian-weighted moments with explicit loops and apply the SSIM
    /// formula — no separable filtering, no shared code with [`ssim`].
    fn ssim_oracle(a: &ArrayD<f32>, b: &ArrayD<f32>) -> f64 {
        let ga = to_gray(a).unwrap();
        let gb = to_gray(b).unwrap();
        let (h, w) = ga.dim();
        let k1d = gaussian_kernel();
        let mut window = [[0.0f64; SSIM_WINDOW]; SSIM_WINDOW];
        for (y, row) in window.iter_mut().enumerate() {
            for (x, v) in row.iter_mut().enumerate() {
                *v = k1d[y] * k1d[x];
            }
        }
        let l = DATA_RANGE;
        let (c1, c2) = ((0.01 * l) * (0.01 * l), (0.03 * l) * (0.03 * l));
        let mut total = 0.0;
        let mut count = 0usize;
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = window[dy][dx];
                        let va = ga[[y0 + dy, x0 + dx]];
                        let vb = gb[[y0 + dy, x0 + dx]];
                        ma += wgt * va;
                        mb += wgt * vb;
                        maa += wgt * va * va;
                        mbb += wgt * vb * vb;
                        mab += wgt * va * vb;
                    }
                }
                let (va, vb, cov) = (maa - ma * ma, mbb - mb * mb, mab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_the_direct_formula_oracle() {
        for seed in 0..5u64 {
            let a = random_image(100 + seed, 3, 32, 32);
            let b = random_image(200 + seed, 3, 32, 32);
            let fast = ssim(&a, &b).unwrap();
            let slow = ssim_oracle(&a, &b);
            assert_abs_diff_eq!(fast, slow, epsilon = 1e-6);
            assert!((-1.0..=1.0).contains(&fast), "ssim out of range: {fast}");
        }
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = random_image(10, 3, 20, 20);
        let b = random_image(11, 3, 20, 20);
        assert_abs_diff_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn masked_l1_ignores_dropped_pixels() {
        // Error 0.5 on the kept left half, 0.9 on the dropped right half.
        let mut a = Array3::<f32>::zeros((3, 4, 4));
        let b = Array3::<f32>::zeros((3, 4, 4));
        let mut keep = Array2::<f32>::zeros((4, 4));
        for ch in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    a[[ch, y, x]] = if x < 2 { 0.5 } else { 0.9 };
                }
            }
        }
        for y in 0..4 {
            keep[[y, 0]] = 1.0;
            keep[[y, 1]] = 1.0;
        }
        let a = a.into_dyn();
        let b = b.into_dyn();
        assert_abs_diff_eq!(masked_l1(&a, &b, Some(&keep)).unwrap(), 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(masked_l1(&a, &b, None).unwrap(), 0.7, epsilon = 1e-7);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let a = random_image(12, 3, 4, 4);
        let keep = Array2::<f32>::zeros((4, 4));
        assert!(matches!(masked_l1(&a, &a.clone(), Some(&keep)), Err(MetricsError::EmptyMask)));
    }

    #[test]
    fn labeled_mask_flags_exactly_the_nonvoid_pixels() {
        let mut onehot = Array3::<f32>::zeros((2, 2, 2));
        onehot[[0, 0, 0]] = 1.0;
        onehot[[1, 1, 1]] = 1.0;
        let m = labeled_mask(&onehot);
        assert_eq!(m, ndarray::array![[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn report_renders_rows_mean_and_unavailable_lines() {
        let report = Report {
            rows: vec![
                ImageScores { name: "a".into(), psnr: 20.0, ssim: 0.5, masked_l1: 0.1 },
                ImageScores { name: "b".into(), psnr: 30.0, ssim: 0.7, masked_l1: 0.3 },
            ],
        };
        let text = report.render();
        assert!(text.contains("image"), "{text}");
        assert!(text.lines().any(|l| l.starts_with('a') && l.contains("20.0000")), "{text}");
        assert!(text.lines().any(|l| l.starts_with("mean") && l.contains("25.0000")), "{text}");
        for (name, _) in UNAVAILABLE_METRICS {
            assert!(text.contains(&format!("{name}: unavailable")), "{text}");
        }
        let (p, s, l1) = report.mean().unwrap();
        assert_abs_diff_eq!(p, 25.0);
        assert_abs_diff_eq!(s, 0.6);
        assert_abs_diff_eq!(l1, 0.2, epsilon = 1e-7);
    }

    #[test]
    fn infinite_psnr_renders_as_inf() {
        let report = Report {
            rows: vec![ImageScores {
                name: "exact".into(),
                psnr: f64::INFINITY,
                ssim: 1.0,
                masked_l1: 0.0,
            }],
        };
        assert!(report.render().contains("inf"), "{}", report.render());
    }
}
