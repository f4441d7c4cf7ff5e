//! Quality metrics for predicted alpha clips.
//!
//! PSNR and SSIM are computed per frame on the alpha plane at peak 1.0.
//! Two clip-level scores capture the temporal axes: the flicker index
//! (excess frame-to-frame change relative to ground truth) and the hole
//! residue (mean predicted alpha inside semi-open hole interiors, which
//! should be fully transparent).

use crate::clip::FrameClip;
use crate::error::{Error, Result};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

const SSIM_WINDOW: usize = 8;

/// Per-clip metric bundle.
///
/// `psnr_mean` averages the finite per-frame values; frames with zero error
/// produce the `+inf` sentinel and are counted in `psnr_inf_count` instead
/// of destroying the mean (if every frame is perfect the mean itself is the
/// sentinel). `flicker` is `None` for single-frame clips and `hole_residue`
/// is `None` when no hole mask applies. Non-finite values serialize to JSON
/// `null`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipReport {
    pub psnr_per_frame: Vec<f64>,
    pub ssim_per_frame: Vec<f64>,
    pub psnr_mean: f64,
    pub psnr_inf_count: usize,
    pub ssim_mean: f64,
    pub flicker: Option<f64>,
    pub hole_residue: Option<f64>,
}

fn check_same_shape_2d(a: &ArrayView2<f64>, b: &ArrayView2<f64>, context: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            context,
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB: `10 log10(peak^2 / MSE)`.
/// Identical images give the `+inf` sentinel.
pub fn psnr(a: ArrayView2<f64>, b: ArrayView2<f64>, peak: f64) -> Result<f64> {
    check_same_shape_2d(&a, &b, "psnr")?;
    if peak <= 0.0 {
        return Err(Error::Parameter(format!("psnr peak must be > 0, got {peak}")));
    }
    let n = a.len() as f64;
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Structural similarity with uniform 8x8 windows at stride 1, averaged over
/// all window positions. Constants are the conventional
/// `C1 = (0.01 peak)^2`, `C2 = (0.03 peak)^2`; moments are population
/// (biased) statistics over each window.
pub fn ssim(a: ArrayView2<f64>, b: ArrayView2<f64>, peak: f64) -> Result<f64> {
    check_same_shape_2d(&a, &b, "ssim")?;
    if peak <= 0.0 {
        return Err(Error::Parameter(format!("ssim peak must be > 0, got {peak}")));
    }
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Parameter(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let win_n = (SSIM_WINDOW * SSIM_WINDOW) as f64;

    let mut total = 0.0;
    let mut windows = 0usize;
    for y0 in 0..=(h - SSIM_WINDOW) {
        for x0 in 0..=(w - SSIM_WINDOW) {
            let mut sa = 0.0;
            let mut sb = 0.0;
            let mut saa = 0.0;
            let mut sbb = 0.0;
            let mut sab = 0.0;
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    let va = a[[y, x]];
                    let vb = b[[y, x]];
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            let mu_a = sa / win_n;
            let mu_b = sb / win_n;
            let var_a = saa / win_n - mu_a * mu_a;
            let var_b = sbb / win_n - mu_b * mu_b;
            let cov = sab / win_n - mu_a * mu_b;
            let score = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += score;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// Mean absolute excess temporal change of the prediction relative to the
/// ground truth: `mean |Δpred - Δgt|` over consecutive frame pairs and
/// pixels of the alpha plane. Zero when the prediction's dynamics match the
/// ground truth's exactly; invariant to constant offsets.
pub fn flicker_index(pred_alpha: &FrameClip, gt_alpha: &FrameClip) -> Result<f64> {
    pred_alpha.check_same_shape(gt_alpha, "flicker_index")?;
    let n = pred_alpha.frame_count();
    if n < 2 {
        return Err(Error::Parameter(format!(
            "flicker_index needs at least 2 frames, got {n}"
        )));
    }
    let pred = pred_alpha.alpha();
    let gt = gt_alpha.alpha();
    let (h, w) = (pred_alpha.height(), pred_alpha.width());
    let mut total = 0.0;
    for i in 0..n - 1 {
        for y in 0..h {
            for x in 0..w {
                let dp = pred[[i + 1, y, x]] - pred[[i, y, x]];
                let dg = gt[[i + 1, y, x]] - gt[[i, y, x]];
                total += (dp - dg).abs();
            }
        }
    }
    Ok(total / ((n - 1) * h * w) as f64)
}

/// Mean predicted alpha inside hole interiors (mask value 1). The ground
/// truth is 0 there, so 0 is a perfect score and 1 a fully failed hole.
pub fn hole_residue(
    pred_alpha: &FrameClip,
    gt_alpha: &FrameClip,
    hole_mask: &FrameClip,
) -> Result<f64> {
    pred_alpha.check_same_shape(gt_alpha, "hole_residue")?;
    pred_alpha.check_same_shape(hole_mask, "hole_residue mask")?;
    let pred = pred_alpha.alpha();
    let mask = hole_mask.alpha();
    let mut weight = 0.0;
    let mut total = 0.0;
    for (p, m) in pred.iter().zip(mask.iter()) {
        total += p * m;
        weight += m;
    }
    if weight == 0.0 {
        return Err(Error::UndefinedMetric(
            "hole_residue: hole mask is empty".into(),
        ));
    }
    Ok(total / weight)
}

/// Per-frame PSNR/SSIM on the alpha plane (peak 1.0) plus the temporal
/// scores. The hole residue needs the generator's hole mask; without one it
/// is left unset.
pub fn clip_metrics(pred_alpha: &FrameClip, gt_alpha: &FrameClip) -> Result<ClipReport> {
    clip_metrics_with_holes(pred_alpha, gt_alpha, None)
}

pub fn clip_metrics_with_holes(
    pred_alpha: &FrameClip,
    gt_alpha: &FrameClip,
    hole_mask: Option<&FrameClip>,
) -> Result<ClipReport> {
    pred_alpha.check_same_shape(gt_alpha, "clip_metrics")?;
    let n = pred_alpha.frame_count();
    let mut psnr_per_frame = Vec::with_capacity(n);
    let mut ssim_per_frame = Vec::with_capacity(n);
    for i in 0..n {
        psnr_per_frame.push(psnr(pred_alpha.alpha_frame(i), gt_alpha.alpha_frame(i), 1.0)?);
        ssim_per_frame.push(ssim(pred_alpha.alpha_frame(i), gt_alpha.alpha_frame(i), 1.0)?);
    }
    let finite: Vec<f64> = psnr_per_frame.iter().copied().filter(|v| v.is_finite()).collect();
    let psnr_inf_count = n - finite.len();
    let psnr_mean = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    let ssim_mean = ssim_per_frame.iter().sum::<f64>() / n as f64;
    let flicker = if n >= 2 {
        Some(flicker_index(pred_alpha, gt_alpha)?)
    } else {
        None
    };
    let hole = match hole_mask {
        Some(mask) => match hole_residue(pred_alpha, gt_alpha, mask) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    Ok(ClipReport {
        psnr_per_frame,
        ssim_per_frame,
        psnr_mean,
        psnr_inf_count,
        ssim_mean,
        flicker,
        hole_residue: hole,
    })
}
