//! Image-quality metrics over image stacks: relative RMSE, windowed SSIM and
//! lesion activity curves.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageStack, RoiMask};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn check_pair(est: &ImageStack, truth: &ImageStack) -> Result<()> {
    est.same_grid(truth)
}

fn relative_error(pairs: impl Iterator<Item = (f64, f64)>) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (e, t) in pairs {
        num += (e - t) * (e - t);
        den += t * t;
    }
    if den == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((num / den).sqrt())
}

/// `‖est − truth‖_F / ‖truth‖_F`, restricted to `mask` pixels in every frame.
pub fn rrmse(est: &ImageStack, truth: &ImageStack, mask: Option<&RoiMask>) -> Result<f64> {
    check_pair(est, truth)?;
    match mask {
        None => relative_error(est.coeffs().iter().copied().zip(truth.coeffs().iter().copied())),
        Some(roi) => {
            if roi.is_empty() {
                return Err(Error::EmptyRoi);
            }
            let (e, t) = (est.coeffs(), truth.coeffs());
            relative_error((0..e.ncols()).flat_map(|k| roi.pixels().iter().map(move |&m| (e[(m, k)], t[(m, k)]))))
        }
    }
}

pub fn frame_rrmse(est: &ImageStack, truth: &ImageStack) -> Result<Vec<f64>> {
    check_pair(est, truth)?;
    (0..truth.grid().frames())
        .map(|k| relative_error(est.frame_slice(k).iter().copied().zip(truth.frame_slice(k).iter().copied())))
        .collect()
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Weighted local mean over every window that fits in the image; output is
/// `(side − 10)²`, indexed by the window's top-left corner.
fn filter_valid(side: usize, img: &[f64], w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let n = side - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; n * side];
    for i in 0..n {
        for j in 0..side {
            rows[i * side + j] = (0..SSIM_WINDOW).map(|a| w[a] * img[(i + a) * side + j]).sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..SSIM_WINDOW).map(|b| w[b] * rows[i * side + j + b]).sum();
        }
    }
    out
}

/// Local SSIM map of one frame, over window positions; `range` is the
/// dynamic range of the reference.
pub fn ssim_map(side: usize, est: &[f64], truth: &[f64], range: f64) -> Result<Vec<f64>> {
    if side < SSIM_WINDOW {
        return Err(Error::FrameTooSmall { side, window: SSIM_WINDOW });
    }
    let w = gaussian_window();
    let c1 = (0.01 * range) * (0.01 * range);
    let c2 = (0.03 * range) * (0.03 * range);
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x * y).collect() };
    let mu_x = filter_valid(side, est, &w);
    let mu_y = filter_valid(side, truth, &w);
    let xx = filter_valid(side, &prod(est, est), &w);
    let yy = filter_valid(side, &prod(truth, truth), &w);
    let xy = filter_valid(side, &prod(est, truth), &w);
    Ok((0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .collect())
}

/// Mean local SSIM averaged over frames. With a mask, only windows whose
/// centre pixel lies in the mask contribute.
pub fn ssim(est: &ImageStack, truth: &ImageStack, mask: Option<&RoiMask>) -> Result<f64> {
    check_pair(est, truth)?;
    let grid = truth.grid();
    let side = grid.side();
    if side < SSIM_WINDOW {
        return Err(Error::FrameTooSmall { side, window: SSIM_WINDOW });
    }
    let t = truth.coeffs();
    let range = t.max() - t.min();
    let n = side - SSIM_WINDOW + 1;
    let half = SSIM_WINDOW / 2;
    let centres: Vec<usize> = match mask {
        None => (0..n * n).collect(),
        Some(roi) => {
            let inside = roi.to_mask(grid);
            let c: Vec<usize> = (0..n * n).filter(|&i| inside[(i / n + half) * side + i % n + half]).collect();
            if c.is_empty() {
                return Err(Error::EmptyRoi);
            }
            c
        }
    };
    let mut total = 0.0;
    for k in 0..grid.frames() {
        let map = ssim_map(side, est.frame_slice(k), truth.frame_slice(k), range)?;
        total += centres.iter().map(|&i| map[i]).sum::<f64>() / centres.len() as f64;
    }
    Ok(total / grid.frames() as f64)
}

/// Mean over ROI pixels, per frame.
pub fn lesion_activity_curve(stack: &ImageStack, roi: &RoiMask) -> Result<Vec<f64>> {
    if roi.is_empty() {
        return Err(Error::EmptyRoi);
    }
    let c = stack.coeffs();
    Ok((0..c.ncols())
        .map(|k| roi.pixels().iter().map(|&m| c[(m, k)]).sum::<f64>() / roi.len() as f64)
        .collect())
}

pub fn lac_rrmse(est: &ImageStack, truth: &ImageStack, roi: &RoiMask) -> Result<f64> {
    check_pair(est, truth)?;
    let a = lesion_activity_curve(est, roi)?;
    let b = lesion_activity_curve(truth, roi)?;
    relative_error(a.into_iter().zip(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rrmse: f64,
    pub ssim: f64,
    pub roi_rrmse: f64,
    pub roi_ssim: f64,
    pub lac_rrmse: f64,
    pub frame_rrmse: Vec<f64>,
}

impl MetricsReport {
    pub fn evaluate(est: &ImageStack, truth: &ImageStack, roi: &RoiMask) -> Result<Self> {
        let report = Self {
            rrmse: rrmse(est, truth, None)?,
            ssim: ssim(est, truth, None)?,
            roi_rrmse: rrmse(est, truth, Some(roi))?,
            roi_ssim: ssim(est, truth, Some(roi))?,
            lac_rrmse: lac_rrmse(est, truth, roi)?,
            frame_rrmse: frame_rrmse(est, truth)?,
        };
        let finite = [report.rrmse, report.ssim, report.roi_rrmse, report.roi_ssim, report.lac_rrmse]
            .iter()
            .chain(&report.frame_rrmse)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite { pixel: 0, frame: 0 });
        }
        Ok(report)
    }
}
