//! Image-quality metrics: PSNR, SSIM, information-weighted multi-scale SSIM,
//! and a feature-space perceptual distance.
//!
//! All metrics run in f64 regardless of the training precision. Inputs are
//! `[1,H,W]` images in `[0,1]`.
//!
//! Desk-scale adaptations, fixed here and mirrored by the reference
//! implementations in the test suite:
//! - SSIM windows shrink near small scales: the window is
//!   `min(11, side)` made odd, with σ scaled proportionally (`1.5·win/11`).
//!   The classic 11×11 window would not fit the coarser pyramid levels of a
//!   64×64 image.
//! - IW-SSIM information weights come from a symmetric Gaussian
//!   source/channel model on local window statistics: with signal variance
//!   σ_s² = (σ_x²+σ_y²)/2, gain term g² = σ_xy²/σ_s² and distortion residual
//!   σ_e² = max(σ_s² − g², 0)·…, the per-window weight is
//!   `w = ½·log2(1 + σ_s²/σ_n² + g²/(σ_e²+σ_n²))` with σ_n² = 0.4.
//!   Forcing uniform weights reduces the metric to plain multi-scale SSIM.

use ndarray::{Array2, ArrayD, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::nets::UtilityEmbedder;
use crate::tensor::Scalar;
use crate::{Error, Result};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const IW_LEVELS: usize = 5;
/// Per-scale exponents from the multi-scale SSIM literature.
pub const SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Channel-noise variance of the information-weight model.
pub const SIGMA_NSQ: f64 = 0.4;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ReconMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub iw_ssim: f64,
    pub perc_dist: f64,
}

fn as2d(x: &ArrayD<f64>) -> Result<ArrayView2<'_, f64>> {
    let s = x.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::shape("[1, H, W]", format!("{s:?}")));
    }
    Ok(x.view().into_shape_with_order((s[1], s[2])).expect("contiguous image").into_dimensionality().unwrap())
}

fn same_shape(x: &ArrayD<f64>, y: &ArrayD<f64>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::shape(format!("{:?}", x.shape()), format!("{:?}", y.shape())));
    }
    Ok(())
}

/// `10·log10(range²/MSE)`, capped at [`PSNR_CAP_DB`] when MSE vanishes.
pub fn psnr(x: &ArrayD<f64>, y: &ArrayD<f64>, data_range: f64) -> Result<f64> {
    same_shape(x, y)?;
    let mse = x
        .iter()
        .zip(y.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel(win: usize, sigma: f64) -> Array2<f64> {
    let c = (win as f64 - 1.0) / 2.0;
    let mut k = Array2::zeros((win, win));
    let mut sum = 0.0;
    for i in 0..win {
        for j in 0..win {
            let v = (-(((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (2.0 * sigma * sigma)))
                .exp();
            k[[i, j]] = v;
            sum += v;
        }
    }
    k.mapv_inplace(|v| v / sum);
    k
}

struct StatMaps {
    mu_x: Array2<f64>,
    mu_y: Array2<f64>,
    sxx: Array2<f64>,
    syy: Array2<f64>,
    sxy: Array2<f64>,
}

/// Gaussian-weighted local means/variances/covariance over valid windows.
fn local_stats(x: &ArrayView2<'_, f64>, y: &ArrayView2<'_, f64>, win: usize, sigma: f64) -> StatMaps {
    let k = gaussian_kernel(win, sigma);
    let (h, w) = x.dim();
    let (ho, wo) = (h - win + 1, w - win + 1);
    let mut maps = StatMaps {
        mu_x: Array2::zeros((ho, wo)),
        mu_y: Array2::zeros((ho, wo)),
        sxx: Array2::zeros((ho, wo)),
        syy: Array2::zeros((ho, wo)),
        sxy: Array2::zeros((ho, wo)),
    };
    for i0 in 0..ho {
        for j0 in 0..wo {
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in 0..win {
                for dj in 0..win {
                    let kv = k[[di, dj]];
                    let a = x[[i0 + di, j0 + dj]];
                    let b = y[[i0 + di, j0 + dj]];
                    mx += kv * a;
                    my += kv * b;
                    mxx += kv * a * a;
                    myy += kv * b * b;
                    mxy += kv * a * b;
                }
            }
            maps.mu_x[[i0, j0]] = mx;
            maps.mu_y[[i0, j0]] = my;
            maps.sxx[[i0, j0]] = mxx - mx * mx;
            maps.syy[[i0, j0]] = myy - my * my;
            maps.sxy[[i0, j0]] = mxy - mx * my;
        }
    }
    maps
}

/// Luminance and contrast-structure maps of the SSIM decomposition.
fn ssim_maps(stats: &StatMaps, k1: f64, k2: f64) -> (Array2<f64>, Array2<f64>) {
    let c1 = (k1 * 1.0f64).powi(2);
    let c2 = (k2 * 1.0f64).powi(2);
    let dim = stats.mu_x.dim();
    let mut l = Array2::zeros(dim);
    let mut cs = Array2::zeros(dim);
    for i in 0..dim.0 {
        for j in 0..dim.1 {
            let (mx, my) = (stats.mu_x[[i, j]], stats.mu_y[[i, j]]);
            let (sxx, syy, sxy) = (stats.sxx[[i, j]], stats.syy[[i, j]], stats.sxy[[i, j]]);
            l[[i, j]] = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            cs[[i, j]] = (2.0 * sxy + c2) / (sxx + syy + c2);
        }
    }
    (l, cs)
}

pub fn ssim_with(
    x: &ArrayD<f64>,
    y: &ArrayD<f64>,
    window: usize,
    sigma: f64,
    k1: f64,
    k2: f64,
) -> Result<f64> {
    same_shape(x, y)?;
    let xv = as2d(x)?;
    let yv = as2d(y)?;
    let (h, w) = xv.dim();
    if h < window || w < window {
        return Err(Error::Config(format!(
            "image {h}x{w} smaller than SSIM window {window}"
        )));
    }
    let stats = local_stats(&xv, &yv, window, sigma);
    let (l, cs) = ssim_maps(&stats, k1, k2);
    let n = l.len() as f64;
    Ok(l.iter().zip(cs.iter()).map(|(a, b)| a * b).sum::<f64>() / n)
}

pub fn ssim(x: &ArrayD<f64>, y: &ArrayD<f64>) -> Result<f64> {
    ssim_with(x, y, SSIM_WINDOW, SSIM_SIGMA, SSIM_K1, SSIM_K2)
}

fn downsample2(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    let (ho, wo) = (h / 2, w / 2);
    Array2::from_shape_fn((ho, wo), |(i, j)| {
        0.25 * (a[[2 * i, 2 * j]] + a[[2 * i, 2 * j + 1]] + a[[2 * i + 1, 2 * j]] + a[[2 * i + 1, 2 * j + 1]])
    })
}

/// Largest level count whose coarsest scale still holds a 3-pixel window.
pub fn max_levels(h: usize, w: usize) -> usize {
    let mut side = h.min(w);
    let mut levels = 0;
    while side >= 3 {
        levels += 1;
        side /= 2;
    }
    levels
}

/// Window size and σ for one pyramid side length.
fn adaptive_window(side: usize) -> (usize, f64) {
    let mut win = SSIM_WINDOW.min(side);
    if win % 2 == 0 {
        win -= 1;
    }
    (win, SSIM_SIGMA * win as f64 / SSIM_WINDOW as f64)
}

/// Symmetric Gaussian source/channel information weight for one window.
fn info_weight(sxx: f64, syy: f64, sxy: f64) -> f64 {
    let s_sig = 0.5 * (sxx + syy).max(0.0);
    let g2 = sxy * sxy / (s_sig + 1e-12);
    let s_err = (s_sig - g2).max(0.0);
    0.5 * (1.0 + s_sig / SIGMA_NSQ + g2 / (s_err + SIGMA_NSQ)).log2()
}

/// Information-weighted multi-scale SSIM. With `force_uniform_weights` the
/// weights collapse to 1 and the result is plain multi-scale SSIM.
pub fn iw_ssim_with(
    x: &ArrayD<f64>,
    y: &ArrayD<f64>,
    levels: usize,
    force_uniform_weights: bool,
) -> Result<f64> {
    same_shape(x, y)?;
    let xv = as2d(x)?;
    let yv = as2d(y)?;
    let (h, w) = xv.dim();
    if levels == 0 || levels > SCALE_WEIGHTS.len() {
        return Err(Error::Config(format!("levels must be in 1..={}", SCALE_WEIGHTS.len())));
    }
    let feasible = max_levels(h, w);
    if levels > feasible {
        return Err(Error::Config(format!(
            "image {h}x{w} supports at most {feasible} pyramid levels, requested {levels}"
        )));
    }
    let mut cur_x = xv.to_owned();
    let mut cur_y = yv.to_owned();
    let mut score = 1.0;
    for level in 0..levels {
        let side = cur_x.dim().0.min(cur_x.dim().1);
        let (win, sigma) = adaptive_window(side);
        let stats = local_stats(&cur_x.view(), &cur_y.view(), win, sigma);
        let (l, cs) = ssim_maps(&stats, SSIM_K1, SSIM_K2);
        let coarsest = level == levels - 1;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..l.dim().0 {
            for j in 0..l.dim().1 {
                let value = if coarsest { l[[i, j]] * cs[[i, j]] } else { cs[[i, j]] };
                let weight = if force_uniform_weights {
                    1.0
                } else {
                    info_weight(stats.sxx[[i, j]], stats.syy[[i, j]], stats.sxy[[i, j]]) + 1e-8
                };
                num += weight * value;
                den += weight;
            }
        }
        let s_level = (num / den).max(1e-6);
        score *= s_level.powf(SCALE_WEIGHTS[level]);
        if !coarsest {
            cur_x = downsample2(&cur_x);
            cur_y = downsample2(&cur_y);
        }
    }
    Ok(score.clamp(-1.0, 1.0))
}

pub fn iw_ssim(x: &ArrayD<f64>, y: &ArrayD<f64>) -> Result<f64> {
    iw_ssim_with(x, y, IW_LEVELS, false)
}

/// Plain multi-scale SSIM: the uniform-weight degenerate case.
pub fn ms_ssim(x: &ArrayD<f64>, y: &ArrayD<f64>, levels: usize) -> Result<f64> {
    iw_ssim_with(x, y, levels, true)
}

/// Unit-normalized embedding L2 through a trained extractor.
pub fn perceptual_distance<E: Scalar>(
    x: &ArrayD<f64>,
    y: &ArrayD<f64>,
    extractor: &UtilityEmbedder<E>,
) -> Result<f64> {
    same_shape(x, y)?;
    let ex = extractor.embed_utility(&x.mapv(E::from_f64))?;
    let ey = extractor.embed_utility(&y.mapv(E::from_f64))?;
    Ok(normalized_l2(&ex.v, &ey.v))
}

/// `‖a/max(‖a‖,ε) − b/max(‖b‖,ε)‖₂` with ε = 1e-12.
pub fn normalized_l2(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x / na - y / nb).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// All four reconstruction metrics for one image pair.
pub fn recon_metrics<E: Scalar>(
    x: &ArrayD<f64>,
    y: &ArrayD<f64>,
    extractor: &UtilityEmbedder<E>,
    iw_levels: usize,
) -> Result<ReconMetrics> {
    Ok(ReconMetrics {
        psnr: psnr(x, y, 1.0)?,
        ssim: ssim(x, y)?,
        iw_ssim: iw_ssim_with(x, y, iw_levels, false)?,
        perc_dist: perceptual_distance(x, y, extractor)?,
    })
}
