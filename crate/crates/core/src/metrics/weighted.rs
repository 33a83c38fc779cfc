//! Weighted F-measure: errors are spread by a Gaussian over the nearest
//! foreground pixel's error and amplified by distance from the object.

use serde::{Deserialize, Serialize};

use super::fmeasure::is_fg;
use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightedFParams {
    /// Side of the square Gaussian window.
    pub window: usize,
    pub sigma: f64,
    /// Amplify background errors by distance to the object.
    pub importance: bool,
}

impl Default for WeightedFParams {
    fn default() -> Self {
        Self {
            window: 7,
            sigma: 5.0,
            importance: true,
        }
    }
}

impl WeightedFParams {
    /// Single-pixel window without importance weighting; reduces to plain F1.
    pub fn degenerate() -> Self {
        Self {
            window: 1,
            sigma: 5.0,
            importance: false,
        }
    }
}

/// Normalized Gaussian kernel with entries below `eps · max` zeroed.
pub fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let m = (window as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..window * window)
        .map(|i| {
            let y = (i / window) as f64 - m;
            let x = (i % window) as f64 - m;
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let max = k.iter().copied().fold(0.0, f64::max);
    for v in &mut k {
        if *v < f64::EPSILON * max {
            *v = 0.0;
        }
    }
    let sum: f64 = k.iter().sum();
    if sum > 0.0 {
        k.iter_mut().for_each(|v| *v /= sum);
    }
    k
}

/// For each pixel, Euclidean distance to the nearest foreground pixel and
/// that pixel's flat index. Ties go to the first candidate in row-major order.
fn nearest_foreground(fg: &[bool], h: usize, w: usize) -> Vec<(f64, usize)> {
    let boundary: Vec<usize> = (0..h * w)
        .filter(|&i| {
            if !fg[i] {
                return false;
            }
            let (y, x) = (i / w, i % w);
            (y > 0 && !fg[i - w]) || (y + 1 < h && !fg[i + w]) || (x > 0 && !fg[i - 1]) || (x + 1 < w && !fg[i + 1])
        })
        .collect();
    (0..h * w)
        .map(|i| {
            if fg[i] {
                return (0.0, i);
            }
            let (y, x) = ((i / w) as i64, (i % w) as i64);
            let mut best = (i64::MAX, i);
            for &j in &boundary {
                let dy = (j / w) as i64 - y;
                let dx = (j % w) as i64 - x;
                let d2 = dy * dy + dx * dx;
                if d2 < best.0 {
                    best = (d2, j);
                }
            }
            ((best.0 as f64).sqrt(), best.1)
        })
        .collect()
}

/// Zero-padded same-size correlation with a square odd kernel.
fn filter(src: &[f64], h: usize, w: usize, kernel: &[f64], window: usize) -> Vec<f64> {
    let r = (window / 2) as i64;
    let mut out = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for ky in 0..window as i64 {
                let sy = y + ky - r;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for kx in 0..window as i64 {
                    let sx = x + kx - r;
                    if sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    acc += kernel[(ky * window as i64 + kx) as usize] * src[(sy * w as i64 + sx) as usize];
                }
            }
            out[(y * w as i64 + x) as usize] = acc;
        }
    }
    out
}

pub fn weighted_f(pred: &Grid, gt: &Grid) -> Result<f64> {
    weighted_f_with(pred, gt, &WeightedFParams::default())
}

pub fn weighted_f_with(pred: &Grid, gt: &Grid, params: &WeightedFParams) -> Result<f64> {
    pred.same_shape(gt, "weighted_f")?;
    if pred.channels() != 1 {
        return Err(Error::Dims {
            op: "weighted_f",
            reason: format!("expected a single-channel map, got {}", pred.shape()),
        });
    }
    if params.window.is_multiple_of(2) {
        return Err(Error::Config(format!("weighted_f window must be odd, got {}", params.window)));
    }
    let (h, w) = (pred.height(), pred.width());
    let s = pred.as_slice();
    let fg: Vec<bool> = gt.as_slice().iter().map(|&g| is_fg(g)).collect();
    if !fg.iter().any(|&b| b) {
        return Ok(if s.iter().all(|&v| v == 0.0) { 1.0 } else { 0.0 });
    }

    let g: Vec<f64> = fg.iter().map(|&b| b as u8 as f64).collect();
    let e: Vec<f64> = s.iter().zip(&g).map(|(s, g)| (s - g).abs()).collect();
    let nearest = nearest_foreground(&fg, h, w);
    let et: Vec<f64> = nearest.iter().map(|&(_, j)| e[j]).collect();
    let kernel = gaussian_kernel(params.window, params.sigma);
    let ea = filter(&et, h, w, &kernel, params.window);

    let decay = 0.5f64.ln() / 5.0;
    let (mut fg_err, mut bg_err, mut n_fg) = (0.0, 0.0, 0.0);
    for i in 0..h * w {
        let m = if fg[i] && ea[i] < e[i] { ea[i] } else { e[i] };
        if fg[i] {
            fg_err += m;
            n_fg += 1.0;
        } else {
            let b = if params.importance {
                2.0 - (decay * nearest[i].0).exp()
            } else {
                1.0
            };
            bg_err += m * b;
        }
    }
    let tp = n_fg - fg_err;
    let recall = 1.0 - fg_err / n_fg;
    let precision = tp / (tp + bg_err + f64::EPSILON);
    Ok(2.0 * recall * precision / (recall + precision + f64::EPSILON))
}
