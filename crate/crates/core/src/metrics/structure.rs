//! Structure measure (object and region similarity) and enhanced alignment
//! measure.

use super::fmeasure::is_fg;
use crate::error::{Error, Result};
use crate::grid::Grid;

pub const DEFAULT_S_ALPHA: f64 = 0.5;
const EPS: f64 = f64::EPSILON;

fn single_channel(pred: &Grid, gt: &Grid, op: &'static str) -> Result<()> {
    pred.same_shape(gt, op)?;
    if pred.channels() != 1 || pred.is_empty() {
        return Err(Error::Dims {
            op,
            reason: format!("expected a non-empty single-channel map, got {}", pred.shape()),
        });
    }
    Ok(())
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    (mean, std, n)
}

fn object_score(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (x, sigma, _) = mean_std(values);
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn s_object(s: &[f64], fg: &[bool], u: f64) -> f64 {
    let fg_score = object_score(s.iter().zip(fg).filter(|(_, &f)| f).map(|(&v, _)| v));
    let bg_score = object_score(s.iter().zip(fg).filter(|(_, &f)| !f).map(|(&v, _)| 1.0 - v));
    u * fg_score + (1.0 - u) * bg_score
}

/// Quadrant similarity from means, variances and covariance.
fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let x = pred.iter().sum::<f64>() / n as f64;
    let y = gt.iter().sum::<f64>() / n as f64;
    let d = (n.max(2) - 1) as f64;
    let sx = pred.iter().map(|p| (p - x).powi(2)).sum::<f64>() / d;
    let sy = gt.iter().map(|g| (g - y).powi(2)).sum::<f64>() / d;
    let sxy = pred.iter().zip(gt).map(|(p, g)| (p - x) * (g - y)).sum::<f64>() / d;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Centroid split point, 1-based as a count of leading rows/columns.
fn centroid(fg: &[bool], h: usize, w: usize) -> (usize, usize) {
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
    for (i, _) in fg.iter().enumerate().filter(|(_, &f)| f) {
        sy += (i / w) as f64;
        sx += (i % w) as f64;
        n += 1;
    }
    if n == 0 {
        return (
            (h as f64 / 2.0).round_ties_even() as usize,
            (w as f64 / 2.0).round_ties_even() as usize,
        );
    }
    let cy = (sy / n as f64).round_ties_even() as usize + 1;
    let cx = (sx / n as f64).round_ties_even() as usize + 1;
    (cy.min(h), cx.min(w))
}

fn s_region(s: &[f64], g: &[f64], fg: &[bool], h: usize, w: usize) -> f64 {
    let (cy, cx) = centroid(fg, h, w);
    let area = (h * w) as f64;
    let quads = [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)];
    let mut total = 0.0;
    for (y0, y1, x0, x1) in quads {
        let n = (y1 - y0) * (x1 - x0);
        if n == 0 {
            continue;
        }
        let mut ps = Vec::with_capacity(n);
        let mut gs = Vec::with_capacity(n);
        for y in y0..y1 {
            ps.extend_from_slice(&s[y * w + x0..y * w + x1]);
            gs.extend_from_slice(&g[y * w + x0..y * w + x1]);
        }
        total += n as f64 / area * ssim(&ps, &gs);
    }
    total
}

pub fn s_measure(pred: &Grid, gt: &Grid) -> Result<f64> {
    s_measure_with(pred, gt, DEFAULT_S_ALPHA)
}

/// `α·S_object + (1−α)·S_region`, clamped below at 0.
pub fn s_measure_with(pred: &Grid, gt: &Grid, alpha: f64) -> Result<f64> {
    single_channel(pred, gt, "s_measure")?;
    let (h, w) = (pred.height(), pred.width());
    let s = pred.as_slice();
    let fg: Vec<bool> = gt.as_slice().iter().map(|&v| is_fg(v)).collect();
    let g: Vec<f64> = fg.iter().map(|&b| b as u8 as f64).collect();
    let u = g.iter().sum::<f64>() / g.len() as f64;
    let mean_s = pred.mean();
    if u == 0.0 {
        return Ok(1.0 - mean_s);
    }
    if u == 1.0 {
        return Ok(mean_s);
    }
    let score = alpha * s_object(s, &fg, u) + (1.0 - alpha) * s_region(s, &g, &fg, h, w);
    Ok(score.max(0.0))
}

/// Adaptive binarization level for the enhanced alignment measure.
pub fn adaptive_threshold(pred: &Grid) -> f64 {
    (2.0 * pred.mean()).min(1.0)
}

/// Mean enhanced alignment of the map binarized at the adaptive level.
/// A pixel is foreground iff `s ≥ level` and `s > 0`.
pub fn e_measure(pred: &Grid, gt: &Grid) -> Result<f64> {
    single_channel(pred, gt, "e_measure")?;
    let level = adaptive_threshold(pred);
    let n = pred.len() as f64;
    let (mut ff, mut fb, mut bf, mut bb) = (0.0, 0.0, 0.0, 0.0);
    for (&s, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        match (s >= level && s > 0.0, is_fg(g)) {
            (true, true) => ff += 1.0,
            (true, false) => fb += 1.0,
            (false, true) => bf += 1.0,
            (false, false) => bb += 1.0,
        }
    }
    let gt_fg = ff + bf;
    let pred_fg = ff + fb;
    let sum = if gt_fg == 0.0 {
        n - pred_fg
    } else if gt_fg == n {
        pred_fg
    } else {
        let mp = pred_fg / n;
        let mg = gt_fg / n;
        let enhanced = |a: f64, b: f64| {
            let align = 2.0 * a * b / (a * a + b * b + EPS);
            (align + 1.0).powi(2) / 4.0
        };
        ff * enhanced(1.0 - mp, 1.0 - mg)
            + fb * enhanced(1.0 - mp, -mg)
            + bf * enhanced(-mp, 1.0 - mg)
            + bb * enhanced(-mp, -mg)
    };
    Ok(sum / n)
}
