//! Saliency evaluation: MAE, F-measure curve, weighted F, S-measure and
//! E-measure.

mod fmeasure;
mod structure;
mod weighted;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::par::{self, Execution};

pub use fmeasure::{
    confusion, curve_max, curve_mean, f_beta, f_curve, mae, threshold_level, ConfusionCounts, DEFAULT_BETA2,
    THRESHOLDS,
};
pub use structure::{adaptive_threshold, e_measure, s_measure, s_measure_with, DEFAULT_S_ALPHA};
pub use weighted::{gaussian_kernel, weighted_f, weighted_f_with, WeightedFParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub max_f: f64,
    pub mean_f: f64,
    pub weighted_f: f64,
    pub s_measure: f64,
    pub e_measure: f64,
    pub f_curve: Vec<f64>,
}

/// Column header of [`MetricReport::csv_row`].
pub const REPORT_CSV_HEADER: [&str; 7] = ["dataset", "mae", "max_f", "mean_f", "wf", "s", "e"];

impl MetricReport {
    pub fn csv_row(&self, dataset: &str) -> [String; 7] {
        [
            dataset.to_string(),
            format!("{:.6}", self.mae),
            format!("{:.6}", self.max_f),
            format!("{:.6}", self.mean_f),
            format!("{:.6}", self.weighted_f),
            format!("{:.6}", self.s_measure),
            format!("{:.6}", self.e_measure),
        ]
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub beta2: f64,
    pub s_alpha: f64,
    pub weighted: WeightedFParams,
    /// Take max F per image and average, instead of the max of the mean curve.
    pub per_image_max_f: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            beta2: DEFAULT_BETA2,
            s_alpha: DEFAULT_S_ALPHA,
            weighted: WeightedFParams::default(),
            per_image_max_f: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub mae: f64,
    pub weighted_f: f64,
    pub s_measure: f64,
    pub e_measure: f64,
    pub f_curve: Vec<f64>,
}

pub fn evaluate_image(pred: &Grid, gt: &Grid, opts: &EvalOptions) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        mae: mae(pred, gt)?,
        weighted_f: weighted_f_with(pred, gt, &opts.weighted)?,
        s_measure: s_measure_with(pred, gt, opts.s_alpha)?,
        e_measure: e_measure(pred, gt)?,
        f_curve: f_curve(pred, gt, opts.beta2)?,
    })
}

/// Per-image metrics averaged over the dataset. The F curve is averaged
/// pointwise before max and mean are taken.
pub fn evaluate_dataset(preds: &[Grid], gts: &[Grid], opts: &EvalOptions, exec: Execution) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(Error::Dims {
            op: "evaluate_dataset",
            reason: format!("{} predictions for {} ground truths", preds.len(), gts.len()),
        });
    }
    if preds.is_empty() {
        return Err(Error::Empty("evaluate_dataset on an empty dataset"));
    }
    let per_image = par::map_range(exec, preds.len(), |i| evaluate_image(&preds[i], &gts[i], opts))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&per_image, opts))
}

/// Ordered mean of per-image results.
pub fn aggregate(per_image: &[ImageMetrics], opts: &EvalOptions) -> MetricReport {
    let n = per_image.len() as f64;
    let avg = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    let mut curve = vec![0.0; THRESHOLDS];
    for m in per_image {
        for (c, v) in curve.iter_mut().zip(&m.f_curve) {
            *c += v;
        }
    }
    curve.iter_mut().for_each(|c| *c /= n);
    let max_f = if opts.per_image_max_f {
        per_image.iter().map(|m| curve_max(&m.f_curve)).sum::<f64>() / n
    } else {
        curve_max(&curve)
    };
    MetricReport {
        mae: avg(|m| m.mae),
        max_f,
        mean_f: curve_mean(&curve),
        weighted_f: avg(|m| m.weighted_f),
        s_measure: avg(|m| m.s_measure),
        e_measure: avg(|m| m.e_measure),
        f_curve: curve,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pair(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Grid, Grid) {
        let gt = Grid::from_fn(h, w, 1, |y, x, _| {
            let d = (y as f64 - h as f64 / 2.0).hypot(x as f64 - w as f64 / 3.0);
            (d < 3.0 || rng.random::<f64>() < 0.05) as u8 as f64
        });
        let pred = Grid::from_fn(h, w, 1, |y, x, _| (0.6 * gt.get(y, x, 0) + 0.4 * rng.random::<f64>()).min(1.0));
        (pred, gt)
    }

    #[test]
    fn naive_curve_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..25 {
            let (mut pred, gt) = random_pair(&mut rng, 10, 12);
            // exact threshold values stress the strict comparison
            pred.set(0, 0, 0, 128.0 / 255.0);
            pred.set(1, 1, 0, 0.0);
            pred.set(2, 2, 0, 1.0);
            let fast = f_curve(&pred, &gt, 0.3).unwrap();
            for (t, &f) in fast.iter().enumerate() {
                let naive = f_beta(&pred, &gt, t as u8, 0.3).unwrap();
                assert_eq!(f, naive, "threshold {t}");
            }
        }
    }

    #[test]
    fn dataset_matches_per_image_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (preds, gts): (Vec<Grid>, Vec<Grid>) = (0..10).map(|_| random_pair(&mut rng, 12, 12)).unzip();
        let opts = EvalOptions::default();
        let report = evaluate_dataset(&preds, &gts, &opts, Execution::Parallel).unwrap();

        let n = 10.0;
        let mut m = [0.0; 4];
        let mut curve = vec![0.0; 256];
        for (p, g) in preds.iter().zip(&gts) {
            m[0] += mae(p, g).unwrap() / n;
            m[1] += weighted_f(p, g).unwrap() / n;
            m[2] += s_measure(p, g).unwrap() / n;
            m[3] += e_measure(p, g).unwrap() / n;
            for (t, c) in curve.iter_mut().enumerate() {
                *c += f_beta(p, g, t as u8, 0.3).unwrap() / n;
            }
        }
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        assert!(close(report.mae, m[0]));
        assert!(close(report.weighted_f, m[1]));
        assert!(close(report.s_measure, m[2]));
        assert!(close(report.e_measure, m[3]));
        assert!(report.f_curve.iter().zip(&curve).all(|(a, b)| close(*a, *b)));
        assert!(close(report.max_f, curve.iter().copied().fold(0.0, f64::max)));
        assert!(close(report.mean_f, curve.iter().sum::<f64>() / 256.0));
    }

    #[test]
    fn single_and_duplicated_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (p, g) = random_pair(&mut rng, 8, 8);
        let opts = EvalOptions::default();
        let one = evaluate_dataset(std::slice::from_ref(&p), std::slice::from_ref(&g), &opts, Execution::Sequential).unwrap();
        let img = evaluate_image(&p, &g, &opts).unwrap();
        assert_eq!(one.mae, img.mae);
        assert_eq!(one.f_curve, img.f_curve);
        let two = evaluate_dataset(&[p.clone(), p], &[g.clone(), g], &opts, Execution::Sequential).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn execution_modes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (preds, gts): (Vec<Grid>, Vec<Grid>) = (0..6).map(|_| random_pair(&mut rng, 8, 8)).unzip();
        let opts = EvalOptions::default();
        let a = evaluate_dataset(&preds, &gts, &opts, Execution::Sequential).unwrap();
        let b = evaluate_dataset(&preds, &gts, &opts, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn per_image_max_f_flag() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (preds, gts): (Vec<Grid>, Vec<Grid>) = (0..5).map(|_| random_pair(&mut rng, 8, 8)).unzip();
        let pooled = evaluate_dataset(&preds, &gts, &EvalOptions::default(), Execution::Sequential).unwrap();
        let opts = EvalOptions { per_image_max_f: true, ..Default::default() };
        let per_image = evaluate_dataset(&preds, &gts, &opts, Execution::Sequential).unwrap();
        assert!(per_image.max_f >= pooled.max_f);
        assert_eq!(per_image.mean_f, pooled.mean_f);
    }

    #[test]
    fn dataset_errors() {
        let g = Grid::zeros(4, 4, 1);
        let opts = EvalOptions::default();
        assert!(evaluate_dataset(&[], &[], &opts, Execution::Sequential).is_err());
        assert!(evaluate_dataset(std::slice::from_ref(&g), &[], &opts, Execution::Sequential).is_err());
        assert!(evaluate_dataset(std::slice::from_ref(&g), &[Grid::zeros(4, 5, 1)], &opts, Execution::Sequential).is_err());
    }

    #[test]
    fn csv_row_layout() {
        let r = MetricReport {
            mae: 0.1,
            max_f: 0.9,
            mean_f: 0.8,
            weighted_f: 0.7,
            s_measure: 0.6,
            e_measure: 0.5,
            f_curve: vec![0.0; 256],
        };
        assert_eq!(r.csv_row("test")[0], "test");
        assert_eq!(r.csv_row("test")[4], "0.700000");
    }
}
