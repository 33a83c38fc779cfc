use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Number of binarization thresholds in an F-measure curve.
pub const THRESHOLDS: usize = 256;
pub const DEFAULT_BETA2: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    pub tn: f64,
}

impl ConfusionCounts {
    pub fn total(&self) -> f64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> f64 {
        let d = self.tp + self.fp;
        if d > 0.0 {
            self.tp / d
        } else {
            0.0
        }
    }

    pub fn recall(&self) -> f64 {
        let d = self.tp + self.fn_;
        if d > 0.0 {
            self.tp / d
        } else {
            0.0
        }
    }

    /// `(1+β²)·P·R / (β²·P + R)`; 0 on a zero denominator. With an empty
    /// ground truth the score is 1 if nothing was predicted, else 0.
    pub fn f_beta(&self, beta2: f64) -> f64 {
        if self.tp + self.fn_ == 0.0 {
            return if self.fp == 0.0 { 1.0 } else { 0.0 };
        }
        let (p, r) = (self.precision(), self.recall());
        let denom = beta2 * p + r;
        if denom > 0.0 {
            (1.0 + beta2) * p * r / denom
        } else {
            0.0
        }
    }
}

pub(crate) fn is_fg(g: f64) -> bool {
    g >= 0.5
}

/// Binarization level of threshold index `t`: predict salient iff `s > level`.
#[inline]
pub fn threshold_level(t: usize) -> f64 {
    t as f64 / 255.0
}

/// Mean absolute error `(1/(W·H)) Σ |S − G|`.
pub fn mae(pred: &Grid, gt: &Grid) -> Result<f64> {
    pred.same_shape(gt, "mae")?;
    if pred.is_empty() {
        return Err(Error::Empty("mae on an empty map"));
    }
    let total: f64 = pred
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .map(|(s, g)| (s - g).abs())
        .sum();
    Ok(total / pred.len() as f64)
}

/// Counts after binarizing `pred` strictly above `level`.
pub fn confusion(pred: &Grid, gt: &Grid, level: f64) -> Result<ConfusionCounts> {
    pred.same_shape(gt, "confusion")?;
    let mut c = ConfusionCounts::default();
    for (&s, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        match (s > level, is_fg(g)) {
            (true, true) => c.tp += 1.0,
            (true, false) => c.fp += 1.0,
            (false, true) => c.fn_ += 1.0,
            (false, false) => c.tn += 1.0,
        }
    }
    Ok(c)
}

/// F-measure at threshold index `threshold` (0..=255).
pub fn f_beta(pred: &Grid, gt: &Grid, threshold: u8, beta2: f64) -> Result<f64> {
    Ok(confusion(pred, gt, threshold_level(threshold as usize))?.f_beta(beta2))
}

/// Number of threshold indices `t` for which `s > t/255`, in `0..=256`.
fn level_count(s: f64) -> usize {
    if s.is_nan() || s <= 0.0 {
        return 0;
    }
    let mut k = ((s * 255.0).floor() as usize).min(THRESHOLDS);
    while k < THRESHOLDS && s > threshold_level(k) {
        k += 1;
    }
    while k > 0 && s <= threshold_level(k - 1) {
        k -= 1;
    }
    k
}

/// F-measure at all 256 thresholds from one histogram pass.
pub fn f_curve(pred: &Grid, gt: &Grid, beta2: f64) -> Result<Vec<f64>> {
    pred.same_shape(gt, "f_curve")?;
    let mut fg = [0u64; THRESHOLDS + 1];
    let mut bg = [0u64; THRESHOLDS + 1];
    for (&s, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        let k = level_count(s);
        if is_fg(g) {
            fg[k] += 1;
        } else {
            bg[k] += 1;
        }
    }
    let fg_total: u64 = fg.iter().sum();
    let bg_total: u64 = bg.iter().sum();
    // positives at threshold t are the bins k > t
    let mut curve = vec![0.0; THRESHOLDS];
    let (mut tp, mut fp) = (0u64, 0u64);
    for t in (0..THRESHOLDS).rev() {
        tp += fg[t + 1];
        fp += bg[t + 1];
        let c = ConfusionCounts {
            tp: tp as f64,
            fp: fp as f64,
            fn_: (fg_total - tp) as f64,
            tn: (bg_total - fp) as f64,
        };
        curve[t] = c.f_beta(beta2);
    }
    Ok(curve)
}

pub fn curve_max(curve: &[f64]) -> f64 {
    curve.iter().copied().fold(0.0, f64::max)
}

pub fn curve_mean(curve: &[f64]) -> f64 {
    if curve.is_empty() {
        0.0
    } else {
        curve.iter().sum::<f64>() / curve.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Grid {
        Grid::new(1, v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn mae_cases() {
        let gt = Grid::new(2, 2, 1, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(mae(&gt, &gt).unwrap(), 0.0);
        assert_eq!(mae(&gt.map(|v| 1.0 - v), &gt).unwrap(), 1.0);
        assert!((mae(&Grid::filled(2, 2, 1, 0.5), &gt).unwrap() - 0.5).abs() < 1e-12);
        assert!(mae(&row(&[0.0]), &gt).is_err());
    }

    #[test]
    fn f_beta_cases() {
        let gt = row(&[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(f_beta(&gt, &gt, 127, 0.3).unwrap(), 1.0);
        assert_eq!(f_beta(&row(&[0.0; 4]), &gt, 127, 0.3).unwrap(), 0.0);

        // 8 salient pixels, 5 predicted of which 4 correct: P = 0.8, R = 0.5
        let gt = row(&[1., 1., 1., 1., 1., 1., 1., 1., 0., 0.]);
        let pred = row(&[1., 1., 1., 1., 0., 0., 0., 0., 1., 0.]);
        let c = confusion(&pred, &gt, 0.5).unwrap();
        assert_eq!((c.precision(), c.recall()), (0.8, 0.5));
        assert!((f_beta(&pred, &gt, 127, 0.3).unwrap() - 0.52 / 0.74).abs() < 1e-12);
        assert!((0.52f64 / 0.74 - 0.7027).abs() < 1e-4);
    }

    #[test]
    fn empty_ground_truth_convention() {
        let gt = row(&[0.0; 3]);
        assert_eq!(f_beta(&row(&[0.0, 0.1, 0.0]), &gt, 127, 0.3).unwrap(), 1.0);
        assert_eq!(f_beta(&row(&[0.0, 0.9, 0.0]), &gt, 127, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn constant_prediction_curve_is_a_step() {
        let gt = row(&[1.0, 0.0, 1.0, 1.0, 0.0]);
        let curve = f_curve(&Grid::filled(1, 5, 1, 0.5), &gt, 0.3).unwrap();
        assert!(curve[..128].iter().all(|&v| v == curve[0]));
        assert!(curve[128..].iter().all(|&v| v == curve[128]));
        assert_ne!(curve[0], curve[128]);
    }

    #[test]
    fn level_count_matches_comparisons() {
        for s in [0.0, 1e-9, 0.5, 127.0 / 255.0, 128.0 / 255.0, 0.999, 1.0, -0.1, 1.5, f64::NAN] {
            let naive = (0..THRESHOLDS).filter(|&t| s > threshold_level(t)).count();
            assert_eq!(level_count(s), naive, "s = {s}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pair(n: usize) -> impl Strategy<Value = (Grid, Grid)> {
            (
                proptest::collection::vec(0.0..=1.0f64, n),
                proptest::collection::vec(any::<bool>(), n),
            )
                .prop_map(|(p, g)| (row(&p), row(&g.iter().map(|&b| b as u8 as f64).collect::<Vec<_>>())))
        }

        proptest! {
            #[test]
            fn mae_of_binary_map_and_its_complement_sum_to_one(
                bits in proptest::collection::vec(any::<bool>(), 1..40),
                gbits in proptest::collection::vec(any::<bool>(), 40),
            ) {
                let s: Vec<f64> = bits.iter().map(|&b| b as u8 as f64).collect();
                let gt = row(&gbits[..s.len()].iter().map(|&b| b as u8 as f64).collect::<Vec<_>>());
                let inv: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
                let total = mae(&row(&s), &gt).unwrap() + mae(&row(&inv), &gt).unwrap();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }

            #[test]
            fn curve_values_are_bounded((pred, gt) in pair(25)) {
                let curve = f_curve(&pred, &gt, 0.3).unwrap();
                prop_assert_eq!(curve.len(), 256);
                prop_assert!(curve.iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!(curve_mean(&curve) <= curve_max(&curve));
                prop_assert!((0.0..=1.0).contains(&mae(&pred, &gt).unwrap()));
            }

            #[test]
            fn curve_matches_single_threshold_scores((pred, gt) in pair(25), t in any::<u8>()) {
                let curve = f_curve(&pred, &gt, 0.3).unwrap();
                prop_assert_eq!(curve[t as usize], f_beta(&pred, &gt, t, 0.3).unwrap());
            }
        }
    }
}
