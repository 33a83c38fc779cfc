//! Sample-adaptive distillation weighting.
//!
//! For every training sample the teacher's soft IoU against the ground
//! truth (`alpha`, knowledge confidence) and the student's soft IoU error
//! (`beta`, knowledge demand) are combined into a weight
//! `theta = tanh(alpha^p * beta^(1 - p))`. When the teacher's confidence does
//! not exceed `threshold` the sample is treated as carrying a distorted depth
//! map and `theta` collapses to `epsilon`. The per-sample loss is
//! `theta * KL(teacher ‖ student) + (1 - theta) * CE(student, gt)`.
//!
//! `theta` is computed from the current predictions but enters the graph as
//! a constant: no gradient flows through `alpha` or `beta`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::tape::{sigmoid, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Balance between teacher confidence and student demand, in `[0, 1]`.
    pub p: f64,
    pub temperature: f64,
    pub threshold: f64,
    pub epsilon: f64,
    /// Multiply the KL term by `temperature²`.
    pub kl_temperature_scaling: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            p: 0.7,
            temperature: 5.0,
            threshold: 0.5,
            epsilon: 0.01,
            kl_temperature_scaling: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.p)
            && self.temperature > 0.0
            && self.temperature.is_finite()
            && (0.0..=1.0).contains(&self.threshold)
            && self.epsilon > 0.0
            && self.epsilon < self.threshold;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "distillation config out of range (need p in [0,1], T > 0, threshold in [0,1], 0 < epsilon < threshold): {self:?}"
            )))
        }
    }

    pub fn kl_factor(&self) -> f64 {
        if self.kl_temperature_scaling {
            self.temperature * self.temperature
        } else {
            1.0
        }
    }
}

/// How the KL/CE mixing weight is chosen for each sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WeightRule {
    /// Constant weight `s` on the KL term.
    Fixed(f64),
    /// `tanh(alpha^p * beta^(1-p))`, never gated.
    Dynamic,
    /// As `Dynamic`, but `epsilon` whenever `alpha <= threshold`.
    DynamicGated,
}

fn check_maps(pred: &Grid, gt: &Grid, op: &'static str) -> Result<()> {
    pred.same_shape(gt, op)?;
    if let Some(v) = pred.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Range {
            op,
            reason: format!("prediction value {v} outside [0, 1]"),
        });
    }
    if let Some(v) = gt.as_slice().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Range {
            op,
            reason: format!("ground-truth value {v} is not binary"),
        });
    }
    Ok(())
}

/// `Σ(P·G) / (ΣP + ΣG − Σ(P·G))` over all pixels; 0 when both maps are empty.
pub fn soft_iou(pred: &Grid, gt: &Grid) -> Result<f64> {
    check_maps(pred, gt, "soft_iou")?;
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        inter += p * g;
        sp += p;
        sg += g;
    }
    let denom = sp + sg - inter;
    if denom <= 0.0 {
        return Ok(0.0);
    }
    Ok((inter / denom).clamp(0.0, 1.0))
}

/// Teacher knowledge confidence.
pub fn alpha_t(teacher_pred: &Grid, gt: &Grid) -> Result<f64> {
    soft_iou(teacher_pred, gt)
}

/// Student knowledge demand (soft IoU error rate).
pub fn beta_s(student_pred: &Grid, gt: &Grid) -> Result<f64> {
    Ok(1.0 - soft_iou(student_pred, gt)?)
}

/// `x^e` with `0^0 = 1`.
fn pow0(x: f64, e: f64) -> f64 {
    if e == 0.0 {
        1.0
    } else {
        x.powf(e)
    }
}

/// The ungated weight `tanh(alpha^p · beta^(1−p))`.
pub fn theta_ungated(alpha: f64, beta: f64, p: f64) -> f64 {
    (pow0(alpha, p) * pow0(beta, 1.0 - p)).tanh()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theta {
    pub value: f64,
    pub gated: bool,
}

/// Gated weight: the tanh branch only when `alpha > threshold`.
pub fn theta(alpha: f64, beta: f64, cfg: &DistillConfig) -> Theta {
    if alpha > cfg.threshold {
        Theta {
            value: theta_ungated(alpha, beta, cfg.p),
            gated: false,
        }
    } else {
        Theta {
            value: cfg.epsilon,
            gated: true,
        }
    }
}

/// Mean per-pixel binary cross-entropy of `sigmoid(student_logits)` against `gt`.
pub fn ce_loss(tape: &mut Tape, student_logits: Var, gt: &Grid) -> Result<Var> {
    tape.bce_with_logits(student_logits, gt)
}

/// Mean per-pixel KL(teacher_T ‖ student_T) of temperature-softened
/// Bernoulli maps, scaled by `T²` when `kl_temperature_scaling` is set.
pub fn kl_loss(tape: &mut Tape, student_logits: Var, teacher_logits: &Grid, cfg: &DistillConfig) -> Result<Var> {
    tape.bernoulli_kl(student_logits, teacher_logits, cfg.temperature, cfg.kl_factor())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSample {
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    pub gated: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct DynamicLoss {
    pub loss: Var,
    pub kl: Var,
    pub ce: Var,
    pub weight: WeightSample,
}

/// Builds `theta·KL + (1−theta)·CE` for one sample.
pub fn dynamic_loss(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: &Grid,
    gt: &Grid,
    cfg: &DistillConfig,
    rule: WeightRule,
) -> Result<DynamicLoss> {
    let student = tape.value(student_logits);
    student.same_shape(teacher_logits, "dynamic_loss")?;
    student.same_shape(gt, "dynamic_loss")?;
    let alpha = alpha_t(&teacher_logits.map(sigmoid), gt)?;
    let beta = beta_s(&student.map(sigmoid), gt)?;
    let (theta, gated) = match rule {
        WeightRule::Fixed(s) => {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Range {
                    op: "dynamic_loss",
                    reason: format!("fixed weight {s} outside [0, 1]"),
                });
            }
            (s, false)
        }
        WeightRule::Dynamic => (theta_ungated(alpha, beta, cfg.p), false),
        WeightRule::DynamicGated => {
            let t = theta(alpha, beta, cfg);
            (t.value, t.gated)
        }
    };
    let kl = kl_loss(tape, student_logits, teacher_logits, cfg)?;
    let ce = ce_loss(tape, student_logits, gt)?;
    let loss = mix(tape, kl, ce, theta)?;
    Ok(DynamicLoss {
        loss,
        kl,
        ce,
        weight: WeightSample {
            alpha,
            beta,
            theta,
            gated,
        },
    })
}

/// `theta·kl + (1−theta)·ce` on the tape.
pub fn mix(tape: &mut Tape, kl: Var, ce: Var, theta: f64) -> Result<Var> {
    let a = tape.scale(kl, theta);
    let b = tape.scale(ce, 1.0 - theta);
    tape.add(a, b)
}

/// One row of the weight trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTrace {
    pub iteration: usize,
    pub sample_id: String,
    #[serde(rename = "alpha")]
    pub alpha_t: f64,
    #[serde(rename = "beta")]
    pub beta_s: f64,
    pub theta: f64,
    pub gated: bool,
}

impl WeightTrace {
    pub fn new(iteration: usize, sample_id: impl Into<String>, w: WeightSample) -> Self {
        WeightTrace {
            iteration,
            sample_id: sample_id.into(),
            alpha_t: w.alpha,
            beta_s: w.beta,
            theta: w.theta,
            gated: w.gated,
        }
    }
}

/// CSV with header `iteration,sample_id,alpha,beta,theta,gated`.
pub fn write_trace_csv(path: &Path, trace: &[WeightTrace]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in trace {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<WeightTrace>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(v: &[f64]) -> Grid {
        Grid::new(1, v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn soft_iou_cases() {
        let gt = g(&[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(soft_iou(&gt, &gt).unwrap(), 1.0);
        assert_eq!(soft_iou(&g(&[0.0; 4]), &gt).unwrap(), 0.0);
        assert_eq!(soft_iou(&g(&[0.0; 4]), &g(&[0.0; 4])).unwrap(), 0.0);
        // (1 + 0.5) / (1.5 + 2 - 1.5)
        let p = Grid::new(2, 2, 1, vec![1.0, 0.5, 0.0, 0.0]).unwrap();
        let gt2 = Grid::new(2, 2, 1, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((soft_iou(&p, &gt2).unwrap() - 0.75).abs() < 1e-15);
        assert!((alpha_t(&p, &gt2).unwrap() - 0.75).abs() < 1e-15);
        assert!((beta_s(&p, &gt2).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn soft_iou_rejects_bad_inputs() {
        let gt = g(&[1.0, 0.0]);
        assert!(matches!(soft_iou(&g(&[1.5, 0.0]), &gt), Err(Error::Range { .. })));
        assert!(matches!(soft_iou(&g(&[0.5, 0.0]), &g(&[0.5, 0.0])), Err(Error::Range { .. })));
        assert!(matches!(soft_iou(&g(&[0.5]), &gt), Err(Error::Shape { .. })));
    }

    #[test]
    fn alpha_beta_extremes() {
        let gt = g(&[1.0, 0.0, 1.0, 0.0]);
        let complement = gt.map(|v| 1.0 - v);
        assert_eq!(alpha_t(&gt, &gt).unwrap(), 1.0);
        assert_eq!(alpha_t(&complement, &gt).unwrap(), 0.0);
        assert_eq!(beta_s(&gt, &gt).unwrap(), 0.0);
        assert_eq!(beta_s(&complement, &gt).unwrap(), 1.0);
    }

    #[test]
    fn theta_cases() {
        let cfg = DistillConfig::default();
        for p in [0.0, 0.3, 0.7, 1.0] {
            let c = DistillConfig { p, ..cfg.clone() };
            let t = theta(1.0, 1.0, &c);
            assert!(!t.gated);
            assert!((t.value - 1f64.tanh()).abs() < 1e-15);
        }
        let gated = theta(0.4, 0.9, &cfg);
        assert_eq!(gated, Theta { value: 0.01, gated: true });
        // equality falls to the gate
        assert!(theta(0.5, 0.9, &cfg).gated);
        let t = theta(0.9, 0.2, &cfg);
        assert!((t.value - 0.5177).abs() < 1e-4);
    }

    #[test]
    fn theta_zero_power_is_one() {
        assert_eq!(theta_ungated(0.8, 0.0, 1.0), 0.8f64.tanh());
        assert_eq!(theta_ungated(0.0, 0.6, 0.0), 0.6f64.tanh());
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        for bad in [
            DistillConfig { p: 1.2, ..Default::default() },
            DistillConfig { temperature: 0.0, ..Default::default() },
            DistillConfig { epsilon: 0.6, ..Default::default() },
            DistillConfig { epsilon: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    fn fixture() -> (Grid, Grid, Grid) {
        let zs = Grid::new(2, 2, 1, vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        let zt = Grid::new(2, 2, 1, vec![3.0, -2.0, 4.0, -3.0]).unwrap();
        let gt = Grid::new(2, 2, 1, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        (zs, zt, gt)
    }

    #[test]
    fn forced_weights_select_one_term() {
        let (zs, zt, gt) = fixture();
        let cfg = DistillConfig::default();
        let mut t = Tape::new();
        let s = t.param(zs);
        let d0 = dynamic_loss(&mut t, s, &zt, &gt, &cfg, WeightRule::Fixed(0.0)).unwrap();
        let d1 = dynamic_loss(&mut t, s, &zt, &gt, &cfg, WeightRule::Fixed(1.0)).unwrap();
        assert_eq!(t.value(d0.loss), t.value(d0.ce));
        assert_eq!(t.value(d1.loss), t.value(d1.kl));
        assert!(dynamic_loss(&mut t, s, &zt, &gt, &cfg, WeightRule::Fixed(1.5)).is_err());
    }

    #[test]
    fn gated_sample_recomposes() {
        let (zs, _, gt) = fixture();
        // teacher predicting the complement: alpha well below the threshold
        let zt = gt.map(|v| if v > 0.5 { -3.0 } else { 3.0 });
        let cfg = DistillConfig::default();
        let mut t = Tape::new();
        let s = t.param(zs);
        let d = dynamic_loss(&mut t, s, &zt, &gt, &cfg, WeightRule::DynamicGated).unwrap();
        assert!(d.weight.gated && d.weight.theta == 0.01);
        let kl = t.value(d.kl).item().unwrap();
        let ce = t.value(d.ce).item().unwrap();
        assert_eq!(t.value(d.loss).item().unwrap(), 0.01 * kl + 0.99 * ce);
    }

    #[test]
    fn theta_is_detached() {
        // Gradient of the mixed loss equals theta*dKL + (1-theta)*dCE with
        // theta frozen at its forward value.
        let (zs, zt, gt) = fixture();
        let cfg = DistillConfig::default();
        let mut t = Tape::new();
        let s = t.param(zs.clone());
        let d = dynamic_loss(&mut t, s, &zt, &gt, &cfg, WeightRule::Dynamic).unwrap();
        let g = t.backward(d.loss).unwrap().get(s).unwrap().clone();
        let th = d.weight.theta;

        let parts = |which: u8| {
            let mut t = Tape::new();
            let s = t.param(zs.clone());
            let l = if which == 0 { kl_loss(&mut t, s, &zt, &cfg).unwrap() } else { ce_loss(&mut t, s, &gt).unwrap() };
            t.backward(l).unwrap().get(s).unwrap().clone()
        };
        let (gk, gc) = (parts(0), parts(1));
        for ((a, k), c) in g.as_slice().iter().zip(gk.as_slice()).zip(gc.as_slice()) {
            assert!((a - (th * k + (1.0 - th) * c)).abs() < 1e-15);
        }
    }

    #[test]
    fn trace_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let rows = vec![
            WeightTrace::new(0, "s0", WeightSample { alpha: 0.9, beta: 0.2, theta: 0.5177, gated: false }),
            WeightTrace::new(1, "s1", WeightSample { alpha: 0.3, beta: 0.7, theta: 0.01, gated: true }),
        ];
        write_trace_csv(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("iteration,sample_id,alpha,beta,theta,gated\n"));
        assert_eq!(read_trace_csv(&path).unwrap(), rows);
    }

    mod props {
        use super::*;
        use crate::tape::bernoulli_kl_pixel;
        use proptest::prelude::*;

        fn map(n: usize) -> impl Strategy<Value = Grid> {
            proptest::collection::vec(0.0..=1.0f64, n).prop_map(|v| g(&v))
        }

        fn mask(n: usize) -> impl Strategy<Value = Grid> {
            proptest::collection::vec(any::<bool>(), n).prop_map(|v| g(&v.iter().map(|&b| b as u8 as f64).collect::<Vec<_>>()))
        }

        proptest! {
            #[test]
            fn theta_stays_below_tanh_one(a in 0.0..=1.0f64, b in 0.0..=1.0f64, p in 0.0..=1.0f64) {
                let t = theta_ungated(a, b, p);
                prop_assert!((0.0..=1f64.tanh()).contains(&t));
            }

            #[test]
            fn theta_is_monotone_in_both_arguments(
                a in 0.0..=1.0f64, b in 0.0..=1.0f64, da in 0.0..=1.0f64, db in 0.0..=1.0f64, p in 0.0..=1.0f64,
            ) {
                let (a2, b2) = ((a + da).min(1.0), (b + db).min(1.0));
                prop_assert!(theta_ungated(a2, b, p) >= theta_ungated(a, b, p));
                prop_assert!(theta_ungated(a, b2, p) >= theta_ungated(a, b, p));
            }

            #[test]
            fn gate_fires_exactly_at_or_below_threshold(a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
                let cfg = DistillConfig::default();
                let t = theta(a, b, &cfg);
                prop_assert_eq!(t.gated, a <= cfg.threshold);
                if t.gated {
                    prop_assert_eq!(t.value, cfg.epsilon);
                } else {
                    prop_assert_eq!(t.value, theta_ungated(a, b, cfg.p));
                }
            }

            #[test]
            fn soft_iou_is_bounded(p in map(16), q in mask(16)) {
                let v = soft_iou(&p, &q).unwrap();
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert_eq!(soft_iou(&q, &q).unwrap(), if q.sum() > 0.0 { 1.0 } else { 0.0 });
                prop_assert_eq!(beta_s(&p, &q).unwrap(), 1.0 - v);
            }

            #[test]
            fn bernoulli_kl_is_nonnegative_and_zero_on_equal(a in -30.0..30.0f64, b in -30.0..30.0f64) {
                prop_assert!(bernoulli_kl_pixel(a, b) >= -1e-15);
                prop_assert!(bernoulli_kl_pixel(a, a).abs() < 1e-15);
            }
        }
    }
}
