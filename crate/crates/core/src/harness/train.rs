//! Stage 1 (teacher, cross-entropy) and stage 2 (student, mixed KL/CE)
//! training loops.

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{OptimConfig, Sgd};
use crate::distill::{ce_loss, dynamic_loss, DistillConfig, WeightRule, WeightTrace};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nets::{NetConfig, NetKind, Network, Predictor};
use crate::par::{self, Execution};
use crate::synthdata::{early_fusion, Sample};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Rgb,
    Rgbd,
}

impl InputKind {
    pub fn channels(self) -> usize {
        match self {
            InputKind::Rgb => 3,
            InputKind::Rgbd => 4,
        }
    }

    pub fn assemble(self, sample: &Sample) -> Grid {
        match self {
            InputKind::Rgb => sample.rgb.clone(),
            InputKind::Rgbd => early_fusion(sample),
        }
    }

    pub fn for_network(net: &Network) -> Result<Self> {
        match net.config().input_channels {
            3 => Ok(InputKind::Rgb),
            4 => Ok(InputKind::Rgbd),
            c => Err(Error::Config(format!("no input assembly for {c} channels"))),
        }
    }
}

/// Student learning rate for the desk-scale presets. A few hundred steps at
/// `1e-3` leave the student visibly underfit; above `2e-2` it can saturate
/// and stop learning.
pub const DESK_LEARNING_RATE: f64 = 5e-3;

/// The deeper teacher can saturate at [`DESK_LEARNING_RATE`] within its
/// first epoch, after which the clamped loss has no gradient left.
pub const DESK_TEACHER_LEARNING_RATE: f64 = 2e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Random horizontal flips and quarter turns.
    pub augment: bool,
    /// Per-epoch log lines on standard error.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            optim: OptimConfig::default(),
            augment: true,
            verbose: false,
        }
    }
}

impl TrainConfig {
    /// Student defaults with the learning rate raised to [`DESK_LEARNING_RATE`].
    pub fn desk() -> Self {
        Self::with_learning_rate(DESK_LEARNING_RATE)
    }

    /// Teacher defaults at [`DESK_TEACHER_LEARNING_RATE`].
    pub fn desk_teacher() -> Self {
        Self::with_learning_rate(DESK_TEACHER_LEARNING_RATE)
    }

    fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            optim: OptimConfig {
                learning_rate,
                ..OptimConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        self.optim.validate()
    }
}

/// Geometric augmentation applied identically to input, mask and teacher map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Aug {
    pub flip: bool,
    pub quarter_turns: u8,
}

impl Aug {
    pub fn apply(self, g: &Grid) -> Grid {
        let g = if self.flip { g.flip_horizontal() } else { g.clone() };
        if self.quarter_turns == 0 {
            g
        } else {
            g.rot90(self.quarter_turns)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean per-sample loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub iterations: usize,
}

/// Anything that yields soft teacher logits for a sample.
pub trait Teacher: Sync {
    fn soft_logits(&self, sample: &Sample) -> Result<Grid>;
}

impl Teacher for Network {
    fn soft_logits(&self, sample: &Sample) -> Result<Grid> {
        self.logits(&InputKind::for_network(self)?.assemble(sample))
    }
}

/// Ground truth softened to fixed confidences.
#[derive(Debug, Clone, Copy)]
pub struct OracleTeacher {
    pub confidence: f64,
}

impl Default for OracleTeacher {
    fn default() -> Self {
        Self { confidence: 0.99 }
    }
}

impl Teacher for OracleTeacher {
    fn soft_logits(&self, sample: &Sample) -> Result<Grid> {
        let z = (self.confidence / (1.0 - self.confidence)).ln();
        Ok(sample.gt.map(|g| if g >= 0.5 { z } else { -z }))
    }
}

/// Shared minibatch loop. `loss_fn` receives the tape, the logits var, the
/// sample position in `samples`, its augmentation and the iteration index.
fn fit<F>(
    net: &mut Network,
    samples: &[&Sample],
    input: InputKind,
    cfg: &TrainConfig,
    seed: u64,
    label: &str,
    mut loss_fn: F,
) -> Result<TrainLog>
where
    F: FnMut(&mut Tape, Var, usize, Aug, usize) -> Result<Var>,
{
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let inputs: Vec<Grid> = samples.iter().map(|s| input.assemble(s)).collect();
    let mut sgd = Sgd::new(cfg.optim, net);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = TrainLog {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        iterations: 0,
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Grid> = net.params().iter().map(|p| Grid::zeros_like(&p.value)).collect();
            let mut batch_loss = 0.0;
            for &i in batch {
                let aug = Aug {
                    flip: rng.random_bool(0.5),
                    quarter_turns: rng.random_range(0..4),
                };
                let aug = if cfg.augment { aug } else { Aug::default() };
                let mut tape = Tape::new();
                let x = tape.constant(aug.apply(&inputs[i]));
                let fwd = net.forward(&mut tape, x)?;
                let loss = loss_fn(&mut tape, fwd.logits, i, aug, log.iterations)?;
                let value = tape.value(loss).item()?;
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        iteration: log.iterations,
                        loss: value,
                    });
                }
                batch_loss += value;
                let g = tape.backward(loss)?;
                for (acc, &v) in grads.iter_mut().zip(&fwd.params) {
                    if let Some(gv) = g.get(v) {
                        acc.axpy(1.0, gv)?;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.as_mut_slice().iter_mut().for_each(|v| *v *= scale));
            sgd.step(net, &grads)?;
            if !net.params().iter().all(|p| p.value.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    iteration: log.iterations,
                    loss: batch_loss / batch.len() as f64,
                });
            }
            epoch_loss += batch_loss;
            log.iterations += 1;
        }
        let mean = epoch_loss / samples.len() as f64;
        if cfg.verbose {
            eprintln!("{label} epoch {}/{}: loss {mean:.5}", epoch + 1, cfg.epochs);
        }
        log.epoch_losses.push(mean);
    }
    Ok(log)
}

/// Stage 1: cross-entropy training of a fresh teacher on early-fused input.
pub fn train_teacher(net_cfg: NetConfig, samples: &[&Sample], cfg: &TrainConfig, seed: u64) -> Result<(Network, TrainLog)> {
    let mut net = Network::init(NetKind::Teacher, net_cfg)?;
    let input = InputKind::for_network(&net)?;
    let gts: Vec<&Grid> = samples.iter().map(|s| &s.gt).collect();
    let log = fit(&mut net, samples, input, cfg, seed, "teacher", |tape, logits, i, aug, _| {
        ce_loss(tape, logits, &aug.apply(gts[i]))
    })?;
    Ok((net, log))
}

/// Cross-entropy-only student, the distillation-free baseline.
pub fn train_student_ce(net_cfg: NetConfig, samples: &[&Sample], cfg: &TrainConfig, seed: u64) -> Result<(Network, TrainLog)> {
    let mut net = Network::init(NetKind::Student, net_cfg)?;
    let input = InputKind::for_network(&net)?;
    let log = fit(&mut net, samples, input, cfg, seed, "student", |tape, logits, i, aug, _| {
        ce_loss(tape, logits, &aug.apply(&samples[i].gt))
    })?;
    Ok((net, log))
}

/// Teacher logits for every sample, computed once on un-augmented input.
pub fn teacher_logits(teacher: &dyn Teacher, samples: &[&Sample], exec: Execution) -> Result<Vec<Grid>> {
    par::map(exec, samples, |s| teacher.soft_logits(s)).into_iter().collect()
}

/// Stage 2: the student learns from `theta·KL + (1−theta)·CE` with the weight
/// chosen by `rule`. Every sample visit appends one trace entry.
pub fn distill_student(
    net_cfg: NetConfig,
    samples: &[&Sample],
    teacher_logits: &[Grid],
    cfg: &TrainConfig,
    distill: &DistillConfig,
    rule: WeightRule,
    seed: u64,
) -> Result<(Network, TrainLog, Vec<WeightTrace>)> {
    distill.validate()?;
    if teacher_logits.len() != samples.len() {
        return Err(Error::shape("distill_student", samples.len(), teacher_logits.len()));
    }
    for (t, s) in teacher_logits.iter().zip(samples) {
        t.same_shape(&s.gt, "distill_student")?;
    }
    let mut net = Network::init(NetKind::Student, net_cfg)?;
    let input = InputKind::for_network(&net)?;
    let mut trace = Vec::new();
    let log = fit(&mut net, samples, input, cfg, seed, "student", |tape, logits, i, aug, iteration| {
        let d = dynamic_loss(tape, logits, &aug.apply(&teacher_logits[i]), &aug.apply(&samples[i].gt), distill, rule)?;
        trace.push(WeightTrace::new(iteration, samples[i].id.clone(), d.weight));
        Ok(d.loss)
    })?;
    Ok((net, log, trace))
}

/// Saliency maps of `net` on the given samples, in order.
pub fn predict_samples(net: &Network, samples: &[&Sample], exec: Execution) -> Result<Vec<Grid>> {
    let input = InputKind::for_network(net)?;
    par::map(exec, samples, |s| net.predict(&input.assemble(s))).into_iter().collect()
}
