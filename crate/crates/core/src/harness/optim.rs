use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nets::Network;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "optimizer config out of range (need lr >= 0, momentum in [0,1), weight decay >= 0): {self:?}"
            )))
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + (g + λ·w)`, `w ← w − η·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: OptimConfig,
    velocity: Vec<Grid>,
}

impl Sgd {
    pub fn new(cfg: OptimConfig, net: &Network) -> Self {
        Self {
            cfg,
            velocity: net.params().iter().map(|p| Grid::zeros_like(&p.value)).collect(),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &[Grid]) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::shape("sgd step", self.velocity.len(), grads.len()));
        }
        let OptimConfig {
            learning_rate: lr,
            momentum: mu,
            weight_decay: wd,
        } = self.cfg;
        for ((w, v), g) in net.params_mut().zip(&mut self.velocity).zip(grads) {
            w.same_shape(g, "sgd step")?;
            for ((wi, vi), gi) in w.as_mut_slice().iter_mut().zip(v.as_mut_slice()).zip(g.as_slice()) {
                *vi = mu * *vi + gi + wd * *wi;
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}
