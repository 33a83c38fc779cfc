//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::distill::{ce_loss, dynamic_loss, kl_loss, mix, DistillConfig, WeightRule, WeightSample};
use crate::grid::Grid;
use crate::nets::{NetConfig, NetKind, Network};
use crate::tape::{Tape, Var};

/// Floor on the denominator of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FdReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// (parameter index, element index, analytic, finite difference) of the
    /// worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares tape gradients against central differences.
///
/// `loss_fn` builds a scalar loss on a fresh tape from the parameter vars it
/// is handed (one per entry of `params`, same order). Up to `samples`
/// elements are drawn without replacement across all parameters using
/// `seed`; pass `usize::MAX` to check every element.
pub fn fd_check<F>(params: &[Grid], loss_fn: F, step: f64, samples: usize, seed: u64) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    fd_compare(params, &loss_fn, &loss_fn, step, samples, seed)
}

/// Like [`fd_check`], but differentiates `analytic` on the tape and takes
/// central differences of `numeric`. The two must agree in value; this lets
/// a loss with a detached factor be checked against the same expression with
/// that factor frozen.
pub fn fd_compare<A, N>(params: &[Grid], analytic: &A, numeric: &N, step: f64, samples: usize, seed: u64) -> Result<FdReport>
where
    A: Fn(&mut Tape, &[Var]) -> Result<Var>,
    N: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Range {
            op: "fd_check",
            reason: format!("step must be > 0, got {step}"),
        });
    }
    let eval = |ps: &[Grid]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = numeric(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = analytic(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Grid> = params
        .iter()
        .zip(&vars)
        .map(|(p, &v)| grads.get(v).cloned().unwrap_or_else(|| Grid::zeros_like(p)))
        .collect();
    drop(tape);

    let total: usize = params.iter().map(Grid::len).sum();
    let picks: Vec<usize> = if samples >= total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = sample(&mut rng, total, samples).into_vec();
        v.sort_unstable();
        v
    };

    let mut work: Vec<Grid> = params.to_vec();
    let mut report = FdReport {
        max_relative_error: 0.0,
        checked: 0,
        worst: None,
    };
    for flat in picks {
        let (pi, ei) = locate(params, flat);
        let orig = work[pi].as_slice()[ei];
        work[pi].as_mut_slice()[ei] = orig + step;
        let up = eval(&work)?;
        work[pi].as_mut_slice()[ei] = orig - step;
        let down = eval(&work)?;
        work[pi].as_mut_slice()[ei] = orig;

        let numeric = (up - down) / (2.0 * step);
        let a = analytic[pi].as_slice()[ei];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst = Some((pi, ei, a, numeric));
        }
    }
    Ok(report)
}

fn locate(params: &[Grid], mut flat: usize) -> (usize, usize) {
    for (i, p) in params.iter().enumerate() {
        if flat < p.len() {
            return (i, flat);
        }
        flat -= p.len();
    }
    unreachable!("flat index beyond parameter storage")
}

/// Finite-difference step used by the network-level checks.
pub const NET_FD_STEP: f64 = 1e-5;

/// Random early-fusion input in `[0, 1)` and a random binary target.
fn fixture(cfg: &NetConfig, size: usize, seed: u64) -> (Grid, Grid) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1d0);
    let x = Grid::from_fn(size, size, cfg.input_channels, |_, _, _| rng.random::<f64>());
    let gt = Grid::from_fn(size, size, 1, |_, _, _| rng.random_bool(0.3) as u8 as f64);
    (x, gt)
}

/// Checks the BCE-with-logits gradient of a freshly initialized network on
/// a random `size×size` input.
pub fn check_network(kind: NetKind, cfg: NetConfig, size: usize, samples: usize, seed: u64) -> Result<FdReport> {
    let net = Network::init(kind, cfg)?;
    let (x, gt) = fixture(net.config(), size, seed);
    let loss = |t: &mut Tape, p: &[Var]| {
        let xv = t.constant(x.clone());
        let z = net.forward_with(t, xv, p)?;
        t.bce_with_logits(z, &gt)
    };
    fd_check(&net.param_grids(), loss, NET_FD_STEP, samples, seed)
}

/// Checks the distillation loss through a student network against random
/// teacher logits. The tape gradient treats θ as a constant, so the
/// differences are taken with θ frozen at its value for the unperturbed
/// parameters.
pub fn check_dynamic_loss(
    cfg: NetConfig,
    distill: &DistillConfig,
    rule: WeightRule,
    size: usize,
    samples: usize,
    seed: u64,
) -> Result<(FdReport, WeightSample)> {
    let net = Network::init(NetKind::Student, cfg)?;
    let (x, gt) = fixture(net.config(), size, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7eac_4e25);
    let teacher = Grid::from_fn(size, size, 1, |_, _, _| rng.random_range(-4.0..4.0));
    let params = net.param_grids();

    let analytic = |t: &mut Tape, p: &[Var]| {
        let xv = t.constant(x.clone());
        let z = net.forward_with(t, xv, p)?;
        Ok(dynamic_loss(t, z, &teacher, &gt, distill, rule)?.loss)
    };
    let weight = {
        let mut t = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| t.constant(p.clone())).collect();
        let xv = t.constant(x.clone());
        let z = net.forward_with(&mut t, xv, &vars)?;
        dynamic_loss(&mut t, z, &teacher, &gt, distill, rule)?.weight
    };
    let frozen = |t: &mut Tape, p: &[Var]| {
        let xv = t.constant(x.clone());
        let z = net.forward_with(t, xv, p)?;
        let kl = kl_loss(t, z, &teacher, distill)?;
        let ce = ce_loss(t, z, &gt)?;
        mix(t, kl, ce, weight.theta)
    };
    let report = fd_compare(&params, &analytic, &frozen, NET_FD_STEP, samples, seed)?;
    Ok((report, weight))
}
