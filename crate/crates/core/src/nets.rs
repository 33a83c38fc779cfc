//! Toy FPN-shaped student and teacher networks over early-fusion inputs.
//!
//! Both networks share one skeleton: an encoder of `depth_levels` stages
//! (two 3×3 conv + ReLU, with 2×2 max pooling between stages, channels
//! doubling per stage) and a top-down decoder (nearest 2× upsampling, 1×1
//! lateral projection added in, 3×3 smoothing conv) ending in a 1×1 conv to
//! a single logit channel. The teacher additionally runs a multi-branch
//! context block after every encoder stage.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Shape};
use crate::tape::{sigmoid, Tape, Var};

pub const STUDENT_BASE_CHANNELS: usize = 8;
pub const TEACHER_BASE_CHANNELS: usize = 24;
pub const DEFAULT_DEPTH_LEVELS: usize = 3;
/// Channel reduction inside a context-block branch.
pub const CONTEXT_REDUCTION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetKind {
    Student,
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub base_channels: usize,
    pub depth_levels: usize,
    pub input_channels: usize,
    pub seed: u64,
}

impl NetConfig {
    pub fn student(seed: u64) -> Self {
        NetConfig {
            base_channels: STUDENT_BASE_CHANNELS,
            depth_levels: DEFAULT_DEPTH_LEVELS,
            input_channels: 4,
            seed,
        }
    }

    pub fn teacher(seed: u64) -> Self {
        NetConfig {
            base_channels: TEACHER_BASE_CHANNELS,
            ..Self::student(seed)
        }
    }

    pub fn with_input_channels(mut self, channels: usize) -> Self {
        self.input_channels = channels;
        self
    }

    pub fn validate(&self, kind: NetKind) -> Result<()> {
        if self.base_channels == 0 || self.depth_levels == 0 || self.input_channels == 0 {
            return Err(Error::Config(format!(
                "network dimensions must be positive: {self:?}"
            )));
        }
        if kind == NetKind::Teacher && self.base_channels < CONTEXT_REDUCTION {
            return Err(Error::Config(format!(
                "teacher base_channels must be at least {CONTEXT_REDUCTION}"
            )));
        }
        Ok(())
    }

    /// Spatial size must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.depth_levels - 1)
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.channels != self.input_channels {
            return Err(Error::shape(
                "network input",
                format!("{} channels", self.input_channels),
                shape,
            ));
        }
        let m = self.spatial_multiple();
        if shape.height == 0 || shape.width == 0 || !shape.height.is_multiple_of(m) || !shape.width.is_multiple_of(m) {
            return Err(Error::Dims {
                op: "network input",
                reason: format!("spatial dims of {shape} must be positive multiples of {m}"),
            });
        }
        Ok(())
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSlot {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct ContextSlots {
    branch_a: ConvSlot,
    branch_b1: ConvSlot,
    branch_b2: ConvSlot,
    expand: ConvSlot,
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<(ConvSlot, ConvSlot, Option<ContextSlots>)>,
    laterals: Vec<ConvSlot>,
    smooth: Vec<ConvSlot>,
    head: ConvSlot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ConvSpec {
    name: String,
    ksize: usize,
    cin: usize,
    cout: usize,
}

fn plan(kind: NetKind, cfg: &NetConfig) -> (Layout, Vec<ConvSpec>) {
    let mut specs = Vec::new();
    let mut add = |name: String, ksize: usize, cin: usize, cout: usize| {
        let weight = specs.len() * 2;
        specs.push(ConvSpec {
            name,
            ksize,
            cin,
            cout,
        });
        ConvSlot {
            weight,
            bias: weight + 1,
        }
    };

    let mut encoder = Vec::new();
    let mut cin = cfg.input_channels;
    for l in 0..cfg.depth_levels {
        let c = cfg.level_channels(l);
        let conv1 = add(format!("enc{l}.conv1"), 3, cin, c);
        let conv2 = add(format!("enc{l}.conv2"), 3, c, c);
        let ctx = (kind == NetKind::Teacher).then(|| {
            let r = (c / CONTEXT_REDUCTION).max(1);
            ContextSlots {
                branch_a: add(format!("enc{l}.ctx.a"), 3, c, r),
                branch_b1: add(format!("enc{l}.ctx.b1"), 3, c, r),
                branch_b2: add(format!("enc{l}.ctx.b2"), 3, r, r),
                expand: add(format!("enc{l}.ctx.expand"), 1, r, c),
            }
        });
        encoder.push((conv1, conv2, ctx));
        cin = c;
    }
    let width = cfg.base_channels;
    let laterals = (0..cfg.depth_levels)
        .map(|l| add(format!("lat{l}"), 1, cfg.level_channels(l), width))
        .collect();
    let smooth = (0..cfg.depth_levels - 1)
        .map(|l| add(format!("smooth{l}"), 3, width, width))
        .collect();
    let head = add("head".to_string(), 1, width, 1);
    (
        Layout {
            encoder,
            laterals,
            smooth,
            head,
        },
        specs,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Grid,
}

#[derive(Debug, Clone)]
pub struct Network {
    kind: NetKind,
    config: NetConfig,
    params: Vec<Param>,
    layout: Layout,
}

/// Parameter-carrying handles produced when a network is placed on a tape.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    pub params: Vec<Var>,
}

/// Anything that maps an early-fusion input to a logit map.
pub trait Predictor: Sync {
    fn logits(&self, input: &Grid) -> Result<Grid>;

    /// Per-pixel saliency probabilities, `sigmoid(logits)`.
    fn predict(&self, input: &Grid) -> Result<Grid> {
        Ok(self.logits(input)?.map(sigmoid))
    }
}

impl Network {
    /// He-initialized weights from a generator seeded by `cfg.seed`; zero biases.
    pub fn init(kind: NetKind, cfg: NetConfig) -> Result<Self> {
        cfg.validate(kind)?;
        let (layout, specs) = plan(kind, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = Vec::with_capacity(specs.len() * 2);
        for s in &specs {
            let fan_in = (s.ksize * s.ksize * s.cin) as f64;
            let gain = if s.name == "head" { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("finite std");
            let n = s.ksize * s.ksize * s.cin * s.cout;
            let w: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            params.push(Param {
                name: format!("{}.weight", s.name),
                value: Grid::kernel(s.ksize, s.cin, s.cout, w)?,
            });
            params.push(Param {
                name: format!("{}.bias", s.name),
                value: Grid::zeros(1, 1, s.cout),
            });
        }
        Ok(Network {
            kind,
            config: cfg,
            params,
            layout,
        })
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeros(kind: NetKind, cfg: NetConfig) -> Result<Self> {
        let mut net = Self::init(kind, cfg)?;
        for p in &mut net.params {
            p.value.as_mut_slice().fill(0.0);
        }
        Ok(net)
    }

    pub fn student(seed: u64) -> Result<Self> {
        Self::init(NetKind::Student, NetConfig::student(seed))
    }

    pub fn teacher(seed: u64) -> Result<Self> {
        Self::init(NetKind::Teacher, NetConfig::teacher(seed))
    }

    pub fn kind(&self) -> NetKind {
        self.kind
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_grids(&self) -> Vec<Grid> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces parameter values; shapes must match.
    pub fn set_params(&mut self, values: Vec<Grid>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::shape("set_params", self.params.len(), values.len()));
        }
        for (p, v) in self.params.iter().zip(&values) {
            p.value.same_shape(v, "set_params")?;
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Grid> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    /// Places parameters on `tape` as trainable leaves and runs the forward pass.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Forward> {
        let params: Vec<Var> = self.params.iter().map(|p| tape.param(p.value.clone())).collect();
        let logits = self.forward_with(tape, input, &params)?;
        Ok(Forward { logits, params })
    }

    /// Forward pass using caller-provided parameter vars (in [`Self::params`] order).
    pub fn forward_with(&self, tape: &mut Tape, input: Var, params: &[Var]) -> Result<Var> {
        self.config.check_input(tape.value(input).shape())?;
        if params.len() != self.params.len() {
            return Err(Error::shape("forward_with", self.params.len(), params.len()));
        }
        let conv = |tape: &mut Tape, x: Var, s: ConvSlot| tape.conv2d(x, params[s.weight], params[s.bias]);

        let mut skips = Vec::with_capacity(self.layout.encoder.len());
        let mut x = input;
        for (l, (c1, c2, ctx)) in self.layout.encoder.iter().enumerate() {
            if l > 0 {
                x = tape.down2_max(x)?;
            }
            x = conv(tape, x, *c1)?;
            x = tape.relu(x);
            x = conv(tape, x, *c2)?;
            x = tape.relu(x);
            if let Some(ctx) = ctx {
                let a = conv(tape, x, ctx.branch_a)?;
                let b = conv(tape, x, ctx.branch_b1)?;
                let b = tape.relu(b);
                let b = conv(tape, b, ctx.branch_b2)?;
                let m = tape.add(a, b)?;
                let m = tape.relu(m);
                let e = conv(tape, m, ctx.expand)?;
                let r = tape.add(x, e)?;
                x = tape.relu(r);
            }
            skips.push(x);
        }

        let top = skips.len() - 1;
        let mut p = conv(tape, skips[top], self.layout.laterals[top])?;
        for l in (0..top).rev() {
            let up = tape.up2_nearest(p);
            let lat = conv(tape, skips[l], self.layout.laterals[l])?;
            let merged = tape.add(up, lat)?;
            let s = conv(tape, merged, self.layout.smooth[l])?;
            p = tape.relu(s);
        }
        conv(tape, p, self.layout.head)
    }

    /// Writes `<stem>.json` (manifest) and `<stem>.bin` (little-endian f64
    /// values of every parameter, concatenated in manifest order).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bin_name = format!("{stem}.bin");
        let mut offset = 0;
        let entries = self
            .params
            .iter()
            .map(|p| {
                let s = p.value.shape();
                let e = ManifestEntry {
                    name: p.name.clone(),
                    shape: [s.height, s.width, s.channels],
                    offset,
                    len: p.value.len(),
                };
                offset += p.value.len();
                e
            })
            .collect();
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            kind: self.kind,
            config: self.config.clone(),
            seed: self.config.seed,
            dtype: "f64le".to_string(),
            binary: bin_name.clone(),
            params: entries,
        };
        let mut bytes = Vec::with_capacity(offset * 8);
        for p in &self.params {
            for v in p.value.as_slice() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let bin_path = dir.join(&bin_name);
        fs::File::create(&bin_path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(&bin_path, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&json_path, e))?;
        fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))
    }

    /// Loads a checkpoint from its manifest path (`<stem>.json`).
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let m: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(manifest_path, e))?;
        let bad = |reason: String| Error::Dataset {
            path: manifest_path.to_path_buf(),
            reason,
        };
        if m.format != CHECKPOINT_FORMAT || m.dtype != "f64le" {
            return Err(bad(format!("unsupported checkpoint format {} / {}", m.format, m.dtype)));
        }
        let bin_path = manifest_path.with_file_name(&m.binary);
        let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let mut net = Network::init(m.kind, m.config.clone())?;
        if m.params.len() != net.params.len() {
            return Err(bad(format!(
                "expected {} parameters, manifest lists {}",
                net.params.len(),
                m.params.len()
            )));
        }
        let total: usize = m.params.iter().map(|e| e.len).sum();
        if bytes.len() != total * 8 {
            return Err(bad(format!("binary holds {} bytes, expected {}", bytes.len(), total * 8)));
        }
        for (p, e) in net.params.iter_mut().zip(&m.params) {
            let s = p.value.shape();
            if e.name != p.name || e.shape != [s.height, s.width, s.channels] || e.len != s.len() {
                return Err(bad(format!("parameter {} does not match architecture", e.name)));
            }
            let chunk = &bytes[e.offset * 8..(e.offset + e.len) * 8];
            for (dst, b) in p.value.as_mut_slice().iter_mut().zip(chunk.chunks_exact(8)) {
                *dst = f64::from_le_bytes(b.try_into().expect("8-byte chunk"));
            }
        }
        Ok(net)
    }
}

impl Predictor for Network {
    fn logits(&self, input: &Grid) -> Result<Grid> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        let z = self.forward_with(&mut tape, x, &params)?;
        Ok(tape.value(z).clone())
    }
}

pub const CHECKPOINT_FORMAT: &str = "dynkd-checkpoint-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 3],
    /// Offset into the binary, in f64 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub kind: NetKind,
    pub config: NetConfig,
    pub seed: u64,
    pub dtype: String,
    pub binary: String,
    pub params: Vec<ManifestEntry>,
}
