//! Procedural desk-scale RGB-D scenes.
//!
//! Depth convention: larger is nearer. Salient shapes sit well in front of a
//! ground plane.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Clean,
    DistractorDepth,
    LowContrast,
    CameraDistortion,
}

impl NoiseMode {
    pub const ALL: [NoiseMode; 4] = [
        NoiseMode::Clean,
        NoiseMode::DistractorDepth,
        NoiseMode::LowContrast,
        NoiseMode::CameraDistortion,
    ];
    pub const NOISY: [NoiseMode; 3] = [NoiseMode::DistractorDepth, NoiseMode::LowContrast, NoiseMode::CameraDistortion];

    pub fn is_clean(self) -> bool {
        self == NoiseMode::Clean
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseMode::Clean => "clean",
            NoiseMode::DistractorDepth => "distractor_depth",
            NoiseMode::LowContrast => "low_contrast",
            NoiseMode::CameraDistortion => "camera_distortion",
        }
    }

    fn tag(self) -> u64 {
        match self {
            NoiseMode::Clean => 0,
            NoiseMode::DistractorDepth => 0x9e37_79b9_7f4a_7c15,
            NoiseMode::LowContrast => 0xbf58_476d_1ce4_e5b9,
            NoiseMode::CameraDistortion => 0x94d0_49bb_1331_11eb,
        }
    }
}

impl std::fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown noise mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub mode: NoiseMode,
    pub rgb: Grid,
    pub depth: Grid,
    pub gt: Grid,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.gt.height()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.gt.mean()
    }
}

/// Mean depth over salient pixels minus mean depth over the rest.
pub fn depth_contrast(depth: &Grid, gt: &Grid) -> f64 {
    let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0.0, 0.0, 0.0);
    for (&d, &g) in depth.as_slice().iter().zip(gt.as_slice()) {
        if g >= 0.5 {
            fg += d;
            nf += 1.0;
        } else {
            bg += d;
            nb += 1.0;
        }
    }
    if nf == 0.0 || nb == 0.0 {
        return 0.0;
    }
    fg / nf - bg / nb
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Ellipse,
    Rect,
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    kind: Kind,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, size: f64, radius: (f64, f64)) -> Self {
        let kind = if rng.random_bool(0.5) { Kind::Ellipse } else { Kind::Rect };
        let ry = rng.random_range(radius.0..radius.1) * size;
        let rx = rng.random_range(radius.0..radius.1) * size;
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        Shape {
            kind,
            cy: rng.random_range(0.2..0.8) * size,
            cx: rng.random_range(0.2..0.8) * size,
            ry,
            rx,
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (dx * self.cos + dy * self.sin) / self.rx;
        let v = (-dx * self.sin + dy * self.cos) / self.ry;
        match self.kind {
            Kind::Ellipse => u * u + v * v <= 1.0,
            Kind::Rect => u.abs() <= 1.0 && v.abs() <= 1.0,
        }
    }

    /// Fraction of each pixel covered, from a 4×4 supersample.
    fn coverage(&self, size: usize) -> Vec<f64> {
        const SS: usize = 4;
        let mut out = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let mut hits = 0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                        let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                        hits += self.contains(py, px) as usize;
                    }
                }
                out[y * size + x] = hits as f64 / (SS * SS) as f64;
            }
        }
        out
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
    ]
}

struct Layer {
    coverage: Vec<f64>,
    color: [f64; 3],
    depth: Option<f64>,
}

fn paint(rgb: &mut Grid, depth: &mut Grid, layer: &Layer) {
    let size = rgb.width();
    for (i, &c) in layer.coverage.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let (y, x) = (i / size, i % size);
        for ch in 0..3 {
            let v = rgb.get(y, x, ch);
            rgb.set(y, x, ch, v + c * (layer.color[ch] - v));
        }
        if let Some(d) = layer.depth {
            let v = depth.get(y, x, 0);
            depth.set(y, x, 0, v + c * (d - v));
        }
    }
}

const MIN_FG: f64 = 0.05;
const MAX_FG: f64 = 0.45;

/// Base scene before any noise injection.
struct Scene {
    rgb: Grid,
    depth: Grid,
    gt: Grid,
    fg_depth_max: f64,
}

fn render_scene(rng: &mut ChaCha8Rng, size: usize) -> Scene {
    let s = size as f64;
    let base = random_color(rng);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.06),
                rng.random_range(1.0..6.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut rgb = Grid::from_fn(size, size, 3, |y, x, c| {
        let (yn, xn) = (y as f64 / s, x as f64 / s);
        let t: f64 = waves
            .iter()
            .map(|&(a, f, phi, psi)| {
                a * (std::f64::consts::TAU * f * (xn * phi.cos() + yn * phi.sin()) + psi + c as f64).sin()
            })
            .sum();
        base[c] + t
    });
    let near = rng.random_range(0.05..0.15);
    let far = rng.random_range(0.1..0.15);
    let mut depth = Grid::from_fn(size, size, 1, |y, _, _| far + near * y as f64 / s);

    let n_salient = rng.random_range(1..=3usize);
    let radius = match n_salient {
        1 => (0.12, 0.26),
        2 => (0.09, 0.2),
        _ => (0.07, 0.16),
    };
    let mut layers: Vec<Layer>;
    let mut union: Vec<f64>;
    loop {
        layers = (0..n_salient)
            .map(|_| {
                let shape = Shape::random(rng, s, radius);
                Layer {
                    coverage: shape.coverage(size),
                    color: random_color(rng),
                    depth: Some(rng.random_range(0.7..0.9)),
                }
            })
            .collect();
        union = vec![0.0; size * size];
        for l in &layers {
            for (u, c) in union.iter_mut().zip(&l.coverage) {
                *u += c * (1.0 - *u);
            }
        }
        let fg = union.iter().filter(|&&u| u >= 0.5).count() as f64 / (size * size) as f64;
        if (MIN_FG..=MAX_FG).contains(&fg) {
            break;
        }
    }
    for l in &layers {
        paint(&mut rgb, &mut depth, l);
    }
    let gt = Grid::new(size, size, 1, union.iter().map(|&u| (u >= 0.5) as u8 as f64).collect())
        .expect("mask length matches size");
    let fg_depth_max = layers.iter().filter_map(|l| l.depth).fold(0.0, f64::max);
    Scene {
        rgb,
        depth,
        gt,
        fg_depth_max,
    }
}

fn add_noise(grid: &mut Grid, rng: &mut ChaCha8Rng, sigma: f64) {
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for v in grid.as_mut_slice() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }
}

fn add_distractor(scene: &mut Scene, rng: &mut ChaCha8Rng, size: usize) {
    let s = size as f64;
    let gt = scene.gt.as_slice();
    // dilate the mask by one pixel so the distractor never touches it
    let blocked: Vec<bool> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as i64, (i % size) as i64);
            (-1..=1).any(|dy| {
                (-1..=1).any(|dx| {
                    let (yy, xx) = (y + dy, x + dx);
                    yy >= 0 && xx >= 0 && yy < size as i64 && xx < size as i64 && gt[(yy * size as i64 + xx) as usize] >= 0.5
                })
            })
        })
        .collect();
    let gt_area = scene.gt.sum();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for attempt in 0..300 {
        let shrink = 1.0 - attempt as f64 / 400.0;
        let mut shape = Shape::random(rng, s, (0.12 * shrink, 0.3 * shrink));
        shape.cy = rng.random_range(0.0..s);
        shape.cx = rng.random_range(0.0..s);
        let cov = shape.coverage(size);
        if cov.iter().zip(&blocked).any(|(&c, &b)| c > 0.0 && b) {
            continue;
        }
        let area: f64 = cov.iter().filter(|&&c| c >= 0.5).count() as f64;
        if best.as_ref().is_none_or(|(a, _)| area > *a) {
            best = Some((area, cov));
        }
        if area >= gt_area {
            break;
        }
    }
    if let Some((_, coverage)) = best {
        let layer = Layer {
            coverage,
            color: random_color(rng),
            depth: Some((scene.fg_depth_max + rng.random_range(0.04..0.1)).min(1.0)),
        };
        paint(&mut scene.rgb, &mut scene.depth, &layer);
    }
}

fn compress_contrast(depth: &mut Grid, gt: &Grid, rng: &mut ChaCha8Rng) {
    let c0 = depth_contrast(depth, gt);
    if c0 <= 0.0 {
        return;
    }
    let target = rng.random_range(0.01..0.05);
    let k = target / c0;
    let mid = depth.mean();
    for v in depth.as_mut_slice() {
        *v = (mid + k * (*v - mid)).clamp(0.0, 1.0);
    }
}

fn camera_distortion(depth: &mut Grid, gt: &Grid, rng: &mut ChaCha8Rng, size: usize) {
    let (mut y0, mut y1, mut x0, mut x1) = (size, 0, size, 0);
    for y in 0..size {
        for x in 0..size {
            if gt.get(y, x, 0) >= 0.5 {
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
            }
        }
    }
    // dropout block over most of the object
    let (bh, bw) = (y1 - y0, x1 - x0);
    let fy = rng.random_range(0.6..1.0);
    let fx = rng.random_range(0.6..1.0);
    let (h, w) = (((bh as f64 * fy).ceil() as usize).max(1), ((bw as f64 * fx).ceil() as usize).max(1));
    let oy = y0 + rng.random_range(0..=bh - h.min(bh));
    let ox = x0 + rng.random_range(0..=bw - w.min(bw));
    for y in oy..(oy + h).min(size) {
        for x in ox..(ox + w).min(size) {
            depth.set(y, x, 0, 0.0);
        }
    }
    // salt-and-pepper patches
    for _ in 0..rng.random_range(1..=2) {
        let ph = rng.random_range(size / 5..=size * 2 / 5);
        let pw = rng.random_range(size / 5..=size * 2 / 5);
        let py = rng.random_range(0..=size - ph);
        let px = rng.random_range(0..=size - pw);
        for y in py..py + ph {
            for x in px..px + pw {
                if rng.random_bool(0.35) {
                    depth.set(y, x, 0, if rng.random_bool(0.5) { 1.0 } else { 0.0 });
                }
            }
        }
    }
}

const RGB_NOISE: f64 = 0.03;
const DEPTH_NOISE: f64 = 0.01;

/// Deterministic sample for `(seed, mode, size)`. The base scene depends on
/// `seed` only, so every mode corrupts the same scene.
pub fn gen_sample(seed: u64, mode: NoiseMode, size: usize) -> Result<Sample> {
    if size < 8 || !size.is_multiple_of(4) {
        return Err(Error::Config(format!("image size must be a multiple of 4 and at least 8, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = render_scene(&mut rng, size);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ mode.tag());
    match mode {
        NoiseMode::Clean => {}
        NoiseMode::DistractorDepth => add_distractor(&mut scene, &mut noise_rng, size),
        NoiseMode::LowContrast => {}
        NoiseMode::CameraDistortion => camera_distortion(&mut scene.depth, &scene.gt, &mut noise_rng, size),
    }
    add_noise(&mut scene.rgb, &mut rng, RGB_NOISE);
    add_noise(&mut scene.depth, &mut rng, DEPTH_NOISE);
    if mode == NoiseMode::LowContrast {
        compress_contrast(&mut scene.depth, &scene.gt, &mut noise_rng);
    }
    Ok(Sample {
        id: format!("{seed:016x}"),
        mode,
        rgb: scene.rgb,
        depth: scene.depth,
        gt: scene.gt,
    })
}

/// RGB and depth stacked as a four-channel input, order R, G, B, D.
pub fn early_fusion(sample: &Sample) -> Grid {
    Grid::concat_channels(&sample.rgb, &sample.depth).expect("sample channels share spatial size")
}
