use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pnm::{read_pnm, write_pnm};
use super::scene::{gen_sample, NoiseMode, Sample};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_FRACTION: f64 = 0.8;

/// SplitMix64 step; used to derive per-sample seeds from the master seed.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub gt: PathBuf,
    pub mode: NoiseMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub image_size: usize,
    pub seed: u64,
    pub noise_fraction: f64,
    pub samples: Vec<SampleEntry>,
    pub split: Split,
}

/// Manifest plus the decoded samples, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

/// Which samples to evaluate on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    Test,
    /// Clean-mode samples of the test split.
    TestClean,
    /// Non-clean samples of the test split.
    TestNoisy,
}

impl EvalSplit {
    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Train => "train",
            EvalSplit::Test => "test",
            EvalSplit::TestClean => "test_clean",
            EvalSplit::TestNoisy => "test_noisy",
        }
    }
}

impl std::str::FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [EvalSplit::Train, EvalSplit::Test, EvalSplit::TestClean, EvalSplit::TestNoisy]
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown evaluation split {s:?}")))
    }
}

fn entry(id: &str, mode: NoiseMode, seed: u64) -> SampleEntry {
    SampleEntry {
        id: id.to_string(),
        rgb: Path::new("rgb").join(format!("{id}.ppm")),
        depth: Path::new("depth").join(format!("{id}.pgm")),
        gt: Path::new("gt").join(format!("{id}.pgm")),
        mode,
        seed,
    }
}

/// Generates `n` samples, `⌈n·noise_fraction⌉` of them noisy with the three
/// noise modes taking turns, and an 80/20 train/test split.
pub fn gen_dataset(n: usize, noise_fraction: f64, seed: u64, size: usize, exec: Execution) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset must contain at least one sample".into()));
    }
    if !(0.0..=1.0).contains(&noise_fraction) {
        return Err(Error::Config(format!("noise fraction must lie in [0, 1], got {noise_fraction}")));
    }
    let mut state = seed;
    let seeds: Vec<u64> = (0..n).map(|_| splitmix64(&mut state)).collect();
    let n_noisy = ((n as f64 * noise_fraction).ceil() as usize).min(n);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut modes = vec![NoiseMode::Clean; n];
    for (k, &i) in order[..n_noisy].iter().enumerate() {
        modes[i] = NoiseMode::NOISY[k % NoiseMode::NOISY.len()];
    }

    let mut split_order: Vec<usize> = (0..n).collect();
    split_order.shuffle(&mut rng);
    let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
    let ids: Vec<String> = (0..n).map(|i| format!("s{i:05}")).collect();
    let split = Split {
        train: split_order[..n_train].iter().map(|&i| ids[i].clone()).collect(),
        test: split_order[n_train..].iter().map(|&i| ids[i].clone()).collect(),
    };

    let samples = par::map_range(exec, n, |i| {
        gen_sample(seeds[i], modes[i], size).map(|mut s| {
            s.id = ids[i].clone();
            s
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest {
        image_size: size,
        seed,
        noise_fraction,
        samples: (0..n).map(|i| entry(&ids[i], modes[i], seeds[i])).collect(),
        split,
    };
    Ok(Dataset { manifest, samples })
}

impl Dataset {
    fn lookup(&self, ids: &[String]) -> Vec<&Sample> {
        ids.iter()
            .filter_map(|id| self.samples.iter().find(|s| &s.id == id))
            .collect()
    }

    pub fn train(&self) -> Vec<&Sample> {
        self.lookup(&self.manifest.split.train)
    }

    pub fn test(&self) -> Vec<&Sample> {
        self.lookup(&self.manifest.split.test)
    }

    pub fn eval_split(&self, split: EvalSplit) -> Vec<&Sample> {
        match split {
            EvalSplit::Train => self.train(),
            EvalSplit::Test => self.test(),
            EvalSplit::TestClean => self.test().into_iter().filter(|s| s.mode.is_clean()).collect(),
            EvalSplit::TestNoisy => self.test().into_iter().filter(|s| !s.mode.is_clean()).collect(),
        }
    }

    pub fn noisy_count(&self) -> usize {
        self.samples.iter().filter(|s| !s.mode.is_clean()).count()
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        for sub in ["rgb", "depth", "gt"] {
            let dir = root.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for (s, e) in self.samples.iter().zip(&self.manifest.samples) {
            write_pnm(&root.join(&e.rgb), &s.rgb)?;
            write_pnm(&root.join(&e.depth), &s.depth)?;
            write_pnm(&root.join(&e.gt), &s.gt)?;
        }
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Loads `<root>/manifest.json` and every listed image.
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        validate_manifest(&manifest, &path)?;
        let samples = manifest
            .samples
            .iter()
            .map(|e| read_sample(root, e, manifest.image_size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, samples })
    }
}

fn validate_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    let bad = |reason: String| Error::Dataset {
        path: path.to_path_buf(),
        reason,
    };
    let mut ids = HashSet::new();
    for e in &m.samples {
        if !ids.insert(e.id.as_str()) {
            return Err(bad(format!("duplicate sample id {}", e.id)));
        }
    }
    let mut seen = HashSet::new();
    for id in m.split.train.iter().chain(&m.split.test) {
        if !ids.contains(id.as_str()) {
            return Err(bad(format!("split lists unknown id {id}")));
        }
        if !seen.insert(id.as_str()) {
            return Err(bad(format!("id {id} appears twice in the split")));
        }
    }
    Ok(())
}

pub fn read_sample(root: &Path, e: &SampleEntry, size: usize) -> Result<Sample> {
    let load = |rel: &Path, channels: usize| -> Result<_> {
        let path = root.join(rel);
        let g = read_pnm(&path)?;
        if (g.height(), g.width(), g.channels()) != (size, size, channels) {
            return Err(Error::Image {
                path,
                reason: format!("expected {size}x{size}x{channels}, found {}", g.shape()),
            });
        }
        Ok(g)
    };
    let gt = load(&e.gt, 1)?;
    if gt.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Image {
            path: root.join(&e.gt),
            reason: "mask is not binary".into(),
        });
    }
    Ok(Sample {
        id: e.id.clone(),
        mode: e.mode,
        rgb: load(&e.rgb, 3)?,
        depth: load(&e.depth, 1)?,
        gt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_fraction_counts() {
        let d = gen_dataset(100, 0.3, 7, 16, Execution::Parallel).unwrap();
        assert_eq!(d.noisy_count(), 30);
        for m in NoiseMode::NOISY {
            assert_eq!(d.samples.iter().filter(|s| s.mode == m).count(), 10);
        }
        assert_eq!(gen_dataset(10, 0.0, 1, 16, Execution::Sequential).unwrap().noisy_count(), 0);
        assert_eq!(gen_dataset(10, 0.01, 1, 16, Execution::Sequential).unwrap().noisy_count(), 1);
    }

    #[test]
    fn split_is_a_disjoint_cover() {
        let d = gen_dataset(250, 0.3, 2, 16, Execution::Parallel).unwrap();
        assert_eq!((d.train().len(), d.test().len()), (200, 50));
        let train: HashSet<_> = d.manifest.split.train.iter().collect();
        assert!(d.manifest.split.test.iter().all(|id| !train.contains(id)));
    }

    #[test]
    fn execution_modes_agree() {
        let a = gen_dataset(12, 0.5, 3, 16, Execution::Sequential).unwrap();
        let b = gen_dataset(12, 0.5, 3, 16, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eval_split_filters() {
        let d = gen_dataset(40, 0.5, 4, 16, Execution::Sequential).unwrap();
        let clean = d.eval_split(EvalSplit::TestClean);
        let noisy = d.eval_split(EvalSplit::TestNoisy);
        assert_eq!(clean.len() + noisy.len(), d.test().len());
        assert!(clean.iter().all(|s| s.mode.is_clean()));
    }

    #[test]
    fn disk_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_dataset(6, 0.5, 5, 16, Execution::Sequential).unwrap();
        d.write(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.manifest, d.manifest);
        for (a, b) in d.samples.iter().zip(&back.samples) {
            assert_eq!(a.gt, b.gt);
            assert_eq!(a.mode, b.mode);
            for (x, y) in [(&a.rgb, &b.rgb), (&a.depth, &b.depth)] {
                assert!(x.as_slice().iter().zip(y.as_slice()).all(|(p, q)| (p - q).abs() <= 1.0 / 255.0));
            }
        }
    }

    #[test]
    fn load_reports_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_dataset(2, 0.0, 5, 16, Execution::Sequential).unwrap();
        d.write(dir.path()).unwrap();
        let victim = dir.path().join(&d.manifest.samples[1].depth);
        std::fs::write(&victim, b"P5\n8 8\n255\n").unwrap();
        let err = Dataset::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("depth"), "{err}");

        let mut m = d.manifest.clone();
        m.split.test.push("ghost".into());
        std::fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Dataset { .. })));
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(gen_dataset(0, 0.3, 1, 16, Execution::Sequential).is_err());
        assert!(gen_dataset(5, 1.5, 1, 16, Execution::Sequential).is_err());
        assert!(gen_dataset(5, 0.3, 1, 18, Execution::Sequential).is_err());
    }
}
