//! Synthetic RGB-D saliency data and its on-disk format.
//!
//! Layout: `<root>/manifest.json`, `<root>/rgb/<id>.ppm`,
//! `<root>/depth/<id>.pgm`, `<root>/gt/<id>.pgm`, all 8-bit binary.

mod dataset;
mod pnm;
mod scene;

pub use dataset::{
    gen_dataset, read_sample, splitmix64, Dataset, DatasetManifest, EvalSplit, SampleEntry, Split, MANIFEST_FILE,
    TRAIN_FRACTION,
};
pub use pnm::{quantize, read_pnm, write_pnm};
pub use scene::{depth_contrast, early_fusion, gen_sample, NoiseMode, Sample};
