//! Files, synthetic data and evaluation.

pub mod bundle;
pub mod checkpoint;
pub mod metrics;
pub mod synth;

pub use bundle::{load_bundle, save_bundle, BundleView, SceneBundle, Split};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use synth::{make_synthetic_scene, SynthSpec, SyntheticScene};
