//! Synthetic ECG image dataset: signal synthesis, rendering, augmentation,
//! and instruction-sample emission.

pub mod augment;
pub mod dataset;
pub mod render;
pub mod signal;

pub use augment::augment;
pub use dataset::{build_dataset, load_split, read_manifest, InstructionSample, LoadedSample, Split};
pub use render::{render_image, GrayImage, Layout};
pub use signal::{synth_signal, ClassCatalog, EcgClass, EcgSignal, SignalSpec};
