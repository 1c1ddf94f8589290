//! Synthetic ambiguous-scene dataset: generation, file formats, splits and augmentation.

pub mod augment;
pub mod dataset;
pub mod pgm;
pub mod prompt;
pub mod render;
pub mod scene;

pub use dataset::{generate, load_dataset, write_dataset, Dataset, GenConfig, SampleRecord, Split};
pub use prompt::PromptStages;
