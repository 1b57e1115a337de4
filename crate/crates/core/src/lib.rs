//! Cross-modal latent-space exploration: a paired ECG/MRI autoencoder
//! trained with reconstruction and contrastive objectives, exact t-SNE
//! layouts, cohort selection, latent traversal and downstream heads.

pub mod adam;
pub mod ae;
pub mod checkpoint;
pub mod cohort;
pub mod downstream;
pub mod error;
pub mod latent;
pub mod mlp;
pub mod synth;
pub mod tensor;
pub mod tsne;

pub use error::{Error, Result};
