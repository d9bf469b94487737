//! Two-stage generative image anonymization with a privacy-risk audit suite.
//!
//! Stage one projects an image into the latent space of a small style-based
//! generator by training an autoencoder-GAN (encoder, generator and
//! discriminator co-trained). Stage two optimizes the latent code under an
//! identity-removal loss and a utility-preservation loss and decodes the
//! result. The crate also ships the evaluation side: image-quality metrics,
//! singling-out / linkability / membership-inference risk audits, and a
//! procedural phantom-radiograph dataset with ground-truth identities and
//! pathology labels so the whole pipeline runs on a laptop.

pub mod anonymize;
pub mod config;
pub mod error;
pub mod imgio;
pub mod metrics;
pub mod nets;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod projection;
pub mod risk;
pub mod tensor;

pub use error::{Error, Result};
