//! Episodic few-shot training engine with mode-aware data augmentation.
//!
//! The pipeline samples N-way K-shot episodes from a class pool, applies
//! augmentation at four distinct points (support set, query set, whole
//! classes, and shot amplification), trains a small convolutional embedding
//! with closed-form prototype / ridge heads, and can select per-task
//! augmentations adversarially by keeping the candidate that maximizes the
//! query loss.

pub mod checkpoint;
pub mod config;
pub mod datastore;
pub mod episodic;
pub mod error;
pub mod harness;
pub mod imgaug;
pub mod learner;
pub mod metamaxup;
pub mod rng;

pub use error::{Error, Result};
