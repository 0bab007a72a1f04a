//! Self-supervised relation alignment for scene graph generation.
//!
//! A relation predictor is paired with a parameter-tied mirror that sees
//! randomly masked inputs. The mirror's predicate distributions are pulled
//! toward the (gradient-isolated) original ones with a KL term that is
//! trained jointly with the supervised loss. Two toy architectures carry the
//! mechanism: a query-based set predictor (`models::sgtr`) and a recurrent
//! context model with a frequency prior (`models::motifs`).
//!
//! Everything runs in `f64` on the CPU through the small reverse-mode tape in
//! [`autograd`]. With the `parallel` feature (on by default) per-sample
//! gradients, evaluation and ablation cells fan out over rayon; reductions are
//! always performed in input order so results do not depend on scheduling.

pub mod align;
pub mod autograd;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod evaluate;
pub mod exec;
pub mod harness;
pub mod masking;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod types;

pub use error::{Error, Result};
