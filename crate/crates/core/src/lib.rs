//! Visually-aware skip-gram (VASG) embeddings for recommendation.
//!
//! Users and products live in one latent space learned from random walks over
//! the bipartite purchase graph. Product embeddings additionally have to
//! reconstruct the product's image feature vector through a small decoder
//! network, which later lets a learned encoder place never-purchased (cold)
//! products into the same space.
//!
//! The pipeline, in module order:
//!
//! * [`data`]: interaction/feature ingestion, filtering, leave-one-out split.
//! * [`hin`]: bipartite graph, random walks, context windows.
//! * [`nn`]: dense layers, dropout, Adam, gradient checking.
//! * [`vasg`]: the multitask skip-gram trainer.
//! * [`mapper`]: feature-to-embedding encoder trained against the frozen decoder.
//! * [`recsys`]: cosine ranking, analogy queries, cold-start scoring.
//! * [`eval`]: AUC, relation accuracy, baselines, distribution statistics, PCA.
//! * [`synth`]: planted-partition datasets for desk-scale verification.
//!
//! Data-parallel loops go through [`exec::Exec`], which runs on rayon when the
//! `parallel` feature is enabled and more than one thread is requested, and
//! sequentially otherwise. Results never depend on the thread count.

pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod hin;
pub mod io;
pub mod mapper;
pub mod nn;
pub mod recsys;
pub mod rng;
pub mod synth;
pub mod vasg;
pub mod vectors;

pub use error::{Error, Result};
