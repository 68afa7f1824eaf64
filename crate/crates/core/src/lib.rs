//! Task-agnostic contrastive pretraining for relational databases.
//!
//! A relational database is loaded from a TOML schema and CSV tables
//! ([`relational`]), turned into a heterogeneous graph ([`graph`]), sampled
//! into subgraphs ([`sampler`]), embedded by a GNN backbone ([`backbone`])
//! and pretrained with row, link and context level InfoNCE objectives
//! ([`contrastive`]). [`train`] drives pretraining and fine-tuning of task
//! heads; [`datagen`] writes seeded synthetic databases with planted signal.

pub mod backbone;
pub mod contrastive;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod graph;
pub mod par;
pub mod relational;
pub mod sampler;
pub mod seeding;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
