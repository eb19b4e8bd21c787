//! Continual-learning experiment engine.
//!
//! A model is trained on a sequence of binary visual tasks, one new task per
//! episode, retraining all earlier tasks until every one of them clears a
//! holdout accuracy criterion. The crate covers the whole pipeline:
//!
//! * [`scenegen`]: symbolic scenes, a deterministic 2-D rasterizer and exact labels
//! * [`nnet`]: the task-conditioned convolutional classifier and Adam
//! * [`curriculum`]: per-epoch example allocations and batch plans
//! * [`design`]: Latin-square task orders and replication plans
//! * [`engine`]: episode loops, forgetting probes, MAML micro-episodes
//! * [`analysis`]: forgetting-curve fits and replication metrics
//! * [`config`]: run configuration, presets and hashing

pub mod analysis;
pub mod config;
pub mod curriculum;
pub mod design;
pub mod engine;
mod error;
pub mod nnet;
pub mod rng;
pub mod scenegen;

pub use error::{Error, Result};
