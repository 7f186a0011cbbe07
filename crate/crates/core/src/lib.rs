//! Decoupled BEV perception building blocks and multi-module learning.

pub mod checkpoint;
pub mod geometry;
pub mod loss;
pub mod metrics;
pub mod mml;
pub mod model;
pub mod pipeline;
pub mod registry;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod world;
