//! Chirality-aware message passing on molecular edge graphs.

pub mod autonn;
pub mod chienn;
pub mod edgegraph;
pub mod geometry;
pub mod molgraph;
pub mod ordering;
pub mod datagen;
pub mod seeding;
pub mod train;
pub mod verify;
