//! Text-guided object selection for multitask activity recognition.
//!
//! Object classes are ranked by how close their label embeddings lie to the
//! activity labels; the best few join the activity task as an auxiliary
//! objective on a shared convolutional trunk.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod embeddings;
pub mod experiment;
pub mod gradcheck;
pub mod multitask;
pub mod optim;
pub mod relevance;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod tsv;
pub mod video;
