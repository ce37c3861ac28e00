pub mod config;
pub mod dataset;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod export;
pub mod frontend;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod predictor;
pub mod render;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
