//! DEMONSTRATE: learning task costs and constraints from demonstrations,
//! indexed by natural-language sub-task descriptions.

pub mod benchmark;
pub mod config;
pub mod constraint;
pub mod demos;
pub mod embedding;
pub mod error;
pub mod execute;
pub mod features;
pub mod grammar;
pub mod irl;
pub mod language;
pub mod mapping;
pub mod model;
pub mod ocp;
pub mod sim;
pub mod training;

pub use error::{Error, Result};
