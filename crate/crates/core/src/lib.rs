pub mod critic;
pub mod dp;
pub mod env;
pub mod error;
pub mod gradcheck;
pub mod ip;
pub mod linalg;
pub mod minlp;
pub mod nlp;
pub mod ocp;
pub mod policy;
pub mod pwq;
pub mod rng;
pub mod sens;
pub mod trainer;

pub use error::{Error, Result};
