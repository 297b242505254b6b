//! Rule-guided sequence tagging: train neural taggers from linguistic rules
//! instead of annotated data.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod loss;
pub mod neural;
pub mod rules;
pub mod silver;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
