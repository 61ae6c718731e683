//! Periodic composition datasets, a small transformer trained from scratch,
//! and the evaluation tooling around them.

pub mod autodiff;
pub mod codec;
pub mod composers;
pub mod coperset;
pub mod error;
pub mod evalkit;
pub mod experiments;
pub mod par;
pub mod periodcore;
pub mod ropelab;
pub mod seqmodel;
pub mod trainer;

pub use error::{Error, Result};
