pub mod a2d;
pub mod backbone;
pub mod config;
pub mod decomposer;
pub mod env;
pub mod error;
pub mod eval;
pub mod io;
pub mod optim;
pub mod par;
pub mod policy;
pub mod report;
pub mod rlvr;
pub mod rng;
pub mod run;
pub mod vocab;

pub use error::{Error, Result};
