#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod env;
pub mod error;
pub mod es;
pub mod experiment;
pub mod mpc;
pub mod nn;
pub mod ppo;
pub mod rom;
pub mod seed;

pub use error::{Error, Result};
