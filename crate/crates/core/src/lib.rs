//! Cyclic precision training on CPU.
//!
//! A small reverse-mode autodiff engine with fake quantization, cyclic
//! precision schedules, the precision range test, a BitOPs ledger and a
//! training harness with metrics, checkpoints and loss-landscape slices.

pub mod autodiff;
pub mod cost;
pub mod error;
pub mod harness;
pub mod prt;
pub mod quant;
pub mod schedule;

pub use error::{Error, Result};
