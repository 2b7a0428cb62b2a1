//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every forward operation; [`Tape::backward`] walks the
//! record in reverse and accumulates gradients for every node, including
//! registered parameters. All arithmetic is 64-bit so gradients can be
//! verified against central finite differences at tight tolerances.

mod checkpoint;
mod nn;
mod tape;
mod tensor;


pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError};
pub use nn::{
    xavier_uniform, Activation, AdamConfig, LinNodes, LinearParams, MlpParams, ParamId,
    ParamStore,
};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

pub(crate) use nn::init_rng as nn_init_rng;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward seed must be a scalar node, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),
    #[error("invalid axis {axis} for rank {rank}")]
    BadAxis { axis: usize, rank: usize },
    #[error("{0}")]
    Domain(String),
}

/// Value-level linear layer: y = x W + b over the trailing axis.
///
/// Convenience wrapper that drives a throwaway tape so the value path and the
/// differentiable path cannot drift apart.
pub fn linear_forward(x: &Tensor, params: &LinearParams) -> Result<Tensor, AutodiffError> {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let w = tape.leaf(params.w.clone());
    let b = tape.leaf(params.b.clone());
    let y = tape.linear(xid, w, b)?;
    Ok(tape.value(y).clone())
}

/// Value-level stabilized softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor, AutodiffError> {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let y = tape.softmax(xid, axis)?;
    Ok(tape.value(y).clone())
}

/// Value-level bilinear sampling of a `[C,H,W]` grid at (row, col) locations.
/// Out-of-bounds coordinates contribute zeros (border-zero policy).
pub fn bilinear_sample(grid: &Tensor, coords: &[(f64, f64)]) -> Result<Tensor, AutodiffError> {
    let mut tape = Tape::new();
    let g = tape.leaf(grid.clone());
    let rows: Vec<f64> = coords.iter().map(|c| c.0).collect();
    let cols: Vec<f64> = coords.iter().map(|c| c.1).collect();
    let n = coords.len();
    let r = tape.leaf(Tensor::from_vec(vec![n, 1], rows)?);
    let c = tape.leaf(Tensor::from_vec(vec![n, 1], cols)?);
    let y = tape.bilinear_sample(g, r, c)?;
    Ok(tape.value(y).clone())
}
