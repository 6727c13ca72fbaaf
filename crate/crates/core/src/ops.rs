//! Tape-free entry points for the primitive operations.
//!
//! Each call records onto a throwaway inference tape and returns the value,
//! so these share kernels (and results, bit for bit) with the model path.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Activation, BnMode, ConvKind, PoolKind, RunningStats, Tape};
use crate::tensor::Tensor;

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(va, vb)?;
    Ok(tape.value(out).clone())
}

pub fn convolve<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    kind: ConvKind,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let (vx, vw) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let out = tape.conv(vx, vw, None, kind, &[stride], &[padding])?;
    Ok(tape.value(out).clone())
}

pub fn pool<T: Scalar>(x: &Tensor<T>, kind: &PoolKind) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let vx = tape.constant(x.clone());
    let out = tape.pool(vx, kind)?;
    Ok(tape.value(out).clone())
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let vx = tape.constant(x.clone());
    let out = tape.activation(vx, kind)?;
    Ok(tape.value(out).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Batch norm over axis 1. In training mode `running` absorbs the batch
/// statistics (momentum 0.1); in eval mode it supplies them.
pub fn batchnorm<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    eps: T,
    mode: NormMode,
    running: &mut RunningStats<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let vx = tape.constant(x.clone());
    let vs = tape.constant(scale.clone());
    let vh = tape.constant(shift.clone());
    let (out, stats) = match mode {
        NormMode::Train => tape.batchnorm(vx, vs, vh, eps, BnMode::Train)?,
        NormMode::Eval => tape.batchnorm(vx, vs, vh, eps, BnMode::Eval(running))?,
    };
    if let Some(stats) = stats {
        running.update(&stats);
    }
    Ok(tape.value(out).clone())
}

pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let vx = tape.constant(x.clone());
    let vw = tape.constant(weight.clone());
    let vb = tape.constant(bias.clone());
    let out = tape.linear(vx, vw, Some(vb))?;
    Ok(tape.value(out).clone())
}
