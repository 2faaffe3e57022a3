//! Spatial and channel attention of a `C×H×W` feature map.
//!
//! Spatial attention is `H·W · softmax_pixels(mean_c |x|)`, channel attention is
//! `C · softmax_channels(mean_pixels |x|)`. Both are recomputed from features on
//! every call so gradients flow through them exactly.

use crate::error::{Error, Result};
use crate::tensor::{ReduceKind, Tape, Tensor, Var};

/// `H×W` grid of nonnegative weights summing to `H·W`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialAttention {
    pub map: Tensor,
    pub source: (usize, usize, usize),
}

/// Length-`C` vector of nonnegative weights summing to `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttention {
    pub weights: Tensor,
    pub source: (usize, usize, usize),
}

fn check(tape: &Tape, x: Var) -> Result<(usize, usize, usize)> {
    let v = tape.value(x);
    let chw = v.chw()?;
    if chw.0 == 0 || chw.1 == 0 || chw.2 == 0 {
        return Err(Error::ShapeMismatch(format!(
            "empty feature map {:?}",
            v.shape()
        )));
    }
    if !v.is_finite() {
        return Err(Error::NonFiniteValue("attention input".into()));
    }
    Ok(chw)
}

/// Differentiable spatial attention; returns an `H×W` var.
pub fn spatial_attention(tape: &mut Tape, x: Var) -> Result<Var> {
    let (_, h, w) = check(tape, x)?;
    let pooled = tape.reduce(x, ReduceKind::MeanAbs, &[0])?;
    let soft = tape.softmax(pooled)?;
    Ok(tape.scale(soft, (h * w) as f64))
}

/// Differentiable channel attention; returns a length-`C` var.
pub fn channel_attention(tape: &mut Tape, x: Var) -> Result<Var> {
    let (c, _, _) = check(tape, x)?;
    let pooled = tape.reduce(x, ReduceKind::MeanAbs, &[1, 2])?;
    let soft = tape.softmax(pooled)?;
    Ok(tape.scale(soft, c as f64))
}

pub fn spatial_map(x: &Tensor) -> Result<SpatialAttention> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let a = spatial_attention(&mut tape, v)?;
    Ok(SpatialAttention {
        map: tape.value(a).clone(),
        source: x.chw()?,
    })
}

pub fn channel_map(x: &Tensor) -> Result<ChannelAttention> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let a = channel_attention(&mut tape, v)?;
    Ok(ChannelAttention {
        weights: tape.value(a).clone(),
        source: x.chw()?,
    })
}
