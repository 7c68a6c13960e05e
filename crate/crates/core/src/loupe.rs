//! The Loupe: a two-convolution sigmoid spatial-attention module.
//!
//! Given mid-network features of C channels it squeezes local context through
//! a 3x3 convolution to C/4 channels, applies relu, projects to a single
//! logit channel with a 1x1 convolution, and normalizes with a sigmoid. The
//! resulting map in (0,1) refines the features by broadcasted elementwise
//! multiplication, so the feature adjoint is scaled by the map during
//! backpropagation.
//!
//! Initialization is neutral: the final convolution starts at zero, so the
//! map is exactly 0.5 everywhere and the module begins as a uniform halving
//! of the features it wraps.

use crate::error::{CoreError, Result};
use crate::graph::{real, Graph, Real, Shape, Var};
use crate::rng::{self, StreamKind};
use alloc::vec;
use alloc::vec::Vec;

/// Hidden width of the squeeze convolution: max(1, floor(C/4)).
pub fn hidden_channels(c: usize) -> usize {
    (c / 4).max(1)
}

/// Exact parameter count of a Loupe over C input channels.
pub fn param_count(c: usize) -> Result<usize> {
    if c < 1 {
        return Err(CoreError::Argument(alloc::format!(
            "param_count requires C >= 1, got {c}"
        )));
    }
    let hid = hidden_channels(c);
    Ok(9 * c * hid + hid + hid + 1)
}

/// The module's four parameter arrays.
#[derive(Clone, Debug)]
pub struct LoupeParams<T> {
    /// 3x3 squeeze convolution, (C/4) x C x 3 x 3.
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    /// 1x1 projection to the logit channel, 1 x (C/4) x 1 x 1.
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    pub channels: usize,
}

impl<T: Real> LoupeParams<T> {
    /// Neutral initialization: w1 fan-in-scaled Gaussian, everything else
    /// zero, so the initial attention map is exactly 0.5.
    pub fn init(c: usize, seed: u64, stream_index: u64) -> Result<Self> {
        if c < 1 {
            return Err(CoreError::Argument(alloc::format!(
                "Loupe requires C >= 1, got {c}"
            )));
        }
        let hid = hidden_channels(c);
        let std = real::<T>(num_traits::Float::sqrt(2.0 / (9.0 * c as f64)));
        let mut r = rng::stream(seed, StreamKind::ParamInit, stream_index);
        let w1 = (0..hid * c * 9)
            .map(|_| real::<T>(rng::normal(&mut r)) * std)
            .collect();
        Ok(LoupeParams {
            w1,
            b1: vec![T::zero(); hid],
            w2: vec![T::zero(); hid],
            b2: vec![T::zero(); 1],
            channels: c,
        })
    }

    pub fn count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

/// Graph handles for the four parameter leaves.
#[derive(Clone, Copy, Debug)]
pub struct LoupeVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Insert `params` into `g` as leaves.
pub fn attach<T: Real>(
    g: &mut Graph<T>,
    params: &LoupeParams<T>,
    requires_grad: bool,
) -> Result<LoupeVars> {
    let c = params.channels;
    let hid = hidden_channels(c);
    Ok(LoupeVars {
        w1: g.leaf(params.w1.clone(), Shape::nchw(hid, c, 3, 3), requires_grad)?,
        b1: g.leaf(params.b1.clone(), Shape::vector(hid), requires_grad)?,
        w2: g.leaf(params.w2.clone(), Shape::nchw(1, hid, 1, 1), requires_grad)?,
        b2: g.leaf(params.b2.clone(), Shape::vector(1), requires_grad)?,
    })
}

/// conv3x3(pad 1) -> relu -> conv1x1 -> sigmoid. Output is N x 1 x H x W with
/// every value strictly inside (0,1).
pub fn attention_forward<T: Real>(
    g: &mut Graph<T>,
    features: Var,
    vars: &LoupeVars,
) -> Result<Var> {
    let hidden = g.conv2d(features, vars.w1, vars.b1, 1)?;
    let hidden = g.relu(hidden)?;
    let logits = g.conv2d(hidden, vars.w2, vars.b2, 0)?;
    g.sigmoid(logits)
}

/// Eq-style refinement: features * map, broadcast across channels.
pub fn refine<T: Real>(g: &mut Graph<T>, features: Var, map: Var) -> Result<Var> {
    g.broadcast_mul(features, map)
}

/// Convenience for standalone use: attach params and run the forward.
pub fn attention_map<T: Real>(
    g: &mut Graph<T>,
    features: Var,
    params: &LoupeParams<T>,
) -> Result<Var> {
    let fs = g.shape(features);
    if fs.c() != params.channels {
        return Err(CoreError::Dim {
            op: "attention_forward",
            axis: "channels",
            expected: params.channels,
            got: fs.c(),
        });
    }
    let vars = attach(g, params, false)?;
    attention_forward(g, features, &vars)
}
