//! Surrogate hierarchical backbone.
//!
//! Mirrors the stage geometry of a patch-based hierarchical vision
//! transformer — stride-4 patch embedding, four stages, patch merging that
//! halves resolution and doubles channels between them — with pre-activation
//! convolutional residual blocks standing in for windowed self-attention.
//! The attention module hooks in after Stage 2, where features are mid-level
//! and the spatial grid is still fine.
//!
//! For an input of size S and base width C1, stage s produces
//! S/(4*2^(s-1)) x S/(4*2^(s-1)) features with C1*2^(s-1) channels.

use crate::error::{CoreError, Result};
use crate::graph::{real, Graph, Real, Shape, Var};
use crate::loupe::{self, LoupeVars};
use crate::params::ParamSet;
use crate::rng::{self, StreamKind};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub const STAGES: usize = 4;

/// Stage geometry and head configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Square input size in pixels.
    pub input_size: usize,
    pub in_channels: usize,
    /// Patch-embedding patch size (4: three later merges give /32 overall).
    pub patch_size: usize,
    /// Stage-1 channel width C1.
    pub base_channels: usize,
    pub blocks_per_stage: [usize; STAGES],
    pub num_classes: usize,
    pub loupe_enabled: bool,
    /// Stage after which the attention module is inserted. Fixed at 2.
    pub insertion_stage: usize,
    pub seed: u64,
}

impl BackboneConfig {
    /// Desk-scale default: trains on a CPU in minutes while preserving every
    /// shape relationship of the full-size geometry.
    pub fn desk_default() -> Self {
        BackboneConfig {
            input_size: 64,
            in_channels: 3,
            patch_size: 4,
            base_channels: 16,
            blocks_per_stage: [1, 1, 2, 1],
            num_classes: 10,
            loupe_enabled: true,
            insertion_stage: 2,
            seed: 0,
        }
    }

    /// Full-size geometry (224px, C1=128) used for shape conformance checks.
    /// Not intended for training here.
    pub fn paper_scale() -> Self {
        BackboneConfig {
            input_size: 224,
            in_channels: 3,
            patch_size: 4,
            base_channels: 128,
            blocks_per_stage: [1, 1, 2, 1],
            num_classes: 200,
            loupe_enabled: true,
            insertion_stage: 2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let div = self.patch_size * 8;
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(CoreError::Config(format!(
                "input_size {} must be a positive multiple of patch_size*8 = {div}",
                self.input_size
            )));
        }
        if self.insertion_stage != 2 {
            return Err(CoreError::Config(format!(
                "insertion_stage must be 2, got {}",
                self.insertion_stage
            )));
        }
        if self.base_channels == 0 {
            return Err(CoreError::Config("base_channels must be >= 1".into()));
        }
        if self.num_classes == 0 {
            return Err(CoreError::Config("num_classes must be >= 1".into()));
        }
        if self.in_channels == 0 {
            return Err(CoreError::Config("in_channels must be >= 1".into()));
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return Err(CoreError::Config(
                "blocks_per_stage entries must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Channel width of stage s (1-based).
    pub fn stage_channels(&self, s: usize) -> usize {
        self.base_channels << (s - 1)
    }

    /// Spatial side of stage s output (1-based).
    pub fn stage_size(&self, s: usize) -> usize {
        self.input_size / self.patch_size / (1 << (s - 1))
    }

    /// Channels seen by the attention module.
    pub fn insertion_channels(&self) -> usize {
        self.stage_channels(self.insertion_stage)
    }
}

/// All parameter arrays plus the config they were built from.
#[derive(Clone, Debug)]
pub struct ModelState<T> {
    pub config: BackboneConfig,
    pub params: ParamSet<T>,
    pub step: u64,
}

/// Deterministically initialize a model from its config.
///
/// Every parameter draws from its own RNG stream (indexed by registration
/// order), so enabling or disabling the attention module never changes the
/// values of the shared backbone parameters.
pub fn build<T: Real>(config: &BackboneConfig) -> Result<ModelState<T>> {
    config.validate()?;
    let mut params = ParamSet::new();
    let mut stream_idx = 0u64;

    let he_conv = |params: &mut ParamSet<T>,
                       name: String,
                       c_out: usize,
                       c_in: usize,
                       k: usize,
                       idx: &mut u64| {
        let fan_in = (c_in * k * k) as f64;
        let std = real::<T>(num_traits::Float::sqrt(2.0 / fan_in));
        let mut r = rng::stream(config.seed, StreamKind::ParamInit, *idx);
        *idx += 1;
        let w: Vec<T> = (0..c_out * c_in * k * k)
            .map(|_| real::<T>(rng::normal(&mut r)) * std)
            .collect();
        params.push(name.clone() + ".weight", Shape::nchw(c_out, c_in, k, k), w);
        *idx += 1; // reserve a stream for the (zero) bias to keep indices stable
        params.push(name + ".bias", Shape::vector(c_out), vec![T::zero(); c_out]);
    };
    let he_matrix = |params: &mut ParamSet<T>,
                         name: String,
                         rows: usize,
                         cols: usize,
                         idx: &mut u64| {
        let std = real::<T>(num_traits::Float::sqrt(2.0 / cols as f64));
        let mut r = rng::stream(config.seed, StreamKind::ParamInit, *idx);
        *idx += 1;
        let w: Vec<T> = (0..rows * cols)
            .map(|_| real::<T>(rng::normal(&mut r)) * std)
            .collect();
        params.push(name.clone() + ".weight", Shape::matrix(rows, cols), w);
        *idx += 1;
        params.push(name + ".bias", Shape::vector(rows), vec![T::zero(); rows]);
    };

    he_conv(
        &mut params,
        String::from("embed"),
        config.base_channels,
        config.in_channels,
        config.patch_size,
        &mut stream_idx,
    );
    for s in 1..=STAGES {
        let c = config.stage_channels(s);
        for b in 0..config.blocks_per_stage[s - 1] {
            he_conv(
                &mut params,
                format!("stage{s}.block{b}.conv1"),
                c,
                c,
                3,
                &mut stream_idx,
            );
            he_conv(
                &mut params,
                format!("stage{s}.block{b}.conv2"),
                c,
                c,
                3,
                &mut stream_idx,
            );
        }
        if s == config.insertion_stage && config.loupe_enabled {
            let lp = loupe::LoupeParams::<T>::init(c, config.seed, stream_idx)?;
            stream_idx += 2;
            let hid = loupe::hidden_channels(c);
            params.push("loupe.conv1.weight", Shape::nchw(hid, c, 3, 3), lp.w1);
            params.push("loupe.conv1.bias", Shape::vector(hid), lp.b1);
            params.push("loupe.conv2.weight", Shape::nchw(1, hid, 1, 1), lp.w2);
            params.push("loupe.conv2.bias", Shape::vector(1), lp.b2);
        } else if s == config.insertion_stage {
            stream_idx += 2; // keep downstream streams identical either way
        }
        if s < STAGES {
            he_matrix(
                &mut params,
                format!("merge{s}"),
                2 * c,
                4 * c,
                &mut stream_idx,
            );
        }
    }
    he_matrix(
        &mut params,
        String::from("head"),
        config.num_classes,
        config.stage_channels(STAGES),
        &mut stream_idx,
    );

    Ok(ModelState {
        config: config.clone(),
        params,
        step: 0,
    })
}

/// Handles produced by [`forward`].
pub struct ForwardPass {
    pub logits: Var,
    /// Attention map (N x 1 x S/8 x S/8) when the module is enabled.
    pub map: Option<Var>,
    /// Graph leaf per parameter, in `ParamSet` order; read gradients here
    /// after backward.
    pub param_vars: Vec<Var>,
}

/// Run the full pipeline on an image leaf already inserted into `g`.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    state: &ModelState<T>,
    images: Var,
    requires_grad: bool,
) -> Result<ForwardPass> {
    let cfg = &state.config;
    let is = g.shape(images);
    if is.h() != cfg.input_size || is.w() != cfg.input_size {
        return Err(CoreError::Dim {
            op: "forward",
            axis: "input_size",
            expected: cfg.input_size,
            got: is.h(),
        });
    }
    if is.c() != cfg.in_channels {
        return Err(CoreError::Dim {
            op: "forward",
            axis: "channels",
            expected: cfg.in_channels,
            got: is.c(),
        });
    }

    let mut param_vars = Vec::with_capacity(state.params.len());
    for p in state.params.iter() {
        param_vars.push(g.leaf(p.data.clone(), p.shape, requires_grad)?);
    }
    let var_of = |name: &str| -> Result<Var> {
        state
            .params
            .iter()
            .position(|p| p.name == name)
            .map(|i| param_vars[i])
            .ok_or_else(|| CoreError::State(format!("missing parameter {name}")))
    };

    let mut x = g.patch_embed(
        images,
        var_of("embed.weight")?,
        var_of("embed.bias")?,
        cfg.patch_size,
    )?;
    let mut map = None;
    for s in 1..=STAGES {
        for b in 0..cfg.blocks_per_stage[s - 1] {
            let w1 = var_of(&format!("stage{s}.block{b}.conv1.weight"))?;
            let b1 = var_of(&format!("stage{s}.block{b}.conv1.bias"))?;
            let w2 = var_of(&format!("stage{s}.block{b}.conv2.weight"))?;
            let b2 = var_of(&format!("stage{s}.block{b}.conv2.bias"))?;
            let mut y = g.relu(x)?;
            y = g.conv2d(y, w1, b1, 1)?;
            y = g.relu(y)?;
            y = g.conv2d(y, w2, b2, 1)?;
            x = g.add(x, y)?;
        }
        if s == cfg.insertion_stage && cfg.loupe_enabled {
            let vars = LoupeVars {
                w1: var_of("loupe.conv1.weight")?,
                b1: var_of("loupe.conv1.bias")?,
                w2: var_of("loupe.conv2.weight")?,
                b2: var_of("loupe.conv2.bias")?,
            };
            let m = loupe::attention_forward(g, x, &vars)?;
            x = loupe::refine(g, x, m)?;
            map = Some(m);
        }
        if s < STAGES {
            let w = var_of(&format!("merge{s}.weight"))?;
            let b = var_of(&format!("merge{s}.bias"))?;
            x = g.patch_merge(x, w, b)?;
        }
    }
    let pooled = g.global_avg_pool(x)?;
    let logits = g.linear(pooled, var_of("head.weight")?, var_of("head.bias")?)?;
    Ok(ForwardPass {
        logits,
        map,
        param_vars,
    })
}

/// Parameter accounting split into backbone and attention-module shares.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamCounts {
    pub backbone: usize,
    pub loupe: usize,
    pub ratio: f64,
}

pub fn count_params<T: Real>(state: &ModelState<T>) -> ParamCounts {
    let loupe = state.params.count_prefix("loupe.");
    let total = state.params.count();
    let backbone = total - loupe;
    let ratio = if total == 0 {
        0.0
    } else {
        loupe as f64 / total as f64
    };
    ParamCounts {
        backbone,
        loupe,
        ratio,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_scale_geometry() {
        let cfg = BackboneConfig::paper_scale();
        assert_eq!(cfg.stage_size(1), 56);
        assert_eq!(cfg.stage_size(2), 28);
        assert_eq!(cfg.stage_channels(2), 256);
        assert_eq!(cfg.stage_size(4), 7);
        assert_eq!(cfg.stage_channels(4), 1024);
    }

    #[test]
    fn desk_geometry() {
        let cfg = BackboneConfig::desk_default();
        assert_eq!(cfg.stage_size(2), 8);
        assert_eq!(cfg.stage_channels(2), 32);
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = BackboneConfig::desk_default();
        let a: ModelState<f32> = build(&cfg).unwrap();
        let b: ModelState<f32> = build(&cfg).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.name, pb.name);
            assert!(pa.data.iter().zip(&pb.data).all(|(x, y)| x == y));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = BackboneConfig::desk_default();
        cfg.input_size = 60; // not divisible by 32
        assert!(matches!(build::<f32>(&cfg), Err(CoreError::Config(_))));
        let mut cfg = BackboneConfig::desk_default();
        cfg.insertion_stage = 3;
        assert!(matches!(build::<f32>(&cfg), Err(CoreError::Config(_))));
    }

    #[test]
    fn desk_param_counts() {
        let cfg = BackboneConfig::desk_default();
        let state: ModelState<f64> = build(&cfg).unwrap();
        let counts = count_params(&state);
        assert_eq!(counts.loupe, 2321); // 9*32*8 + 8 + 8 + 1
        assert!(counts.ratio > 0.0 && counts.ratio < 0.005, "{counts:?}");

        let mut cfg = cfg;
        cfg.loupe_enabled = false;
        let state: ModelState<f64> = build(&cfg).unwrap();
        let counts = count_params(&state);
        assert_eq!(counts.loupe, 0);
        assert_eq!(counts.ratio, 0.0);
    }

    #[test]
    fn loupe_presence_does_not_shift_shared_params() {
        let mut cfg = BackboneConfig::desk_default();
        let with: ModelState<f64> = build(&cfg).unwrap();
        cfg.loupe_enabled = false;
        let without: ModelState<f64> = build(&cfg).unwrap();
        for p in without.params.iter() {
            let q = with.params.by_name(&p.name).unwrap();
            assert!(p.data.iter().zip(&q.data).all(|(x, y)| x == y), "{}", p.name);
        }
    }
}
