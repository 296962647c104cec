//! Deterministic weight generation.
//!
//! Every tensor is drawn from its own stream `derive(seed, [layer, role])`, so
//! a device holding only layers `[a, b)` regenerates exactly the weights a
//! monolithic build would hold for those layers.

use std::ops::Range;

use crate::error::Result;
use crate::rng::RandomSource;
use crate::tensor::{matmul, Tensor};

use super::config::ModelConfig;

/// Layer key used for tensors that belong to no DiT block.
const GLOBAL_LAYER: u64 = u64::MAX;

#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum Role {
    Ln1Gain = 1,
    Ln1Bias,
    Query,
    Key,
    Value,
    AttnOut,
    Ln2Gain,
    Ln2Bias,
    CrossQuery,
    CrossKey,
    CrossValue,
    CrossOut,
    Ln3Gain,
    Ln3Bias,
    FfnIn,
    FfnInBias,
    FfnOut,
    FfnOutBias,
    PatchWeight = 100,
    PatchBias,
    Position,
    HeadGain,
    HeadBias,
    HeadWeight,
    HeadOutBias,
    Context = 200,
}

fn stream(seed: u64, layer: u64, role: Role) -> RandomSource {
    RandomSource::derive(seed, &[layer, role as u64])
}

fn dense(seed: u64, layer: u64, role: Role, fan_in: usize, fan_out: usize) -> Tensor {
    let scale = 1.0 / (fan_in as f64).sqrt();
    let data = stream(seed, layer, role).normals(fan_in * fan_out).into_iter().map(|v| v * scale).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("dense shape")
}

fn vector(seed: u64, layer: u64, role: Role, len: usize, offset: f64, scale: f64) -> Vec<f64> {
    stream(seed, layer, role).normals(len).into_iter().map(|v| offset + scale * v).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Norm {
    fn build(seed: u64, layer: u64, gain: Role, bias: Role, h: usize) -> Self {
        Self { gain: vector(seed, layer, gain, h, 1.0, 0.1), bias: vector(seed, layer, bias, h, 0.0, 0.1) }
    }
}

/// One DiT block: self-attention, cross-attention, FFN, each pre-normed.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub index: usize,
    pub ln1: Norm,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2: Norm,
    pub cq: Tensor,
    pub co: Tensor,
    /// Cross-attention keys/values of the fixed context, projected once.
    pub context_k: Tensor,
    pub context_v: Tensor,
    pub ln3: Norm,
    pub w1: Tensor,
    pub b1: Vec<f64>,
    pub w2: Tensor,
    pub b2: Vec<f64>,
}

impl LayerWeights {
    pub fn build(cfg: &ModelConfig, seed: u64, context: &Tensor, index: usize) -> Result<Self> {
        let h = cfg.hidden;
        let f = h * cfg.ffn_mult;
        let l = index as u64;
        let ck = dense(seed, l, Role::CrossKey, h, h);
        let cv = dense(seed, l, Role::CrossValue, h, h);
        Ok(Self {
            index,
            ln1: Norm::build(seed, l, Role::Ln1Gain, Role::Ln1Bias, h),
            wq: dense(seed, l, Role::Query, h, h),
            wk: dense(seed, l, Role::Key, h, h),
            wv: dense(seed, l, Role::Value, h, h),
            wo: dense(seed, l, Role::AttnOut, h, h),
            ln2: Norm::build(seed, l, Role::Ln2Gain, Role::Ln2Bias, h),
            cq: dense(seed, l, Role::CrossQuery, h, h),
            co: dense(seed, l, Role::CrossOut, h, h),
            context_k: matmul(context, &ck)?,
            context_v: matmul(context, &cv)?,
            ln3: Norm::build(seed, l, Role::Ln3Gain, Role::Ln3Bias, h),
            w1: dense(seed, l, Role::FfnIn, h, f),
            b1: vector(seed, l, Role::FfnInBias, f, 0.0, 1.0 / (h as f64).sqrt()),
            w2: dense(seed, l, Role::FfnOut, f, h),
            b2: vector(seed, l, Role::FfnOutBias, h, 0.0, 1.0 / (f as f64).sqrt()),
        })
    }
}

/// Patchify (C→h per cell) plus additive position embedding. Lives on chunk 0.
#[derive(Debug, Clone, PartialEq)]
pub struct InputEmbed {
    pub patch_w: Tensor,
    pub patch_b: Vec<f64>,
    /// One row per spatial cell, `H·W × h`.
    pub position: Tensor,
}

/// Final norm and h→C projection. Lives on the last chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputHead {
    pub norm: Norm,
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSeeds {
    pub model: u64,
    pub context: u64,
}

/// The fixed cross-attention context sequence, `context_len × h`.
pub fn context_tokens(cfg: &ModelConfig, context_seed: u64) -> Tensor {
    let data = stream(context_seed, GLOBAL_LAYER, Role::Context).normals(cfg.context_len * cfg.hidden);
    Tensor::matrix(cfg.context_len, cfg.hidden, data).expect("context shape")
}

pub fn build_input_embed(cfg: &ModelConfig, seed: u64) -> InputEmbed {
    let (c, h) = (cfg.channels, cfg.hidden);
    let cells = cfg.tokens_per_frame();
    let position = Tensor::matrix(cells, h, vector(seed, GLOBAL_LAYER, Role::Position, cells * h, 0.0, 0.1))
        .expect("position shape");
    InputEmbed {
        patch_w: dense(seed, GLOBAL_LAYER, Role::PatchWeight, c, h),
        patch_b: vector(seed, GLOBAL_LAYER, Role::PatchBias, h, 0.0, 1.0 / (c as f64).sqrt()),
        position,
    }
}

pub fn build_output_head(cfg: &ModelConfig, seed: u64) -> OutputHead {
    let (c, h) = (cfg.channels, cfg.hidden);
    OutputHead {
        norm: Norm::build(seed, GLOBAL_LAYER, Role::HeadGain, Role::HeadBias, h),
        weight: dense(seed, GLOBAL_LAYER, Role::HeadWeight, h, c),
        bias: vector(seed, GLOBAL_LAYER, Role::HeadOutBias, c, 0.0, 1.0 / (h as f64).sqrt()),
    }
}

pub fn build_layers(cfg: &ModelConfig, seeds: ModelSeeds, range: Range<usize>) -> Result<Vec<LayerWeights>> {
    let context = context_tokens(cfg, seeds.context);
    range.map(|l| LayerWeights::build(cfg, seeds.model, &context, l)).collect()
}
