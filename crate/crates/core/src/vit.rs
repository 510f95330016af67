//! Compact vision transformer with pluggable patch embeddings.
//!
//! The embedding is either one linear projection per non-overlapping patch
//! (a convolution with kernel = stride = patch), a stack of dense
//! convolutions, or a stack of Gaussian-ring convolutions. Everything after
//! the embedding is a plain pre-norm transformer reading the cls token.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmr::{build_basis, gmr_forward, ring_spec, GmrBasis, DEFAULT_SIGMA_RATIO};
use crate::tensorkit::{grad_check, Element, GradCheckOptions, ParamCheck, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Dense,
    Gmr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedVariant {
    Linear,
    ConvStack,
    GmrStack,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedStage {
    pub kind: StageKind,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub c_out: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchEmbedConfig {
    pub variant: EmbedVariant,
    /// Empty for the linear variant.
    #[serde(default)]
    pub stages: Vec<EmbedStage>,
    /// Patch side, linear variant only.
    #[serde(default)]
    pub patch: usize,
    pub inter_stage_activation: Activation,
    #[serde(default = "default_sigma_ratio")]
    pub sigma_ratio: f64,
}

fn default_sigma_ratio() -> f64 {
    DEFAULT_SIGMA_RATIO
}

impl PatchEmbedConfig {
    pub fn linear(patch: usize) -> Self {
        PatchEmbedConfig {
            variant: EmbedVariant::Linear,
            stages: Vec::new(),
            patch,
            inter_stage_activation: Activation::None,
            sigma_ratio: DEFAULT_SIGMA_RATIO,
        }
    }

    /// A stack of `(k, stride, pad)` stages; intermediate stages use `c_mid`
    /// channels and the last one produces `embed_dim`.
    pub fn stack(kind: StageKind, geometry: &[(usize, usize, usize)], c_mid: usize, embed_dim: usize) -> Self {
        let last = geometry.len().saturating_sub(1);
        PatchEmbedConfig {
            variant: match kind {
                StageKind::Dense => EmbedVariant::ConvStack,
                StageKind::Gmr => EmbedVariant::GmrStack,
            },
            stages: geometry
                .iter()
                .enumerate()
                .map(|(i, &(k, stride, pad))| EmbedStage {
                    kind,
                    k,
                    stride,
                    pad,
                    c_out: if i == last { embed_dim } else { c_mid },
                })
                .collect(),
            patch: 0,
            inter_stage_activation: Activation::Gelu,
            sigma_ratio: DEFAULT_SIGMA_RATIO,
        }
    }

    /// Embedding stacks for 64-pixel inputs, all with total stride 16 and a
    /// 4x4 token grid. Every stage tiles its padded input exactly.
    pub fn ablation(name: &str, kind: StageKind, c_mid: usize, embed_dim: usize) -> Result<Self> {
        let geometry: &[(usize, usize, usize)] = match name {
            "6-11" => &[(6, 4, 3), (11, 4, 3)],
            "8-9" => &[(8, 4, 0), (9, 4, 3)],
            "10-7" => &[(10, 4, 1), (7, 4, 2)],
            "12-5" => &[(12, 4, 2), (5, 4, 1)],
            "6-6-6" => &[(6, 4, 1), (6, 2, 2), (6, 2, 2)],
            "16" => &[(16, 16, 0)],
            _ => {
                return Err(Error::Config(format!(
                    "unknown embedding preset {name:?}; expected one of {:?}",
                    ABLATION_PRESETS
                )))
            }
        };
        Ok(Self::stack(kind, geometry, c_mid, embed_dim))
    }
}

pub const ABLATION_PRESETS: [&str; 6] = ["6-11", "8-9", "10-7", "12-5", "6-6-6", "16"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub img_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
    pub embed: PatchEmbedConfig,
}

impl ViTConfig {
    /// Desk-scale model: 64-pixel RGB input, 128-wide, 4 blocks of 4 heads,
    /// 9 classes, the [6, 11] embedding stack with 32 middle channels.
    pub fn tiny(kind: StageKind) -> Self {
        ViTConfig {
            img_size: 64,
            in_channels: 3,
            embed_dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            n_classes: 9,
            embed: PatchEmbedConfig::ablation("6-11", kind, 32, 128).expect("known preset"),
        }
    }

    pub fn tiny_linear() -> Self {
        ViTConfig {
            embed: PatchEmbedConfig::linear(16),
            ..Self::tiny(StageKind::Dense)
        }
    }

    /// ViT-Base sized model on 224-pixel input; used for counting and shapes.
    pub fn base(kind: StageKind) -> Self {
        ViTConfig {
            img_size: 224,
            in_channels: 3,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            n_classes: 9,
            embed: PatchEmbedConfig::stack(kind, &[(6, 4, 1), (11, 4, 4)], 192, 768),
        }
    }

    pub fn base_linear() -> Self {
        ViTConfig {
            embed: PatchEmbedConfig::linear(16),
            ..Self::base(StageKind::Dense)
        }
    }

    /// Kernel, stride, pad and output channels of every embedding convolution.
    pub fn conv_stages(&self) -> Vec<EmbedStage> {
        match self.embed.variant {
            EmbedVariant::Linear => vec![EmbedStage {
                kind: StageKind::Dense,
                k: self.embed.patch,
                stride: self.embed.patch,
                pad: 0,
                c_out: self.embed_dim,
            }],
            _ => self.embed.stages.clone(),
        }
    }

    /// Spatial side after each embedding stage.
    pub fn stage_sides(&self) -> Result<Vec<usize>> {
        let mut side = self.img_size;
        let mut sides = Vec::new();
        for (i, st) in self.conv_stages().iter().enumerate() {
            let padded = side + 2 * st.pad;
            if st.k == 0 || st.stride == 0 || padded < st.k {
                return Err(Error::Config(format!(
                    "embedding stage {i}: kernel {} does not fit a {side}-pixel input padded by {}",
                    st.k, st.pad
                )));
            }
            side = (padded - st.k) / st.stride + 1;
            sides.push(side);
        }
        Ok(sides)
    }

    /// Token grid side `g`.
    pub fn grid(&self) -> Result<usize> {
        self.stage_sides()?
            .last()
            .copied()
            .ok_or_else(|| Error::Config("embedding has no stages".into()))
    }

    pub fn n_tokens(&self) -> Result<usize> {
        self.grid().map(|g| g * g)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.img_size == 0 || self.in_channels == 0 || self.embed_dim == 0 || self.n_classes == 0 {
            return bad("img_size, in_channels, embed_dim and n_classes must be positive".into());
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        let e = &self.embed;
        match e.variant {
            EmbedVariant::Linear => {
                if !e.stages.is_empty() {
                    return bad("the linear embedding takes no stages".into());
                }
                if e.patch == 0 || !self.img_size.is_multiple_of(e.patch) {
                    return bad(format!(
                        "image side {} is not divisible by patch {}",
                        self.img_size, e.patch
                    ));
                }
            }
            EmbedVariant::ConvStack | EmbedVariant::GmrStack => {
                let want = if e.variant == EmbedVariant::GmrStack {
                    StageKind::Gmr
                } else {
                    StageKind::Dense
                };
                let Some(last) = e.stages.last() else {
                    return bad("a convolution stack needs at least one stage".into());
                };
                if last.c_out != self.embed_dim {
                    return bad(format!(
                        "last stage has {} channels, embed_dim is {}",
                        last.c_out, self.embed_dim
                    ));
                }
                for (i, st) in e.stages.iter().enumerate() {
                    if st.kind != want {
                        return bad(format!("stage {i} is {:?} inside a {:?}", st.kind, e.variant));
                    }
                    if st.stride == 0 || st.c_out == 0 || st.k == 0 {
                        return bad(format!("stage {i}: k, stride and c_out must be positive"));
                    }
                }
                if !(e.sigma_ratio > 0.0 && e.sigma_ratio.is_finite()) {
                    return bad(format!("sigma_ratio must be positive, got {}", e.sigma_ratio));
                }
            }
        }
        self.grid()?;
        Ok(())
    }
}

/// One named parameter slot in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Drawn from the truncated normal; otherwise zero (biases, tokens) or one (norm gains).
    pub init: Init,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Names, shapes and initializers of every parameter, in the order the
/// forward pass consumes them.
pub fn param_specs(cfg: &ViTConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init| specs.push(ParamSpec { name, shape, init });
    let d = cfg.embed_dim;
    let mut c_in = cfg.in_channels;
    for (i, st) in cfg.conv_stages().iter().enumerate() {
        match st.kind {
            StageKind::Dense => push(
                format!("embed.{i}.weight"),
                vec![st.c_out, c_in, st.k, st.k],
                Init::Normal,
            ),
            StageKind::Gmr => push(
                format!("embed.{i}.ring_weights"),
                vec![st.c_out, c_in, st.k.div_ceil(2)],
                Init::Normal,
            ),
        }
        push(format!("embed.{i}.bias"), vec![st.c_out], Init::Zeros);
        c_in = st.c_out;
    }
    let t = cfg.n_tokens()? + 1;
    push("cls_token".into(), vec![d], Init::Zeros);
    push("pos_embed".into(), vec![t, d], Init::Zeros);
    let hidden = d * cfg.mlp_ratio;
    for b in 0..cfg.depth {
        let p = format!("blocks.{b}");
        push(format!("{p}.norm1.gamma"), vec![d], Init::Ones);
        push(format!("{p}.norm1.beta"), vec![d], Init::Zeros);
        push(format!("{p}.attn.qkv.weight"), vec![d, 3 * d], Init::Normal);
        push(format!("{p}.attn.qkv.bias"), vec![3 * d], Init::Zeros);
        push(format!("{p}.attn.proj.weight"), vec![d, d], Init::Normal);
        push(format!("{p}.attn.proj.bias"), vec![d], Init::Zeros);
        push(format!("{p}.norm2.gamma"), vec![d], Init::Ones);
        push(format!("{p}.norm2.beta"), vec![d], Init::Zeros);
        push(format!("{p}.mlp.fc1.weight"), vec![d, hidden], Init::Normal);
        push(format!("{p}.mlp.fc1.bias"), vec![hidden], Init::Zeros);
        push(format!("{p}.mlp.fc2.weight"), vec![hidden, d], Init::Normal);
        push(format!("{p}.mlp.fc2.bias"), vec![d], Init::Zeros);
    }
    push("norm.gamma".into(), vec![d], Init::Ones);
    push("norm.beta".into(), vec![d], Init::Zeros);
    push("head.weight".into(), vec![d, cfg.n_classes], Init::Normal);
    push("head.bias".into(), vec![cfg.n_classes], Init::Zeros);
    Ok(specs)
}

/// Ring bases for the GMR stages (`None` for dense stages).
fn stage_bases(cfg: &ViTConfig) -> Result<Vec<Option<GmrBasis>>> {
    cfg.conv_stages()
        .iter()
        .map(|st| match st.kind {
            StageKind::Dense => Ok(None),
            StageKind::Gmr => Ok(Some(build_basis(&ring_spec(st.k, cfg.embed.sigma_ratio)?))),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTModel {
    cfg: ViTConfig,
    names: Vec<String>,
    params: Vec<Tensor<f32>>,
    bases: Vec<Option<GmrBasis>>,
}

/// Initialize a model: truncated normal (std 0.02, cut at two deviations)
/// for weights, zeros for biases and tokens, ones for norm gains.
pub fn build_model(cfg: &ViTConfig, seed: u64) -> Result<ViTModel> {
    let specs = param_specs(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut draw = || loop {
        let v: f64 = normal.sample(&mut rng);
        if v.abs() <= 2.0 * INIT_STD {
            return v as f32;
        }
    };
    let params = specs
        .iter()
        .map(|s| match s.init {
            Init::Normal => Tensor::from_fn(&s.shape, |_| draw()),
            Init::Zeros => Tensor::zeros(&s.shape),
            Init::Ones => Tensor::full(&s.shape, 1.0),
        })
        .collect();
    Ok(ViTModel {
        cfg: cfg.clone(),
        names: specs.into_iter().map(|s| s.name).collect(),
        params,
        bases: stage_bases(cfg)?,
    })
}

/// Parameter totals for one model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamReport {
    /// Component name to parameter count: `embed.<i>` per stage, then
    /// `cls_token`, `pos_embed`, `blocks`, `norm`, `head`.
    pub per_component: Vec<(String, usize)>,
    pub embedding_total: usize,
    pub embedding_bytes: usize,
    pub total: usize,
}

pub fn count_params(cfg: &ViTConfig) -> Result<ParamReport> {
    let mut per: Vec<(String, usize)> = Vec::new();
    for s in param_specs(cfg)? {
        let comp = match s.name.split('.').collect::<Vec<_>>()[..] {
            ["embed", i, ..] => format!("embed.{i}"),
            [first, ..] => first.to_string(),
            [] => unreachable!("names are never empty"),
        };
        let n: usize = s.shape.iter().product();
        match per.last_mut() {
            Some((c, total)) if *c == comp => *total += n,
            _ => per.push((comp, n)),
        }
    }
    let embedding_total = per
        .iter()
        .filter(|(c, _)| c.starts_with("embed."))
        .map(|(_, n)| n)
        .sum();
    Ok(ParamReport {
        total: per.iter().map(|(_, n)| n).sum(),
        embedding_bytes: embedding_total * 4,
        embedding_total,
        per_component: per,
    })
}

impl ViTModel {
    pub fn config(&self) -> &ViTConfig {
        &self.cfg
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    /// Replace every parameter; shapes must match the current ones.
    pub fn set_params(&mut self, params: Vec<Tensor<f32>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} tensors supplied for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        for ((name, old), new) in self.names.iter().zip(&self.params).zip(&params) {
            if old.shape() != new.shape() {
                return Err(Error::Contract(format!(
                    "{name}: shape {:?} does not match {:?}",
                    new.shape(),
                    old.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<f32>) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
        if self.params[i].shape() != value.shape() {
            return Err(Error::Contract(format!(
                "{name}: shape {:?} does not match {:?}",
                value.shape(),
                self.params[i].shape()
            )));
        }
        self.params[i] = value;
        Ok(())
    }

    /// Rebuild a model from named tensors, checking every name and shape
    /// against the configuration.
    pub fn from_named(cfg: &ViTConfig, named: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let specs = param_specs(cfg)?;
        let mut by_name: BTreeMap<String, Tensor<f32>> = named.into_iter().collect();
        let mut params = Vec::with_capacity(specs.len());
        for s in &specs {
            let t = by_name
                .remove(&s.name)
                .ok_or_else(|| Error::Corruption(format!("missing tensor {}", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Corruption(format!(
                    "{}: stored shape {:?}, architecture expects {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
            params.push(t);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Corruption(format!("unexpected tensor {extra}")));
        }
        Ok(ViTModel {
            cfg: cfg.clone(),
            names: specs.into_iter().map(|s| s.name).collect(),
            params,
            bases: stage_bases(cfg)?,
        })
    }

    /// Copy with independent truncated-normal noise of deviation `std` added
    /// to every parameter. Gradient checks run at such a point: at
    /// initialization the cls row is constant and its layernorm sits on the
    /// variance floor, where finite differences are badly conditioned.
    pub fn jittered(&self, std: f64, seed: u64) -> ViTModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut out = self.clone();
        for p in &mut out.params {
            *p = p.map(|v| loop {
                let e: f64 = normal.sample(&mut rng);
                if e.abs() <= 2.0 * std {
                    break v + e as f32;
                }
            });
        }
        out
    }

    /// Put every parameter on `tape` (differentiable when `trainable`), cast to `T`.
    pub fn bind<T: Element>(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.cast(), trainable)).collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.cfg.img_size;
        match *shape {
            [_, c, h, w] if c == self.cfg.in_channels && h == s && w == s => Ok(()),
            _ => Err(Error::Dimension(format!(
                "expected [N, {}, {s}, {s}] images, got {shape:?}",
                self.cfg.in_channels
            ))),
        }
    }

    /// Tokens straight out of the embedding stack, `[N, g*g, D]`, before the
    /// cls token and positional table.
    pub fn embed_on_tape<T: Element>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let n = tape.shape(x)[0];
        let stages = self.cfg.conv_stages();
        let mut h = x;
        for (i, (st, basis)) in stages.iter().zip(&self.bases).enumerate() {
            let (w, b) = (vars[2 * i], vars[2 * i + 1]);
            h = match basis {
                Some(basis) => gmr_forward(tape, h, w, b, basis, st.stride, st.pad)?,
                None => tape.conv2d(h, w, b, st.stride, st.pad)?,
            };
            if i + 1 < stages.len() && self.cfg.embed.inter_stage_activation == Activation::Gelu {
                h = tape.gelu(h);
            }
        }
        let &[_, d, g, _] = tape.shape(h) else {
            unreachable!("conv2d returns NCHW")
        };
        let h = tape.reshape(h, &[n, d, g * g])?;
        tape.permute(h, &[0, 2, 1])
    }

    /// Class logits `[N, n_classes]` recorded on `tape`; `vars` come from [`ViTModel::bind`].
    pub fn forward_on_tape<T: Element>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} bound variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let tokens = self.embed_on_tape(tape, vars, x)?;
        let mut next = vars[2 * self.cfg.conv_stages().len()..].iter().copied();
        let mut take = || next.next().expect("parameter order matches param_specs");
        let d = self.cfg.embed_dim;
        let n = tape.shape(x)[0];
        let t = tape.shape(tokens)[1] + 1;
        let heads = self.cfg.heads;
        let dh = d / heads;

        let cls = take();
        let pos = take();
        let h = tape.prepend_token(tokens, cls)?;
        let mut h = tape.add_trailing(h, pos)?;
        for _ in 0..self.cfg.depth {
            let (g1, b1) = (take(), take());
            let (wqkv, bqkv, wproj, bproj) = (take(), take(), take(), take());
            let (g2, b2) = (take(), take());
            let (w1, bias1, w2, bias2) = (take(), take(), take(), take());

            let a = tape.layernorm(h, g1, b1, LN_EPS)?;
            let a = tape.reshape(a, &[n * t, d])?;
            let qkv = tape.matmul(a, wqkv)?;
            let qkv = tape.add_trailing(qkv, bqkv)?;
            let qkv = tape.reshape(qkv, &[n, t, 3, heads, dh])?;
            let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
            let q = tape.narrow(qkv, 0, 0, 1)?;
            let q = tape.reshape(q, &[n * heads, t, dh])?;
            let k = tape.narrow(qkv, 0, 1, 1)?;
            let k = tape.reshape(k, &[n * heads, t, dh])?;
            let k = tape.permute(k, &[0, 2, 1])?;
            let v = tape.narrow(qkv, 0, 2, 1)?;
            let v = tape.reshape(v, &[n * heads, t, dh])?;
            let scores = tape.matmul(q, k)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = tape.softmax(scores, 2)?;
            let ctx = tape.matmul(attn, v)?;
            let ctx = tape.reshape(ctx, &[n, heads, t, dh])?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[n * t, d])?;
            let out = tape.matmul(ctx, wproj)?;
            let out = tape.add_trailing(out, bproj)?;
            let out = tape.reshape(out, &[n, t, d])?;
            h = tape.add(h, out)?;

            let m = tape.layernorm(h, g2, b2, LN_EPS)?;
            let m = tape.reshape(m, &[n * t, d])?;
            let m = tape.matmul(m, w1)?;
            let m = tape.add_trailing(m, bias1)?;
            let m = tape.gelu(m);
            let m = tape.matmul(m, w2)?;
            let m = tape.add_trailing(m, bias2)?;
            let m = tape.reshape(m, &[n, t, d])?;
            h = tape.add(h, m)?;
        }
        let (gn, bn, wh, bh) = (take(), take(), take(), take());
        let c = tape.narrow(h, 1, 0, 1)?;
        let c = tape.reshape(c, &[n, d])?;
        let c = tape.layernorm(c, gn, bn, LN_EPS)?;
        let logits = tape.matmul(c, wh)?;
        tape.add_trailing(logits, bh)
    }

    /// Logits for a batch, no gradients.
    pub fn forward(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let y = self.forward_on_tape(&mut tape, &vars, x)?;
        Ok(tape.value(y).clone())
    }

    /// Embedding-stage tokens `[N, g*g, D]` for a batch.
    pub fn embed_tokens(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let y = self.embed_on_tape(&mut tape, &vars, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Finite-difference check of the cross-entropy gradient of the whole model,
/// run in f64 so rounding noise stays far below the tolerance.
pub fn model_grad_check(
    model: &ViTModel,
    images: &Tensor<f32>,
    labels: &[usize],
    opts: &GradCheckOptions,
) -> Result<Vec<ParamCheck>> {
    let params: Vec<(String, Tensor<f64>)> = model.named_params().map(|(n, t)| (n.to_string(), t.cast())).collect();
    let x: Tensor<f64> = images.cast();
    grad_check(
        &params,
        |tape, vars| {
            let xv = tape.constant(x.clone());
            let logits = model.forward_on_tape(tape, vars, xv)?;
            tape.cross_entropy(logits, labels)
        },
        opts,
    )
}

/// Permutation `p` of flattened `g x g` token indices with
/// `rotated[p[i]] == original[i]` after `times` counter-clockwise quarter
/// turns of the grid. One turn sends cell `(r, c)` to `(g-1-c, r)`.
pub fn rot90_token_permutation(g: usize, times: usize) -> Result<Vec<usize>> {
    if times > 3 {
        return Err(Error::Argument(format!("quarter turns must be 0..=3, got {times}")));
    }
    Ok((0..g * g)
        .map(|i| {
            let (mut r, mut c) = (i / g, i % g);
            for _ in 0..times {
                (r, c) = (g - 1 - c, r);
            }
            r * g + c
        })
        .collect())
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests;
