//! Decoder-only transformer over interleaved image patches and text tokens.
//!
//! Layout per block (pre-norm):
//!
//! ```text
//! x = x + Wo · concat_h( softmax_causal( rope(LN_q(Q_h)) · rope(LN_k(K_h))ᵀ / √d_h ) · V_h )
//! x = x + down( relu(up(LN(x)))² )
//! ```
//!
//! Patches enter through a linear projection, text through an embedding
//! table; the output head is a separate matrix over the text vocabulary.
//! Linear weights are stored `d_in × d_out` and applied as `x·W`.

mod checkpoint;
mod forward;
mod gradcheck;
mod infer;

use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::patch::{PatchGrid, PATCH_DIM};
use crate::tensor::Tensor;

pub use checkpoint::{read_archive, write_archive, TensorArchive, CHECKPOINT_VERSION};
pub use forward::{sequence_loss, Bound, LoraBinding};
pub use gradcheck::{
    check_model_gradients, sweep_model_gradients, ModelGradPlan, ModelGradReport, SweepReport,
};
pub use infer::{
    attention_blocked, attention_naive, decode_greedy, logits, trace_qk, AttentionKernel, HeadQk,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Text vocabulary including special tokens.
    pub vocab: usize,
    pub patch_dim: usize,
    /// MLP width as a multiple of `hidden`.
    pub mlp_ratio: usize,
    pub rope_base: f64,
    pub max_seq: usize,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl ModelConfig {
    /// The desk-scale configuration used throughout the tests.
    pub fn toy() -> Self {
        Self {
            hidden: 128,
            n_heads: 4,
            n_layers: 4,
            vocab: 512,
            patch_dim: PATCH_DIM,
            mlp_ratio: 4,
            rope_base: 10_000.0,
            max_seq: 4096,
            ln_eps: crate::tensor::ops::LAYER_NORM_EPS,
            init_std: 0.02,
        }
    }

    /// Width, head count and depth of the 8B-class decoder. Never trained
    /// here; useful for parameter arithmetic.
    pub fn full_scale() -> Self {
        Self {
            hidden: 4096,
            n_heads: 64,
            n_layers: 36,
            ..Self::toy()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    pub fn ff(&self) -> usize {
        self.hidden * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("vocab", self.vocab),
            ("patch_dim", self.patch_dim),
            ("mlp_ratio", self.mlp_ratio),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be >= 1")));
        }
        if !self.hidden.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "hidden {} is not divisible by n_heads {}",
                self.hidden, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::config(format!(
                "head_dim {} must be even for rotary pairs",
                self.head_dim()
            )));
        }
        if self.ln_eps <= 0.0 || self.rope_base <= 0.0 {
            return Err(Error::config("ln_eps and rope_base must be positive"));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let (h, v, hd, ff) = (self.hidden, self.vocab, self.head_dim(), self.ff());
        let per_layer = 4 * h * h + 4 * hd + 2 * h * ff + 4 * h;
        self.patch_dim * h + h + v * h + self.n_layers * per_layer + 2 * h + h * v
    }

    /// `(name, d_in, d_out)` of every linear map, in parameter order.
    pub fn linear_maps(&self) -> Vec<(String, usize, usize)> {
        let (h, ff) = (self.hidden, self.ff());
        let mut maps = vec![(names::PATCH_WEIGHT.to_string(), self.patch_dim, h)];
        for l in 0..self.n_layers {
            for proj in ["wq", "wk", "wv", "wo"] {
                maps.push((names::layer(l, &format!("attn.{proj}")), h, h));
            }
            maps.push((names::layer(l, "mlp.up"), h, ff));
            maps.push((names::layer(l, "mlp.down"), ff, h));
        }
        maps.push((names::OUTPUT_HEAD.to_string(), h, self.vocab));
        maps
    }
}

/// Parameter naming scheme.
pub mod names {
    pub const PATCH_WEIGHT: &str = "patch_projection.weight";
    pub const PATCH_BIAS: &str = "patch_projection.bias";
    pub const TOKEN_EMBEDDING: &str = "token_embedding";
    pub const FINAL_NORM_GAIN: &str = "final_norm.gain";
    pub const FINAL_NORM_BIAS: &str = "final_norm.bias";
    pub const OUTPUT_HEAD: &str = "output_head";

    pub fn layer(l: usize, suffix: &str) -> String {
        format!("layers.{l}.{suffix}")
    }
}

/// Named weights of a decoder, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: IndexMap<String, Tensor>,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (h, hd, ff, v) = (cfg.hidden, cfg.head_dim(), cfg.ff(), cfg.vocab);
    let mut specs = vec![
        (
            names::PATCH_WEIGHT.into(),
            vec![cfg.patch_dim, h],
            Init::Normal,
        ),
        (names::PATCH_BIAS.into(), vec![h], Init::Zeros),
        (names::TOKEN_EMBEDDING.into(), vec![v, h], Init::Normal),
    ];
    for l in 0..cfg.n_layers {
        let n = |s: &str| names::layer(l, s);
        specs.push((n("attn_norm.gain"), vec![h], Init::Ones));
        specs.push((n("attn_norm.bias"), vec![h], Init::Zeros));
        for proj in ["wq", "wk", "wv", "wo"] {
            specs.push((n(&format!("attn.{proj}")), vec![h, h], Init::Normal));
        }
        for norm in ["q_norm", "k_norm"] {
            specs.push((n(&format!("attn.{norm}.gain")), vec![hd], Init::Ones));
            specs.push((n(&format!("attn.{norm}.bias")), vec![hd], Init::Zeros));
        }
        specs.push((n("mlp_norm.gain"), vec![h], Init::Ones));
        specs.push((n("mlp_norm.bias"), vec![h], Init::Zeros));
        specs.push((n("mlp.up"), vec![h, ff], Init::Normal));
        specs.push((n("mlp.down"), vec![ff, h], Init::Normal));
    }
    specs.push((names::FINAL_NORM_GAIN.into(), vec![h], Init::Ones));
    specs.push((names::FINAL_NORM_BIAS.into(), vec![h], Init::Zeros));
    specs.push((names::OUTPUT_HEAD.into(), vec![h, v], Init::Normal));
    specs
}

impl ModelParams {
    /// Normal(0, init_std) projections, zero biases, unit gains.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let tensors = param_specs(config)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Normal => Tensor::randn(&shape, config.init_std, rng),
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Ones => Tensor::ones(&shape),
                };
                (name, t)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Builds params from named tensors, checking names and shapes against the config.
    pub fn from_tensors(
        config: ModelConfig,
        mut tensors: IndexMap<String, Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let mut ordered = IndexMap::new();
        for (name, shape, _) in param_specs(&config) {
            let t = tensors
                .shift_remove(&name)
                .ok_or_else(|| Error::contract(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::contract(format!(
                    "parameter {name}: config expects shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
            ordered.insert(name, t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::contract(format!("unexpected parameter {extra}")));
        }
        Ok(Self {
            config,
            tensors: ordered,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::contract(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn tensors(&self) -> &IndexMap<String, Tensor> {
        &self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// SHA-256 over names, shapes and little-endian element bytes.
    pub fn digest(&self) -> String {
        digest_tensors(&self.tensors)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::to_string(&self.config).expect("config serializes");
        write_archive(path, &meta, &self.tensors)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let archive = read_archive(path)?;
        let config: ModelConfig = serde_json::from_str(&archive.meta_json)
            .map_err(|e| Error::Format(format!("config header: {e}")))?;
        Self::from_tensors(config, archive.tensors)
    }
}

pub(crate) fn digest_tensors(tensors: &IndexMap<String, Tensor>) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// One position of a decoder input.
#[derive(Debug, Clone, PartialEq)]
pub enum Element {
    Patch(Arc<Vec<f64>>),
    Token(u32),
}

/// Interleaved patch and text positions; position index = sequence index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SequenceInput {
    elements: Vec<Element>,
}

impl SequenceInput {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_elements(elements: Vec<Element>) -> Self {
        Self { elements }
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn push_token(&mut self, id: u32) {
        self.elements.push(Element::Token(id));
    }

    pub fn push_patch(&mut self, patch: Vec<f64>) {
        self.elements.push(Element::Patch(Arc::new(patch)));
    }

    pub fn extend_tokens(&mut self, ids: &[u32]) {
        self.elements
            .extend(ids.iter().map(|&id| Element::Token(id)));
    }

    /// Appends the raster layout of `grid`, with `newline` after each patch row.
    pub fn extend_with_grid(&mut self, grid: &PatchGrid, newline: u32) {
        for r in 0..grid.rows() {
            for c in 0..grid.cols() {
                self.push_patch(grid.patch(r, c).to_vec());
            }
            self.push_token(newline);
        }
    }

    pub fn patch_count(&self) -> usize {
        self.elements
            .iter()
            .filter(|e| matches!(e, Element::Patch(_)))
            .count()
    }

    /// Token id at each position, `None` for patches.
    pub fn token_ids(&self) -> Vec<Option<u32>> {
        self.elements
            .iter()
            .map(|e| match e {
                Element::Token(id) => Some(*id),
                Element::Patch(_) => None,
            })
            .collect()
    }
}

/// Stacked patch matrix, token ids and the sequence order of both.
pub(crate) struct SplitInput {
    pub patches: Option<Tensor>,
    pub token_ids: Vec<usize>,
    /// Row of `concat_rows(patch_rows, token_rows)` feeding each position.
    pub order: Vec<usize>,
}

pub(crate) fn split_input(cfg: &ModelConfig, input: &SequenceInput) -> Result<SplitInput> {
    if input.is_empty() {
        return Err(Error::contract("empty input sequence"));
    }
    if input.len() > cfg.max_seq {
        return Err(Error::Capacity {
            len: input.len(),
            max_seq: cfg.max_seq,
        });
    }
    let n_patches = input.patch_count();
    let mut patch_data = Vec::with_capacity(n_patches * cfg.patch_dim);
    let mut token_ids = Vec::new();
    let mut order = Vec::with_capacity(input.len());
    for e in input.elements() {
        match e {
            Element::Patch(p) => {
                if p.len() != cfg.patch_dim {
                    return Err(Error::Shape {
                        op: "embed_sequence",
                        lhs: vec![p.len()],
                        rhs: vec![cfg.patch_dim],
                    });
                }
                order.push(patch_data.len() / cfg.patch_dim);
                patch_data.extend_from_slice(p);
            }
            Element::Token(id) => {
                if *id as usize >= cfg.vocab {
                    return Err(Error::contract(format!(
                        "token id {id} outside vocabulary of {}",
                        cfg.vocab
                    )));
                }
                order.push(n_patches + token_ids.len());
                token_ids.push(*id as usize);
            }
        }
    }
    let patches =
        (n_patches > 0).then(|| Tensor::from_parts(vec![n_patches, cfg.patch_dim], patch_data));
    Ok(SplitInput {
        patches,
        token_ids,
        order,
    })
}

/// Causal keep-mask `j <= i`, also dropping keys flagged invalid.
pub(crate) fn causal_keep(n: usize, key_valid: Option<&[bool]>) -> Vec<bool> {
    let mut keep = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            keep[i * n + j] = key_valid.is_none_or(|v| v[j]);
        }
    }
    keep
}
