//! Differentiable forward pass on a [`Graph`].

use std::collections::HashMap;

use indexmap::IndexMap;

use super::{causal_keep, names, split_input, ModelConfig, ModelParams, SequenceInput};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Low-rank update attached to a linear map: `x·W + scale·(x·Aᵀ)·Bᵀ`.
#[derive(Debug, Clone, Copy)]
pub struct LoraBinding {
    /// `r × d_in`
    pub a: Var,
    /// `d_out × r`
    pub b: Var,
    pub scale: f64,
}

/// Model weights bound into one graph.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
    lora: HashMap<String, LoraBinding>,
}

impl Bound {
    /// Binds every weight as a parameter when `trainable`, else as a constant.
    pub fn bind(g: &mut Graph, params: &ModelParams, trainable: bool) -> Self {
        Self::bind_with(g, params, |_| trainable)
    }

    pub fn bind_with(
        g: &mut Graph,
        params: &ModelParams,
        trainable: impl Fn(&str) -> bool,
    ) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Self {
            vars,
            lora: HashMap::new(),
        }
    }

    /// Pairs already-created variables with parameter names.
    pub fn from_vars<'a>(names: impl IntoIterator<Item = &'a String>, vars: &[Var]) -> Self {
        Self {
            vars: names
                .into_iter()
                .cloned()
                .zip(vars.iter().copied())
                .collect(),
            lora: HashMap::new(),
        }
    }

    pub fn vars(&self) -> &IndexMap<String, Var> {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("no bound parameter {name}")))
    }

    pub fn attach_lora(&mut self, target: &str, binding: LoraBinding) {
        self.lora.insert(target.to_string(), binding);
    }

    fn linear(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let w = self.var(name)?;
        let base = g.matmul(x, w)?;
        let Some(l) = self.lora.get(name) else {
            return Ok(base);
        };
        let at = g.transpose(l.a)?;
        let bt = g.transpose(l.b)?;
        let down = g.matmul(x, at)?;
        let up = g.matmul(down, bt)?;
        let up = g.scale(up, l.scale);
        g.add(base, up)
    }

    fn norm(&self, g: &mut Graph, cfg: &ModelConfig, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.var(&format!("{prefix}.gain"))?;
        let bias = self.var(&format!("{prefix}.bias"))?;
        g.layer_norm(x, gain, bias, cfg.ln_eps)
    }

    /// Per-position hidden states entering the first block.
    pub fn embed(&self, g: &mut Graph, cfg: &ModelConfig, input: &SequenceInput) -> Result<Var> {
        let split = split_input(cfg, input)?;
        let mut parts = Vec::new();
        if let Some(patches) = split.patches {
            let p = g.constant(patches);
            let proj = self.linear(g, p, names::PATCH_WEIGHT)?;
            let bias = self.var(names::PATCH_BIAS)?;
            parts.push(g.add_row(proj, bias)?);
        }
        if !split.token_ids.is_empty() {
            let table = self.var(names::TOKEN_EMBEDDING)?;
            parts.push(g.gather_rows(table, split.token_ids)?);
        }
        let stacked = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_rows(&parts)?
        };
        let identity = split.order.iter().enumerate().all(|(i, &r)| i == r);
        if identity {
            Ok(stacked)
        } else {
            g.gather_rows(stacked, split.order)
        }
    }

    fn attention(
        &self,
        g: &mut Graph,
        cfg: &ModelConfig,
        layer: usize,
        h: Var,
        keep: &[bool],
    ) -> Result<Var> {
        let n = g.value(h).shape()[0];
        let hd = cfg.head_dim();
        let p = |s: &str| names::layer(layer, &format!("attn.{s}"));
        let q = self.linear(g, h, &p("wq"))?;
        let k = self.linear(g, h, &p("wk"))?;
        let v = self.linear(g, h, &p("wv"))?;
        let positions: Vec<usize> = (0..n).collect();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let qh = g.slice_cols(q, head * hd, hd)?;
            let qh = self.norm(g, cfg, qh, &p("q_norm"))?;
            let qh = g.rope(qh, positions.clone(), cfg.rope_base)?;
            let kh = g.slice_cols(k, head * hd, hd)?;
            let kh = self.norm(g, cfg, kh, &p("k_norm"))?;
            let kh = g.rope(kh, positions.clone(), cfg.rope_base)?;
            let vh = g.slice_cols(v, head * hd, hd)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let probs = g.masked_softmax(scores, scale, keep)?;
            heads.push(g.matmul(probs, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        self.linear(g, cat, &p("wo"))
    }

    /// Logits `n × vocab`. `key_valid` marks padding keys that no query may attend to.
    pub fn forward(
        &self,
        g: &mut Graph,
        cfg: &ModelConfig,
        input: &SequenceInput,
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        let mut x = self.embed(g, cfg, input)?;
        let n = input.len();
        if let Some(kv) = key_valid {
            if kv.len() != n {
                return Err(Error::Shape {
                    op: "forward",
                    lhs: vec![n],
                    rhs: vec![kv.len()],
                });
            }
        }
        let keep = causal_keep(n, key_valid);
        for l in 0..cfg.n_layers {
            let h = self.norm(g, cfg, x, &names::layer(l, "attn_norm"))?;
            let a = self.attention(g, cfg, l, h, &keep)?;
            x = g.add(x, a)?;
            let h = self.norm(g, cfg, x, &names::layer(l, "mlp_norm"))?;
            let up = self.linear(g, h, &names::layer(l, "mlp.up"))?;
            let act = g.relu_sq(up);
            let down = self.linear(g, act, &names::layer(l, "mlp.down"))?;
            x = g.add(x, down)?;
        }
        let x = self.norm(g, cfg, x, "final_norm")?;
        self.linear(g, x, names::OUTPUT_HEAD)
    }
}

/// Next-token loss: the logits at position `t-1` predict `labels[t]` for
/// every `t` with `mask[t]`. Mean over supervised positions.
pub fn sequence_loss(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    input: &SequenceInput,
    labels: &[u32],
    mask: &[bool],
    key_valid: Option<&[bool]>,
) -> Result<Var> {
    let n = input.len();
    if labels.len() != n || mask.len() != n {
        return Err(Error::Shape {
            op: "sequence_loss",
            lhs: vec![n],
            rhs: vec![labels.len(), mask.len()],
        });
    }
    if mask.first() == Some(&true) {
        return Err(Error::contract(
            "position 0 has no predecessor to supervise it",
        ));
    }
    let logits = bound.forward(g, cfg, input, key_valid)?;
    let mut targets = vec![0usize; n];
    let mut active = vec![false; n];
    for t in 1..n {
        targets[t - 1] = labels[t] as usize;
        active[t - 1] = mask[t];
    }
    g.cross_entropy(logits, targets, active)
}
