//! Low-rank adapters on the decoder's linear maps.
//!
//! For a stored weight `W` (`d_in × d_out`, applied as `x·W`) the adapted map
//! is `x·W + (alpha/r)·(x·Aᵀ)·Bᵀ` with `A: r × d_in` and `B: d_out × r`, i.e.
//! the usual `W + (alpha/r)·B·A` in the `W·x` convention.

use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    digest_tensors, read_archive, write_archive, Bound, LoraBinding, ModelConfig, ModelParams,
};
use crate::tensor::{ops, Graph, Tensor, Var};

pub const A_SUFFIX: &str = ".lora_a";
pub const B_SUFFIX: &str = ".lora_b";
pub const A_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

impl LoraConfig {
    /// r = 32, alpha = 32 over every linear map, optionally leaving out the
    /// patch projection.
    pub fn standard(model: &ModelConfig, include_patch_projection: bool) -> Self {
        Self {
            r: 32,
            alpha: 32.0,
            targets: default_targets(model, include_patch_projection),
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.r as f64
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.r == 0 {
            return Err(Error::config("LoRA rank must be >= 1"));
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(Error::config("LoRA alpha must be > 0"));
        }
        if self.targets.is_empty() {
            return Err(Error::config("LoRA needs at least one target"));
        }
        let valid: Vec<String> = model.linear_maps().into_iter().map(|(n, _, _)| n).collect();
        for t in &self.targets {
            if !valid.contains(t) {
                return Err(Error::config(format!(
                    "unknown LoRA target {t}; valid targets: {}",
                    valid.join(", ")
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.targets.iter().find(|t| !seen.insert(*t)) {
            return Err(Error::config(format!("LoRA target {dup} listed twice")));
        }
        Ok(())
    }

    /// `Σ r·(d_in + d_out)` over the targets.
    pub fn parameter_count(&self, model: &ModelConfig) -> usize {
        model
            .linear_maps()
            .into_iter()
            .filter(|(n, _, _)| self.targets.contains(n))
            .map(|(_, i, o)| self.r * (i + o))
            .sum()
    }
}

/// Attention projections, MLP linears and the output head, plus the patch
/// projection when asked.
pub fn default_targets(model: &ModelConfig, include_patch_projection: bool) -> Vec<String> {
    model
        .linear_maps()
        .into_iter()
        .map(|(n, _, _)| n)
        .filter(|n| include_patch_projection || n != crate::model::names::PATCH_WEIGHT)
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdapterMeta {
    lora: LoraConfig,
    base_digest: String,
}

/// Frozen base weights with trainable adapters.
#[derive(Debug, Clone)]
pub struct LoraModel {
    base: ModelParams,
    config: LoraConfig,
    /// `{target}.lora_a` and `{target}.lora_b`, interleaved per target.
    adapters: IndexMap<String, Tensor>,
    merged: bool,
}

impl LoraModel {
    /// A ~ N(0, 0.02), B = 0.
    pub fn attach<R: Rng + ?Sized>(
        base: ModelParams,
        config: LoraConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(base.config())?;
        let mut adapters = IndexMap::new();
        for (name, d_in, d_out) in base.config().linear_maps() {
            if !config.targets.contains(&name) {
                continue;
            }
            adapters.insert(
                format!("{name}{A_SUFFIX}"),
                Tensor::randn(&[config.r, d_in], A_INIT_STD, rng),
            );
            adapters.insert(
                format!("{name}{B_SUFFIX}"),
                Tensor::zeros(&[d_out, config.r]),
            );
        }
        Ok(Self {
            base,
            config,
            adapters,
            merged: false,
        })
    }

    pub fn base(&self) -> &ModelParams {
        &self.base
    }

    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn adapters(&self) -> &IndexMap<String, Tensor> {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut IndexMap<String, Tensor> {
        &mut self.adapters
    }

    pub fn trainable_count(&self) -> usize {
        self.adapters.values().map(Tensor::numel).sum()
    }

    pub fn base_digest(&self) -> String {
        self.base.digest()
    }

    /// Base weights as constants, adapters as parameters.
    pub fn bind(&self, g: &mut Graph) -> (Bound, IndexMap<String, Var>) {
        let mut bound = Bound::bind(g, &self.base, false);
        let vars: IndexMap<String, Var> = self
            .adapters
            .iter()
            .map(|(n, t)| (n.clone(), g.param(t.clone())))
            .collect();
        self.attach_vars(&mut bound, &vars);
        (bound, vars)
    }

    /// Attaches adapter variables (named as in [`Self::adapters`]) to `bound`.
    pub fn attach_vars(&self, bound: &mut Bound, vars: &IndexMap<String, Var>) {
        for target in &self.config.targets {
            bound.attach_lora(
                target,
                LoraBinding {
                    a: vars[&format!("{target}{A_SUFFIX}")],
                    b: vars[&format!("{target}{B_SUFFIX}")],
                    scale: self.config.scale(),
                },
            );
        }
    }

    /// `(alpha/r)·(B·A)ᵀ`, the weight update of one target in storage layout.
    pub fn delta(&self, target: &str) -> Result<Tensor> {
        let get = |suffix: &str| {
            self.adapters
                .get(&format!("{target}{suffix}"))
                .ok_or_else(|| Error::contract(format!("{target} is not a LoRA target")))
        };
        let (a, b) = (get(A_SUFFIX)?, get(B_SUFFIX)?);
        let ab = ops::matmul(&ops::transpose(a)?, &ops::transpose(b)?)?;
        Ok(ops::scale(&ab, self.config.scale()))
    }

    /// `W + delta` for every target, leaving the handle untouched.
    pub fn merged_params(&self) -> Result<ModelParams> {
        let mut out = self.base.clone();
        for target in &self.config.targets {
            let delta = self.delta(target)?;
            let w = out.get_mut(target)?;
            for (x, d) in w.data_mut().iter_mut().zip(delta.data()) {
                *x += d;
            }
        }
        Ok(out)
    }

    /// Materialises the merged weights. Allowed once per handle.
    pub fn merge(&mut self) -> Result<ModelParams> {
        if self.merged {
            return Err(Error::contract(
                "adapters were already merged from this handle",
            ));
        }
        let out = self.merged_params()?;
        self.merged = true;
        Ok(out)
    }

    pub fn save_adapters(&self, path: &Path) -> Result<()> {
        let meta = AdapterMeta {
            lora: self.config.clone(),
            base_digest: self.base_digest(),
        };
        write_archive(
            path,
            &serde_json::to_string(&meta).expect("meta serializes"),
            &self.adapters,
        )
    }

    /// Loads adapters saved by [`Self::save_adapters`] onto the base they were trained on.
    pub fn load_adapters(base: ModelParams, path: &Path) -> Result<Self> {
        let archive = read_archive(path)?;
        let meta: AdapterMeta = serde_json::from_str(&archive.meta_json)
            .map_err(|e| Error::Format(format!("adapter header: {e}")))?;
        let digest = base.digest();
        if meta.base_digest != digest {
            return Err(Error::contract(format!(
                "adapters were trained on base {} but this base is {digest}",
                meta.base_digest
            )));
        }
        // every adapter is overwritten below, so the init draw is irrelevant
        let mut shell = Self::attach(base, meta.lora, &mut ChaCha8Rng::seed_from_u64(0))?;
        for (name, t) in shell.adapters.iter_mut() {
            let loaded = archive
                .tensors
                .get(name)
                .ok_or_else(|| Error::contract(format!("adapter file lacks {name}")))?;
            if loaded.shape() != t.shape() {
                return Err(Error::contract(format!(
                    "adapter {name}: expected shape {:?}, found {:?}",
                    t.shape(),
                    loaded.shape()
                )));
            }
            *t = loaded.clone();
        }
        if archive.tensors.len() != shell.adapters.len() {
            return Err(Error::contract("adapter file has unexpected tensors"));
        }
        Ok(shell)
    }
}

/// Digest of the adapter tensors.
pub fn adapter_digest(model: &LoraModel) -> String {
    digest_tensors(&model.adapters)
}
