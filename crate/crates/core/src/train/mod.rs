//! Instruction tuning: mixture sampling, AdamW with a warmup-cosine
//! schedule, full-parameter or adapter-only updates, checkpoints.

pub mod manifest;
pub mod optim;
pub mod sampler;
pub mod toy;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instruct::{
    build_prompt, build_sample, collate_batch, detokenize, InstructionSample, SpecialTokens,
    TokenizedSample,
};
use crate::lora::{LoraConfig, LoraModel};
use crate::model::{
    decode_greedy, logits, sequence_loss, AttentionKernel, Bound, ModelConfig, ModelParams,
};
use crate::patch::ResizePolicy;
use crate::tensor::{ops, Graph, Tensor, Var};

pub use manifest::{ManifestEntry, MixtureManifest};
pub use optim::{lr_at, warmup_steps, AdamW, AdamWConfig};
pub use sampler::{Sampler, Sampling};

/// Independent ChaCha streams derived from one seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const SAMPLER: u64 = 1;
    pub const RESOLUTION: u64 = 2;
    pub const ADAPTER_INIT: u64 = 3;
    pub const EVAL: u64 = 4;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainMode {
    Full,
    Lora(LoraConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub resolution: ResizePolicy,
    pub mode: TrainMode,
    pub seed: u64,
    /// Micro-batches per optimizer step.
    #[serde(default = "default_one")]
    pub grad_accum: usize,
    #[serde(default)]
    pub sampling: Sampling,
    /// Batches built ahead of the step loop.
    #[serde(default = "default_prefetch")]
    pub prefetch: usize,
}

fn default_one() -> usize {
    1
}

fn default_prefetch() -> usize {
    2
}

impl TrainConfig {
    /// Batch 64, 3 epochs, lr 1e-5, decay 0.1, warmup 0.03.
    pub fn standard_full() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-5,
            weight_decay: 0.1,
            warmup_ratio: 0.03,
            epochs: 3,
            resolution: ResizePolicy::Fixed(512),
            mode: TrainMode::Full,
            seed: 0,
            grad_accum: 64,
            sampling: Sampling::EpochShuffle,
            prefetch: 2,
        }
    }

    /// Batch 128, 6 epochs, r = 32, alpha = 32.
    pub fn standard_lora(model: &ModelConfig) -> Self {
        Self {
            batch_size: 128,
            epochs: 6,
            grad_accum: 128,
            mode: TrainMode::Lora(LoraConfig::standard(model, true)),
            ..Self::standard_full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::config("lr must be > 0"));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::config("warmup_ratio must lie in [0, 1)"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.grad_accum == 0 || self.grad_accum > self.batch_size {
            return Err(Error::config("grad_accum must lie in 1..=batch_size"));
        }
        self.resolution.validate()
    }

    /// `epochs · ceil(pool / batch)`.
    pub fn total_steps(&self, pool: usize) -> usize {
        self.epochs * pool.div_ceil(self.batch_size)
    }

    pub fn micro_batch(&self) -> usize {
        self.batch_size.div_ceil(self.grad_accum)
    }
}

/// The model being trained and which of its tensors move.
#[derive(Debug, Clone)]
pub enum Trainable {
    Full(ModelParams),
    Lora(LoraModel),
}

impl Trainable {
    pub fn model_config(&self) -> &ModelConfig {
        match self {
            Trainable::Full(p) => p.config(),
            Trainable::Lora(m) => m.base().config(),
        }
    }

    /// Weights for eager inference; adapters are merged into a copy.
    pub fn inference_params(&self) -> Result<ModelParams> {
        match self {
            Trainable::Full(p) => Ok(p.clone()),
            Trainable::Lora(m) => m.merged_params(),
        }
    }

    pub fn trainable_count(&self) -> usize {
        match self {
            Trainable::Full(p) => p.numel(),
            Trainable::Lora(m) => m.trainable_count(),
        }
    }

    /// Binds into `g`, returning the trainable variables by name.
    pub fn bind(&self, g: &mut Graph) -> (Bound, IndexMap<String, Var>) {
        match self {
            Trainable::Full(p) => {
                let b = Bound::bind(g, p, true);
                let vars = b.vars().clone();
                (b, vars)
            }
            Trainable::Lora(m) => m.bind(g),
        }
    }

    fn trainable_mut(&mut self) -> Box<dyn Iterator<Item = (&String, &mut Tensor)> + '_> {
        match self {
            Trainable::Full(p) => Box::new(p.iter_mut()),
            Trainable::Lora(m) => Box::new(m.adapters_mut().iter_mut()),
        }
    }
}

/// Mean over samples of each sample's mean answer loss, and its gradient
/// with respect to the trainable tensors. Samples are processed in padded
/// micro-batches of `micro` and their gradients summed.
pub fn batch_gradients(
    model: &Trainable,
    samples: &[TokenizedSample],
    micro: usize,
    pad: u32,
) -> Result<(f64, IndexMap<String, Tensor>)> {
    if samples.is_empty() || micro == 0 {
        return Err(Error::contract("need at least one sample and micro >= 1"));
    }
    let cfg = model.model_config();
    let weight = 1.0 / samples.len() as f64;
    let mut total = 0.0;
    let mut acc: IndexMap<String, Tensor> = IndexMap::new();
    for chunk in samples.chunks(micro) {
        let batch = collate_batch(chunk, pad)?;
        let mut g = Graph::new();
        let (bound, vars) = model.bind(&mut g);
        let mut sum: Option<Var> = None;
        for i in 0..chunk.len() {
            let kv = (batch.lengths[i] < batch.width).then(|| batch.key_valid[i].as_slice());
            let l = sequence_loss(
                &mut g,
                &bound,
                cfg,
                &batch.sequences[i],
                &batch.labels[i],
                &batch.loss_mask[i],
                kv,
            )?;
            sum = Some(match sum {
                None => l,
                Some(s) => g.add(s, l)?,
            });
        }
        let loss = g.scale(sum.expect("non-empty chunk"), weight);
        total += g.value(loss).data()[0];
        let grads = g.backward(loss)?;
        for (name, &v) in &vars {
            let gt = grads.wrt(v);
            match acc.get_mut(name) {
                Some(a) => {
                    for (x, y) in a.data_mut().iter_mut().zip(gt.data()) {
                        *x += y;
                    }
                }
                None => {
                    acc.insert(name.clone(), gt.clone());
                }
            }
        }
    }
    Ok((total, acc))
}

/// Loss of one sample from the eager forward.
pub fn sample_loss(params: &ModelParams, sample: &TokenizedSample) -> Result<f64> {
    let l = logits(params, &sample.sequence, AttentionKernel::Naive, None)?;
    let v = l.last_dim();
    let (mut total, mut count) = (0.0, 0usize);
    for t in 1..sample.sequence.len() {
        if !sample.loss_mask[t] {
            continue;
        }
        let row = l.row(t - 1);
        total += ops::log_sum_exp(row) - row[sample.labels[t] as usize % v];
        count += 1;
    }
    if count == 0 {
        return Err(Error::contract("sample has no supervised positions"));
    }
    Ok(total / count as f64)
}

/// Mean of per-sample losses.
pub fn dataset_loss(params: &ModelParams, samples: &[TokenizedSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("no samples"));
    }
    let mut sum = 0.0;
    for s in samples {
        sum += sample_loss(params, s)?;
    }
    Ok(sum / samples.len() as f64)
}

/// Greedy answer text for an instruction about an image, EOS stripped.
pub fn greedy_answer<R: Rng + ?Sized>(
    params: &ModelParams,
    sample: &InstructionSample,
    policy: &ResizePolicy,
    specials: &SpecialTokens,
    max_new: usize,
    rng: &mut R,
) -> Result<String> {
    let image = sample.image.load()?;
    let prompt = build_prompt(&image, &sample.instruction, policy, specials, rng)?;
    let mut ids = decode_greedy(
        params,
        &prompt,
        max_new,
        specials.eos,
        AttentionKernel::Naive,
    )?;
    if ids.last() == Some(&specials.eos) {
        ids.pop();
    }
    Ok(detokenize(&ids))
}

/// Samples whose greedy answer equals the reference exactly.
pub fn answer_accuracy(
    params: &ModelParams,
    pool: &[InstructionSample],
    policy: &ResizePolicy,
    specials: &SpecialTokens,
    seed: u64,
) -> Result<usize> {
    let mut rng = stream_rng(seed, streams::EVAL);
    let mut correct = 0;
    for s in pool {
        let budget = s.answer.len() + 1;
        if greedy_answer(params, s, policy, specials, budget, &mut rng)? == s.answer {
            correct += 1;
        }
    }
    Ok(correct)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Resized `(width, height)` of each sample in the batch.
    pub resolutions: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub total_steps: usize,
    pub trainable_params: usize,
    pub base_digest_before: Option<String>,
    pub base_digest_after: Option<String>,
    pub checkpoints: Vec<PathBuf>,
    pub elapsed_secs: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

fn loss_csv(steps: &[StepLog]) -> String {
    let mut out = String::from("step,lr,loss,resolution\n");
    for s in steps {
        let res: Vec<String> = s
            .resolutions
            .iter()
            .map(|(w, h)| format!("{w}x{h}"))
            .collect();
        let _ = writeln!(
            out,
            "{},{:e},{:.17e},{}",
            s.step,
            s.lr,
            s.loss,
            res.join(";")
        );
    }
    out
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub const MODEL_FILE: &str = "model.ckpt";
pub const BASE_FILE: &str = "base.ckpt";
pub const ADAPTER_FILE: &str = "adapters.ckpt";
pub const LOSS_FILE: &str = "loss.csv";

/// Weights from a checkpoint file or a training output directory; adapter
/// runs are merged into their base.
pub fn load_inference_params(path: &Path) -> Result<ModelParams> {
    if !path.is_dir() {
        return ModelParams::load(path);
    }
    let full = path.join(MODEL_FILE);
    if full.exists() {
        return ModelParams::load(&full);
    }
    let (base, adapters) = (path.join(BASE_FILE), path.join(ADAPTER_FILE));
    if base.exists() && adapters.exists() {
        return LoraModel::load_adapters(ModelParams::load(&base)?, &adapters)?.merged_params();
    }
    Err(Error::Input {
        path: path.to_path_buf(),
        detail: format!("directory holds neither {MODEL_FILE} nor {BASE_FILE} with {ADAPTER_FILE}"),
    })
}

fn save_checkpoint(model: &Trainable, dir: &Path) -> Result<PathBuf> {
    match model {
        Trainable::Full(p) => {
            let path = dir.join(MODEL_FILE);
            p.save(&path)?;
            Ok(path)
        }
        Trainable::Lora(m) => {
            let path = dir.join(ADAPTER_FILE);
            m.save_adapters(&path)?;
            Ok(path)
        }
    }
}

/// Runs `cfg.epochs` passes over `pool`. With `out_dir`, the model (or the
/// adapters plus `base.ckpt` in LoRA mode) and `loss.csv` are rewritten
/// atomically after every epoch.
pub fn train(
    pool: &[InstructionSample],
    model: &mut Trainable,
    cfg: &TrainConfig,
    specials: &SpecialTokens,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let started = Instant::now();
    let mut sampler = Sampler::new(
        pool.len(),
        cfg.batch_size,
        cfg.sampling,
        stream_rng(cfg.seed, streams::SAMPLER),
    )?;
    let mut plan: Vec<(usize, Vec<usize>)> = Vec::new();
    for epoch in 0..cfg.epochs {
        plan.extend(sampler.epoch().into_iter().map(|b| (epoch, b)));
    }
    let total_steps = plan.len();
    debug_assert_eq!(total_steps, cfg.total_steps(pool.len()));

    let base_digest_before = match model {
        Trainable::Lora(m) => Some(m.base_digest()),
        Trainable::Full(_) => None,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if let Trainable::Lora(m) = model {
            m.base().save(&dir.join(BASE_FILE))?;
        }
    }

    let mut opt = AdamW::new(AdamWConfig::with_decay(cfg.weight_decay));
    let mut steps = Vec::with_capacity(total_steps);
    let mut checkpoints = Vec::new();
    let micro = cfg.micro_batch();

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Result<Vec<TokenizedSample>>>(cfg.prefetch.max(1));
        let plan_ref = &plan;
        scope.spawn(move || {
            let mut res_rng = stream_rng(cfg.seed, streams::RESOLUTION);
            for (_, batch) in plan_ref {
                let built: Result<Vec<TokenizedSample>> = batch
                    .iter()
                    .map(|&i| build_sample(&pool[i], &cfg.resolution, specials, &mut res_rng))
                    .collect();
                let failed = built.is_err();
                if tx.send(built).is_err() || failed {
                    return;
                }
            }
        });

        for (step, (epoch, _)) in plan.iter().enumerate() {
            let samples = rx
                .recv()
                .map_err(|_| Error::contract("sample producer stopped early"))??;
            let (loss, grads) = batch_gradients(model, &samples, micro, specials.pad)?;
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    op: "train",
                    detail: format!("loss {loss} at step {step}"),
                });
            }
            let lr = lr_at(step, total_steps, cfg.lr, cfg.warmup_ratio);
            opt.step(model.trainable_mut(), &grads, lr)?;
            log::debug!("step {step} lr {lr:.3e} loss {loss:.6}");
            steps.push(StepLog {
                step,
                epoch: *epoch,
                lr,
                loss,
                resolutions: samples.iter().map(|s| s.meta.resolution).collect(),
            });
            let epoch_done = plan.get(step + 1).is_none_or(|(e, _)| e != epoch);
            if epoch_done {
                log::info!("epoch {epoch} done at step {step}, loss {loss:.5}");
                if let Some(dir) = out_dir {
                    let path = save_checkpoint(model, dir)?;
                    write_atomic(&dir.join(LOSS_FILE), &loss_csv(&steps))?;
                    if !checkpoints.contains(&path) {
                        checkpoints.push(path);
                    }
                }
            }
        }
        Ok(())
    })?;

    let base_digest_after = match model {
        Trainable::Lora(m) => Some(m.base_digest()),
        Trainable::Full(_) => None,
    };
    if base_digest_before != base_digest_after {
        return Err(Error::contract(
            "base weights changed during adapter training",
        ));
    }
    Ok(TrainReport {
        steps,
        total_steps,
        trainable_params: model.trainable_count(),
        base_digest_before,
        base_digest_after,
        checkpoints,
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_presets() {
        let full = TrainConfig::standard_full();
        assert_eq!(
            (full.batch_size, full.epochs, full.lr, full.weight_decay),
            (64, 3, 1e-5, 0.1)
        );
        let lora = TrainConfig::standard_lora(&ModelConfig::toy());
        assert_eq!((lora.batch_size, lora.epochs), (128, 6));
        assert!(full.validate().is_ok() && lora.validate().is_ok());
        assert_eq!(full.total_steps(371_017), 3 * 5798);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            warmup_ratio: 1.0,
            ..TrainConfig::standard_full()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::standard_full()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_json_roundtrip() {
        let cfg = TrainConfig::standard_lora(&ModelConfig::toy());
        let back: TrainConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
