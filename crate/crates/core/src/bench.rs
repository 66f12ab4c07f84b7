//! Tokens-per-second measurement over a fixed wall-clock window, and
//! agreement checks between attention implementations.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instruct::SpecialTokens;
use crate::model::{logits, AttentionKernel, ModelParams, SequenceInput};
use crate::patch::{patchify, token_budget, RawImage, ResizePolicy, PATCH_DIM};

pub const MIN_WINDOW: Duration = Duration::from_secs(1);
pub const DEFAULT_WINDOW: Duration = Duration::from_secs(60);
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-9;

/// Synthetic square images with a fixed amount of trailing text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub resolution: usize,
    pub batch: usize,
    pub text_len: usize,
}

impl Workload {
    /// Image tokens, row newlines and text for one sample.
    pub fn sample_tokens(&self) -> Result<usize> {
        Ok(token_budget(self.resolution, self.resolution)?.total() + self.text_len)
    }

    pub fn batch_tokens(&self) -> Result<usize> {
        Ok(self.batch * self.sample_tokens()?)
    }

    /// Seeded sequences matching the token count exactly.
    pub fn build(&self, specials: &SpecialTokens, seed: u64) -> Result<Vec<SequenceInput>> {
        if self.batch == 0 {
            return Err(Error::config("bench batch must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = ResizePolicy::Fixed(self.resolution);
        policy.validate()?;
        let expected = self.sample_tokens()?;
        (0..self.batch)
            .map(|_| {
                let n = self.resolution * self.resolution * 3;
                let bytes: Vec<u8> = (0..n).map(|_| rng.random()).collect();
                let img = RawImage::from_rgb8(self.resolution, self.resolution, &bytes)?;
                let grid = patchify(&img, &policy, &mut rng)?;
                let mut seq = SequenceInput::new();
                seq.extend_with_grid(&grid, specials.newline);
                let text: Vec<u32> = (0..self.text_len)
                    .map(|_| rng.random_range(32..127))
                    .collect();
                seq.extend_tokens(&text);
                debug_assert_eq!(seq.len(), expected);
                Ok(seq)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    /// Mean over measured batches of tokens / batch wall time.
    pub tokens_per_second: f64,
    pub window_secs: f64,
    pub batches_measured: usize,
    /// Batches whose measured duration was zero; excluded from the mean.
    pub zero_duration_batches: usize,
    pub tokens_per_batch: usize,
    pub workload: Option<Workload>,
    pub kernel: Option<AttentionKernel>,
}

/// Mean of per-batch rates from `(tokens, duration)` pairs.
pub fn summarize(batches: &[(usize, Duration)], window: Duration) -> Result<ThroughputReport> {
    let mut rates = Vec::with_capacity(batches.len());
    let mut zero = 0;
    for &(tokens, d) in batches {
        if d.is_zero() {
            zero += 1;
        } else {
            rates.push(tokens as f64 / d.as_secs_f64());
        }
    }
    if rates.is_empty() {
        return Err(Error::contract(format!(
            "no batch completed within the {:.3}s window ({zero} zero-duration)",
            window.as_secs_f64()
        )));
    }
    Ok(ThroughputReport {
        tokens_per_second: rates.iter().sum::<f64>() / rates.len() as f64,
        window_secs: window.as_secs_f64(),
        batches_measured: rates.len(),
        zero_duration_batches: zero,
        tokens_per_batch: batches[0].0,
        workload: None,
        kernel: None,
    })
}

/// Runs `run_batch` back to back for `window`. A batch still running when
/// the window closes is not counted.
pub fn measure_window<F>(
    window: Duration,
    tokens_per_batch: usize,
    mut run_batch: F,
) -> Result<ThroughputReport>
where
    F: FnMut() -> Result<()>,
{
    if window < MIN_WINDOW {
        return Err(Error::config(format!(
            "bench window must be at least {}s",
            MIN_WINDOW.as_secs()
        )));
    }
    let start = Instant::now();
    let mut batches = Vec::new();
    while start.elapsed() < window {
        let t0 = Instant::now();
        run_batch()?;
        if start.elapsed() > window {
            break;
        }
        batches.push((tokens_per_batch, t0.elapsed()));
    }
    summarize(&batches, window)
}

/// Forward passes over a synthetic batch, single-threaded. One warmup
/// batch runs before the window opens.
pub fn measure_throughput(
    params: &ModelParams,
    workload: Workload,
    window: Duration,
    kernel: AttentionKernel,
    seed: u64,
) -> Result<ThroughputReport> {
    let specials = SpecialTokens::for_vocab(params.config().vocab)?;
    let batch = workload.build(&specials, seed)?;
    let tokens: usize = batch.iter().map(SequenceInput::len).sum();
    if tokens != workload.batch_tokens()? {
        return Err(Error::contract(format!(
            "batch holds {tokens} tokens, budget says {}",
            workload.batch_tokens()?
        )));
    }
    let run = || -> Result<()> {
        for seq in &batch {
            logits(params, seq, kernel, None)?;
        }
        Ok(())
    };
    run()?;
    let mut report = measure_window(window, tokens, run)?;
    report.workload = Some(workload);
    report.kernel = Some(kernel);
    Ok(report)
}

/// True when no rate exceeds its lower-resolution predecessor by more than
/// the relative `slack`.
pub fn is_non_increasing(rates: &[f64], slack: f64) -> bool {
    rates.windows(2).all(|w| w[1] <= w[0] * (1.0 + slack))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub cases: usize,
    pub max_abs_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Random patch/token sequence of length `len`.
pub fn random_mixed_sequence<R: Rng + ?Sized>(
    len: usize,
    vocab: usize,
    rng: &mut R,
) -> SequenceInput {
    let mut s = SequenceInput::new();
    for _ in 0..len {
        if rng.random_bool(0.5) {
            s.push_patch(
                (0..PATCH_DIM)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            );
        } else {
            s.extend_tokens(&[rng.random_range(0..vocab as u32)]);
        }
    }
    s
}

/// Max |logit difference| between two kernels on random mixed sequences.
pub fn verify_equivalence(
    params: &ModelParams,
    reference: AttentionKernel,
    optimized: AttentionKernel,
    cases: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    let cfg = params.config();
    if cfg.patch_dim != PATCH_DIM {
        return Err(Error::config(
            "equivalence cases need the image patch width",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let len = rng.random_range(2..=48.min(cfg.max_seq));
        let seq = random_mixed_sequence(len, cfg.vocab, &mut rng);
        let a = logits(params, &seq, reference, None)?;
        let b = logits(params, &seq, optimized, None)?;
        if a.shape() != b.shape() {
            return Err(Error::Shape {
                op: "verify_equivalence",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        for (x, y) in a.data().iter().zip(b.data()) {
            let d = (x - y).abs();
            // NaN counts as failure
            worst = if d.is_nan() {
                f64::INFINITY
            } else {
                worst.max(d)
            };
        }
    }
    Ok(EquivalenceReport {
        cases,
        max_abs_deviation: worst,
        tolerance: EQUIVALENCE_TOLERANCE,
        passed: worst < EQUIVALENCE_TOLERANCE,
    })
}
