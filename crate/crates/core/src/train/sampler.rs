use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How pool indices are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// A fresh permutation of the pool every epoch.
    #[default]
    EpochShuffle,
    /// Independent uniform draws.
    WithReplacement,
}

/// Uniform draws over an aggregated pool of `pool_size` pairs.
#[derive(Debug, Clone)]
pub struct Sampler {
    pool_size: usize,
    batch_size: usize,
    mode: Sampling,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(
        pool_size: usize,
        batch_size: usize,
        mode: Sampling,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        if pool_size == 0 {
            return Err(Error::config("cannot sample from an empty pool"));
        }
        if batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        Ok(Self {
            pool_size,
            batch_size,
            mode,
            rng,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.pool_size.div_ceil(self.batch_size)
    }

    /// Index batches for one epoch; the last batch may be short.
    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        match self.mode {
            Sampling::EpochShuffle => {
                let mut order: Vec<usize> = (0..self.pool_size).collect();
                order.shuffle(&mut self.rng);
                order
                    .chunks(self.batch_size)
                    .map(<[usize]>::to_vec)
                    .collect()
            }
            Sampling::WithReplacement => (0..self.steps_per_epoch())
                .map(|_| self.sample_batch())
                .collect(),
        }
    }

    /// `batch_size` independent uniform indices.
    pub fn sample_batch(&mut self) -> Vec<usize> {
        (0..self.batch_size)
            .map(|_| self.rng.random_range(0..self.pool_size))
            .collect()
    }
}
