use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::rng::{self, Purpose};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorkloadKind {
    /// Uniform random tokens.
    RandomTokens,
    /// Random filler followed by `repeats` copies of one random segment.
    RepeatedSegments { segment_len: usize, repeats: usize },
    /// Random haystack with a needle placed inside it and repeated at the end.
    NeedleInHaystack { needle_len: usize },
}

/// A reproducible set of prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Workload {
    pub kind: WorkloadKind,
    pub prompt_len: usize,
    pub n_prompts: usize,
    pub seed: u64,
}

impl Default for Workload {
    fn default() -> Self {
        Self {
            kind: WorkloadKind::RepeatedSegments { segment_len: 16, repeats: 4 },
            prompt_len: 96,
            n_prompts: 4,
            seed: 0,
        }
    }
}

impl Workload {
    pub fn validate(&self, config: &ModelConfig, max_new_tokens: usize) -> Result<()> {
        if self.prompt_len == 0 || self.n_prompts == 0 {
            return Err(Error::InvalidParam("workload needs at least one non-empty prompt".into()));
        }
        if self.prompt_len + max_new_tokens >= config.max_context {
            return Err(Error::InvalidParam(format!(
                "prompt_len {} + max_new_tokens {max_new_tokens} must stay below max_context {}",
                self.prompt_len, config.max_context
            )));
        }
        match self.kind {
            WorkloadKind::RandomTokens => {}
            WorkloadKind::RepeatedSegments { segment_len, repeats } => {
                if segment_len == 0 || repeats == 0 || segment_len * repeats > self.prompt_len {
                    return Err(Error::InvalidParam(format!(
                        "{repeats} repeats of {segment_len} tokens do not fit a {}-token prompt",
                        self.prompt_len
                    )));
                }
            }
            WorkloadKind::NeedleInHaystack { needle_len } => {
                if needle_len == 0 || 2 * needle_len > self.prompt_len {
                    return Err(Error::InvalidParam(format!(
                        "needle of {needle_len} tokens needs a prompt of at least {}",
                        2 * needle_len
                    )));
                }
            }
        }
        Ok(())
    }

    /// Prompt `i` depends only on `(seed, i)`.
    pub fn prompt(&self, i: usize, vocab_size: usize) -> Vec<u32> {
        let mut r = rng::stream(self.seed, Purpose::Workload, i as u64, 0);
        let vocab = vocab_size as u32;
        let mut draw = |n: usize| -> Vec<u32> { (0..n).map(|_| r.random_range(0..vocab)).collect() };
        match self.kind {
            WorkloadKind::RandomTokens => draw(self.prompt_len),
            WorkloadKind::RepeatedSegments { segment_len, repeats } => {
                let mut p = draw(self.prompt_len - segment_len * repeats);
                let seg = draw(segment_len);
                for _ in 0..repeats {
                    p.extend_from_slice(&seg);
                }
                p
            }
            WorkloadKind::NeedleInHaystack { needle_len } => {
                let mut p = draw(self.prompt_len - needle_len);
                let needle = draw(needle_len);
                let at = r.random_range(0..=p.len() - needle_len);
                p[at..at + needle_len].copy_from_slice(&needle);
                p.extend_from_slice(&needle);
                p
            }
        }
    }

    pub fn prompts(&self, vocab_size: usize) -> Vec<Vec<u32>> {
        (0..self.n_prompts).map(|i| self.prompt(i, vocab_size)).collect()
    }
}
