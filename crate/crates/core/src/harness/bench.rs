use serde::{Deserialize, Serialize};

use crate::harness::Workload;
use crate::model::Model;
use crate::speculation::{generate, DecodeParams, IterationStats};
use crate::Result;

/// Bins of the rejected-draft acceptance-probability histogram over `[0, 1]`.
pub const REJECTED_BINS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub prompt_index: usize,
    pub seed: u64,
    pub tokens: Vec<u32>,
    pub stats: Vec<IterationStats>,
}

/// Aggregates derived from a stream of [`IterationStats`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub iterations: usize,
    /// Accepted drafts per iteration, bonus or corrected token excluded.
    pub mean_accepted: f64,
    /// Tokens emitted per iteration, bonus or corrected token included.
    pub mean_emitted: f64,
    /// Entry `t` is the acceptance rate of draft `t + 1` given that drafts
    /// before it were accepted.
    pub per_position_acceptance: Vec<f64>,
    pub per_position_trials: Vec<usize>,
    pub rejected_accept_prob_histogram: Vec<usize>,
    pub mean_prefix_len: f64,
    pub mean_k: f64,
    pub mean_retention: Option<f64>,
    pub draft_kv_bytes: u64,
    pub verify_kv_bytes: u64,
    pub selection_bytes: u64,
}

/// Pure reduction over raw stats; reports keep no other state.
pub fn aggregate(stats: &[IterationStats]) -> Summary {
    let n = stats.len();
    let per = |f: &dyn Fn(&IterationStats) -> f64| if n == 0 { 0.0 } else { stats.iter().map(f).sum::<f64>() / n as f64 };
    let max_gamma = stats.iter().map(|s| s.gamma).max().unwrap_or(0);
    let mut hits = vec![0usize; max_gamma];
    let mut trials = vec![0usize; max_gamma];
    let mut hist = vec![0usize; REJECTED_BINS];
    for s in stats {
        for (t, &f) in s.accept_flags.iter().enumerate() {
            trials[t] += 1;
            hits[t] += f as usize;
        }
        if let Some(p) = s.rejected_accept_prob {
            hist[((p * REJECTED_BINS as f64) as usize).min(REJECTED_BINS - 1)] += 1;
        }
    }
    let retentions: Vec<f64> = stats.iter().filter_map(|s| s.retention).collect();
    Summary {
        iterations: n,
        mean_accepted: per(&|s| s.accepted as f64),
        mean_emitted: per(&|s| s.emitted.len() as f64),
        per_position_acceptance: hits
            .iter()
            .zip(&trials)
            .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
            .collect(),
        per_position_trials: trials,
        rejected_accept_prob_histogram: hist,
        mean_prefix_len: per(&|s| s.prefix_len as f64),
        mean_k: per(&|s| s.mean_k),
        mean_retention: (!retentions.is_empty()).then(|| retentions.iter().sum::<f64>() / retentions.len() as f64),
        draft_kv_bytes: stats.iter().map(|s| s.draft_kv_bytes).sum(),
        verify_kv_bytes: stats.iter().map(|s| s.verify_kv_bytes).sum(),
        selection_bytes: stats.iter().map(|s| s.selection_bytes).sum(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub params: DecodeParams,
    pub summary: Summary,
    pub runs: Vec<RunRecord>,
}

impl Benchmark {
    pub fn stats(&self) -> impl Iterator<Item = &IterationStats> {
        self.runs.iter().flat_map(|r| r.stats.iter())
    }
}

/// Generates every workload prompt; prompt `i` uses seed `params.seed + i`.
pub fn run_benchmark(model: &Model, workload: &Workload, params: &DecodeParams) -> Result<Benchmark> {
    workload.validate(model.config(), params.max_new_tokens)?;
    let mut runs = Vec::with_capacity(workload.n_prompts);
    for (i, prompt) in workload.prompts(model.config().vocab_size).into_iter().enumerate() {
        let seed = params.seed.wrapping_add(i as u64);
        let g = generate(model, &prompt, &DecodeParams { seed, ..params.clone() })?;
        runs.push(RunRecord { prompt_index: i, seed, tokens: g.tokens, stats: g.stats });
    }
    let all: Vec<IterationStats> = runs.iter().flat_map(|r| r.stats.iter().cloned()).collect();
    Ok(Benchmark { params: params.clone(), summary: aggregate(&all), runs })
}
