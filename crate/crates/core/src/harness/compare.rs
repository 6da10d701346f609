use serde::{Deserialize, Serialize};

use crate::attention::LogitMatrix;
use crate::harness::bench::{run_benchmark, Benchmark};
use crate::harness::cost::{modeled_throughput, HardwareModel};
use crate::harness::Workload;
use crate::model::Model;
use crate::selection::{overlap_ratio, score_columns, topk_indices, Strategy};
use crate::speculation::{DecodeParams, Session};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub selector: Strategy,
    pub gamma: usize,
    pub sparse_ratio: f64,
    pub iterations: usize,
    pub mean_accepted: f64,
    pub mean_emitted: f64,
    pub per_position_acceptance: Vec<f64>,
    /// Selection traffic over attended KV traffic.
    pub selection_overhead_fraction: f64,
    /// Mean fraction of one iteration's selection kept by the next.
    pub mean_retention: Option<f64>,
    pub throughput: f64,
}

/// Runs the same workload under each parameter set. All sets must share gamma.
pub fn compare_selectors(
    model: &Model,
    workload: &Workload,
    params: &[DecodeParams],
    hw: &HardwareModel,
    context: Option<f64>,
) -> Result<(Vec<CompareRow>, Vec<Benchmark>)> {
    let gamma = params.first().ok_or_else(|| Error::InvalidParam("no selectors to compare".into()))?.gamma;
    if params.iter().any(|p| p.gamma != gamma) {
        return Err(Error::InvalidParam("compared selectors must share gamma".into()));
    }
    let mut rows = Vec::with_capacity(params.len());
    let mut benches = Vec::with_capacity(params.len());
    for p in params {
        let b = run_benchmark(model, workload, p)?;
        let s = &b.summary;
        let kv = (s.draft_kv_bytes + s.verify_kv_bytes) as f64;
        let ctx = context.unwrap_or(s.mean_prefix_len);
        rows.push(CompareRow {
            selector: p.selector.strategy,
            gamma,
            sparse_ratio: p.selector.sparse_ratio,
            iterations: s.iterations,
            mean_accepted: s.mean_accepted,
            mean_emitted: s.mean_emitted,
            per_position_acceptance: s.per_position_acceptance.clone(),
            selection_overhead_fraction: if kv > 0.0 { s.selection_bytes as f64 / kv } else { 0.0 },
            mean_retention: s.mean_retention,
            throughput: modeled_throughput(hw, ctx, p.selector.sparse_ratio, gamma, s.mean_emitted),
        });
        benches.push(b);
    }
    Ok((rows, benches))
}

/// Single-row top-`k` sets of every row of `m`, with `k` capped at the
/// column count.
pub fn row_topk(m: &LogitMatrix, k: usize) -> Result<Vec<Vec<usize>>> {
    (0..m.rows).map(|r| topk_indices(&score_columns(m, &[r])?, k.min(m.cols))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub gamma: usize,
    pub k: usize,
    /// `mean[t][u]`: mean overlap of the top-k sets of verification rows
    /// `t` and `u` over layers and iterations.
    pub mean: Vec<Vec<f64>>,
    pub samples: usize,
    /// Mean of `mean[t][u]` over pairs with `|t - u| = d`.
    pub by_distance: Vec<f64>,
    /// Per sample, the row sets it was computed from (layer, iteration order).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub row_sets: Vec<Vec<Vec<usize>>>,
}

/// Pairwise overlap of per-row selections as a function of row distance.
/// Drafting uses the all-rows selector so every row is collected.
pub fn overlap_by_distance(
    model: &Model,
    workload: &Workload,
    params: &DecodeParams,
    k: usize,
    keep_sets: bool,
) -> Result<OverlapReport> {
    if k == 0 {
        return Err(Error::InvalidParam("k must be positive".into()));
    }
    workload.validate(model.config(), params.max_new_tokens)?;
    let mut params = params.clone();
    params.selector.strategy = Strategy::AllDraft;
    let n = params.gamma + 1;
    let mut sum = vec![vec![0.0; n]; n];
    let mut samples = 0usize;
    let mut row_sets = Vec::new();
    let dense = model.config().dense_layers();
    for (i, prompt) in workload.prompts(model.config().vocab_size).into_iter().enumerate() {
        let mut s = Session::start(model, &prompt, DecodeParams { seed: params.seed.wrapping_add(i as u64), ..params.clone() })?;
        while s.generated().len() < params.max_new_tokens {
            let (_, _, outcome) = s.step_detailed()?;
            let Some(mats) = outcome.collected else { continue };
            for &l in &dense {
                let m = &mats[l];
                if m.rows != n || m.cols == 0 {
                    continue;
                }
                let sets = row_topk(m, k)?;
                if sets.iter().any(|s| s.len() != sets[0].len() || s.is_empty()) {
                    continue;
                }
                for t in 0..n {
                    for u in 0..n {
                        sum[t][u] += overlap_ratio(&sets[t], &sets[u])?;
                    }
                }
                samples += 1;
                if keep_sets {
                    row_sets.push(sets);
                }
            }
        }
    }
    if samples == 0 {
        return Err(Error::InvalidParam("no iteration produced a full logit matrix".into()));
    }
    let mean: Vec<Vec<f64>> = sum.iter().map(|r| r.iter().map(|v| v / samples as f64).collect()).collect();
    Ok(OverlapReport { gamma: params.gamma, k, by_distance: by_distance(&mean), mean, samples, row_sets })
}

/// Averages a square matrix along its diagonals.
pub fn by_distance(mean: &[Vec<f64>]) -> Vec<f64> {
    let n = mean.len();
    (0..n)
        .map(|d| {
            let vals: Vec<f64> = (0..n - d).flat_map(|t| [mean[t][t + d], mean[t + d][t]]).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_average() {
        let m = vec![vec![1.0, 0.5, 0.2], vec![0.5, 1.0, 0.4], vec![0.2, 0.4, 1.0]];
        let d = by_distance(&m);
        assert_eq!(d[0], 1.0);
        assert!((d[1] - 0.45).abs() < 1e-12);
        assert_eq!(d[2], 0.2);
    }

    #[test]
    fn row_topk_caps_k() {
        let mut m = LogitMatrix::new(0, 1, vec![1, 2], 3, 1.0);
        m.row_mut(0, 0).copy_from_slice(&[3.0, 1.0, 2.0]);
        m.row_mut(0, 1).copy_from_slice(&[0.0, 5.0, 1.0]);
        assert_eq!(row_topk(&m, 2).unwrap(), vec![vec![0, 2], vec![1, 2]]);
        assert_eq!(row_topk(&m, 9).unwrap()[0], vec![0, 1, 2]);
    }
}
