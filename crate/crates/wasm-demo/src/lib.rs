//! Browser bindings. Every export returns a JSON string; the plain functions
//! underneath are what the native tests exercise.

use serde::Serialize;
use verispec::harness::cost::{modeled_throughput, HardwareModel};
use verispec::harness::{overlap_by_distance, run_benchmark, Workload, WorkloadKind};
use verispec::model::{Model, ModelConfig};
use verispec::selection::{SelectorConfig, Strategy};
use verispec::speculation::DecodeParams;
use wasm_bindgen::prelude::*;

/// Expected tokens per iteration when each draft is accepted independently
/// with probability `alpha`: `sum_{i=0..gamma} alpha^i`.
pub fn expected_emitted(alpha: f64, gamma: usize) -> f64 {
    (0..=gamma).map(|i| alpha.powi(i as i32)).sum()
}

#[derive(Serialize)]
pub struct Heatmap {
    pub ratios: Vec<f64>,
    pub gammas: Vec<usize>,
    /// `throughput[g][r]` in tokens per second.
    pub throughput: Vec<Vec<f64>>,
    pub vanilla: f64,
}

/// Modeled throughput over a ratio x gamma grid for the large-model preset.
/// `alpha_at_full` is the per-draft acceptance at ratio 1; lower ratios
/// scale it by `ratio^decay`.
pub fn cost_heatmap(context: f64, alpha_at_full: f64, decay: f64, ratios: &[f64], gammas: &[usize]) -> Result<Heatmap, String> {
    if !(context > 0.0 && (0.0..=1.0).contains(&alpha_at_full) && decay >= 0.0) {
        return Err("context must be positive, alpha in [0, 1], decay non-negative".into());
    }
    if ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) || gammas.iter().any(|&g| g == 0) {
        return Err("ratios must be in (0, 1] and gammas positive".into());
    }
    let hw = HardwareModel::h100_like();
    let throughput = gammas
        .iter()
        .map(|&g| {
            ratios
                .iter()
                .map(|&r| modeled_throughput(&hw, context, r, g, expected_emitted(alpha_at_full * r.powf(decay), g)))
                .collect()
        })
        .collect();
    let vanilla = 1.0 / hw.verify_step_time(context);
    Ok(Heatmap { ratios: ratios.to_vec(), gammas: gammas.to_vec(), throughput, vanilla })
}

fn demo_model(seed: u64) -> Result<Model, String> {
    Model::init(ModelConfig::tiny(), seed).map_err(|e| e.to_string())
}

fn demo_workload(seed: u64) -> Workload {
    Workload { kind: WorkloadKind::RepeatedSegments { segment_len: 12, repeats: 4 }, prompt_len: 96, n_prompts: 2, seed }
}

#[derive(Serialize)]
pub struct AcceptanceView {
    pub selector: String,
    pub gamma: usize,
    pub sparse_ratio: f64,
    pub iterations: usize,
    pub mean_accepted: f64,
    pub per_position_acceptance: Vec<f64>,
    pub rejected_accept_prob_histogram: Vec<usize>,
}

/// Greedy speculative decoding on the tiny model, summarized by draft position.
pub fn acceptance_by_position(selector: &str, sparse_ratio: f64, gamma: usize, seed: u64) -> Result<AcceptanceView, String> {
    let strategy: Strategy = selector.parse().map_err(|e: verispec::Error| e.to_string())?;
    let model = demo_model(seed)?;
    let params = DecodeParams {
        gamma,
        selector: SelectorConfig { sparse_ratio, k_min: 4, ..SelectorConfig::with_strategy(strategy) },
        max_new_tokens: 48,
        seed,
        ..DecodeParams::default()
    };
    let b = run_benchmark(&model, &demo_workload(seed), &params).map_err(|e| e.to_string())?;
    let s = b.summary;
    Ok(AcceptanceView {
        selector: strategy.name().into(),
        gamma,
        sparse_ratio,
        iterations: s.iterations,
        mean_accepted: s.mean_accepted,
        per_position_acceptance: s.per_position_acceptance,
        rejected_accept_prob_histogram: s.rejected_accept_prob_histogram,
    })
}

#[derive(Serialize)]
pub struct OverlapView {
    pub gamma: usize,
    pub k: usize,
    pub samples: usize,
    pub mean: Vec<Vec<f64>>,
    pub by_distance: Vec<f64>,
}

/// Mean overlap of per-row top-k selections between verification rows.
pub fn overlap_matrix(gamma: usize, k: usize, seed: u64) -> Result<OverlapView, String> {
    let model = demo_model(seed)?;
    let params = DecodeParams { gamma, max_new_tokens: 32, seed, ..DecodeParams::default() };
    let r = overlap_by_distance(&model, &demo_workload(seed), &params, k, false).map_err(|e| e.to_string())?;
    Ok(OverlapView { gamma: r.gamma, k: r.k, samples: r.samples, mean: r.mean, by_distance: r.by_distance })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string())).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = costHeatmap)]
pub fn cost_heatmap_js(context: f64, alpha_at_full: f64, decay: f64, ratios: Vec<f64>, gammas: Vec<u32>) -> Result<String, JsValue> {
    let gammas: Vec<usize> = gammas.into_iter().map(|g| g as usize).collect();
    to_js(cost_heatmap(context, alpha_at_full, decay, &ratios, &gammas))
}

#[wasm_bindgen(js_name = acceptanceByPosition)]
pub fn acceptance_by_position_js(selector: &str, sparse_ratio: f64, gamma: u32, seed: u32) -> Result<String, JsValue> {
    to_js(acceptance_by_position(selector, sparse_ratio, gamma as usize, seed as u64))
}

#[wasm_bindgen(js_name = overlapMatrix)]
pub fn overlap_matrix_js(gamma: u32, k: u32, seed: u32) -> Result<String, JsValue> {
    to_js(overlap_matrix(gamma as usize, k as usize, seed as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emitted_series() {
        assert_eq!(expected_emitted(1.0, 4), 5.0);
        assert_eq!(expected_emitted(0.0, 4), 1.0);
        assert!((expected_emitted(0.5, 2) - 1.75).abs() < 1e-12);
    }

    #[test]
    fn heatmap_shape_and_full_acceptance_gain() {
        let h = cost_heatmap(128_000.0, 1.0, 0.0, &[0.05, 1.0], &[2, 4, 8]).unwrap();
        assert_eq!((h.throughput.len(), h.throughput[0].len()), (3, 2));
        assert!(h.throughput.iter().flatten().all(|&t| t > h.vanilla));
        assert!(cost_heatmap(1.0, 2.0, 0.0, &[0.5], &[2]).is_err());
        assert!(cost_heatmap(1.0, 0.5, 0.0, &[0.0], &[2]).is_err());
    }

    #[test]
    fn acceptance_view_at_full_ratio() {
        let v = acceptance_by_position("collect2", 1.0, 3, 0).unwrap();
        assert_eq!(v.mean_accepted, 3.0);
        assert!(v.per_position_acceptance.iter().all(|&a| a == 1.0));
        assert!(acceptance_by_position("bogus", 0.5, 3, 0).is_err());
    }

    #[test]
    fn overlap_view_diagonal() {
        let v = overlap_matrix(3, 8, 1).unwrap();
        assert_eq!(v.mean.len(), 4);
        assert!((0..4).all(|i| v.mean[i][i] == 1.0));
        assert_eq!(v.by_distance[0], 1.0);
    }
}
