use proptest::prelude::*;
use verispec::attention::LogitMatrix;
use verispec::harness::cost::{cost_iteration_time, HardwareModel};
use verispec::selection::{
    overlap_ratio, select_all_draft, select_collect2, select_rows, select_window, topk_indices, Metric, SelectorConfig,
    Strategy as Selector,
};
use verispec::speculation::{accept_drafts, residual_distribution, Mode};

fn matrix() -> impl Strategy<Value = LogitMatrix> {
    (1usize..5, 1usize..6, 1usize..40).prop_flat_map(|(heads, rows, cols)| {
        prop::collection::vec(-20.0f32..20.0, heads * rows * cols).prop_map(move |data| {
            let mut m = LogitMatrix::new(0, heads, (1..=rows).collect(), cols, 0.25);
            m.data = data;
            m
        })
    })
}

fn cfg(ratio: f64, k_min: usize) -> SelectorConfig {
    SelectorConfig { sparse_ratio: ratio, k_min, metric: Metric::Logits, ..SelectorConfig::default() }
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_filter_map("zero mass", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
    })
}

proptest! {
    #[test]
    fn topk_is_a_top_set(scores in prop::collection::vec(-5i32..5, 1..50), k in 1usize..60) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let k = k.min(scores.len());
        let t = topk_indices(&scores, k).unwrap();
        prop_assert_eq!(t.len(), k);
        prop_assert!(t.windows(2).all(|w| w[0] < w[1]));
        for i in 0..scores.len() {
            if t.contains(&i) {
                continue;
            }
            for &j in &t {
                prop_assert!(scores[j] > scores[i] || (scores[j] == scores[i] && j < i));
            }
        }
    }

    #[test]
    fn topk_nests_as_k_grows(scores in prop::collection::vec(-100.0f64..100.0, 2..50), k in 1usize..49) {
        let k = k.min(scores.len() - 1);
        let small = topk_indices(&scores, k).unwrap();
        let big = topk_indices(&scores, k + 1).unwrap();
        prop_assert!(small.iter().all(|i| big.contains(i)));
    }

    #[test]
    fn budget_monotone_in_ratio(p in 1usize..5000, a in 0.001f64..1.0, b in 0.001f64..1.0, k_min in 0usize..64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(cfg(lo, k_min).budget(p) <= cfg(hi, k_min).budget(p));
        prop_assert!(cfg(hi, k_min).budget(p) <= p);
        prop_assert_eq!(cfg(1.0, k_min).budget(p), p);
    }

    #[test]
    fn positive_scaling_keeps_selection(m in matrix(), s in 0.1f32..10.0, ratio in 0.05f64..1.0) {
        let mut scaled = m.clone();
        for v in scaled.data.iter_mut() {
            *v *= s;
        }
        let c = cfg(ratio, 1);
        // a rounding-level near tie can flip; skip those instances
        let scores = verispec::selection::score_columns(&m, &(0..m.rows).collect::<Vec<_>>()).unwrap();
        let k = c.budget(m.cols);
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        prop_assume!(k == m.cols || (sorted[k - 1] - sorted[k]).abs() > 1e-4);
        prop_assert_eq!(select_all_draft(&m, &c).unwrap(), select_all_draft(&scaled, &c).unwrap());
    }

    #[test]
    fn collect2_is_all_draft_on_two_rows(m in matrix(), ratio in 0.05f64..1.0) {
        let c = cfg(ratio, 1);
        let rows = if m.rows == 1 { vec![0] } else { vec![0, m.rows - 1] };
        prop_assert_eq!(select_collect2(&m, &c).unwrap().indices, select_rows(&m, &rows, &c).unwrap().indices);
    }

    #[test]
    fn window_depends_only_on_lengths(p in 1usize..500, sink in 0usize..8, window in 1usize..64) {
        let c = SelectorConfig { window: Some(window), sink, ..SelectorConfig::with_strategy(Selector::Window) };
        let s = select_window(0, p, &c);
        let want: Vec<usize> = (0..p).filter(|&i| i < sink || i + window >= p).collect();
        prop_assert_eq!(s.indices, want);
    }

    #[test]
    fn overlap_is_symmetric_and_bounded(perm in Just((0usize..64).collect::<Vec<_>>()).prop_shuffle(), k in 1usize..20, shift in 0usize..20) {
        let mut a = perm[..k].to_vec();
        let mut b = perm[shift..shift + k].to_vec();
        a.sort_unstable();
        b.sort_unstable();
        let ab = overlap_ratio(&a, &b).unwrap();
        prop_assert_eq!(ab, overlap_ratio(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(overlap_ratio(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn residual_is_a_distribution(p in distribution(8), q in distribution(8)) {
        match residual_distribution(&p, &q) {
            Ok(r) => {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for i in 0..8 {
                    prop_assert!(r[i] >= 0.0);
                    if p[i] <= q[i] {
                        prop_assert_eq!(r[i], 0.0);
                    }
                }
            }
            Err(_) => prop_assert!(p.iter().zip(&q).all(|(a, b)| a <= b)),
        }
    }

    #[test]
    fn accept_kernel_consistency(p in prop::collection::vec(distribution(6), 4), q in prop::collection::vec(distribution(6), 3), seed in any::<u64>()) {
        let drafts: Vec<u32> = q.iter().map(|d| d.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 as u32).collect();
        let d = accept_drafts(&drafts, &q, &p, Mode::Sample { temperature: 1.0 }, seed, 0).unwrap();
        prop_assert!(d.accepted <= drafts.len());
        prop_assert_eq!(d.accept_probs.len(), (d.accepted + 1).min(drafts.len()));
        prop_assert!(d.accept_probs.iter().all(|x| (0.0..=1.0).contains(x)));
        for t in 0..d.accepted {
            let x = drafts[t] as usize;
            prop_assert!(p[t][x] > 0.0);
        }
        if let Some(c) = d.correction {
            prop_assert!(d.accepted < drafts.len());
            let t = d.accepted;
            prop_assert!(p[t][c as usize] > q[t][c as usize]);
        }
    }

    #[test]
    fn iteration_cost_monotone(ctx in 1.0f64..1e6, dctx in 0.0f64..1e6, ratio in 0.01f64..1.0, gamma in 1usize..16) {
        let hw = HardwareModel::h100_like();
        let base = cost_iteration_time(&hw, ctx, ratio, gamma);
        prop_assert!(cost_iteration_time(&hw, ctx + dctx, ratio, gamma) >= base);
        prop_assert!(cost_iteration_time(&hw, ctx, (ratio * 1.5).min(1.0), gamma) >= base);
        prop_assert!(cost_iteration_time(&hw, ctx, ratio, gamma + 1) > base);
    }
}
