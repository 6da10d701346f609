//! Decoder-only transformer with grouped-query attention, rotary position
//! encoding, RMS normalization, a gated MLP and a tied output head.

mod config;
pub mod io;
pub mod rope;
mod weights;

pub use config::{LayerKind, ModelConfig};
pub use io::{load_weights, read_weights, save_weights, write_weights};
pub use rope::apply_rope;
pub use weights::{LayerWeights, Weights, FINAL_NORM_GAIN};

use crate::attention::{attend_segments, dot, dot4, AttendSpec, CollectSpec, KeySegment, LogitMatrix, Scratch};
use crate::kv::KvStore;
use crate::selection::{select_quest, SelectionSet};
use crate::{Error, Result};

/// Immutable model; share it freely across threads.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
    inv_freq: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `n_tokens × vocab_size` pre-softmax vocabulary logits.
    pub logits: Vec<f32>,
    pub vocab_size: usize,
    /// Per layer, when collection was requested.
    pub collected: Option<Vec<LogitMatrix>>,
    /// Per layer, the rotated queries of the collected rows (`rows × q_dim`).
    pub queries: Option<Vec<Vec<f32>>>,
    /// Distinct KV rows each layer read for the whole batch.
    pub kv_rows_read: Vec<usize>,
    /// Sets picked on the fly under [`AttendSpec::QueryAware`] (last token).
    pub selections: Vec<SelectionSet>,
}

impl ForwardOutput {
    pub fn logits_row(&self, i: usize) -> &[f32] {
        &self.logits[i * self.vocab_size..(i + 1) * self.vocab_size]
    }

    pub fn last_logits(&self) -> &[f32] {
        self.logits_row(self.logits.len() / self.vocab_size - 1)
    }
}

impl Model {
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        let inv_freq = rope::inverse_frequencies(config.head_dim, config.rope_theta);
        Ok(Self { config, weights, inv_freq })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = Weights::init(&config, seed)?;
        Self::new(config, weights)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let (config, weights) = load_weights(path)?;
        Self::new(config, weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn new_kv(&self) -> KvStore {
        KvStore::new(&self.config)
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.config.head_dim as f64).sqrt()
    }

    /// Runs `tokens` at `positions` (contiguous, starting at `kv.len()`),
    /// appends their K/V to `kv`, and returns vocabulary logits per token.
    pub fn forward(
        &self,
        tokens: &[u32],
        positions: &[usize],
        kv: &mut KvStore,
        attend: &AttendSpec<'_>,
        collect: Option<&CollectSpec>,
    ) -> Result<ForwardOutput> {
        self.check_inputs(tokens, positions, kv, attend, collect)?;
        let out = self.forward_inner(tokens, positions, kv, attend, collect);
        match out {
            Ok(o) => {
                kv.finish_staged(tokens.len());
                Ok(o)
            }
            Err(e) => {
                kv.discard_staged();
                Err(e)
            }
        }
    }

    fn check_inputs(
        &self,
        tokens: &[u32],
        positions: &[usize],
        kv: &KvStore,
        attend: &AttendSpec<'_>,
        collect: Option<&CollectSpec>,
    ) -> Result<()> {
        let c = &self.config;
        if tokens.is_empty() || tokens.len() != positions.len() {
            return Err(Error::InvalidParam(format!(
                "{} tokens with {} positions",
                tokens.len(),
                positions.len()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(Error::InvalidParam(format!("token {t} outside vocabulary {}", c.vocab_size)));
        }
        let start = positions[0];
        if start != kv.len() || positions.iter().enumerate().any(|(i, &p)| p != start + i) {
            return Err(Error::InvalidParam(format!(
                "positions must continue the cache contiguously from {}",
                kv.len()
            )));
        }
        let last = *positions.last().unwrap();
        if last >= c.max_context {
            return Err(Error::ContextOverflow { position: last, max_context: c.max_context });
        }
        match attend {
            AttendSpec::Full => {}
            AttendSpec::Sparse(sets) => {
                for s in sets.iter() {
                    s.validate()?;
                    if s.layer >= c.n_layers {
                        return Err(Error::AttendSpec(format!("selection for missing layer {}", s.layer)));
                    }
                    if !c.is_dense(s.layer) {
                        return Err(Error::AttendSpec(format!(
                            "layer {} is banded; selection applies to dense layers only",
                            s.layer
                        )));
                    }
                    if s.prefix_len > start {
                        return Err(Error::AttendSpec(format!(
                            "layer {} selection prefix {} runs past the first query at {start}",
                            s.layer, s.prefix_len
                        )));
                    }
                }
                for l in c.dense_layers() {
                    let n = sets.iter().filter(|s| s.layer == l).count();
                    if n != 1 {
                        return Err(Error::AttendSpec(format!("dense layer {l} has {n} selection sets")));
                    }
                }
            }
            AttendSpec::QueryAware { pages, config, prefix_len } => {
                config.validate()?;
                if *prefix_len > start {
                    return Err(Error::AttendSpec(format!("prefix {prefix_len} runs past the first query at {start}")));
                }
                if pages.len() < *prefix_len {
                    return Err(Error::MissingSummaries(0));
                }
            }
        }
        if let Some(cs) = collect {
            if !matches!(attend, AttendSpec::Full) {
                return Err(Error::AttendSpec("logit collection requires full attention".into()));
            }
            if cs.rows.len() != cs.labels.len() {
                return Err(Error::InvalidParam("collect rows and labels differ in length".into()));
            }
            if let Some(&r) = cs.rows.iter().find(|&&r| r >= tokens.len()) {
                return Err(Error::IndexOutOfRange { index: r, len: tokens.len() });
            }
            let first = cs.rows.iter().map(|&r| positions[r]).min().unwrap_or(start);
            if cs.prefix_end > first {
                return Err(Error::InvalidParam(format!(
                    "collected prefix {} runs past the collected query at {first}",
                    cs.prefix_end
                )));
            }
        }
        Ok(())
    }

    fn forward_inner(
        &self,
        tokens: &[u32],
        positions: &[usize],
        kv: &mut KvStore,
        attend: &AttendSpec<'_>,
        collect: Option<&CollectSpec>,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        let w = &self.weights;
        let (n, d, hd) = (tokens.len(), c.d_model, c.head_dim);
        let (q_dim, kv_dim, group) = (c.q_dim(), c.kv_dim(), c.group_size());
        let scale = self.scale();
        let last_pos = positions[n - 1];

        let mut h: Vec<f32> = tokens
            .iter()
            .flat_map(|&t| w.token_embedding[t as usize * d..(t as usize + 1) * d].iter().copied())
            .collect();

        let mut collected = collect.map(|_| Vec::with_capacity(c.n_layers));
        let mut captured_q = collect.filter(|cs| cs.capture_queries).map(|_| Vec::with_capacity(c.n_layers));
        let mut kv_rows_read = Vec::with_capacity(c.n_layers);
        let mut dynamic_sets = Vec::new();

        let (mut xn, mut q, mut k, mut v) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let (mut attn, mut proj, mut gate, mut up) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut scratch = Scratch::default();
        let (mut gk, mut gv) = (Vec::new(), Vec::new());

        for (l, lw) in w.layers.iter().enumerate() {
            rms_norm_rows(&h, &lw.attn_norm, c.norm_eps, &mut xn);
            linear(&lw.wq, q_dim, d, &xn, n, &mut q);
            linear(&lw.wk, kv_dim, d, &xn, n, &mut k);
            linear(&lw.wv, kv_dim, d, &xn, n, &mut v);
            for t in 0..n {
                for head in q[t * q_dim..(t + 1) * q_dim].chunks_exact_mut(hd) {
                    rope::rotate_in_place(head, positions[t], &self.inv_freq);
                }
                for head in k[t * kv_dim..(t + 1) * kv_dim].chunks_exact_mut(hd) {
                    rope::rotate_in_place(head, positions[t], &self.inv_freq);
                }
            }
            for t in 0..n {
                for g in 0..c.n_kv_heads {
                    let r = t * kv_dim + g * hd..t * kv_dim + (g + 1) * hd;
                    kv.stage_row(l, g, &k[r.clone()], &v[r]);
                }
            }

            let kind = c.layer_kinds[l];
            let mut matrix = collect.map(|cs| LogitMatrix::new(l, c.n_q_heads, cs.labels.clone(), cs.prefix_end, scale));
            attn.clear();
            attn.resize(n * q_dim, 0.0);
            let mut rows_read = 0usize;

            for t in 0..n {
                let pos = positions[t];
                let collect_row = collect.and_then(|cs| cs.rows.iter().position(|&r| r == t));
                let pe = collect.map_or(0, |cs| cs.prefix_end);

                // Key plan for this query: an optional gathered selection,
                // then contiguous ranges in position order.
                let selection: Option<SelectionSet> = match (kind, attend) {
                    (LayerKind::Dense, AttendSpec::Sparse(sets)) => {
                        sets.iter().find(|s| s.layer == l).cloned()
                    }
                    (LayerKind::Dense, AttendSpec::QueryAware { pages, config, prefix_len }) => {
                        let s = select_quest(l, &q[t * q_dim..(t + 1) * q_dim], group, pages, *prefix_len, config)?;
                        if t == n - 1 {
                            dynamic_sets.push(s.clone());
                        }
                        Some(s)
                    }
                    _ => None,
                };
                let lo = match kind {
                    LayerKind::Banded { window } => (pos + 1).saturating_sub(window),
                    LayerKind::Dense => 0,
                };
                if t == n - 1 {
                    rows_read = match &selection {
                        Some(s) => s.indices.len() + (last_pos + 1 - s.prefix_len),
                        None => last_pos + 1 - lo,
                    };
                }

                for g in 0..c.n_kv_heads {
                    let mut segs: Vec<KeySegment<'_>> = Vec::with_capacity(3);
                    let mut collect_from = None;
                    match &selection {
                        Some(s) => {
                            kv.gather_into(l, g, &s.indices, &mut gk, &mut gv)?;
                            segs.push(KeySegment { keys: &gk, values: &gv });
                            let (kr, vr) = kv.rows(l, g, s.prefix_len..pos + 1);
                            segs.push(KeySegment { keys: kr, values: vr });
                        }
                        None => {
                            if collect_row.is_some() {
                                let split = pe.max(lo);
                                let (kp, vp) = kv.rows(l, g, lo..split);
                                let (kw, vw) = kv.rows(l, g, split..pos + 1);
                                segs.push(KeySegment { keys: kp, values: vp });
                                segs.push(KeySegment { keys: kw, values: vw });
                                collect_from = Some(lo.min(pe));
                            } else {
                                let (kr, vr) = kv.rows(l, g, lo..pos + 1);
                                segs.push(KeySegment { keys: kr, values: vr });
                            }
                        }
                    }
                    for head in g * group..(g + 1) * group {
                        let qh = &q[t * q_dim + head * hd..t * q_dim + (head + 1) * hd];
                        let out = &mut attn[t * q_dim + head * hd..t * q_dim + (head + 1) * hd];
                        let raw = match (collect_row, collect_from, matrix.as_mut()) {
                            (Some(row), Some(from), Some(m)) => Some(&mut m.row_mut(head, row)[from..pe]),
                            _ => None,
                        };
                        attend_segments(qh, &segs, scale, out, raw, &mut scratch)?;
                    }
                }
            }
            kv_rows_read.push(rows_read);
            if let (Some(all), Some(m)) = (collected.as_mut(), matrix) {
                all.push(m);
            }
            if let (Some(all), Some(cs)) = (captured_q.as_mut(), collect) {
                let rows: Vec<f32> =
                    cs.rows.iter().flat_map(|&t| q[t * q_dim..(t + 1) * q_dim].iter().copied()).collect();
                all.push(rows);
            }

            linear(&lw.wo, d, q_dim, &attn, n, &mut proj);
            add_in_place(&mut h, &proj);

            rms_norm_rows(&h, &lw.mlp_norm, c.norm_eps, &mut xn);
            let hidden = c.mlp_hidden();
            linear(&lw.w_gate, hidden, d, &xn, n, &mut gate);
            linear(&lw.w_up, hidden, d, &xn, n, &mut up);
            for (g, u) in gate.iter_mut().zip(&up) {
                *g = silu(*g) * u;
            }
            linear(&lw.w_down, d, hidden, &gate, n, &mut proj);
            add_in_place(&mut h, &proj);
        }

        rms_norm_rows(&h, &w.final_norm, c.norm_eps, &mut xn);
        let mut logits = Vec::new();
        linear(&w.token_embedding, c.vocab_size, d, &xn, n, &mut logits);

        Ok(ForwardOutput {
            logits,
            vocab_size: c.vocab_size,
            collected,
            queries: captured_q,
            kv_rows_read,
            selections: dynamic_sets,
        })
    }
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn add_in_place(h: &mut [f32], delta: &[f32]) {
    for (a, b) in h.iter_mut().zip(delta) {
        *a += b;
    }
}

fn rms_norm_rows(x: &[f32], gain: &[f32], eps: f64, out: &mut Vec<f32>) {
    let d = gain.len();
    out.clear();
    out.reserve(x.len());
    for row in x.chunks_exact(d) {
        let ms = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        out.extend(row.iter().zip(gain).map(|(&v, &g)| (v as f64 * inv) as f32 * g));
    }
}

/// `out[t][r] = dot(w[r], x[t])` for `n` input rows. Each output entry is
/// summed exactly as [`dot`] sums it, so results do not depend on the batch
/// size or on which code path runs.
fn linear(w: &[f32], n_out: usize, n_in: usize, x: &[f32], n: usize, out: &mut Vec<f32>) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: avx2 support was just detected.
        return unsafe { linear_avx2(w, n_out, n_in, x, n, out) };
    }
    linear_portable(w, n_out, n_in, x, n, out)
}

// Same code compiled with wider vectors; without FMA contraction the
// per-lane arithmetic is unchanged.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn linear_avx2(w: &[f32], n_out: usize, n_in: usize, x: &[f32], n: usize, out: &mut Vec<f32>) {
    linear_portable(w, n_out, n_in, x, n, out)
}

#[inline(always)]
fn linear_portable(w: &[f32], n_out: usize, n_in: usize, x: &[f32], n: usize, out: &mut Vec<f32>) {
    out.clear();
    out.resize(n * n_out, 0.0);
    let blocks = n_out / 4 * 4;
    for r in (0..blocks).step_by(4) {
        let rows = [
            &w[r * n_in..(r + 1) * n_in],
            &w[(r + 1) * n_in..(r + 2) * n_in],
            &w[(r + 2) * n_in..(r + 3) * n_in],
            &w[(r + 3) * n_in..(r + 4) * n_in],
        ];
        for t in 0..n {
            let v = dot4(rows, &x[t * n_in..(t + 1) * n_in]);
            out[t * n_out + r..t * n_out + r + 4].copy_from_slice(&v);
        }
    }
    for r in blocks..n_out {
        let row = &w[r * n_in..(r + 1) * n_in];
        for t in 0..n {
            out[t * n_out + r] = dot(row, &x[t * n_in..(t + 1) * n_in]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::Strategy;

    fn tiny() -> Model {
        Model::init(ModelConfig::tiny(), 3).unwrap()
    }

    fn tokens(n: usize) -> (Vec<u32>, Vec<usize>) {
        ((0..n as u32).map(|i| (i * 37 + 11) % 64).collect(), (0..n).collect())
    }

    fn bits(x: &[f32]) -> Vec<u32> {
        x.iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn single_token_logits_finite() {
        let m = tiny();
        let mut kv = m.new_kv();
        let out = m.forward(&[5], &[0], &mut kv, &AttendSpec::Full, None).unwrap();
        assert_eq!(out.logits.len(), 64);
        assert!(out.logits.iter().all(|v| v.is_finite()));
        assert_eq!(kv.len(), 1);
    }

    #[test]
    fn joint_and_incremental_forward_agree_bitwise() {
        let m = tiny();
        let (t, p) = tokens(20);
        let mut joint = m.new_kv();
        let a = m.forward(&t, &p, &mut joint, &AttendSpec::Full, None).unwrap();
        let mut inc = m.new_kv();
        for i in 0..t.len() {
            let b = m.forward(&t[i..i + 1], &p[i..i + 1], &mut inc, &AttendSpec::Full, None).unwrap();
            assert_eq!(bits(a.logits_row(i)), bits(&b.logits));
        }
        assert!(joint.prefix_bits_equal(&inc, 20));
    }

    #[test]
    fn full_index_set_equals_full_attention() {
        let m = tiny();
        let (t, p) = tokens(24);
        let mut kv = m.new_kv();
        m.forward(&t[..16], &p[..16], &mut kv, &AttendSpec::Full, None).unwrap();
        let mut kv2 = kv.clone();
        let full = m.forward(&t[16..], &p[16..], &mut kv, &AttendSpec::Full, None).unwrap();
        let sets: Vec<SelectionSet> =
            m.config().dense_layers().into_iter().map(|l| SelectionSet::full(l, 16, Strategy::AllDraft)).collect();
        let sparse = m.forward(&t[16..], &p[16..], &mut kv2, &AttendSpec::Sparse(&sets), None).unwrap();
        assert_eq!(bits(&full.logits), bits(&sparse.logits));
        assert!(kv.prefix_bits_equal(&kv2, 24));
    }

    #[test]
    fn collection_is_non_intrusive_and_matches_naive_logits() {
        let m = tiny();
        let (t, p) = tokens(30);
        let mut kv = m.new_kv();
        m.forward(&t[..25], &p[..25], &mut kv, &AttendSpec::Full, None).unwrap();
        let mut kv2 = kv.clone();
        let plain = m.forward(&t[25..], &p[25..], &mut kv, &AttendSpec::Full, None).unwrap();
        let cs = CollectSpec { capture_queries: true, ..CollectSpec::rows(vec![0, 4], 25) };
        let got = m.forward(&t[25..], &p[25..], &mut kv2, &AttendSpec::Full, Some(&cs)).unwrap();
        assert_eq!(bits(&plain.logits), bits(&got.logits));

        let c = m.config();
        let mats = got.collected.unwrap();
        let queries = got.queries.unwrap();
        for (l, mat) in mats.iter().enumerate() {
            assert_eq!((mat.rows, mat.cols, mat.row_labels.clone()), (2, 25, vec![1, 5]));
            for (r, _) in cs.rows.iter().enumerate() {
                for h in 0..c.n_q_heads {
                    let q = &queries[l][r * c.q_dim() + h * c.head_dim..r * c.q_dim() + (h + 1) * c.head_dim];
                    for col in 0..25 {
                        let k = kv2.key(l, h / c.group_size(), col);
                        let naive: f64 = q.iter().zip(k).map(|(&a, &b)| a as f64 * b as f64).sum();
                        let v = mat.get(h, r, col) as f64;
                        assert!((v - naive).abs() <= 1e-5 * naive.abs().max(1.0), "{v} vs {naive}");
                    }
                }
            }
        }
    }

    #[test]
    fn banded_layers_mask_old_keys() {
        let mut c = ModelConfig::tiny();
        c.layer_kinds = vec![LayerKind::Banded { window: c.max_context }, LayerKind::Dense];
        let wide = Model::init(c.clone(), 3).unwrap();
        let dense = tiny();
        let (t, p) = tokens(12);
        let a = wide.forward(&t, &p, &mut wide.new_kv(), &AttendSpec::Full, None).unwrap();
        let b = dense.forward(&t, &p, &mut dense.new_kv(), &AttendSpec::Full, None).unwrap();
        assert_eq!(bits(&a.logits), bits(&b.logits));

        c.layer_kinds[0] = LayerKind::Banded { window: 2 };
        let narrow = Model::init(c, 3).unwrap();
        let mut kv = narrow.new_kv();
        let cs = CollectSpec::rows(vec![11], 10);
        let n = narrow.forward(&t, &p, &mut kv, &AttendSpec::Full, Some(&cs)).unwrap();
        assert_eq!(bits(n.logits_row(0)), bits(b.logits_row(0)));
        assert_ne!(bits(n.logits_row(11)), bits(b.logits_row(11)));
        // query at 11 with window 2 sees only 10 and 11; column 10 is outside the prefix
        let m0 = &n.collected.as_ref().unwrap()[0];
        assert!(m0.row(0, 0).iter().all(|v| *v == f32::NEG_INFINITY));
        assert!(n.collected.unwrap()[1].row(0, 0).iter().all(|v| v.is_finite()));
        assert_eq!(n.kv_rows_read, vec![2, 12]);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut c = ModelConfig::tiny();
        c.layer_kinds = vec![LayerKind::Banded { window: 4 }, LayerKind::Dense];
        let m = Model::init(c, 1).unwrap();
        let (t, p) = tokens(8);
        let mut kv = m.new_kv();
        m.forward(&t[..4], &p[..4], &mut kv, &AttendSpec::Full, None).unwrap();

        let on_banded = [SelectionSet::full(0, 4, Strategy::AllDraft), SelectionSet::full(1, 4, Strategy::AllDraft)];
        let e = m.forward(&t[4..5], &p[4..5], &mut kv, &AttendSpec::Sparse(&on_banded), None);
        assert!(matches!(e, Err(Error::AttendSpec(_))));
        let missing: [SelectionSet; 0] = [];
        assert!(m.forward(&t[4..5], &p[4..5], &mut kv, &AttendSpec::Sparse(&missing), None).is_err());
        assert!(m.forward(&t[4..5], &[7], &mut kv, &AttendSpec::Full, None).is_err());
        let cs = CollectSpec::rows(vec![0], 4);
        let ok = [SelectionSet::full(1, 4, Strategy::AllDraft)];
        assert!(m.forward(&t[4..5], &p[4..5], &mut kv, &AttendSpec::Sparse(&ok), Some(&cs)).is_err());
        assert_eq!(kv.len(), 4);
        m.forward(&t[4..5], &p[4..5], &mut kv, &AttendSpec::Sparse(&ok), None).unwrap();
        assert_eq!(kv.len(), 5);
    }

    #[test]
    fn linear_paths_agree_bitwise() {
        let w: Vec<f32> = (0..7 * 13).map(|i| ((i * 37 % 101) as f32 - 50.0) / 17.0).collect();
        let x: Vec<f32> = (0..3 * 13).map(|i| ((i * 53 % 89) as f32 - 44.0) / 9.0).collect();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        linear(&w, 7, 13, &x, 3, &mut a);
        linear_portable(&w, 7, 13, &x, 3, &mut b);
        assert_eq!(bits(&a), bits(&b));
        for t in 0..3 {
            for r in 0..7 {
                assert_eq!(a[t * 7 + r].to_bits(), dot(&w[r * 13..(r + 1) * 13], &x[t * 13..(t + 1) * 13]).to_bits());
            }
        }
    }

    #[test]
    fn context_overflow() {
        let mut c = ModelConfig::tiny();
        c.max_context = 4;
        let m = Model::init(c, 1).unwrap();
        let (t, p) = tokens(5);
        let e = m.forward(&t, &p, &mut m.new_kv(), &AttendSpec::Full, None);
        assert!(matches!(e, Err(Error::ContextOverflow { position: 4, max_context: 4 })));
    }
}
