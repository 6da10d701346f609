//! KV selection: which prefix positions a dense layer keeps while drafting.
//!
//! Verification-guided strategies score prefix columns from logits captured
//! during the previous full-attention verification pass. Baselines are a
//! query-agnostic sink-plus-window pattern and a query-aware page-bound
//! estimator re-evaluated at every draft step.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{softmax_stable, LogitMatrix};
use crate::kv::KvStore;
use crate::model::ModelConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Attention sinks plus the most recent prefix tokens.
    Window,
    /// Page min/max key bounds against the current query, every draft step.
    QuestLike,
    /// Top-k of the last accepted token's logit row.
    LastAccepted,
    /// Top-k of the column mean over every verification row.
    AllDraft,
    /// Top-k of the mean of the first draft row and the bonus row.
    Collect2,
    /// `Collect2` scored with softmax-normalized attention weights.
    Collect2Weights,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Window,
        Strategy::QuestLike,
        Strategy::LastAccepted,
        Strategy::AllDraft,
        Strategy::Collect2,
        Strategy::Collect2Weights,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Window => "window",
            Strategy::QuestLike => "quest",
            Strategy::LastAccepted => "last-accepted",
            Strategy::AllDraft => "all-draft",
            Strategy::Collect2 => "collect2",
            Strategy::Collect2Weights => "collect2-weights",
        }
    }

    /// Whether verification must capture logits for this strategy.
    pub fn uses_logits(self) -> bool {
        !matches!(self, Strategy::Window | Strategy::QuestLike)
    }

    /// Verification rows (0-based) whose logits are captured.
    pub fn collect_rows(self, gamma: usize) -> Vec<usize> {
        match self {
            Strategy::Window | Strategy::QuestLike => Vec::new(),
            Strategy::AllDraft | Strategy::LastAccepted => (0..=gamma).collect(),
            Strategy::Collect2 | Strategy::Collect2Weights => {
                if gamma == 0 {
                    vec![0]
                } else {
                    vec![0, gamma]
                }
            }
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == norm || (norm == "quest-like" && *st == Strategy::QuestLike))
            .ok_or_else(|| Error::InvalidParam(format!("unknown selector '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Logits,
    Weights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    pub strategy: Strategy,
    /// Fraction of prefix entries kept, in `(0, 1]`.
    pub sparse_ratio: f64,
    pub k_min: usize,
    /// Recent-token count for `Window`; `None` sizes it from the budget.
    pub window: Option<usize>,
    pub sink: usize,
    pub page_size: usize,
    pub metric: Metric,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Collect2,
            sparse_ratio: 0.07,
            k_min: 16,
            window: None,
            sink: 4,
            page_size: 16,
            metric: Metric::Logits,
        }
    }
}

impl SelectorConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self { strategy, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sparse_ratio > 0.0 && self.sparse_ratio <= 1.0) {
            return Err(Error::InvalidParam(format!("sparse_ratio {} outside (0, 1]", self.sparse_ratio)));
        }
        if self.sink + self.window.unwrap_or(1) == 0 {
            return Err(Error::InvalidParam("sink + window must be at least 1".into()));
        }
        if self.page_size == 0 {
            return Err(Error::InvalidParam("page_size must be positive".into()));
        }
        Ok(())
    }

    /// `clamp(round(sparse_ratio * p), k_min, p)`.
    pub fn budget(&self, prefix_len: usize) -> usize {
        let k = (self.sparse_ratio * prefix_len as f64).round() as usize;
        k.max(self.k_min).min(prefix_len)
    }

    /// Scoring metric after strategy overrides.
    pub fn effective_metric(&self) -> Metric {
        if self.strategy == Strategy::Collect2Weights {
            Metric::Weights
        } else {
            self.metric
        }
    }
}

/// Retained prefix positions of one layer. Positions `>= prefix_len` are
/// always attended in addition to `indices`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionSet {
    pub layer: usize,
    pub indices: Vec<usize>,
    pub k: usize,
    pub prefix_len: usize,
    pub source: Strategy,
}

impl SelectionSet {
    /// Every prefix position.
    pub fn full(layer: usize, prefix_len: usize, source: Strategy) -> Self {
        Self { layer, indices: (0..prefix_len).collect(), k: prefix_len, prefix_len, source }
    }

    pub fn validate(&self) -> Result<()> {
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::UnsortedIndices);
        }
        if let Some(&last) = self.indices.last() {
            if last >= self.prefix_len {
                return Err(Error::IndexOutOfRange { index: last, len: self.prefix_len });
            }
        }
        if self.k != self.indices.len() {
            return Err(Error::InvalidParam(format!("k {} != {} indices", self.k, self.indices.len())));
        }
        Ok(())
    }
}

/// Per-column mean over heads and the given rows. Masked entries are
/// skipped; a column with no finite entry scores `-inf`.
pub fn score_columns(m: &LogitMatrix, rows: &[usize]) -> Result<Vec<f64>> {
    check_rows(m, rows)?;
    let mut sum = vec![0.0f64; m.cols];
    let mut count = vec![0usize; m.cols];
    for h in 0..m.n_heads {
        for &r in rows {
            for (c, &v) in m.row(h, r).iter().enumerate() {
                if v.is_finite() {
                    sum[c] += v as f64;
                    count[c] += 1;
                }
            }
        }
    }
    Ok(sum
        .into_iter()
        .zip(count)
        .map(|(s, n)| if n == 0 { f64::NEG_INFINITY } else { s / n as f64 })
        .collect())
}

/// Like [`score_columns`], but each (head, row) is first turned into
/// attention weights `softmax(l * scale)` over the prefix columns.
pub fn score_columns_weights(m: &LogitMatrix, rows: &[usize]) -> Result<Vec<f64>> {
    check_rows(m, rows)?;
    let mut sum = vec![0.0f64; m.cols];
    let mut any = vec![false; m.cols];
    let mut n = 0usize;
    for h in 0..m.n_heads {
        for &r in rows {
            let scaled: Vec<f64> = m.row(h, r).iter().map(|&v| v as f64 * m.scale).collect();
            let Ok(w) = softmax_stable(&scaled) else { continue };
            n += 1;
            for (c, p) in w.into_iter().enumerate() {
                sum[c] += p;
                any[c] |= m.row(h, r)[c].is_finite();
            }
        }
    }
    Ok(sum
        .into_iter()
        .zip(any)
        .map(|(s, a)| if a && n > 0 { s / n as f64 } else { f64::NEG_INFINITY })
        .collect())
}

fn check_rows(m: &LogitMatrix, rows: &[usize]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::EmptyRows);
    }
    match rows.iter().find(|&&r| r >= m.rows) {
        Some(&r) => Err(Error::IndexOutOfRange { index: r, len: m.rows }),
        None => Ok(()),
    }
}

/// Descending score, then ascending index.
fn rank(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// The `k` highest scores, ties toward the lower index, returned in
/// ascending index order. `-inf` entries are never returned, so the result
/// may be shorter than `k`.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::TopK { k, len: scores.len() });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank(scores, a, b));
        idx.truncate(k);
    }
    idx.retain(|&i| scores[i] != f64::NEG_INFINITY);
    idx.sort_unstable();
    Ok(idx)
}

/// Top-k over the mean score of `rows` (0-based), using the configured metric.
pub fn select_rows(m: &LogitMatrix, rows: &[usize], cfg: &SelectorConfig) -> Result<SelectionSet> {
    let scores = match cfg.effective_metric() {
        Metric::Logits => score_columns(m, rows)?,
        Metric::Weights => score_columns_weights(m, rows)?,
    };
    let k = cfg.budget(m.cols);
    let indices: Vec<usize> = topk_indices(&scores, k)?.into_iter().map(|i| i + m.col_offset).collect();
    Ok(SelectionSet {
        layer: m.layer,
        k: indices.len(),
        indices,
        prefix_len: m.col_offset + m.cols,
        source: cfg.strategy,
    })
}

/// Every collected verification row contributes.
pub fn select_all_draft(m: &LogitMatrix, cfg: &SelectorConfig) -> Result<SelectionSet> {
    let rows: Vec<usize> = (0..m.rows).collect();
    select_rows(m, &rows, cfg)
}

/// Rows of the first draft token and the bonus token (lowest and highest label).
pub fn select_collect2(m: &LogitMatrix, cfg: &SelectorConfig) -> Result<SelectionSet> {
    let first = (0..m.rows).min_by_key(|&r| m.row_labels[r]).ok_or(Error::MissingRow(1))?;
    let last = (0..m.rows).max_by_key(|&r| m.row_labels[r]).expect("non-empty");
    if first == last {
        select_rows(m, &[first], cfg)
    } else {
        select_rows(m, &[first, last], cfg)
    }
}

/// Row of the last accepted token, label `accepted + 1`.
pub fn select_last_accepted(m: &LogitMatrix, accepted: usize, cfg: &SelectorConfig) -> Result<SelectionSet> {
    let row = m.row_of_label(accepted + 1).ok_or(Error::MissingRow(accepted + 1))?;
    select_rows(m, &[row], cfg)
}

/// First `sink` and last `window` prefix positions, independent of logits.
pub fn select_window(layer: usize, prefix_len: usize, cfg: &SelectorConfig) -> SelectionSet {
    let sink = cfg.sink.min(prefix_len);
    let window = cfg.window.unwrap_or_else(|| cfg.budget(prefix_len).saturating_sub(cfg.sink));
    let recent_start = prefix_len.saturating_sub(window).max(sink);
    let indices: Vec<usize> = (0..sink).chain(recent_start..prefix_len).collect();
    SelectionSet { layer, k: indices.len(), indices, prefix_len, source: Strategy::Window }
}

/// Selection sets for every dense layer after a verification pass.
/// `collected` is indexed by layer; strategies that do not use logits must
/// not call this.
pub fn refresh_from_logits(
    collected: &[Option<LogitMatrix>],
    dense_layers: &[usize],
    accepted: usize,
    cfg: &SelectorConfig,
) -> Result<Vec<SelectionSet>> {
    dense_layers
        .iter()
        .map(|&l| {
            let m = collected
                .get(l)
                .and_then(|m| m.as_ref())
                .ok_or_else(|| Error::InvalidParam(format!("no logits collected for layer {l}")))?;
            match cfg.strategy {
                Strategy::AllDraft => select_all_draft(m, cfg),
                Strategy::Collect2 | Strategy::Collect2Weights => select_collect2(m, cfg),
                Strategy::LastAccepted => {
                    // a bootstrap matrix holds a single row
                    if m.rows == 1 {
                        select_rows(m, &[0], cfg)
                    } else {
                        select_last_accepted(m, accepted, cfg)
                    }
                }
                Strategy::Window | Strategy::QuestLike => {
                    Err(Error::InvalidParam(format!("{} does not select from logits", cfg.strategy)))
                }
            }
        })
        .collect()
}

/// `|A ∩ B| / k` for two index sets of equal size `k > 0`.
pub fn overlap_ratio(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::OverlapSize { left: a.len(), right: b.len() });
    }
    Ok(intersection(a, b) as f64 / a.len() as f64)
}

/// Fraction of `prev` still present in `next`; 1 when `prev` is empty.
pub fn retention(prev: &[usize], next: &[usize]) -> f64 {
    if prev.is_empty() {
        return 1.0;
    }
    intersection(prev, next) as f64 / prev.len() as f64
}

fn intersection(a: &[usize], b: &[usize]) -> usize {
    let set: std::collections::HashSet<usize> = a.iter().copied().collect();
    let mut seen = std::collections::HashSet::new();
    b.iter().filter(|i| set.contains(i) && seen.insert(**i)).count()
}

/// Per-page elementwise min and max of keys, for every (layer, KV head).
#[derive(Clone, Debug)]
pub struct PageIndex {
    page_size: usize,
    n_kv_heads: usize,
    head_dim: usize,
    len: usize,
    mins: Vec<Vec<f32>>,
    maxs: Vec<Vec<f32>>,
}

impl PageIndex {
    pub fn new(config: &ModelConfig, page_size: usize) -> Self {
        let slots = config.n_layers * config.n_kv_heads;
        Self {
            page_size: page_size.max(1),
            n_kv_heads: config.n_kv_heads,
            head_dim: config.head_dim,
            len: 0,
            mins: vec![Vec::new(); slots],
            maxs: vec![Vec::new(); slots],
        }
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    /// Tokens covered by the summaries.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_pages(&self) -> usize {
        self.len.div_ceil(self.page_size)
    }

    /// Summarize positions `0..upto` of `kv`, reusing pages that are
    /// complete and unchanged.
    pub fn sync(&mut self, kv: &KvStore, upto: usize) -> Result<()> {
        if upto > kv.len() {
            return Err(Error::IndexOutOfRange { index: upto, len: kv.len() });
        }
        let hd = self.head_dim;
        let first_page = self.len.min(upto) / self.page_size;
        let n_pages = upto.div_ceil(self.page_size);
        for slot in 0..self.mins.len() {
            let (layer, head) = (slot / self.n_kv_heads, slot % self.n_kv_heads);
            self.mins[slot].truncate(first_page * hd);
            self.maxs[slot].truncate(first_page * hd);
            for page in first_page..n_pages {
                let mut lo = vec![f32::INFINITY; hd];
                let mut hi = vec![f32::NEG_INFINITY; hd];
                for pos in page * self.page_size..((page + 1) * self.page_size).min(upto) {
                    for (d, &k) in kv.key(layer, head, pos).iter().enumerate() {
                        lo[d] = lo[d].min(k);
                        hi[d] = hi[d].max(k);
                    }
                }
                self.mins[slot].extend_from_slice(&lo);
                self.maxs[slot].extend_from_slice(&hi);
            }
        }
        self.len = upto;
        Ok(())
    }

    /// `Σ_d max(q_d·min_d, q_d·max_d)`, an upper bound on `q·k` for every key in the page.
    pub fn page_bound(&self, layer: usize, kv_head: usize, page: usize, q: &[f32]) -> f64 {
        let slot = layer * self.n_kv_heads + kv_head;
        let hd = self.head_dim;
        let lo = &self.mins[slot][page * hd..(page + 1) * hd];
        let hi = &self.maxs[slot][page * hd..(page + 1) * hd];
        q.iter()
            .zip(lo.iter().zip(hi))
            .map(|(&q, (&a, &b))| (q as f64 * a as f64).max(q as f64 * b as f64))
            .sum()
    }

    pub fn summary_bytes(&self, pages: usize) -> usize {
        pages * 2 * self.head_dim * self.n_kv_heads * 4
    }
}

/// Query-aware selection from page bounds, summed over query heads.
/// `queries` holds every query head's rotated vector, `[n_q_heads][head_dim]`.
/// Pages are taken best-first until `k` tokens are covered; the last page
/// contributes only its lowest positions if it would overshoot.
pub fn select_quest(
    layer: usize,
    queries: &[f32],
    group_size: usize,
    pages: &PageIndex,
    prefix_len: usize,
    cfg: &SelectorConfig,
) -> Result<SelectionSet> {
    if pages.len() < prefix_len {
        return Err(Error::MissingSummaries(layer));
    }
    let hd = pages.head_dim;
    let ps = pages.page_size;
    let n_pages = prefix_len.div_ceil(ps);
    let scores: Vec<f64> = (0..n_pages)
        .map(|page| {
            queries
                .chunks_exact(hd)
                .enumerate()
                .map(|(h, q)| pages.page_bound(layer, h / group_size, page, q))
                .sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..n_pages).collect();
    order.sort_by(|&a, &b| rank(&scores, a, b));
    let k = cfg.budget(prefix_len);
    let mut indices = Vec::with_capacity(k);
    for page in order {
        if indices.len() >= k {
            break;
        }
        let room = k - indices.len();
        indices.extend((page * ps..((page + 1) * ps).min(prefix_len)).take(room));
    }
    indices.sort_unstable();
    Ok(SelectionSet { layer, k: indices.len(), indices, prefix_len, source: Strategy::QuestLike })
}
