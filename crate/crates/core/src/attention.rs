//! Scaled dot-product attention with optional capture of pre-softmax logits.
//!
//! Keys are visited segment by segment in the order given, and the softmax
//! is accumulated in f64 with max subtraction. Splitting one key range into
//! several consecutive segments therefore gives bitwise-identical output,
//! which is what makes logit capture non-intrusive and a full index set
//! equivalent to full attention.

use serde::{Deserialize, Serialize};

use crate::selection::{PageIndex, SelectionSet, SelectorConfig};
use crate::{Error, Result};

/// Raw attention logits (`q·k`, unscaled) of selected verification queries
/// against the eligible prefix of one layer.
///
/// Stored `[head][row][col]`. Masked entries hold `f32::NEG_INFINITY`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitMatrix {
    pub layer: usize,
    pub n_heads: usize,
    pub rows: usize,
    pub cols: usize,
    /// 1-based verification query index of each row.
    pub row_labels: Vec<usize>,
    /// Absolute position of column 0.
    pub col_offset: usize,
    /// `1/sqrt(head_dim)`, needed to turn logits into attention weights.
    pub scale: f64,
    pub data: Vec<f32>,
}

impl LogitMatrix {
    pub fn new(layer: usize, n_heads: usize, row_labels: Vec<usize>, cols: usize, scale: f64) -> Self {
        let rows = row_labels.len();
        Self {
            layer,
            n_heads,
            rows,
            cols,
            row_labels,
            col_offset: 0,
            scale,
            data: vec![f32::NEG_INFINITY; n_heads * rows * cols],
        }
    }

    pub fn row(&self, head: usize, row: usize) -> &[f32] {
        let start = (head * self.rows + row) * self.cols;
        &self.data[start..start + self.cols]
    }

    pub fn row_mut(&mut self, head: usize, row: usize) -> &mut [f32] {
        let start = (head * self.rows + row) * self.cols;
        &mut self.data[start..start + self.cols]
    }

    pub fn get(&self, head: usize, row: usize, col: usize) -> f32 {
        self.data[(head * self.rows + row) * self.cols + col]
    }

    /// Row index carrying the given 1-based label.
    pub fn row_of_label(&self, label: usize) -> Option<usize> {
        self.row_labels.iter().position(|&l| l == label)
    }

    /// Copy keeping only the given rows, in the given order.
    pub fn restrict_rows(&self, rows: &[usize]) -> Result<LogitMatrix> {
        if let Some(&r) = rows.iter().find(|&&r| r >= self.rows) {
            return Err(Error::IndexOutOfRange { index: r, len: self.rows });
        }
        let labels = rows.iter().map(|&r| self.row_labels[r]).collect();
        let mut out = LogitMatrix::new(self.layer, self.n_heads, labels, self.cols, self.scale);
        out.col_offset = self.col_offset;
        for h in 0..self.n_heads {
            for (i, &r) in rows.iter().enumerate() {
                out.row_mut(h, i).copy_from_slice(self.row(h, r));
            }
        }
        Ok(out)
    }

    /// Every entry multiplied by `factor`; masked entries stay masked.
    pub fn scaled(&self, factor: f32) -> LogitMatrix {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v *= factor;
        }
        out
    }
}

/// How each layer chooses its keys during a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum AttendSpec<'a> {
    /// Causal attention, restricted by each layer's kind.
    Full,
    /// Dense layer `l` attends `sets[i].indices ∪ [sets[i].prefix_len, query]`
    /// for the set with `layer == l`. Banded layers keep their band.
    Sparse(&'a [SelectionSet]),
    /// Like `Sparse`, but each dense layer picks its set from page summaries
    /// with the current query before attending.
    QueryAware {
        pages: &'a PageIndex,
        config: &'a SelectorConfig,
        prefix_len: usize,
    },
}

/// Which batch rows have their prefix logits captured.
#[derive(Clone, Debug, PartialEq)]
pub struct CollectSpec {
    /// Indices into the forwarded batch.
    pub rows: Vec<usize>,
    /// 1-based labels recorded for each row.
    pub labels: Vec<usize>,
    /// Columns are positions `0..prefix_end`, which must not reach any
    /// collected query.
    pub prefix_end: usize,
    /// Also return the rotated query vectors of the collected rows.
    pub capture_queries: bool,
}

impl CollectSpec {
    /// Collect `rows` labelled `row + 1`.
    pub fn rows(rows: Vec<usize>, prefix_end: usize) -> Self {
        let labels = rows.iter().map(|r| r + 1).collect();
        Self { rows, labels, prefix_end, capture_queries: false }
    }
}

/// Dot product with eight independent f32 accumulators. The summation order
/// depends only on the length, so a given pair of rows always yields the
/// same bits.
#[inline(always)]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Four dot products of `rows[i]` with `b`, each summed exactly as [`dot`]
/// sums it; interleaving independent chains only changes speed.
#[inline(always)]
pub fn dot4(rows: [&[f32]; 4], b: &[f32]) -> [f32; 4] {
    let mut acc = [[0.0f32; 8]; 4];
    let n = b.len() / 8 * 8;
    let mut j = 0;
    while j < n {
        let y = &b[j..j + 8];
        for (r, a) in rows.iter().zip(acc.iter_mut()) {
            let x = &r[j..j + 8];
            for i in 0..8 {
                a[i] += x[i] * y[i];
            }
        }
        j += 8;
    }
    let mut out = [0.0f32; 4];
    for (k, (r, a)) in rows.iter().zip(&acc).enumerate() {
        let mut tail = 0.0f32;
        for (x, y) in r[n..].iter().zip(&b[n..]) {
            tail += x * y;
        }
        out[k] = ((a[0] + a[4]) + (a[1] + a[5])) + ((a[2] + a[6]) + (a[3] + a[7])) + tail;
    }
    out
}

/// `a·b` accumulated in f64. Used for captured logits, which must not carry
/// the cancellation error of the f32 kernel.
fn dot_wide(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Key and value rows of one contiguous run of positions.
#[derive(Clone, Copy, Debug)]
pub struct KeySegment<'a> {
    pub keys: &'a [f32],
    pub values: &'a [f32],
}

/// Reusable buffers for [`attend_segments`].
#[derive(Default, Debug)]
pub struct Scratch {
    weights: Vec<f64>,
    acc: Vec<f64>,
}

/// Attention of `q` over the concatenation of `segments`.
///
/// When `raw_first` is given it receives the unscaled logits of the first
/// segment, rounded once from f64; capture does not change `out`.
pub fn attend_segments(
    q: &[f32],
    segments: &[KeySegment<'_>],
    scale: f64,
    out: &mut [f32],
    mut raw_first: Option<&mut [f32]>,
    scratch: &mut Scratch,
) -> Result<()> {
    let d = q.len();
    let w = &mut scratch.weights;
    w.clear();
    for (si, seg) in segments.iter().enumerate() {
        for (j, key) in seg.keys.chunks_exact(d).enumerate() {
            let raw = dot(q, key);
            if si == 0 {
                if let Some(buf) = raw_first.as_deref_mut() {
                    buf[j] = dot_wide(q, key) as f32;
                }
            }
            w.push(raw as f64 * scale);
        }
    }
    if w.is_empty() {
        return Err(Error::EmptyKeys);
    }
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for x in w.iter_mut() {
        *x = (*x - max).exp();
        denom += *x;
    }
    let acc = &mut scratch.acc;
    acc.clear();
    acc.resize(d, 0.0);
    let mut wi = w.iter();
    for seg in segments {
        for value in seg.values.chunks_exact(d) {
            let p = *wi.next().expect("one weight per key");
            for (a, &v) in acc.iter_mut().zip(value) {
                *a += p * v as f64;
            }
        }
    }
    for (o, a) in out.iter_mut().zip(acc.iter()) {
        *o = (a / denom) as f32;
    }
    Ok(())
}

/// `softmax(q·Kᵀ · scale) · V` for row-major `keys`/`values` of `head_dim = q.len()`.
pub fn attend(q: &[f32], keys: &[f32], values: &[f32], scale: f64) -> Result<Vec<f32>> {
    let mut out = vec![0.0; q.len()];
    attend_segments(q, &[KeySegment { keys, values }], scale, &mut out, None, &mut Scratch::default())?;
    Ok(out)
}

/// Attention over prefix plus window keys, also returning the raw prefix logits.
pub fn attend_collect(
    q: &[f32],
    k_prefix: &[f32],
    v_prefix: &[f32],
    k_window: &[f32],
    v_window: &[f32],
    scale: f64,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut out = vec![0.0; q.len()];
    let mut raw = vec![0.0; k_prefix.len() / q.len().max(1)];
    attend_segments(
        q,
        &[
            KeySegment { keys: k_prefix, values: v_prefix },
            KeySegment { keys: k_window, values: v_window },
        ],
        scale,
        &mut out,
        Some(&mut raw),
        &mut Scratch::default(),
    )?;
    Ok((out, raw))
}

/// Numerically stable softmax; `-inf` entries get probability zero.
pub fn softmax_stable(logits: &[f64]) -> Result<Vec<f64>> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::AllMasked);
    }
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in out.iter_mut() {
        *p /= sum;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Purpose};

    fn random(seed: u64, n: usize) -> Vec<f32> {
        let mut r = rng::stream(seed, Purpose::Workload, 99, 0);
        (0..n).map(|_| rng::normal(&mut r) as f32).collect()
    }

    /// Double-precision reference: explicit loops, no shared code.
    fn naive_attend(q: &[f32], k: &[f32], v: &[f32], scale: f64) -> Vec<f64> {
        let d = q.len();
        let m = k.len() / d;
        let s: Vec<f64> = (0..m)
            .map(|j| (0..d).map(|i| q[i] as f64 * k[j * d + i] as f64).sum::<f64>() * scale)
            .collect();
        let mx = s.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        (0..d).map(|i| (0..m).map(|j| e[j] / z * v[j * d + i] as f64).sum()).collect()
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = random(1, 4);
        let k = random(2, 4);
        let v = random(3, 4);
        assert_eq!(attend(&q, &k, &v, 0.5).unwrap(), v);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = random(1, 4);
        let k: Vec<f32> = random(2, 4).repeat(3);
        let v = random(3, 12);
        let out = attend(&q, &k, &v, 0.5).unwrap();
        for i in 0..4 {
            let mean = (v[i] + v[4 + i] + v[8 + i]) / 3.0;
            assert!((out[i] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_double_precision_oracle() {
        for seed in 0..20 {
            let (m, d) = (8, 4);
            let q = random(seed, d);
            let k = random(seed + 100, m * d);
            let v = random(seed + 200, m * d);
            let scale = 1.0 / (d as f64).sqrt();
            let got = attend(&q, &k, &v, scale).unwrap();
            let want = naive_attend(&q, &k, &v, scale);
            for (g, w) in got.iter().zip(&want) {
                assert!((*g as f64 - w).abs() <= 1e-5 * w.abs().max(1.0), "{g} vs {w}");
            }
        }
    }

    #[test]
    fn empty_keys_rejected() {
        assert!(matches!(attend(&[1.0, 2.0], &[], &[], 1.0), Err(Error::EmptyKeys)));
    }

    #[test]
    fn collect_equals_concatenated_attend() {
        let d = 8;
        let q = random(5, d);
        let kp = random(6, 5 * d);
        let vp = random(7, 5 * d);
        let kw = random(8, 3 * d);
        let vw = random(9, 3 * d);
        let (out, raw) = attend_collect(&q, &kp, &vp, &kw, &vw, 0.3).unwrap();
        let full = attend(&q, &[kp.clone(), kw].concat(), &[vp, vw].concat(), 0.3).unwrap();
        assert_eq!(out, full);
        for (j, r) in raw.iter().enumerate() {
            let want: f64 = (0..d).map(|i| q[i] as f64 * kp[j * d + i] as f64).sum();
            assert!((*r as f64 - want).abs() <= 1e-5 * want.abs().max(1.0));
        }
    }

    #[test]
    fn collect_with_empty_prefix() {
        let q = random(5, 4);
        let kw = random(8, 8);
        let vw = random(9, 8);
        let (out, raw) = attend_collect(&q, &[], &[], &kw, &vw, 0.5).unwrap();
        assert!(raw.is_empty());
        assert_eq!(out, attend(&q, &kw, &vw, 0.5).unwrap());
    }

    #[test]
    fn softmax_basics() {
        assert_eq!(softmax_stable(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(softmax_stable(&[3.5]).unwrap(), vec![1.0]);
        let p = softmax_stable(&[f64::NEG_INFINITY, 1.0]).unwrap();
        assert_eq!(p, vec![0.0, 1.0]);
        assert!(matches!(softmax_stable(&[f64::NEG_INFINITY; 3]), Err(Error::AllMasked)));
        assert!(matches!(softmax_stable(&[]), Err(Error::AllMasked)));
    }

    #[test]
    fn dot_matches_f64_reference() {
        for n in [1, 7, 8, 9, 32, 33] {
            let a = random(n as u64, n);
            let b = random(n as u64 + 50, n);
            let want: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
            let mag: f64 = a.iter().zip(&b).map(|(x, y)| (*x as f64 * *y as f64).abs()).sum();
            assert!((dot(&a, &b) as f64 - want).abs() <= 1e-6 * mag.max(1.0));
        }
    }

    #[test]
    fn restrict_rows_and_scale() {
        let mut m = LogitMatrix::new(0, 2, vec![1, 2, 3], 4, 0.5);
        for (i, v) in m.data.iter_mut().enumerate() {
            *v = i as f32;
        }
        let r = m.restrict_rows(&[2, 0]).unwrap();
        assert_eq!(r.row_labels, vec![3, 1]);
        assert_eq!(r.row(1, 0), m.row(1, 2));
        assert!(m.restrict_rows(&[3]).is_err());
        assert_eq!(m.scaled(2.0).get(1, 1, 1), 2.0 * m.get(1, 1, 1));
    }
}
