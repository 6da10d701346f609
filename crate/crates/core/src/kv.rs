//! Token-granular key/value storage.
//!
//! One contiguous growable array per (layer, KV head); a token's key and
//! value occupy one `head_dim` row each. Page size is one token, so any
//! index set can be attended without block rounding.

use crate::model::ModelConfig;
use crate::{Error, Result};

/// K and V rows of a single token, laid out `[layer][kv_head][head_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenKv {
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvStore {
    n_layers: usize,
    n_kv_heads: usize,
    head_dim: usize,
    capacity: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
    committed_len: usize,
}

impl KvStore {
    pub fn new(config: &ModelConfig) -> Self {
        let n = config.n_layers * config.n_kv_heads;
        Self {
            n_layers: config.n_layers,
            n_kv_heads: config.n_kv_heads,
            head_dim: config.head_dim,
            capacity: config.max_context,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
            committed_len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn committed_len(&self) -> usize {
        self.committed_len
    }

    /// Marks the first `len` positions as committed (verified).
    pub fn commit(&mut self, len: usize) -> Result<()> {
        if len > self.len {
            return Err(Error::IndexOutOfRange { index: len, len: self.len });
        }
        self.committed_len = len;
        Ok(())
    }

    /// `2 * n_layers * n_kv_heads * head_dim * 4`.
    pub fn bytes_per_token(&self) -> usize {
        2 * self.n_layers * self.n_kv_heads * self.head_dim * 4
    }

    pub fn kv_bytes(&self, context_len: usize) -> usize {
        context_len * self.bytes_per_token()
    }

    /// Bytes actually held by the stored K/V rows.
    pub fn allocated_bytes(&self) -> usize {
        self.keys.iter().chain(&self.values).map(|v| v.len() * 4).sum()
    }

    fn slot(&self, layer: usize, kv_head: usize) -> usize {
        debug_assert!(layer < self.n_layers && kv_head < self.n_kv_heads);
        layer * self.n_kv_heads + kv_head
    }

    pub fn append(&mut self, entry: &TokenKv) -> Result<usize> {
        let width = self.n_layers * self.n_kv_heads * self.head_dim;
        if entry.keys.len() != width || entry.values.len() != width {
            return Err(Error::InvalidParam(format!(
                "token entry needs {width} key and value floats, got {} and {}",
                entry.keys.len(),
                entry.values.len()
            )));
        }
        if self.len >= self.capacity {
            return Err(Error::Capacity { capacity: self.capacity });
        }
        let hd = self.head_dim;
        for s in 0..self.keys.len() {
            self.keys[s].extend_from_slice(&entry.keys[s * hd..(s + 1) * hd]);
            self.values[s].extend_from_slice(&entry.values[s * hd..(s + 1) * hd]);
        }
        self.len += 1;
        Ok(self.len)
    }

    /// Drops every position `>= to_len`.
    pub fn truncate(&mut self, to_len: usize) -> Result<()> {
        if to_len > self.len {
            return Err(Error::Truncate { to: to_len, len: self.len });
        }
        let n = to_len * self.head_dim;
        for v in self.keys.iter_mut().chain(self.values.iter_mut()) {
            v.truncate(n);
        }
        self.len = to_len;
        self.committed_len = self.committed_len.min(to_len);
        Ok(())
    }

    pub fn key(&self, layer: usize, kv_head: usize, pos: usize) -> &[f32] {
        let hd = self.head_dim;
        &self.keys[self.slot(layer, kv_head)][pos * hd..(pos + 1) * hd]
    }

    pub fn value(&self, layer: usize, kv_head: usize, pos: usize) -> &[f32] {
        let hd = self.head_dim;
        &self.values[self.slot(layer, kv_head)][pos * hd..(pos + 1) * hd]
    }

    /// Contiguous K and V rows for positions `range`.
    pub fn rows(&self, layer: usize, kv_head: usize, range: std::ops::Range<usize>) -> (&[f32], &[f32]) {
        let hd = self.head_dim;
        let s = self.slot(layer, kv_head);
        let r = range.start * hd..range.end * hd;
        (&self.keys[s][r.clone()], &self.values[s][r])
    }

    /// Copies the K and V rows of `indices` (strictly increasing) in order.
    pub fn gather(&self, layer: usize, kv_head: usize, indices: &[usize]) -> Result<(Vec<f32>, Vec<f32>)> {
        let mut k = Vec::new();
        let mut v = Vec::new();
        self.gather_into(layer, kv_head, indices, &mut k, &mut v)?;
        Ok((k, v))
    }

    pub fn gather_into(
        &self,
        layer: usize,
        kv_head: usize,
        indices: &[usize],
        k_out: &mut Vec<f32>,
        v_out: &mut Vec<f32>,
    ) -> Result<()> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::UnsortedIndices);
        }
        if let Some(&last) = indices.last() {
            if last >= self.len {
                return Err(Error::IndexOutOfRange { index: last, len: self.len });
            }
        }
        let s = self.slot(layer, kv_head);
        let hd = self.head_dim;
        k_out.clear();
        v_out.clear();
        for &i in indices {
            k_out.extend_from_slice(&self.keys[s][i * hd..(i + 1) * hd]);
            v_out.extend_from_slice(&self.values[s][i * hd..(i + 1) * hd]);
        }
        Ok(())
    }

    /// Full K/V entry of one stored token.
    pub fn token(&self, pos: usize) -> Result<TokenKv> {
        if pos >= self.len {
            return Err(Error::IndexOutOfRange { index: pos, len: self.len });
        }
        let hd = self.head_dim;
        let mut t = TokenKv { keys: Vec::new(), values: Vec::new() };
        for s in 0..self.keys.len() {
            t.keys.extend_from_slice(&self.keys[s][pos * hd..(pos + 1) * hd]);
            t.values.extend_from_slice(&self.values[s][pos * hd..(pos + 1) * hd]);
        }
        Ok(t)
    }

    /// Bitwise comparison of the first `len` positions of two stores.
    pub fn prefix_bits_equal(&self, other: &KvStore, len: usize) -> bool {
        if len > self.len || len > other.len || self.keys.len() != other.keys.len() || self.head_dim != other.head_dim {
            return false;
        }
        let n = len * self.head_dim;
        let same = |a: &[f32], b: &[f32]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        (0..self.keys.len()).all(|s| {
            same(&self.keys[s][..n], &other.keys[s][..n]) && same(&self.values[s][..n], &other.values[s][..n])
        })
    }

    // Staged writes used by the forward pass: a layer's rows for the whole
    // batch are written before the next layer runs, then `finish_staged`
    // publishes the new length once every slot has grown by the same amount.

    pub(crate) fn stage_row(&mut self, layer: usize, kv_head: usize, key: &[f32], value: &[f32]) {
        let s = self.slot(layer, kv_head);
        self.keys[s].extend_from_slice(key);
        self.values[s].extend_from_slice(value);
    }

    pub(crate) fn finish_staged(&mut self, n: usize) {
        let expect = (self.len + n) * self.head_dim;
        assert!(
            self.keys.iter().chain(&self.values).all(|v| v.len() == expect),
            "staged rows must cover every layer and kv head"
        );
        self.len += n;
    }

    pub(crate) fn discard_staged(&mut self) {
        let n = self.len * self.head_dim;
        for v in self.keys.iter_mut().chain(self.values.iter_mut()) {
            v.truncate(n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::tiny();
        c.max_context = 8;
        c
    }

    fn entry(c: &ModelConfig, tag: f32) -> TokenKv {
        let w = c.n_layers * c.n_kv_heads * c.head_dim;
        TokenKv {
            keys: (0..w).map(|i| tag + i as f32 * 1e-3).collect(),
            values: (0..w).map(|i| -tag - i as f32 * 1e-3).collect(),
        }
    }

    #[test]
    fn append_and_read_back() {
        let c = cfg();
        let mut kv = KvStore::new(&c);
        assert_eq!(kv.append(&entry(&c, 1.0)).unwrap(), 1);
        assert_eq!(kv.append(&entry(&c, 2.0)).unwrap(), 2);
        assert_eq!(kv.token(0).unwrap(), entry(&c, 1.0));
        assert_eq!(kv.token(1).unwrap(), entry(&c, 2.0));
        assert_eq!(kv.key(1, 1, 1)[0], 2.0 + ((1 * 2 + 1) * c.head_dim) as f32 * 1e-3);
    }

    #[test]
    fn capacity_is_enforced() {
        let c = cfg();
        let mut kv = KvStore::new(&c);
        for i in 0..8 {
            kv.append(&entry(&c, i as f32)).unwrap();
        }
        assert!(matches!(kv.append(&entry(&c, 9.0)), Err(Error::Capacity { capacity: 8 })));
    }

    #[test]
    fn truncate_then_append_overwrites() {
        let c = cfg();
        let mut kv = KvStore::new(&c);
        for i in 0..5 {
            kv.append(&entry(&c, i as f32)).unwrap();
        }
        kv.truncate(5).unwrap();
        assert_eq!(kv.len(), 5);
        kv.truncate(3).unwrap();
        kv.append(&entry(&c, 42.0)).unwrap();
        assert_eq!(kv.len(), 4);
        assert_eq!(kv.token(3).unwrap(), entry(&c, 42.0));
        assert_eq!(kv.token(2).unwrap(), entry(&c, 2.0));
        assert!(matches!(kv.truncate(5), Err(Error::Truncate { to: 5, len: 4 })));
    }

    #[test]
    fn gather_edges() {
        let c = cfg();
        let mut kv = KvStore::new(&c);
        for i in 0..4 {
            kv.append(&entry(&c, i as f32)).unwrap();
        }
        let (k, v) = kv.gather(1, 0, &[0, 1, 2, 3]).unwrap();
        let (fk, fv) = kv.rows(1, 0, 0..4);
        assert_eq!((&k[..], &v[..]), (fk, fv));
        let (k, v) = kv.gather(1, 0, &[]).unwrap();
        assert!(k.is_empty() && v.is_empty());
        assert!(matches!(kv.gather(0, 0, &[1, 4]), Err(Error::IndexOutOfRange { index: 4, len: 4 })));
        assert!(matches!(kv.gather(0, 0, &[2, 1]), Err(Error::UnsortedIndices)));
        assert!(matches!(kv.gather(0, 0, &[1, 1]), Err(Error::UnsortedIndices)));
    }

    #[test]
    fn kv_bytes_arithmetic() {
        let c = ModelConfig::toy();
        let mut kv = KvStore::new(&c);
        assert_eq!(kv.kv_bytes(0), 0);
        assert_eq!(kv.kv_bytes(1), 2 * 4 * 2 * 32 * 4);
        let w = c.n_layers * c.n_kv_heads * c.head_dim;
        for _ in 0..3 {
            kv.append(&TokenKv { keys: vec![0.0; w], values: vec![0.0; w] }).unwrap();
        }
        assert_eq!(kv.allocated_bytes(), kv.kv_bytes(3));
    }

    #[test]
    fn commit_tracks_truncation() {
        let c = cfg();
        let mut kv = KvStore::new(&c);
        for i in 0..4 {
            kv.append(&entry(&c, i as f32)).unwrap();
        }
        kv.commit(4).unwrap();
        kv.truncate(2).unwrap();
        assert_eq!(kv.committed_len(), 2);
        assert!(kv.commit(3).is_err());
    }
}
