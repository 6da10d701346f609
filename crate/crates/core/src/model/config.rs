use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Attention pattern of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// Causal attention over every earlier position.
    Dense,
    /// Causal attention over the last `window` positions, the query included.
    Banded { window: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub rope_theta: f64,
    pub layer_kinds: Vec<LayerKind>,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// 4 layers, d_model 256, 8 query heads sharing 2 KV heads, head_dim 32,
    /// vocabulary 256, all layers dense.
    pub fn toy() -> Self {
        Self {
            n_layers: 4,
            d_model: 256,
            n_q_heads: 8,
            n_kv_heads: 2,
            head_dim: 32,
            vocab_size: 256,
            max_context: 1024,
            rope_theta: 10_000.0,
            layer_kinds: vec![LayerKind::Dense; 4],
            norm_eps: 1e-5,
        }
    }

    /// A small config for fast tests and the browser demo.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_q_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            vocab_size: 64,
            max_context: 512,
            rope_theta: 10_000.0,
            layer_kinds: vec![LayerKind::Dense; 2],
            norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 || self.d_model == 0 || self.head_dim == 0 {
            return fail("n_layers, d_model and head_dim must be positive".into());
        }
        if self.n_q_heads == 0 || self.n_kv_heads == 0 {
            return fail("head counts must be positive".into());
        }
        if self.n_q_heads % self.n_kv_heads != 0 {
            return fail(format!(
                "n_q_heads {} not divisible by n_kv_heads {}",
                self.n_q_heads, self.n_kv_heads
            ));
        }
        if self.n_q_heads * self.head_dim != self.d_model {
            return fail(format!(
                "n_q_heads * head_dim = {} != d_model {}",
                self.n_q_heads * self.head_dim,
                self.d_model
            ));
        }
        if self.head_dim % 2 != 0 {
            return fail(format!("head_dim {} must be even for rotary encoding", self.head_dim));
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.vocab_size > u32::MAX as usize {
            return fail("vocab_size exceeds token id range".into());
        }
        if self.max_context == 0 {
            return fail("max_context must be positive".into());
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return fail(format!("rope_theta {} must be positive", self.rope_theta));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps > 0.0) {
            return fail(format!("norm_eps {} must be positive", self.norm_eps));
        }
        if self.layer_kinds.len() != self.n_layers {
            return fail(format!(
                "{} layer kinds for {} layers",
                self.layer_kinds.len(),
                self.n_layers
            ));
        }
        for (i, kind) in self.layer_kinds.iter().enumerate() {
            if let LayerKind::Banded { window } = *kind {
                if window == 0 || window > self.max_context {
                    return fail(format!("layer {i}: banded window {window} outside 1..={}", self.max_context));
                }
            }
        }
        Ok(())
    }

    /// Query heads per KV head.
    pub fn group_size(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    pub fn q_dim(&self) -> usize {
        self.n_q_heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.d_model
    }

    /// K and V for one token across all layers, 32-bit floats.
    pub fn kv_bytes_per_token(&self) -> usize {
        2 * self.n_layers * self.n_kv_heads * self.head_dim * 4
    }

    /// K and V for one token in a single layer.
    pub fn kv_bytes_per_token_layer(&self) -> usize {
        2 * self.n_kv_heads * self.head_dim * 4
    }

    pub fn is_dense(&self, layer: usize) -> bool {
        matches!(self.layer_kinds.get(layer), Some(LayerKind::Dense))
    }

    pub fn dense_layers(&self) -> Vec<usize> {
        (0..self.n_layers).filter(|&l| self.is_dense(l)).collect()
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d
            + self.q_dim() * d
            + 2 * self.kv_dim() * d
            + d * self.q_dim()
            + 3 * self.mlp_hidden() * d;
        self.vocab_size * d + self.n_layers * per_layer + d
    }

    pub fn weight_bytes(&self) -> usize {
        self.param_count() * 4
    }
}
