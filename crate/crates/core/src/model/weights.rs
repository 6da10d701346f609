use crate::model::ModelConfig;
use crate::rng::{self, Purpose};
use crate::{Error, Result};

/// Row-major matrices: a projection from `n_in` to `n_out` features is
/// stored as `n_out` rows of `n_in` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub mlp_norm: Vec<f32>,
    pub w_gate: Vec<f32>,
    pub w_up: Vec<f32>,
    pub w_down: Vec<f32>,
}

/// Dense parameters. The output head is the transpose of `token_embedding`.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub token_embedding: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum TensorInit {
    /// Normal entries with standard deviation `1/sqrt(fan_in)`.
    Normal { fan_in: usize },
    Constant(f32),
}

/// Initial gain of the final norm. Logits are `E · norm(h)` with `E` entries
/// of variance `1/d_model`, so a unit gain gives unit-variance logits and a
/// near-uniform next-token distribution; this gain sets the logit scale.
pub const FINAL_NORM_GAIN: f32 = 4.0;

#[derive(Clone, Debug)]
pub(crate) struct TensorSpec {
    pub name: String,
    pub len: usize,
    pub init: TensorInit,
}

/// Tensors in file order: token_embedding, then per layer attn_norm, wq, wk,
/// wv, wo, mlp_norm, w_gate, w_up, w_down, then final_norm. The position in
/// this list is also the weight-init stream index.
pub(crate) fn tensor_specs(c: &ModelConfig) -> Vec<TensorSpec> {
    let d = c.d_model;
    let h = c.mlp_hidden();
    let mut specs = vec![TensorSpec {
        name: "token_embedding".into(),
        len: c.vocab_size * d,
        // as the tied output head it maps d_model features to logits
        init: TensorInit::Normal { fan_in: c.d_model },
    }];
    for l in 0..c.n_layers {
        let t = |name: &str, len, init| TensorSpec { name: format!("layers.{l}.{name}"), len, init };
        specs.push(t("attn_norm", d, TensorInit::Constant(1.0)));
        specs.push(t("wq", c.q_dim() * d, TensorInit::Normal { fan_in: d }));
        specs.push(t("wk", c.kv_dim() * d, TensorInit::Normal { fan_in: d }));
        specs.push(t("wv", c.kv_dim() * d, TensorInit::Normal { fan_in: d }));
        specs.push(t("wo", d * c.q_dim(), TensorInit::Normal { fan_in: c.q_dim() }));
        specs.push(t("mlp_norm", d, TensorInit::Constant(1.0)));
        specs.push(t("w_gate", h * d, TensorInit::Normal { fan_in: d }));
        specs.push(t("w_up", h * d, TensorInit::Normal { fan_in: d }));
        specs.push(t("w_down", d * h, TensorInit::Normal { fan_in: h }));
    }
    specs.push(TensorSpec { name: "final_norm".into(), len: d, init: TensorInit::Constant(FINAL_NORM_GAIN) });
    specs
}

impl Weights {
    /// Deterministic initialization: tensor `i` in file order draws from the
    /// ChaCha8 stream `(seed, Weights, i)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tensors = tensor_specs(config)
            .iter()
            .enumerate()
            .map(|(i, spec)| match spec.init {
                TensorInit::Constant(v) => vec![v; spec.len],
                TensorInit::Normal { fan_in } => {
                    let std = 1.0 / (fan_in as f64).sqrt();
                    let mut r = rng::stream(seed, Purpose::Weights, i as u64, 0);
                    (0..spec.len).map(|_| (rng::normal(&mut r) * std) as f32).collect()
                }
            })
            .collect();
        Self::from_tensors(config, tensors)
    }

    /// Assemble from tensors in file order.
    pub(crate) fn from_tensors(config: &ModelConfig, tensors: Vec<Vec<f32>>) -> Result<Self> {
        let specs = tensor_specs(config);
        if tensors.len() != specs.len() {
            return Err(Error::Weights(format!("expected {} tensors, got {}", specs.len(), tensors.len())));
        }
        for (spec, t) in specs.iter().zip(&tensors) {
            if t.len() != spec.len {
                return Err(Error::Weights(format!("{}: expected {} entries, got {}", spec.name, spec.len, t.len())));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let token_embedding = next();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                mlp_norm: next(),
                w_gate: next(),
                w_up: next(),
                w_down: next(),
            })
            .collect();
        let final_norm = next();
        let w = Self { token_embedding, layers, final_norm };
        w.validate(config)?;
        Ok(w)
    }

    /// Tensors in file order.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![&self.token_embedding];
        for l in &self.layers {
            out.extend([
                &l.attn_norm[..],
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.mlp_norm,
                &l.w_gate,
                &l.w_up,
                &l.w_down,
            ]);
        }
        out.push(&self.final_norm);
        out
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.n_layers {
            return Err(Error::Weights(format!("{} layers, config has {}", self.layers.len(), config.n_layers)));
        }
        for (spec, t) in tensor_specs(config).iter().zip(self.tensors()) {
            if t.len() != spec.len {
                return Err(Error::Weights(format!("{}: expected {} entries, got {}", spec.name, spec.len, t.len())));
            }
            if let Some(i) = t.iter().position(|v| !v.is_finite()) {
                return Err(Error::Weights(format!("{}[{i}] is not finite", spec.name)));
            }
        }
        Ok(())
    }
}
