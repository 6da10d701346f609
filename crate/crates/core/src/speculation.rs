//! Draft with sparse attention, verify with full attention, keep the output
//! distribution of plain decoding.
//!
//! Randomness is keyed, never sequential: the token at generated index `j`
//! is drawn with stream `(seed, TokenSample, j)` whether it is a draft, a
//! bonus token or a plain decoding step; accept draws use
//! `(seed, Accept, iteration, t)` and residual draws `(seed, Residual,
//! iteration, t)`.

use serde::{Deserialize, Serialize};

use crate::attention::{softmax_stable, AttendSpec, CollectSpec, LogitMatrix};
use crate::kv::KvStore;
use crate::model::Model;
use crate::rng::{self, Purpose};
use crate::selection::{refresh_from_logits, retention, select_window, PageIndex, SelectionSet, SelectorConfig, Strategy};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mode {
    Greedy,
    Sample { temperature: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeParams {
    pub gamma: usize,
    pub selector: SelectorConfig,
    pub mode: Mode,
    pub seed: u64,
    pub max_new_tokens: usize,
    pub eos: Option<u32>,
    /// Negative control: accept every draft without checking it.
    #[serde(skip)]
    pub skip_verification: bool,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            gamma: 4,
            selector: SelectorConfig::default(),
            mode: Mode::Greedy,
            seed: 0,
            max_new_tokens: 128,
            eos: None,
            skip_verification: false,
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 {
            return Err(Error::InvalidParam("gamma must be at least 1".into()));
        }
        if let Mode::Sample { temperature } = self.mode {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::InvalidParam(format!("temperature {temperature} must be positive")));
            }
        }
        self.selector.validate()
    }
}

/// Next-token distribution. Greedy mode reports the untempered softmax.
pub fn to_distribution(logits: &[f32], mode: Mode) -> Vec<f64> {
    let t = match mode {
        Mode::Greedy => 1.0,
        Mode::Sample { temperature } => temperature,
    };
    let scaled: Vec<f64> = logits.iter().map(|&l| l as f64 / t).collect();
    softmax_stable(&scaled).expect("vocabulary logits are finite")
}

/// Highest-probability token, ties toward the lower id.
pub fn argmax(dist: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    best as u32
}

/// Inverse-CDF draw: the first index whose cumulative mass exceeds `u`.
pub fn sample_index(dist: &[f64], u: f64) -> u32 {
    let mut cum = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        cum += p;
        if u < cum {
            return i as u32;
        }
    }
    // rounding left u above the total: take the last supported entry
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u32
}

/// The token at generated index `gen_index`.
pub fn sample_token(dist: &[f64], mode: Mode, seed: u64, gen_index: u64) -> u32 {
    match mode {
        Mode::Greedy => argmax(dist),
        Mode::Sample { .. } => sample_index(dist, rng::uniform_at(seed, Purpose::TokenSample, gen_index, 0)),
    }
}

/// `normalize(max(0, p - q))`.
pub fn residual_distribution(p: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    if p.len() != q.len() {
        return Err(Error::InvalidParam(format!("p has {} entries, q has {}", p.len(), q.len())));
    }
    let mut r: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).max(0.0)).collect();
    let total: f64 = r.iter().sum();
    if total <= 0.0 {
        return Err(Error::IdenticalDistributions);
    }
    for x in r.iter_mut() {
        *x /= total;
    }
    Ok(r)
}

/// Outcome of checking a draft chain against target distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub accepted: usize,
    /// `min(1, p_t(x_t)/q_t(x_t))` (an indicator in greedy mode) for each
    /// examined position.
    pub accept_probs: Vec<f64>,
    /// Replacement for the first rejected draft.
    pub correction: Option<u32>,
}

/// Modified rejection sampling over `drafts` with draft distributions `q`
/// and target distributions `p` (at least one per draft).
pub fn accept_drafts(
    drafts: &[u32],
    q: &[Vec<f64>],
    p: &[Vec<f64>],
    mode: Mode,
    seed: u64,
    iteration: u64,
) -> Result<Decision> {
    if q.len() != drafts.len() || p.len() < drafts.len() {
        return Err(Error::InvalidParam("one q and p distribution per draft".into()));
    }
    let mut accept_probs = Vec::with_capacity(drafts.len());
    for (t, &x) in drafts.iter().enumerate() {
        let (pt, qt) = (&p[t], &q[t]);
        let xi = x as usize;
        let label = t as u64 + 1;
        let (prob, ok) = match mode {
            Mode::Greedy => {
                let ok = argmax(pt) == x;
                (if ok { 1.0 } else { 0.0 }, ok)
            }
            Mode::Sample { .. } => {
                let prob = if qt[xi] > 0.0 { (pt[xi] / qt[xi]).min(1.0) } else { 0.0 };
                (prob, rng::uniform_at(seed, Purpose::Accept, iteration, label) < prob)
            }
        };
        accept_probs.push(prob);
        if !ok {
            let correction = match mode {
                Mode::Greedy => argmax(pt),
                Mode::Sample { .. } => sample_index(
                    &residual_distribution(pt, qt)?,
                    rng::uniform_at(seed, Purpose::Residual, iteration, label),
                ),
            };
            return Ok(Decision { accepted: t, accept_probs, correction: Some(correction) });
        }
    }
    Ok(Decision { accepted: drafts.len(), accept_probs, correction: None })
}

/// Full-attention forward over the prompt. Returns the last token's logits
/// and, when `collect` is set, one-row logit matrices of the last prompt
/// token over positions before it.
pub fn prefill(model: &Model, prompt: &[u32], kv: &mut KvStore, collect: bool) -> Result<(Vec<f32>, Option<Vec<LogitMatrix>>)> {
    let c = model.config();
    if prompt.is_empty() || prompt.len() >= c.max_context {
        return Err(Error::InvalidParam(format!(
            "prompt length {} must be in 1..{}",
            prompt.len(),
            c.max_context
        )));
    }
    let m = prompt.len();
    let positions: Vec<usize> = (kv.len()..kv.len() + m).collect();
    let spec = collect.then(|| CollectSpec { rows: vec![m - 1], labels: vec![1], prefix_end: m - 1, capture_queries: false });
    let out = model.forward(prompt, &positions, kv, &AttendSpec::Full, spec.as_ref())?;
    kv.commit(kv.len())?;
    Ok((out.last_logits().to_vec(), out.collected))
}

/// Drafted chain for one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftState {
    /// Conditioning token: emitted last iteration, not yet forwarded.
    pub conditioning: u32,
    pub tokens: Vec<u32>,
    pub q_dists: Vec<Vec<f64>>,
    /// Position of the conditioning token.
    pub window_start: usize,
    pub kv_bytes: u64,
    pub selection_bytes: u64,
    /// Sets used by the last draft step.
    pub selections: Vec<SelectionSet>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyOutcome {
    pub accepted: usize,
    /// Accepted drafts followed by the correction or bonus token.
    pub emitted: Vec<u32>,
    pub p_dists: Vec<Vec<f64>>,
    pub accept_probs: Vec<f64>,
    pub collected: Option<Vec<LogitMatrix>>,
    pub kv_bytes: u64,
    pub collect_bytes: u64,
}

/// One decoding iteration, as persisted in the raw stats stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: u64,
    pub selector: Strategy,
    pub gamma: usize,
    /// Committed tokens before the draft window (the sparsifiable prefix).
    pub prefix_len: usize,
    pub accepted: usize,
    pub emitted: Vec<u32>,
    pub draft_tokens: Vec<u32>,
    /// One flag per examined position, `min(accepted + 1, gamma)` entries.
    pub accept_flags: Vec<bool>,
    pub accept_probs: Vec<f64>,
    /// Acceptance probability of the rejected draft, if any.
    pub rejected_accept_prob: Option<f64>,
    pub draft_kv_bytes: u64,
    pub verify_kv_bytes: u64,
    /// Logits written during verification, or page summaries read while drafting.
    pub selection_bytes: u64,
    /// Mean selection size over dense layers during drafting.
    pub mean_k: f64,
    /// Mean fraction of the previous iteration's selection kept, over dense layers.
    pub retention: Option<f64>,
}

/// A decoding session: owns its KV cache, selection sets and token history.
#[derive(Debug)]
pub struct Session<'m> {
    model: &'m Model,
    params: DecodeParams,
    kv: KvStore,
    pages: Option<PageIndex>,
    sets: Vec<SelectionSet>,
    tokens: Vec<u32>,
    prompt_len: usize,
    iteration: u64,
}

impl<'m> Session<'m> {
    /// Prefills the prompt, emits the first token and bootstraps selection.
    pub fn start(model: &'m Model, prompt: &[u32], params: DecodeParams) -> Result<Self> {
        params.validate()?;
        if let Some(&t) = prompt.iter().find(|&&t| t as usize >= model.config().vocab_size) {
            return Err(Error::InvalidParam(format!("prompt token {t} outside vocabulary")));
        }
        let strategy = params.selector.strategy;
        let mut kv = model.new_kv();
        let (logits, collected) = prefill(model, prompt, &mut kv, strategy.uses_logits())?;
        let first = sample_token(&to_distribution(&logits, params.mode), params.mode, params.seed, 0);
        let mut s = Self {
            model,
            params,
            kv,
            pages: None,
            sets: Vec::new(),
            tokens: prompt.to_vec(),
            prompt_len: prompt.len(),
            iteration: 0,
        };
        s.tokens.push(first);
        s.refresh(collected, 0)?;
        Ok(s)
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn params(&self) -> &DecodeParams {
        &self.params
    }

    pub fn kv(&self) -> &KvStore {
        &self.kv
    }

    /// Prompt followed by every emitted token.
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }

    pub fn selection_sets(&self) -> &[SelectionSet] {
        &self.sets
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Installs the sets for the next draft chain and returns the mean
    /// retention against the previous sets.
    fn refresh(&mut self, collected: Option<Vec<LogitMatrix>>, accepted: usize) -> Result<Option<f64>> {
        let c = self.model.config();
        let cfg = &self.params.selector;
        let dense = c.dense_layers();
        let next = match cfg.strategy {
            Strategy::Window => dense.iter().map(|&l| select_window(l, self.kv.len(), cfg)).collect(),
            Strategy::QuestLike => {
                let pages = self.pages.get_or_insert_with(|| PageIndex::new(c, cfg.page_size));
                pages.sync(&self.kv, self.kv.len())?;
                return Ok(None);
            }
            _ => {
                let mats = collected.ok_or_else(|| Error::InvalidParam("selector needs collected logits".into()))?;
                let by_layer: Vec<Option<LogitMatrix>> = mats.into_iter().map(Some).collect();
                refresh_from_logits(&by_layer, &dense, accepted, cfg)?
            }
        };
        let kept = mean_retention(&self.sets, &next);
        self.sets = next;
        Ok(kept)
    }

    /// Drafts up to `gamma` tokens under sparse attention, appending
    /// provisional KV entries.
    pub fn draft_chain(&mut self) -> Result<DraftState> {
        let c = self.model.config();
        let start = self.kv.len();
        if start + 1 >= c.max_context {
            return Err(Error::ContextOverflow { position: start + 1, max_context: c.max_context });
        }
        let gamma = self.params.gamma.min(c.max_context - 1 - start);
        let gen0 = (self.tokens.len() - self.prompt_len) as u64;
        let y = *self.tokens.last().expect("session has emitted a token");
        let mut draft = DraftState {
            conditioning: y,
            tokens: Vec::with_capacity(gamma),
            q_dists: Vec::with_capacity(gamma),
            window_start: start,
            kv_bytes: 0,
            selection_bytes: 0,
            selections: self.sets.clone(),
        };
        for t in 0..gamma {
            let tok = if t == 0 { y } else { draft.tokens[t - 1] };
            let spec = match &self.pages {
                Some(pages) => AttendSpec::QueryAware { pages, config: &self.params.selector, prefix_len: start },
                None => AttendSpec::Sparse(&self.sets),
            };
            let out = self.model.forward(&[tok], &[start + t], &mut self.kv, &spec, None)?;
            draft.kv_bytes += rows_to_bytes(self.model, &out.kv_rows_read);
            if let Some(pages) = &self.pages {
                let n_pages = start.div_ceil(pages.page_size());
                draft.selection_bytes += (pages.summary_bytes(n_pages) * c.dense_layers().len()) as u64;
                draft.selections = out.selections.clone();
            }
            let q = to_distribution(out.last_logits(), self.params.mode);
            draft.tokens.push(sample_token(&q, self.params.mode, self.params.seed, gen0 + t as u64));
            draft.q_dists.push(q);
        }
        Ok(draft)
    }

    /// Replaces the provisional KV with a joint full-attention pass over the
    /// conditioning token and the drafts, decides acceptance and commits the
    /// verified positions.
    pub fn verify(&mut self, draft: &DraftState) -> Result<VerifyOutcome> {
        let start = draft.window_start;
        let gamma = draft.tokens.len();
        self.kv.truncate(start)?;
        let mut batch = Vec::with_capacity(gamma + 1);
        batch.push(draft.conditioning);
        batch.extend_from_slice(&draft.tokens);
        let positions: Vec<usize> = (start..start + gamma + 1).collect();
        let rows = self.params.selector.strategy.collect_rows(gamma);
        let collect = (!rows.is_empty()).then(|| CollectSpec::rows(rows, start));
        let out = self.model.forward(&batch, &positions, &mut self.kv, &AttendSpec::Full, collect.as_ref())?;

        let p_dists: Vec<Vec<f64>> = (0..=gamma).map(|i| to_distribution(out.logits_row(i), self.params.mode)).collect();
        let decision = if self.params.skip_verification {
            Decision { accepted: gamma, accept_probs: vec![1.0; gamma], correction: None }
        } else {
            accept_drafts(&draft.tokens, &draft.q_dists, &p_dists, self.params.mode, self.params.seed, self.iteration)?
        };
        let a = decision.accepted;
        let gen0 = (self.tokens.len() - self.prompt_len) as u64;
        let trailing = match decision.correction {
            Some(t) => t,
            None => sample_token(&p_dists[gamma], self.params.mode, self.params.seed, gen0 + gamma as u64),
        };
        let mut emitted = draft.tokens[..a].to_vec();
        emitted.push(trailing);

        self.kv.truncate(start + a + 1)?;
        self.kv.commit(start + a + 1)?;
        let collect_bytes = out
            .collected
            .as_ref()
            .map_or(0, |ms| ms.iter().map(|m| (m.data.len() * 4) as u64).sum());
        Ok(VerifyOutcome {
            accepted: a,
            emitted,
            p_dists,
            accept_probs: decision.accept_probs,
            collected: out.collected,
            kv_bytes: rows_to_bytes(self.model, &out.kv_rows_read),
            collect_bytes,
        })
    }

    pub fn step(&mut self) -> Result<IterationStats> {
        self.step_detailed().map(|(s, _, _)| s)
    }

    /// One draft-verify-refresh iteration, also returning its intermediate state.
    pub fn step_detailed(&mut self) -> Result<(IterationStats, DraftState, VerifyOutcome)> {
        let draft = self.draft_chain()?;
        let mut outcome = self.verify(&draft)?;
        self.tokens.extend_from_slice(&outcome.emitted);
        let iteration = self.iteration;
        self.iteration += 1;

        let gamma = draft.tokens.len();
        let a = outcome.accepted;
        let examined = outcome.accept_probs.len();
        let accept_flags: Vec<bool> = (0..examined).map(|t| t < a).collect();
        let rejected_accept_prob = (a < gamma).then(|| outcome.accept_probs[a]);
        let mean_k = if draft.selections.is_empty() {
            0.0
        } else {
            draft.selections.iter().map(|s| s.k as f64).sum::<f64>() / draft.selections.len() as f64
        };
        let strategy = self.params.selector.strategy;
        let kept = match strategy {
            Strategy::QuestLike => {
                self.refresh(None, a)?;
                let kept = mean_retention(&self.sets, &draft.selections);
                self.sets = draft.selections.clone();
                kept
            }
            _ => self.refresh(outcome.collected.clone(), a)?,
        };
        let selection_bytes = match strategy {
            Strategy::QuestLike => draft.selection_bytes,
            _ => outcome.collect_bytes,
        };
        if outcome.collected.is_some() && !strategy.uses_logits() {
            outcome.collected = None;
        }
        let stats = IterationStats {
            iteration,
            selector: strategy,
            gamma,
            prefix_len: draft.window_start,
            accepted: a,
            emitted: outcome.emitted.clone(),
            draft_tokens: draft.tokens.clone(),
            accept_flags,
            accept_probs: outcome.accept_probs.clone(),
            rejected_accept_prob,
            draft_kv_bytes: draft.kv_bytes,
            verify_kv_bytes: outcome.kv_bytes,
            selection_bytes,
            mean_k,
            retention: kept,
        };
        Ok((stats, draft, outcome))
    }
}

fn rows_to_bytes(model: &Model, rows_per_layer: &[usize]) -> u64 {
    let per = model.config().kv_bytes_per_token_layer() as u64;
    rows_per_layer.iter().map(|&r| r as u64 * per).sum()
}

fn mean_retention(prev: &[SelectionSet], next: &[SelectionSet]) -> Option<f64> {
    if prev.is_empty() || prev.len() != next.len() {
        return None;
    }
    let total: f64 = prev.iter().zip(next).map(|(a, b)| retention(&a.indices, &b.indices)).sum();
    Some(total / prev.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub stats: Vec<IterationStats>,
}

fn check_budget(model: &Model, prompt_len: usize, max_new: usize) -> Result<()> {
    let max = model.config().max_context;
    if prompt_len + max_new > max {
        return Err(Error::ContextOverflow { position: prompt_len + max_new - 1, max_context: max });
    }
    Ok(())
}

/// Cuts `tokens` to `max_new` entries and after the first `eos`.
fn finish(mut tokens: Vec<u32>, max_new: usize, eos: Option<u32>) -> Vec<u32> {
    tokens.truncate(max_new);
    if let Some(pos) = eos.and_then(|e| tokens.iter().position(|&t| t == e)) {
        tokens.truncate(pos + 1);
    }
    tokens
}

fn done(tokens: &[u32], max_new: usize, eos: Option<u32>) -> bool {
    tokens.len() >= max_new || eos.is_some_and(|e| tokens.contains(&e))
}

/// Speculative generation of up to `max_new_tokens` tokens.
pub fn generate(model: &Model, prompt: &[u32], params: &DecodeParams) -> Result<Generation> {
    params.validate()?;
    check_budget(model, prompt.len(), params.max_new_tokens)?;
    if params.max_new_tokens == 0 {
        return Ok(Generation { tokens: Vec::new(), stats: Vec::new() });
    }
    let mut session = Session::start(model, prompt, params.clone())?;
    let mut stats = Vec::new();
    while !done(session.generated(), params.max_new_tokens, params.eos) {
        stats.push(session.step()?);
    }
    let tokens = finish(session.generated().to_vec(), params.max_new_tokens, params.eos);
    Ok(Generation { tokens, stats })
}

/// Plain full-attention decoding, one token per forward.
pub fn vanilla_generate(
    model: &Model,
    prompt: &[u32],
    mode: Mode,
    seed: u64,
    max_new_tokens: usize,
    eos: Option<u32>,
) -> Result<Vec<u32>> {
    check_budget(model, prompt.len(), max_new_tokens)?;
    if max_new_tokens == 0 {
        return Ok(Vec::new());
    }
    let mut kv = model.new_kv();
    let (mut logits, _) = prefill(model, prompt, &mut kv, false)?;
    let mut out: Vec<u32> = Vec::with_capacity(max_new_tokens);
    loop {
        let tok = sample_token(&to_distribution(&logits, mode), mode, seed, out.len() as u64);
        out.push(tok);
        if done(&out, max_new_tokens, eos) {
            break;
        }
        let pos = kv.len();
        logits = model.forward(&[tok], &[pos], &mut kv, &AttendSpec::Full, None)?.logits;
    }
    Ok(finish(out, max_new_tokens, eos))
}
