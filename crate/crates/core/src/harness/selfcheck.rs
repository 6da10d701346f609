//! Greedy losslessness suite and invariant spot-checks.

use serde::{Deserialize, Serialize};

use crate::attention::{AttendSpec, CollectSpec};
use crate::harness::Workload;
use crate::kv::KvStore;
use crate::model::Model;
use crate::selection::Strategy;
use crate::speculation::{accept_drafts, generate, vanilla_generate, DecodeParams, Mode, Session};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfcheckConfig {
    /// Prompt `i` of the workload is drawn for each seed `i`.
    pub seeds: usize,
    pub selectors: Vec<Strategy>,
    pub gammas: Vec<usize>,
    pub max_new_tokens: usize,
    pub sparse_ratio: f64,
}

impl Default for SelfcheckConfig {
    fn default() -> Self {
        Self {
            seeds: 4,
            selectors: Strategy::ALL.to_vec(),
            gammas: vec![3, 7],
            max_new_tokens: 32,
            sparse_ratio: 0.1,
        }
    }
}

impl SelfcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 || self.selectors.is_empty() || self.gammas.is_empty() || self.max_new_tokens == 0 {
            return Err(Error::InvalidParam("selfcheck needs seeds, selectors, gammas and tokens".into()));
        }
        Ok(())
    }
}

/// One speculative run checked against plain greedy decoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub selector: Strategy,
    pub gamma: usize,
    pub seed: u64,
    pub tokens_match: bool,
    /// First generated index where the outputs differ.
    pub first_divergence: Option<usize>,
    /// Committed KV matched the from-scratch recomputation after every
    /// iteration whose committed tokens still agreed with the reference.
    pub kv_canonical: bool,
    pub kv_checks: usize,
    pub iterations: usize,
    pub mean_accepted: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.tokens_match && self.kv_canonical
    }
}

/// Runs `params` on `prompt` in greedy mode, comparing tokens with plain
/// decoding and the committed KV after every iteration with one joint
/// full-attention forward over the reference tokens.
pub fn check_case(model: &Model, prompt: &[u32], params: &DecodeParams, seed: u64) -> Result<CaseReport> {
    let params = DecodeParams { mode: Mode::Greedy, eos: None, ..params.clone() };
    let max_new = params.max_new_tokens;
    let room = model.config().max_context - prompt.len();
    let extra = (max_new + params.gamma + 1).min(room);
    let reference = vanilla_generate(model, prompt, Mode::Greedy, 0, extra, None)?;
    let mut all: Vec<u32> = prompt.to_vec();
    all.extend_from_slice(&reference);
    let mut ref_kv = model.new_kv();
    let positions: Vec<usize> = (0..all.len()).collect();
    model.forward(&all, &positions, &mut ref_kv, &AttendSpec::Full, None)?;

    let mut session = Session::start(model, prompt, params.clone())?;
    let mut kv_canonical = true;
    let mut kv_checks = 0;
    let mut iterations = 0;
    let mut accepted = 0;
    while session.generated().len() < max_new {
        let st = session.step()?;
        iterations += 1;
        accepted += st.accepted;
        let kv: &KvStore = session.kv();
        let committed = &session.tokens()[..kv.len()];
        if committed.len() <= all.len() && committed == &all[..committed.len()] {
            kv_checks += 1;
            kv_canonical &= kv.prefix_bits_equal(&ref_kv, kv.len());
        }
    }
    let got = &session.generated()[..max_new];
    let want = &reference[..max_new];
    let first_divergence = got.iter().zip(want).position(|(a, b)| a != b);
    Ok(CaseReport {
        selector: params.selector.strategy,
        gamma: params.gamma,
        seed,
        tokens_match: first_divergence.is_none(),
        first_divergence,
        kv_canonical,
        kv_checks,
        iterations,
        mean_accepted: if iterations == 0 { 0.0 } else { accepted as f64 / iterations as f64 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorTally {
    pub selector: Strategy,
    pub passed: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpotCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfcheckReport {
    pub cases: Vec<CaseReport>,
    pub per_selector: Vec<SelectorTally>,
    pub spot_checks: Vec<SpotCheck>,
}

impl SelfcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseReport::passed) && self.spot_checks.iter().all(|s| s.passed)
    }

    pub fn first_failure(&self) -> Option<&CaseReport> {
        self.cases.iter().find(|c| !c.passed())
    }
}

/// Every (seed, selector, gamma) case plus the spot-checks. `base` supplies
/// the selector settings other than strategy and ratio.
pub fn run_selfcheck(model: &Model, workload: &Workload, base: &DecodeParams, cfg: &SelfcheckConfig) -> Result<SelfcheckReport> {
    cfg.validate()?;
    workload.validate(model.config(), cfg.max_new_tokens)?;
    let vocab = model.config().vocab_size;
    let mut cases = Vec::new();
    for seed in 0..cfg.seeds {
        let prompt = workload.prompt(seed, vocab);
        for &strategy in &cfg.selectors {
            for &gamma in &cfg.gammas {
                let mut p = base.clone();
                p.gamma = gamma;
                p.max_new_tokens = cfg.max_new_tokens;
                p.selector.strategy = strategy;
                p.selector.sparse_ratio = cfg.sparse_ratio;
                cases.push(check_case(model, &prompt, &p, seed as u64)?);
            }
        }
    }
    let per_selector = cfg
        .selectors
        .iter()
        .map(|&s| {
            let mine: Vec<&CaseReport> = cases.iter().filter(|c| c.selector == s).collect();
            SelectorTally { selector: s, passed: mine.iter().filter(|c| c.passed()).count(), total: mine.len() }
        })
        .collect();
    let spot_checks = spot_checks(model, &workload.prompt(0, vocab), base, cfg)?;
    Ok(SelfcheckReport { cases, per_selector, spot_checks })
}

fn spot(name: &str, passed: bool, detail: String) -> SpotCheck {
    SpotCheck { name: name.into(), passed, detail }
}

fn spot_checks(model: &Model, prompt: &[u32], base: &DecodeParams, cfg: &SelfcheckConfig) -> Result<Vec<SpotCheck>> {
    let mut out = Vec::new();

    let mut full = base.clone();
    full.mode = Mode::Greedy;
    full.gamma = cfg.gammas[0];
    full.max_new_tokens = cfg.max_new_tokens;
    full.selector.sparse_ratio = 1.0;
    full.selector.strategy = Strategy::Collect2;
    full.skip_verification = false;
    let g = generate(model, prompt, &full)?;
    let short = g.stats.iter().filter(|s| s.accepted != s.gamma).count();
    out.push(spot("full selection accepts every draft", short == 0, format!("{short} short iterations of {}", g.stats.len())));

    let q = vec![vec![1.0, 0.0]];
    let p = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
    let mode = Mode::Sample { temperature: 1.0 };
    let mut accepted = 0usize;
    let mut bad = 0usize;
    let n = 4000u64;
    for s in 0..n {
        let d = accept_drafts(&[0], &q, &p, mode, s, 0)?;
        match d.correction {
            None => accepted += 1,
            Some(c) if c != 1 => bad += 1,
            Some(_) => {}
        }
    }
    let rate = accepted as f64 / n as f64;
    out.push(spot(
        "two-token rejection kernel",
        bad == 0 && (rate - 0.5).abs() < 0.04,
        format!("accept rate {rate:.3}, {bad} wrong corrections"),
    ));

    let n = prompt.len();
    let positions: Vec<usize> = (0..n).collect();
    let mut kv_a = model.new_kv();
    let mut kv_b = model.new_kv();
    let plain = model.forward(prompt, &positions, &mut kv_a, &AttendSpec::Full, None)?;
    let cs = CollectSpec::rows(vec![n - 1], n - 1);
    let collected = model.forward(prompt, &positions, &mut kv_b, &AttendSpec::Full, Some(&cs))?;
    let same = plain.logits.iter().zip(&collected.logits).all(|(a, b)| a.to_bits() == b.to_bits())
        && kv_a.prefix_bits_equal(&kv_b, n);
    out.push(spot("logit collection leaves outputs unchanged", same, String::new()));

    let a = vanilla_generate(model, prompt, Mode::Sample { temperature: 1.0 }, 3, 8, None)?;
    let b = vanilla_generate(model, prompt, Mode::Sample { temperature: 1.0 }, 3, 8, None)?;
    out.push(spot("seeded decoding is deterministic", a == b, String::new()));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::WorkloadKind;
    use crate::model::ModelConfig;

    fn setup() -> (Model, Workload) {
        let m = Model::init(ModelConfig::tiny(), 2).unwrap();
        let w = Workload { kind: WorkloadKind::RepeatedSegments { segment_len: 6, repeats: 3 }, prompt_len: 40, n_prompts: 2, seed: 1 };
        (m, w)
    }

    fn quick() -> SelfcheckConfig {
        SelfcheckConfig { seeds: 2, gammas: vec![2, 5], max_new_tokens: 16, ..SelfcheckConfig::default() }
    }

    #[test]
    fn passes_and_tallies() {
        let (m, w) = setup();
        let r = run_selfcheck(&m, &w, &DecodeParams::default(), &quick()).unwrap();
        assert!(r.passed(), "{:?}", r.first_failure());
        assert!(r.per_selector.iter().all(|t| t.passed == t.total && t.total == 4));
        assert!(r.cases.iter().all(|c| c.kv_checks == c.iterations));
    }

    #[test]
    fn fault_is_caught() {
        let (m, w) = setup();
        let base = DecodeParams { skip_verification: true, ..DecodeParams::default() };
        let r = run_selfcheck(&m, &w, &base, &quick()).unwrap();
        assert!(!r.passed());
        assert!(r.first_failure().unwrap().first_divergence.is_some());
    }
}
