//! Command-line front end. A run is described by one JSON file; flags
//! override it. Exit codes: 0 success, 1 check or runtime failure, 2 usage
//! or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::harness::report::{self, stats_lines};
use crate::harness::{
    compare_selectors, run_benchmark, run_selfcheck, HardwareModel, SelfcheckConfig, SweepConfig, Sweeper, Workload,
};
use crate::model::{Model, ModelConfig};
use crate::selection::Strategy;
use crate::speculation::{generate, DecodeParams, Mode};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    Init {
        seed: u64,
        #[serde(default)]
        config: ModelConfig,
    },
    Load {
        path: PathBuf,
    },
}

impl Default for ModelSource {
    fn default() -> Self {
        ModelSource::Init { seed: 0, config: ModelConfig::toy() }
    }
}

/// A preset name or explicit parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HardwareSpec {
    Preset(String),
    Custom(HardwareModel),
}

impl Default for HardwareSpec {
    fn default() -> Self {
        HardwareSpec::Preset("h100".into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSource,
    pub workload: Workload,
    pub decode: DecodeParams,
    /// Explicit prompt for `generate`; workload prompt 0 otherwise.
    pub prompt: Option<Vec<u32>>,
    pub hardware: HardwareSpec,
    /// Context length priced by the cost model; measured prefix length otherwise.
    pub context: Option<f64>,
    pub out_dir: PathBuf,
    pub sweep: SweepConfig,
    pub compare: Vec<Strategy>,
    pub selfcheck: SelfcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSource::default(),
            workload: Workload::default(),
            decode: DecodeParams::default(),
            prompt: None,
            hardware: HardwareSpec::default(),
            context: None,
            out_dir: PathBuf::from("out"),
            sweep: SweepConfig::default(),
            compare: vec![Strategy::Window, Strategy::QuestLike, Strategy::Collect2],
            selfcheck: SelfcheckConfig::default(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "verispec", version, about = "Self-speculative decoding with sparse-attention drafts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Decode one prompt and write its tokens and per-iteration stats.
    Generate,
    /// Check speculative greedy output against plain decoding.
    Selfcheck,
    /// Benchmark one selector over the workload.
    Bench,
    /// Benchmark several selectors at the same gamma.
    Compare,
    /// Tune sparse ratio and gamma against the cost model.
    Sweep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeFlag {
    Greedy,
    Sample,
}

#[derive(Args, Debug, Default, Clone)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Selector name; a comma-separated list for `compare`.
    #[arg(long, global = true, value_delimiter = ',', value_name = "NAME")]
    pub selector: Vec<String>,
    /// Draft length; a comma-separated list sets the sweep grid.
    #[arg(long, global = true, value_delimiter = ',')]
    pub gamma: Vec<usize>,
    /// Sparse ratio; a comma-separated list sets the sweep grid.
    #[arg(long, global = true, value_delimiter = ',')]
    pub ratio: Vec<f64>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeFlag>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    #[arg(long, global = true)]
    pub max_new_tokens: Option<usize>,
    /// Accept drafts without verification (negative control for selfcheck).
    #[arg(long, global = true, hide = true)]
    pub inject_fault: bool,
}

/// Failure class of a command, mapped to the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
    Check(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) | Failure::Check(_) => 1,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: Error) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Reads the config file, if any, and applies flag overrides.
pub fn resolve_config(cmd: Command, o: &Overrides) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &o.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(dir) = &o.out {
        cfg.out_dir = dir.clone();
    }
    if let Some(seed) = o.seed {
        if let ModelSource::Init { seed: s, .. } = &mut cfg.model {
            *s = seed;
        }
        cfg.workload.seed = seed;
        cfg.decode.seed = seed;
    }
    let selectors = o.selector.iter().map(|s| s.parse::<Strategy>()).collect::<Result<Vec<_>>>().map_err(usage)?;
    match (cmd, selectors.as_slice()) {
        (_, []) => {}
        (Command::Compare, list) => cfg.compare = list.to_vec(),
        (Command::Selfcheck, list) => cfg.selfcheck.selectors = list.to_vec(),
        (_, [one]) => cfg.decode.selector.strategy = *one,
        _ => return Err(usage("--selector takes one name for this command")),
    }
    match (cmd, o.gamma.as_slice()) {
        (_, []) => {}
        (Command::Sweep, list) => cfg.sweep.gammas = list.to_vec(),
        (Command::Selfcheck, list) => cfg.selfcheck.gammas = list.to_vec(),
        (_, [one]) => cfg.decode.gamma = *one,
        _ => return Err(usage("--gamma takes one value for this command")),
    }
    match (cmd, o.ratio.as_slice()) {
        (_, []) => {}
        (Command::Sweep, list) => cfg.sweep.ratios = list.to_vec(),
        (Command::Selfcheck, [one]) => cfg.selfcheck.sparse_ratio = *one,
        (_, [one]) => cfg.decode.selector.sparse_ratio = *one,
        _ => return Err(usage("--ratio takes one value for this command")),
    }
    let temperature = o.temperature.or(match cfg.decode.mode {
        Mode::Sample { temperature } => Some(temperature),
        Mode::Greedy => None,
    });
    match o.mode {
        Some(ModeFlag::Greedy) => cfg.decode.mode = Mode::Greedy,
        Some(ModeFlag::Sample) => cfg.decode.mode = Mode::Sample { temperature: temperature.unwrap_or(1.0) },
        None => {
            if let (Mode::Sample { .. }, Some(t)) = (cfg.decode.mode, o.temperature) {
                cfg.decode.mode = Mode::Sample { temperature: t };
            }
        }
    }
    if let Some(n) = o.max_new_tokens {
        cfg.decode.max_new_tokens = n;
        cfg.selfcheck.max_new_tokens = n;
    }
    cfg.decode.skip_verification = o.inject_fault;
    cfg.decode.validate().map_err(usage)?;
    if let ModelSource::Load { path } = &cfg.model {
        if !path.is_file() {
            return Err(usage(format!("weight file not found: {}", path.display())));
        }
    }
    Ok(cfg)
}

fn load_model(src: &ModelSource) -> std::result::Result<Model, Failure> {
    match src {
        ModelSource::Init { seed, config } => Model::init(config.clone(), *seed).map_err(usage),
        ModelSource::Load { path } => Model::load(path).map_err(|e| usage(format!("{}: {e}", path.display()))),
    }
}

fn hardware(spec: &HardwareSpec, config: &ModelConfig) -> std::result::Result<HardwareModel, Failure> {
    let hw = match spec {
        HardwareSpec::Preset(name) => HardwareModel::preset(name, config).map_err(usage)?,
        HardwareSpec::Custom(hw) => hw.clone(),
    };
    hw.validate().map_err(usage)?;
    Ok(hw)
}

/// Parses `args`, runs the command and prints its report.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli.command, &cli.overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Runtime(m) => eprintln!("error: {m}"),
                Failure::Check(m) => eprintln!("check failed: {m}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}

pub fn execute(cmd: Command, o: &Overrides) -> std::result::Result<(), Failure> {
    let cfg = resolve_config(cmd, o)?;
    let model = load_model(&cfg.model)?;
    let hw = hardware(&cfg.hardware, model.config())?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| usage(format!("{}: {e}", cfg.out_dir.display())))?;
    let out = cfg.out_dir.as_path();
    match cmd {
        Command::Generate => cmd_generate(&model, &cfg, out),
        Command::Selfcheck => cmd_selfcheck(&model, &cfg, out),
        Command::Bench => cmd_bench(&model, &cfg, out),
        Command::Compare => cmd_compare(&model, &cfg, &hw, out),
        Command::Sweep => cmd_sweep(&model, &cfg, &hw, out),
    }
}

fn cmd_generate(model: &Model, cfg: &RunConfig, out: &Path) -> std::result::Result<(), Failure> {
    let prompt = match &cfg.prompt {
        Some(p) => p.clone(),
        None => {
            cfg.workload.validate(model.config(), cfg.decode.max_new_tokens).map_err(usage)?;
            cfg.workload.prompt(0, model.config().vocab_size)
        }
    };
    let g = generate(model, &prompt, &cfg.decode).map_err(runtime)?;
    report::write_json(&out.join("generation.json"), &g).map_err(runtime)?;
    report::write_jsonl(&out.join("stats.jsonl"), &g.stats).map_err(runtime)?;
    let accepted: usize = g.stats.iter().map(|s| s.accepted).sum();
    let iters = g.stats.len().max(1);
    println!(
        "generated {} tokens in {} iterations, {:.3} accepted per iteration ({})",
        g.tokens.len(),
        g.stats.len(),
        accepted as f64 / iters as f64,
        cfg.decode.selector.strategy
    );
    Ok(())
}

fn cmd_selfcheck(model: &Model, cfg: &RunConfig, out: &Path) -> std::result::Result<(), Failure> {
    let r = run_selfcheck(model, &cfg.workload, &cfg.decode, &cfg.selfcheck).map_err(usage)?;
    report::write_json(&out.join("selfcheck.json"), &r).map_err(runtime)?;
    println!("{:<18} {:>6} {:>6}", "selector", "pass", "total");
    for t in &r.per_selector {
        println!("{:<18} {:>6} {:>6}", t.selector.name(), t.passed, t.total);
    }
    for s in &r.spot_checks {
        let tag = if s.passed { "PASS" } else { "FAIL" };
        if s.detail.is_empty() {
            println!("{tag} {}", s.name);
        } else {
            println!("{tag} {} ({})", s.name, s.detail);
        }
    }
    if r.passed() {
        println!("selfcheck passed: {} cases", r.cases.len());
        return Ok(());
    }
    let msg = match r.first_failure() {
        Some(c) => format!(
            "{} gamma {} seed {}: first divergence at generated token {}{}",
            c.selector,
            c.gamma,
            c.seed,
            c.first_divergence.map_or("none".into(), |d| d.to_string()),
            if c.kv_canonical { "" } else { ", committed KV not canonical" }
        ),
        None => "spot-check failed".into(),
    };
    Err(Failure::Check(msg))
}

fn cmd_bench(model: &Model, cfg: &RunConfig, out: &Path) -> std::result::Result<(), Failure> {
    cfg.workload.validate(model.config(), cfg.decode.max_new_tokens).map_err(usage)?;
    let b = run_benchmark(model, &cfg.workload, &cfg.decode).map_err(runtime)?;
    report::write_json(&out.join("bench.json"), &b.summary).map_err(runtime)?;
    report::write_jsonl(&out.join("stats.jsonl"), stats_lines(&[&b])).map_err(runtime)?;
    report::write_iterations_csv(&out.join("iterations.csv"), &[&b]).map_err(runtime)?;
    let s = &b.summary;
    println!(
        "{} gamma {} ratio {}: {} iterations, {:.3} accepted, {:.3} emitted per iteration",
        cfg.decode.selector.strategy, cfg.decode.gamma, cfg.decode.selector.sparse_ratio, s.iterations, s.mean_accepted, s.mean_emitted
    );
    Ok(())
}

fn cmd_compare(model: &Model, cfg: &RunConfig, hw: &HardwareModel, out: &Path) -> std::result::Result<(), Failure> {
    cfg.workload.validate(model.config(), cfg.decode.max_new_tokens).map_err(usage)?;
    if cfg.compare.is_empty() {
        return Err(usage("compare needs at least one selector"));
    }
    let params: Vec<DecodeParams> = cfg
        .compare
        .iter()
        .map(|&s| {
            let mut p = cfg.decode.clone();
            p.selector.strategy = s;
            p
        })
        .collect();
    let (rows, benches) = compare_selectors(model, &cfg.workload, &params, hw, cfg.context).map_err(runtime)?;
    let refs: Vec<_> = benches.iter().collect();
    report::write_compare_csv(&out.join("compare.csv"), &rows).map_err(runtime)?;
    report::write_json(&out.join("compare.json"), &rows).map_err(runtime)?;
    report::write_iterations_csv(&out.join("iterations.csv"), &refs).map_err(runtime)?;
    report::write_jsonl(&out.join("stats.jsonl"), stats_lines(&refs)).map_err(runtime)?;
    println!("{:<18} {:>10} {:>10} {:>10} {:>12}", "selector", "accepted", "emitted", "overhead", "tokens/s");
    for r in &rows {
        println!(
            "{:<18} {:>10.3} {:>10.3} {:>10.4} {:>12.1}",
            r.selector.name(),
            r.mean_accepted,
            r.mean_emitted,
            r.selection_overhead_fraction,
            r.throughput
        );
    }
    Ok(())
}

fn cmd_sweep(model: &Model, cfg: &RunConfig, hw: &HardwareModel, out: &Path) -> std::result::Result<(), Failure> {
    cfg.sweep.validate().map_err(usage)?;
    cfg.workload.validate(model.config(), cfg.decode.max_new_tokens).map_err(usage)?;
    let mut sweeper = Sweeper::new(model, cfg.workload.clone(), cfg.decode.clone(), hw.clone(), cfg.context).map_err(usage)?;
    let r = sweeper.run(&cfg.sweep).map_err(runtime)?;
    let benches: Vec<_> = sweeper.benchmarks().collect();
    report::write_json(&out.join("sweep.json"), &r).map_err(runtime)?;
    report::write_grid_csv(&out.join("grid.csv"), &r.grid).map_err(runtime)?;
    report::write_iterations_csv(&out.join("iterations.csv"), &benches).map_err(runtime)?;
    report::write_jsonl(&out.join("stats.jsonl"), stats_lines(&benches)).map_err(runtime)?;
    println!(
        "chosen: ratio {} gamma {} ({:.1} tokens/s modeled, {:.3} accepted per iteration)",
        r.chosen.sparse_ratio, r.chosen.gamma, r.chosen.throughput, r.chosen.mean_accepted
    );
    println!(
        "grid best: ratio {} gamma {} ({:.1} tokens/s)",
        r.grid_best.sparse_ratio, r.grid_best.gamma, r.grid_best.throughput
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn overrides() -> Overrides {
        Overrides::default()
    }

    #[test]
    fn flags_override_config() {
        let mut o = overrides();
        o.seed = Some(9);
        o.selector = vec!["window".into()];
        o.gamma = vec![6];
        o.ratio = vec![0.3];
        o.mode = Some(ModeFlag::Sample);
        o.temperature = Some(0.7);
        let c = resolve_config(Command::Bench, &o).unwrap();
        assert_eq!(c.decode.seed, 9);
        assert_eq!(c.workload.seed, 9);
        assert!(matches!(c.model, ModelSource::Init { seed: 9, .. }));
        assert_eq!(c.decode.selector.strategy, Strategy::Window);
        assert_eq!((c.decode.gamma, c.decode.selector.sparse_ratio), (6, 0.3));
        assert_eq!(c.decode.mode, Mode::Sample { temperature: 0.7 });
    }

    #[test]
    fn lists_route_by_command() {
        let mut o = overrides();
        o.gamma = vec![2, 4];
        o.ratio = vec![0.5, 1.0];
        let c = resolve_config(Command::Sweep, &o).unwrap();
        assert_eq!((c.sweep.gammas.clone(), c.sweep.ratios.clone()), (vec![2, 4], vec![0.5, 1.0]));
        assert!(matches!(resolve_config(Command::Bench, &o), Err(Failure::Usage(_))));
        o.gamma.clear();
        o.ratio.clear();
        o.selector = vec!["window".into(), "collect2".into()];
        assert_eq!(resolve_config(Command::Compare, &o).unwrap().compare, vec![Strategy::Window, Strategy::Collect2]);
        o.selector = vec!["nope".into()];
        assert!(matches!(resolve_config(Command::Compare, &o), Err(Failure::Usage(_))));
    }

    #[test]
    fn config_round_trips() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        let partial: RunConfig = serde_json::from_str(r#"{"decode": {"gamma": 3}, "hardware": "toy"}"#).unwrap();
        assert_eq!(partial.decode.gamma, 3);
        assert_eq!(partial.hardware, HardwareSpec::Preset("toy".into()));
        assert!(serde_json::from_str::<RunConfig>(r#"{"gama": 3}"#).is_err());
    }

    #[test]
    fn missing_weights_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("run.json");
        std::fs::write(&cfg_path, r#"{"model": {"load": {"path": "/nonexistent/w.bin"}}}"#).unwrap();
        let o = Overrides { config: Some(cfg_path), ..overrides() };
        match resolve_config(Command::Generate, &o) {
            Err(Failure::Usage(m)) => assert!(m.contains("/nonexistent/w.bin")),
            other => panic!("{other:?}"),
        }
    }
}
