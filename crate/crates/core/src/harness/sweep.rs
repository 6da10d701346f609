use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::harness::bench::{run_benchmark, Benchmark};
use crate::harness::cost::{cost_iteration_time, modeled_throughput, HardwareModel};
use crate::harness::Workload;
use crate::model::Model;
use crate::speculation::DecodeParams;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// Ascending, each in `(0, 1]`.
    pub ratios: Vec<f64>,
    pub gammas: Vec<usize>,
    /// Draft length used while locating the acceptance plateau.
    pub gamma_large: usize,
    /// Plateau tolerance relative to the acceptance at the largest ratio.
    pub epsilon: f64,
    /// Context length fed to the cost model; `None` uses the measured mean
    /// prefix length of each cell.
    pub context: Option<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { ratios: vec![0.1, 0.25, 0.5, 1.0], gammas: vec![2, 4, 8], gamma_large: 12, epsilon: 0.02, context: None }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() || self.gammas.is_empty() {
            return Err(Error::InvalidParam("sweep needs at least one ratio and one gamma".into()));
        }
        if self.ratios.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParam("sweep ratios must be strictly ascending".into()));
        }
        if self.ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::InvalidParam("sweep ratios must lie in (0, 1]".into()));
        }
        if self.gammas.contains(&0) || self.gamma_large == 0 {
            return Err(Error::InvalidParam("gamma values must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::InvalidParam(format!("epsilon {} outside [0, 1)", self.epsilon)));
        }
        Ok(())
    }
}

/// One `(sparse_ratio, gamma)` measurement and its modeled cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub sparse_ratio: f64,
    pub gamma: usize,
    pub iterations: usize,
    pub mean_accepted: f64,
    pub mean_emitted: f64,
    pub context: f64,
    pub iteration_time: f64,
    pub throughput: f64,
    pub per_position_acceptance: Vec<f64>,
}

impl GridCell {
    pub fn from_benchmark(b: &Benchmark, hw: &HardwareModel, context: Option<f64>) -> Self {
        let s = &b.summary;
        let ratio = b.params.selector.sparse_ratio;
        let gamma = b.params.gamma;
        let ctx = context.unwrap_or(s.mean_prefix_len);
        Self {
            sparse_ratio: ratio,
            gamma,
            iterations: s.iterations,
            mean_accepted: s.mean_accepted,
            mean_emitted: s.mean_emitted,
            context: ctx,
            iteration_time: cost_iteration_time(hw, ctx, ratio, gamma),
            throughput: modeled_throughput(hw, ctx, ratio, gamma, s.mean_emitted),
            per_position_acceptance: s.per_position_acceptance.clone(),
        }
    }
}

/// Smallest ratio whose acceptance reaches `(1 - epsilon)` of the
/// acceptance at the largest ratio. `curve` is `(ratio, accepted)`,
/// ascending in ratio.
pub fn choose_plateau(curve: &[(f64, f64)], epsilon: f64) -> Result<f64> {
    let &(_, top) = curve.last().ok_or_else(|| Error::InvalidParam("empty ratio curve".into()))?;
    if curve.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::InvalidParam("ratio curve must be strictly ascending".into()));
    }
    let target = (1.0 - epsilon) * top;
    Ok(curve.iter().find(|&&(_, a)| a >= target).expect("the last point qualifies").0)
}

/// Highest throughput; the earlier cell wins ties, so callers list
/// candidates in ascending order of the tie-break key.
pub fn best_cell(cells: &[GridCell]) -> Option<&GridCell> {
    cells.iter().fold(None, |best: Option<&GridCell>, c| match best {
        Some(b) if b.throughput >= c.throughput => Some(b),
        _ => Some(c),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: SweepConfig,
    pub hardware: HardwareModel,
    pub step1_curve: Vec<GridCell>,
    pub step1_ratio: f64,
    pub step2_cells: Vec<GridCell>,
    pub step2_gamma: usize,
    pub step3_cells: Vec<GridCell>,
    /// Result of the three-step procedure.
    pub chosen: GridCell,
    /// Every `ratios × gammas` cell, ratio-major.
    pub grid: Vec<GridCell>,
    /// Throughput argmax over `grid`, for reference.
    pub grid_best: GridCell,
}

/// Runs benchmark cells on demand and memoizes them by `(ratio, gamma)`.
pub struct Sweeper<'a> {
    model: &'a Model,
    workload: Workload,
    base: DecodeParams,
    hw: HardwareModel,
    context: Option<f64>,
    cells: BTreeMap<(u64, usize), Benchmark>,
}

impl<'a> Sweeper<'a> {
    pub fn new(model: &'a Model, workload: Workload, base: DecodeParams, hw: HardwareModel, context: Option<f64>) -> Result<Self> {
        hw.validate()?;
        base.validate()?;
        Ok(Self { model, workload, base, hw, context, cells: BTreeMap::new() })
    }

    pub fn cell(&mut self, ratio: f64, gamma: usize) -> Result<GridCell> {
        let key = (ratio.to_bits(), gamma);
        if !self.cells.contains_key(&key) {
            let mut params = self.base.clone();
            params.gamma = gamma;
            params.selector.sparse_ratio = ratio;
            let b = run_benchmark(self.model, &self.workload, &params)?;
            self.cells.insert(key, b);
        }
        Ok(GridCell::from_benchmark(&self.cells[&key], &self.hw, self.context))
    }

    /// Every benchmark run so far, ordered by `(ratio, gamma)`.
    pub fn benchmarks(&self) -> impl Iterator<Item = &Benchmark> {
        let mut v: Vec<&Benchmark> = self.cells.values().collect();
        v.sort_by(|a, b| {
            (a.params.selector.sparse_ratio, a.params.gamma)
                .partial_cmp(&(b.params.selector.sparse_ratio, b.params.gamma))
                .expect("finite ratios")
        });
        v.into_iter()
    }

    /// Step 1: acceptance curve over `ratios` at `gamma_large`, and its plateau.
    pub fn sweep_step1_ratio(&mut self, gamma_large: usize, ratios: &[f64], epsilon: f64) -> Result<(f64, Vec<GridCell>)> {
        let cells = ratios.iter().map(|&r| self.cell(r, gamma_large)).collect::<Result<Vec<_>>>()?;
        let curve: Vec<(f64, f64)> = cells.iter().map(|c| (c.sparse_ratio, c.mean_accepted)).collect();
        Ok((choose_plateau(&curve, epsilon)?, cells))
    }

    /// Step 2: throughput-maximizing gamma at `ratio`, ties to the smaller gamma.
    pub fn sweep_step2_gamma(&mut self, ratio: f64, gammas: &[usize]) -> Result<(usize, Vec<GridCell>)> {
        let mut sorted = gammas.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let cells = sorted.iter().map(|&g| self.cell(ratio, g)).collect::<Result<Vec<_>>>()?;
        let best = best_cell(&cells).ok_or_else(|| Error::InvalidParam("no gamma candidates".into()))?.gamma;
        Ok((best, cells))
    }

    /// Step 3: throughput-maximizing ratio at fixed `gamma`, ties to the smaller ratio.
    pub fn sweep_step3_refine(&mut self, gamma: usize, ratios: &[f64]) -> Result<(GridCell, Vec<GridCell>)> {
        let cells = ratios.iter().map(|&r| self.cell(r, gamma)).collect::<Result<Vec<_>>>()?;
        let best = best_cell(&cells).ok_or_else(|| Error::InvalidParam("no ratio candidates".into()))?.clone();
        Ok((best, cells))
    }

    pub fn run(&mut self, cfg: &SweepConfig) -> Result<SweepReport> {
        cfg.validate()?;
        let (step1_ratio, step1_curve) = self.sweep_step1_ratio(cfg.gamma_large, &cfg.ratios, cfg.epsilon)?;
        let (step2_gamma, step2_cells) = self.sweep_step2_gamma(step1_ratio, &cfg.gammas)?;
        let (chosen, step3_cells) = self.sweep_step3_refine(step2_gamma, &cfg.ratios)?;
        let mut grid = Vec::with_capacity(cfg.ratios.len() * cfg.gammas.len());
        for &r in &cfg.ratios {
            for &g in &cfg.gammas {
                grid.push(self.cell(r, g)?);
            }
        }
        let grid_best = best_cell(&grid).expect("non-empty grid").clone();
        Ok(SweepReport {
            config: cfg.clone(),
            hardware: self.hw.clone(),
            step1_curve,
            step1_ratio,
            step2_cells,
            step2_gamma,
            step3_cells,
            chosen,
            grid,
            grid_best,
        })
    }
}
