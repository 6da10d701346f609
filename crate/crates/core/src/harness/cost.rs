use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::{Error, Result};

/// Bandwidth-bound decoding cost: every step streams the weights plus the
/// KV entries it attends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareModel {
    /// Bytes per second.
    pub mem_bandwidth: f64,
    pub weight_bytes: f64,
    pub kv_bytes_per_token: f64,
    /// Extra verification traffic from writing collected logits.
    pub overhead_fraction_collect: f64,
    /// Extra drafting traffic from selection bookkeeping.
    pub overhead_fraction_select: f64,
}

impl HardwareModel {
    /// An 8B-parameter GQA model in 16-bit precision on a 3.892 TB/s
    /// accelerator at batch 4: 36 layers, 8 KV heads of width 128.
    pub fn h100_like() -> Self {
        Self {
            mem_bandwidth: 3.892e12,
            weight_bytes: 16.4e9,
            kv_bytes_per_token: (4 * 2 * 36 * 8 * 128 * 2) as f64,
            overhead_fraction_collect: 0.05,
            overhead_fraction_select: 0.0,
        }
    }

    /// The given toy model at a nominal 100 GB/s.
    pub fn toy(config: &ModelConfig) -> Self {
        Self {
            mem_bandwidth: 100e9,
            weight_bytes: config.weight_bytes() as f64,
            kv_bytes_per_token: config.kv_bytes_per_token() as f64,
            overhead_fraction_collect: 0.05,
            overhead_fraction_select: 0.0,
        }
    }

    pub fn preset(name: &str, config: &ModelConfig) -> Result<Self> {
        match name {
            "h100" | "h100-like" => Ok(Self::h100_like()),
            "toy" => Ok(Self::toy(config)),
            other => Err(Error::InvalidParam(format!("unknown hardware preset {other:?} (h100, toy)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.mem_bandwidth > 0.0
            && self.weight_bytes >= 0.0
            && self.kv_bytes_per_token > 0.0
            && self.overhead_fraction_collect >= 0.0
            && self.overhead_fraction_select >= 0.0
            && [self.mem_bandwidth, self.weight_bytes, self.kv_bytes_per_token].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!("invalid hardware model {self:?}")))
        }
    }

    /// `(weights + ratio·ctx·kv) / bw`.
    pub fn draft_step_time(&self, ctx: f64, ratio: f64) -> f64 {
        (self.weight_bytes + ratio * ctx * self.kv_bytes_per_token) / self.mem_bandwidth
    }

    /// `(weights + ctx·kv)(1 + collect overhead) / bw`.
    pub fn verify_step_time(&self, ctx: f64) -> f64 {
        (self.weight_bytes + ctx * self.kv_bytes_per_token) * (1.0 + self.overhead_fraction_collect) / self.mem_bandwidth
    }
}

/// `gamma · draft · (1 + select overhead) + verify`, in seconds.
pub fn cost_iteration_time(hw: &HardwareModel, ctx: f64, ratio: f64, gamma: usize) -> f64 {
    gamma as f64 * hw.draft_step_time(ctx, ratio) * (1.0 + hw.overhead_fraction_select) + hw.verify_step_time(ctx)
}

/// Tokens per second when an iteration emits `mean_emitted` tokens.
pub fn modeled_throughput(hw: &HardwareModel, ctx: f64, ratio: f64, gamma: usize, mean_emitted: f64) -> f64 {
    mean_emitted / cost_iteration_time(hw, ctx, ratio, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bare(kv: f64) -> HardwareModel {
        HardwareModel {
            mem_bandwidth: 3.892e12,
            weight_bytes: 0.0,
            kv_bytes_per_token: kv,
            overhead_fraction_collect: 0.0,
            overhead_fraction_select: 0.0,
        }
    }

    #[test]
    fn verify_term_for_72_gb() {
        let t = bare(72e9 / 131072.0).verify_step_time(131072.0);
        assert!((t - 0.0185).abs() / 0.0185 < 0.005, "{t}");
    }

    #[test]
    fn edges() {
        let hw = bare(1000.0);
        assert_eq!(hw.draft_step_time(4096.0, 0.0), 0.0);
        assert_eq!(cost_iteration_time(&hw, 4096.0, 0.3, 0), hw.verify_step_time(4096.0));
        let v = modeled_throughput(&hw, 4096.0, 0.3, 0, 1.0);
        assert!((v - 1.0 / hw.verify_step_time(4096.0)).abs() < 1e-9 * v);
        let one = modeled_throughput(&hw, 4096.0, 0.3, 4, 1.5);
        assert!((modeled_throughput(&hw, 4096.0, 0.3, 4, 3.0) / one - 2.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_cell() {
        let hw = HardwareModel {
            mem_bandwidth: 1e9,
            weight_bytes: 1e6,
            kv_bytes_per_token: 1e3,
            overhead_fraction_collect: 0.1,
            overhead_fraction_select: 0.2,
        };
        // draft: (1e6 + 0.25·2000·1e3)/1e9 = 1.5e-3; verify: (1e6 + 2e6)·1.1/1e9 = 3.3e-3
        // iteration: 4·1.5e-3·1.2 + 3.3e-3 = 10.5e-3; throughput 3.5/10.5e-3
        let t = cost_iteration_time(&hw, 2000.0, 0.25, 4);
        assert!((t - 10.5e-3).abs() < 1e-15, "{t}");
        assert!((modeled_throughput(&hw, 2000.0, 0.25, 4, 3.5) - 3.5 / 10.5e-3).abs() < 1e-9);
    }

    #[test]
    fn presets_validate() {
        let c = ModelConfig::toy();
        HardwareModel::h100_like().validate().unwrap();
        HardwareModel::toy(&c).validate().unwrap();
        assert!(HardwareModel::preset("tpu", &c).is_err());
        assert!(bare(0.0).validate().is_err());
    }
}
