//! Complexity measurements: analytic counts and runtime scaling.

pub mod attention;
pub mod flops;
pub mod scaling;

use serde::{Deserialize, Serialize};

pub use attention::{naive_cross_attention, AttentionWeights, ATTENTION_MAX_TOKENS};
pub use flops::{conv_cost, count_flops, params_count, FlopsEntry, FlopsReport};
pub use scaling::{
    bench_op, bench_registry, fit_line, measure_runtime_scaling, BenchOp, ScalingReport,
    TimingConfig, WorkloadConfig,
};

use crate::error::Result;
use crate::model::{ModelConfig, Segmenter};
use crate::numerics::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Input size for the FLOP count.
    pub height: usize,
    pub width: usize,
    pub workload: WorkloadConfig,
    pub timing: TimingConfig,
    /// Token counts `H * W` for the scan.
    pub scan_sizes: Vec<usize>,
    /// Token counts for the attention baseline, at most [`ATTENTION_MAX_TOKENS`].
    pub attention_sizes: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            workload: WorkloadConfig::default(),
            timing: TimingConfig::default(),
            scan_sizes: [32, 64, 128, 256].map(|s| s * s).to_vec(),
            attention_sizes: [16, 32, 64, 128].map(|s| s * s).to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub flops: FlopsReport,
    pub params: u64,
    pub scan: ScalingReport,
    pub attention: ScalingReport,
    /// `attention.slope - scan.slope`.
    pub slope_gap: f64,
}

impl BenchReport {
    pub fn table(&self) -> String {
        format!(
            "{}\nparams (instantiated model): {}\n\n{}\n{}\nslope gap (attention - cm_ss2d): {:.3}\n",
            self.flops.table(),
            self.params,
            self.scan.table(),
            self.attention.table(),
            self.slope_gap
        )
    }
}

pub fn run_bench(model: &ModelConfig, cfg: &BenchConfig, seed: u64) -> Result<BenchReport> {
    let flops = count_flops(model, cfg.height, cfg.width)?;
    let params = params_count(&Segmenter::<f32>::new(model, &Rng::new(seed))?);
    let scan = measure_runtime_scaling(
        bench_op("cm_ss2d", &cfg.workload)?.as_ref(),
        &cfg.scan_sizes,
        &cfg.timing,
    )?;
    let attention = measure_runtime_scaling(
        bench_op("attention", &cfg.workload)?.as_ref(),
        &cfg.attention_sizes,
        &cfg.timing,
    )?;
    Ok(BenchReport {
        slope_gap: attention.slope - scan.slope,
        flops,
        params,
        scan,
        attention,
    })
}
