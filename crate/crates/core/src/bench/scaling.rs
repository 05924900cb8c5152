//! Wall-clock runtime scaling against token count `n = H * W`.

use std::hint::black_box;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::bench::attention::{naive_cross_attention, AttentionWeights};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::registry::Registry;
use crate::scan::{CmSs2d, SsmConfig};

/// Shape of the workloads; shared by every op so grids are comparable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    pub channels: usize,
    pub state_dim: usize,
    /// Run the scan with the parallel kernel instead of the sequential one.
    pub parallel: bool,
    pub seed: u64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            state_dim: 8,
            parallel: false,
            seed: 0,
        }
    }
}

pub type Workload<'a> = Box<dyn FnMut() + 'a>;

/// A workload whose runtime is measured as a function of `n`.
pub trait BenchOp {
    fn name(&self) -> &'static str;
    /// Build inputs for size `n`; the returned closure runs one instance.
    fn prepare(&self, n: usize) -> Result<Workload<'_>>;
}

/// Most nearly square `h x w` with `h * w == n`.
pub fn grid_for(n: usize) -> (usize, usize) {
    let mut h = (n as f64).sqrt() as usize;
    while h > 1 && !n.is_multiple_of(h) {
        h -= 1;
    }
    (h.max(1), n / h.max(1))
}

fn random_features(c: usize, n: usize, rng: &mut Rng) -> Tensor<f32> {
    let (h, w) = grid_for(n);
    Tensor::from_fn(&[c, h, w], |_| rng.normal() as f32)
}

pub struct CmSs2dOp {
    cfg: WorkloadConfig,
}

impl BenchOp for CmSs2dOp {
    fn name(&self) -> &'static str {
        "cm_ss2d"
    }

    fn prepare(&self, n: usize) -> Result<Workload<'_>> {
        let c = self.cfg.channels;
        let ssm = SsmConfig {
            state_dim: self.cfg.state_dim,
            kernel: if self.cfg.parallel {
                "blelloch"
            } else {
                "sequential"
            }
            .into(),
            ..SsmConfig::default()
        };
        let mut rng = Rng::new(self.cfg.seed);
        let scan = CmSs2d::<f32>::new("bench", c, &ssm, &mut rng)?;
        let r = random_features(c, n, &mut rng);
        let t = random_features(c, n, &mut rng);
        Ok(Box::new(move || {
            black_box(
                scan.forward(black_box(&r), black_box(&t))
                    .expect("shapes fixed at prepare"),
            );
        }))
    }
}

pub struct AttentionOp {
    cfg: WorkloadConfig,
}

impl BenchOp for AttentionOp {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn prepare(&self, n: usize) -> Result<Workload<'_>> {
        let c = self.cfg.channels;
        let mut rng = Rng::new(self.cfg.seed);
        let w = AttentionWeights::random(c, &mut rng);
        let r = random_features(c, n, &mut rng);
        let t = random_features(c, n, &mut rng);
        // surface the guard at prepare time rather than inside the timed loop
        naive_cross_attention(&r, &t, &w)?;
        Ok(Box::new(move || {
            black_box(
                naive_cross_attention(black_box(&r), black_box(&t), &w)
                    .expect("checked at prepare"),
            );
        }))
    }
}

/// `O(n)` reference workload: a fixed number of passes over `n` values.
pub struct LinearCalibration;

impl BenchOp for LinearCalibration {
    fn name(&self) -> &'static str {
        "linear_calibration"
    }

    fn prepare(&self, n: usize) -> Result<Workload<'_>> {
        let xs: Vec<f64> = (0..n).map(|i| (i % 97) as f64 * 1e-3).collect();
        Ok(Box::new(move || {
            let mut acc = 0.0;
            for _ in 0..64 {
                for &x in black_box(&xs) {
                    acc = acc * 0.999 + x;
                }
            }
            black_box(acc);
        }))
    }
}

/// `O(n^2)` reference workload: every ordered pair of `n` values.
pub struct QuadraticCalibration;

impl BenchOp for QuadraticCalibration {
    fn name(&self) -> &'static str {
        "quadratic_calibration"
    }

    fn prepare(&self, n: usize) -> Result<Workload<'_>> {
        let xs: Vec<f64> = (0..n).map(|i| (i % 89) as f64 * 1e-3).collect();
        Ok(Box::new(move || {
            let xs = black_box(&xs);
            let mut acc = 0.0;
            for &a in xs {
                for &b in xs {
                    acc = acc * 0.999 + a * b;
                }
            }
            black_box(acc);
        }))
    }
}

pub type BenchOpFactory = fn(&WorkloadConfig) -> Box<dyn BenchOp>;

pub fn bench_registry() -> Registry<BenchOpFactory> {
    fn cm_ss2d(c: &WorkloadConfig) -> Box<dyn BenchOp> {
        Box::new(CmSs2dOp { cfg: c.clone() })
    }
    fn attention(c: &WorkloadConfig) -> Box<dyn BenchOp> {
        Box::new(AttentionOp { cfg: c.clone() })
    }
    fn linear(_: &WorkloadConfig) -> Box<dyn BenchOp> {
        Box::new(LinearCalibration)
    }
    fn quadratic(_: &WorkloadConfig) -> Box<dyn BenchOp> {
        Box::new(QuadraticCalibration)
    }
    Registry::new("bench op")
        .with("cm_ss2d", cm_ss2d as BenchOpFactory)
        .with("attention", attention)
        .with("linear_calibration", linear)
        .with("quadratic_calibration", quadratic)
}

pub fn bench_op(name: &str, cfg: &WorkloadConfig) -> Result<Box<dyn BenchOp>> {
    Ok((bench_registry().get(name)?)(cfg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingConfig {
    /// Timed repetitions per size; the median is reported.
    pub reps: usize,
    /// Untimed runs per size before the repetitions.
    pub warmup: usize,
    /// Each repetition loops the workload until at least this long.
    pub min_rep_secs: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            reps: 5,
            warmup: 1,
            min_rep_secs: 5e-3,
        }
    }
}

/// Repetitions shorter than this cannot be resolved by the clock.
const TIMER_FLOOR: Duration = Duration::from_micros(1);

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingReport {
    pub op: String,
    /// Token counts `H * W` that were kept, strictly increasing.
    pub sizes: Vec<usize>,
    /// Median seconds per run at each size.
    pub median_secs: Vec<f64>,
    pub reps: usize,
    /// Least-squares fit `ln t = intercept + slope * ln n`.
    pub slope: f64,
    pub intercept: f64,
    /// Sizes discarded because the timer could not resolve them.
    pub dropped: Vec<usize>,
}

impl ScalingReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{} (slope {:.3})\n{:>10}  {:>14}\n",
            self.op, self.slope, "H*W", "median_ms"
        );
        for (n, t) in self.sizes.iter().zip(&self.median_secs) {
            s += &format!("{n:>10}  {:>14.4}\n", t * 1e3);
        }
        s
    }
}

/// Least-squares `(slope, intercept)` of `ys` on `xs`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Time `op` at each size and fit the log-log slope.
///
/// Needs at least four strictly increasing sizes and five repetitions. Sizes
/// the clock cannot resolve are dropped with a warning; at least two must
/// survive.
pub fn measure_runtime_scaling(
    op: &dyn BenchOp,
    sizes: &[usize],
    timing: &TimingConfig,
) -> Result<ScalingReport> {
    if sizes.len() < 4 || sizes.windows(2).any(|p| p[0] >= p[1]) || sizes[0] == 0 {
        return Err(Error::config(
            "scaling needs at least four strictly increasing positive sizes",
        ));
    }
    if timing.reps < 5 {
        return Err(Error::config(
            "scaling needs at least five repetitions per size",
        ));
    }
    let mut kept = Vec::new();
    let mut medians = Vec::new();
    let mut dropped = Vec::new();
    for &n in sizes {
        let mut run = op.prepare(n)?;
        let mut once = Duration::ZERO;
        for _ in 0..timing.warmup.max(1) {
            let t0 = Instant::now();
            run();
            once = t0.elapsed();
        }
        let iters = if once.is_zero() {
            1_000_000
        } else {
            (timing.min_rep_secs / once.as_secs_f64())
                .ceil()
                .clamp(1.0, 1e6) as u32
        };
        let mut samples = Vec::with_capacity(timing.reps);
        let mut resolvable = true;
        for _ in 0..timing.reps {
            let t0 = Instant::now();
            for _ in 0..iters {
                run();
            }
            let el = t0.elapsed();
            resolvable &= el >= TIMER_FLOOR;
            samples.push(el.as_secs_f64() / iters as f64);
        }
        if !resolvable {
            log::warn!("{}: dropping size {n}, below timer resolution", op.name());
            dropped.push(n);
            continue;
        }
        let m = median(samples);
        log::debug!(
            "{} n={n} median {:.3} ms ({iters} iters/rep)",
            op.name(),
            m * 1e3
        );
        kept.push(n);
        medians.push(m);
    }
    if kept.len() < 2 {
        return Err(Error::config(format!(
            "{}: fewer than two resolvable sizes",
            op.name()
        )));
    }
    let lx: Vec<f64> = kept.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = medians.iter().map(|t| t.ln()).collect();
    let (slope, intercept) = fit_line(&lx, &ly);
    Ok(ScalingReport {
        op: op.name().into(),
        sizes: kept,
        median_secs: medians,
        reps: timing.reps,
        slope,
        intercept,
        dropped,
    })
}
