//! Hit ratio, speed-up and parameter sweeps.

use std::fmt::Write as _;
use std::thread;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{anpd_decode, baseline_decode, DecodeError, DecodeOptions, DecodeResult};
use crate::oracle::{CallKind, CostModel, ModelOracle, OracleError, OracleSpec};
use crate::TokenId;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("losslessness violated: outputs diverge at position {position} (anpd {anpd_len} tokens, baseline {baseline_len})")]
    OutputMismatch {
        position: usize,
        anpd_len: usize,
        baseline_len: usize,
    },
    #[error("sweep grid is empty or invalid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Upper bound on speed-up when a fraction `alpha` of `k` drafted tokens pass
/// verification each step: every step yields `alpha * k` drafts plus the
/// model's own token.
pub fn theoretical_bound(alpha: f64, k_draft: usize) -> f64 {
    alpha * k_draft as f64 + 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub alpha: f64,
    pub mean_committed_per_step: f64,
    pub speedup_sim: f64,
    pub speedup_wallclock: Option<f64>,
    pub theoretical_bound: f64,
    pub steps: usize,
    pub output_len: usize,
    pub proposed_draft_tokens: usize,
    pub accepted_draft_tokens: usize,
    pub anpd_sim_time: f64,
    pub baseline_sim_time: f64,
}

fn sim_time(result: &DecodeResult, cost: &CostModel) -> f64 {
    cost.simulate(CallKind::Prefill, result.prompt_len)
        + result
            .steps
            .iter()
            .map(|s| cost.simulate(CallKind::Verify, s.verify_batch_len))
            .sum::<f64>()
}

/// Derives run metrics from two traces of the same prompt. Simulated times
/// are recomputed from batch lengths under `cost`, so the traces may have been
/// produced with any cost model.
pub fn compute_metrics(
    anpd: &DecodeResult,
    baseline: &DecodeResult,
    cost: &CostModel,
) -> Result<RunMetrics, BenchError> {
    if anpd.output != baseline.output {
        let position = anpd
            .output
            .iter()
            .zip(&baseline.output)
            .position(|(a, b)| a != b)
            .unwrap_or(anpd.output.len().min(baseline.output.len()));
        return Err(BenchError::OutputMismatch {
            position,
            anpd_len: anpd.output.len(),
            baseline_len: baseline.output.len(),
        });
    }
    let proposed = anpd.totals.proposed_draft_tokens;
    let accepted = anpd.totals.accepted_draft_tokens;
    let alpha = if proposed == 0 {
        0.0
    } else {
        accepted as f64 / proposed as f64
    };
    let steps = anpd.steps.len();
    let mean_committed = if steps == 0 {
        1.0
    } else {
        anpd.output.len() as f64 / steps as f64
    };
    let anpd_t = sim_time(anpd, cost);
    let base_t = sim_time(baseline, cost);
    let speedup = if anpd_t > 0.0 { base_t / anpd_t } else { 1.0 };
    Ok(RunMetrics {
        alpha,
        mean_committed_per_step: mean_committed,
        speedup_sim: speedup,
        speedup_wallclock: None,
        theoretical_bound: theoretical_bound(alpha, anpd.k_draft),
        steps,
        output_len: anpd.output.len(),
        proposed_draft_tokens: proposed,
        accepted_draft_tokens: accepted,
        anpd_sim_time: anpd_t,
        baseline_sim_time: base_t,
    })
}

/// One prompt plus the oracle that continues it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    pub prompt: Vec<TokenId>,
    pub oracle: OracleSpec,
}

/// Runs baseline and draft/verify decoding on fresh oracles.
pub fn run_case(
    case: &BenchCase,
    options: &DecodeOptions,
    cost: &CostModel,
) -> Result<(DecodeResult, DecodeResult, RunMetrics), BenchError> {
    let mut oracle = case.oracle.build()?;
    let baseline = baseline_decode(oracle.as_mut(), &case.prompt, options, cost)?;
    let mut oracle = case.oracle.build()?;
    let anpd = anpd_decode(oracle.as_mut(), &case.prompt, options, cost)?;
    let metrics = compute_metrics(&anpd, &baseline, cost)?;
    Ok((anpd, baseline, metrics))
}

/// Per-prompt metrics averaged into one cell: real-valued fields are
/// arithmetic means across prompts, counts are totals.
pub fn aggregate(runs: &[RunMetrics], k_draft: usize) -> RunMetrics {
    let n = runs.len().max(1) as f64;
    let mean = |f: fn(&RunMetrics) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let alpha = mean(|m| m.alpha);
    let wall: Vec<f64> = runs.iter().filter_map(|m| m.speedup_wallclock).collect();
    RunMetrics {
        alpha,
        mean_committed_per_step: mean(|m| m.mean_committed_per_step),
        speedup_sim: mean(|m| m.speedup_sim),
        speedup_wallclock: (!wall.is_empty() && wall.len() == runs.len())
            .then(|| wall.iter().sum::<f64>() / n),
        theoretical_bound: theoretical_bound(alpha, k_draft),
        steps: runs.iter().map(|m| m.steps).sum(),
        output_len: runs.iter().map(|m| m.output_len).sum(),
        proposed_draft_tokens: runs.iter().map(|m| m.proposed_draft_tokens).sum(),
        accepted_draft_tokens: runs.iter().map(|m| m.accepted_draft_tokens).sum(),
        anpd_sim_time: runs.iter().map(|m| m.anpd_sim_time).sum(),
        baseline_sim_time: runs.iter().map(|m| m.baseline_sim_time).sum(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_max: usize,
    pub k_draft: usize,
    pub metrics: Option<RunMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

pub const CSV_HEADER: &str = "n,k,alpha,mean_committed,speedup_sim,bound,steps,output_len";

impl SweepTable {
    pub fn row(&self, n_max: usize, k_draft: usize) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.n_max == n_max && r.k_draft == k_draft)
    }

    /// Failed cells keep their grid position with empty metric columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            match &r.metrics {
                Some(m) => writeln!(
                    out,
                    "{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
                    r.n_max,
                    r.k_draft,
                    m.alpha,
                    m.mean_committed_per_step,
                    m.speedup_sim,
                    m.theoretical_bound,
                    m.steps,
                    m.output_len
                ),
                None => writeln!(out, "{},{},,,,,,", r.n_max, r.k_draft),
            }
            .expect("writing to a String");
        }
        out
    }
}

/// Runs every `(n, k)` grid point over every case, in parallel, and returns
/// rows ordered by `n` then `k`. A failing cell records its error and the
/// rest of the sweep continues.
pub fn sweep(
    cases: &[BenchCase],
    n_grid: &[usize],
    k_grid: &[usize],
    options: &DecodeOptions,
    cost: &CostModel,
) -> Result<SweepTable, BenchError> {
    if cases.is_empty() || n_grid.is_empty() || k_grid.is_empty() {
        return Err(BenchError::InvalidGrid(
            "cases, n grid and k grid must all be non-empty".into(),
        ));
    }
    if let Some(n) = n_grid.iter().find(|&&n| n < 2) {
        return Err(BenchError::InvalidGrid(format!("n values must be >= 2, got {n}")));
    }
    if k_grid.contains(&0) {
        return Err(BenchError::InvalidGrid("k values must be >= 1".into()));
    }
    let mut n_sorted = n_grid.to_vec();
    n_sorted.sort_unstable();
    n_sorted.dedup();
    let mut k_sorted = k_grid.to_vec();
    k_sorted.sort_unstable();
    k_sorted.dedup();
    let cells: Vec<(usize, usize)> = n_sorted
        .iter()
        .flat_map(|&n| k_sorted.iter().map(move |&k| (n, k)))
        .collect();

    let rows = cells
        .par_iter()
        .map(|&(n, k)| {
            let opts = DecodeOptions {
                n_max: n,
                k_draft: k,
                ..*options
            };
            let runs: Result<Vec<RunMetrics>, BenchError> = cases
                .iter()
                .map(|c| run_case(c, &opts, cost).map(|(_, _, m)| m))
                .collect();
            match runs {
                Ok(runs) => SweepRow {
                    n_max: n,
                    k_draft: k,
                    metrics: Some(aggregate(&runs, k)),
                    error: None,
                },
                Err(e) => SweepRow {
                    n_max: n,
                    k_draft: k,
                    metrics: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(SweepTable { rows })
}

/// Wall-clock measurement settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WallclockConfig {
    pub warmup: usize,
    pub repetitions: usize,
    /// Real time per simulated time unit; when set, every oracle call sleeps
    /// for its simulated cost.
    pub inject_latency: Option<Duration>,
}

impl Default for WallclockConfig {
    fn default() -> Self {
        Self {
            warmup: 3,
            repetitions: 5,
            inject_latency: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallclockReport {
    pub metrics: RunMetrics,
    pub baseline_median: Duration,
    pub anpd_median: Duration,
    /// max/min - 1 over the timed repetitions, per method.
    pub baseline_spread: f64,
    pub anpd_spread: f64,
    /// Set when the median run is too short for the clock to resolve.
    pub low_resolution_warning: bool,
}

/// Sleeps for each call's simulated cost before delegating.
struct LatencyOracle<O> {
    inner: O,
    cost: CostModel,
    unit: Duration,
    prefilled: bool,
}

impl<O: ModelOracle> ModelOracle for LatencyOracle<O> {
    fn extend(&mut self, tokens: &[TokenId]) -> Result<Vec<TokenId>, OracleError> {
        let kind = if self.prefilled {
            CallKind::Verify
        } else {
            CallKind::Prefill
        };
        self.prefilled = true;
        let t = self.cost.simulate(kind, tokens.len());
        if t > 0.0 {
            thread::sleep(self.unit.mul_f64(t));
        }
        self.inner.extend(tokens)
    }
    fn reset(&mut self) -> Result<(), OracleError> {
        self.prefilled = false;
        self.inner.reset()
    }
    fn consumed_len(&self) -> usize {
        self.inner.consumed_len()
    }
    fn truncate_cache(&mut self, len: usize) -> Result<bool, OracleError> {
        self.inner.truncate_cache(len)
    }
    fn eos(&self) -> Option<TokenId> {
        self.inner.eos()
    }
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }
}

fn median(mut xs: Vec<Duration>) -> Duration {
    xs.sort();
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        (xs[mid - 1] + xs[mid]) / 2
    }
}

fn spread(xs: &[Duration]) -> f64 {
    let min = xs.iter().min().map_or(0.0, Duration::as_secs_f64);
    let max = xs.iter().max().map_or(0.0, Duration::as_secs_f64);
    if min > 0.0 {
        max / min - 1.0
    } else {
        0.0
    }
}

/// Smallest non-zero step the monotonic clock reports.
fn clock_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..16 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Times both decoders end to end, reporting medians of the timed repetitions
/// next to the deterministic simulated metrics.
pub fn wallclock_bench(
    case: &BenchCase,
    options: &DecodeOptions,
    cost: &CostModel,
    config: &WallclockConfig,
) -> Result<WallclockReport, BenchError> {
    let reps = config.repetitions.max(5);
    let (_, _, mut metrics) = run_case(case, options, cost)?;

    let build = || -> Result<Box<dyn ModelOracle + Send>, BenchError> {
        let inner = case.oracle.build()?;
        Ok(match config.inject_latency {
            Some(unit) => Box::new(LatencyOracle {
                inner,
                cost: *cost,
                unit,
                prefilled: false,
            }),
            None => inner,
        })
    };
    let time = |anpd: bool| -> Result<Duration, BenchError> {
        let mut oracle = build()?;
        let start = Instant::now();
        if anpd {
            anpd_decode(oracle.as_mut(), &case.prompt, options, cost)?;
        } else {
            baseline_decode(oracle.as_mut(), &case.prompt, options, cost)?;
        }
        Ok(start.elapsed())
    };

    for _ in 0..config.warmup {
        time(false)?;
        time(true)?;
    }
    let mut base = Vec::with_capacity(reps);
    let mut fast = Vec::with_capacity(reps);
    for _ in 0..reps {
        base.push(time(false)?);
        fast.push(time(true)?);
    }
    let baseline_spread = spread(&base);
    let anpd_spread = spread(&fast);
    let baseline_median = median(base);
    let anpd_median = median(fast);
    let resolution = clock_resolution();
    let low_resolution_warning = anpd_median.min(baseline_median) < resolution * 100;
    metrics.speedup_wallclock = Some(if anpd_median.is_zero() {
        1.0
    } else {
        baseline_median.as_secs_f64() / anpd_median.as_secs_f64()
    });
    Ok(WallclockReport {
        metrics,
        baseline_median,
        anpd_median,
        baseline_spread,
        anpd_spread,
        low_resolution_warning,
    })
}
