use std::fmt::Write;

use anpd::metrics::{BenchCase, RunMetrics, WallclockReport};
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub index: usize,
    pub prompt_len: usize,
    pub output_tokens: usize,
    pub baseline_steps: usize,
    pub replay_calls: usize,
    pub output_text: String,
    pub metrics: RunMetrics,
}

fn metric_rows(m: &RunMetrics) -> Vec<(&'static str, String)> {
    vec![
        ("alpha", format!("{:.6}", m.alpha)),
        ("mean_committed_per_step", format!("{:.6}", m.mean_committed_per_step)),
        ("speedup_sim", format!("{:.6}", m.speedup_sim)),
        ("theoretical_bound", format!("{:.6}", m.theoretical_bound)),
        ("steps", m.steps.to_string()),
        ("output_len", m.output_len.to_string()),
        ("proposed_draft_tokens", m.proposed_draft_tokens.to_string()),
        ("accepted_draft_tokens", m.accepted_draft_tokens.to_string()),
        ("anpd_sim_time", format!("{:.6}", m.anpd_sim_time)),
        ("baseline_sim_time", format!("{:.6}", m.baseline_sim_time)),
    ]
}

fn table(out: &mut String, m: &RunMetrics) {
    for (name, value) in metric_rows(m) {
        let _ = writeln!(out, "  {name:<26} {value:>14}");
    }
}

/// Plain-text report. Everything above the wall-clock section is a pure
/// function of the config.
pub fn render(
    config: &RunConfig,
    cases: &[BenchCase],
    reports: &[CaseReport],
    summary: &RunMetrics,
    wallclock: Option<&[WallclockReport]>,
) -> String {
    let d = &config.decode;
    let cm = &config.cost_model;
    let mut out = String::new();
    let _ = writeln!(out, "anpd run report");
    let _ = writeln!(
        out,
        "n={} k={} max_new_tokens={} runtime_update={} fixed_level_only={} stop_at_eos={}",
        d.n_max, d.k_draft, d.max_new_tokens, d.runtime_update, d.fixed_level_only, d.stop_at_eos
    );
    let _ = writeln!(
        out,
        "cost model: prefill_per_token={} verify_base={} verify_per_token={}",
        cm.prefill_per_token, cm.verify_base, cm.verify_per_token
    );
    let _ = writeln!(out, "tokenizer: {} seed={}", config.tokenizer.mode, config.seed);
    for (case, r) in cases.iter().zip(reports) {
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "case {}: {} oracle, prompt {} tokens, output {} tokens in {} steps (baseline {} steps)",
            r.index,
            case.oracle.kind(),
            r.prompt_len,
            r.output_tokens,
            r.metrics.steps,
            r.baseline_steps
        );
        let _ = writeln!(out, "output:");
        for line in r.output_text.lines() {
            let _ = writeln!(out, "  | {line}");
        }
        table(&mut out, &r.metrics);
    }
    if reports.len() > 1 {
        let _ = writeln!(out);
        let _ = writeln!(out, "aggregate over {} cases (means; counts summed):", reports.len());
        table(&mut out, summary);
    }
    if let Some(w) = wallclock {
        let _ = writeln!(out);
        let _ = writeln!(out, "wall clock (machine dependent, not reproducible):");
        for (i, r) in w.iter().enumerate() {
            let _ = writeln!(
                out,
                "  case {i}: baseline {:.3} ms, anpd {:.3} ms, speedup {:.4}, spread {:.1}% / {:.1}%{}",
                r.baseline_median.as_secs_f64() * 1e3,
                r.anpd_median.as_secs_f64() * 1e3,
                r.metrics.speedup_wallclock.unwrap_or(f64::NAN),
                r.baseline_spread * 100.0,
                r.anpd_spread * 100.0,
                if r.low_resolution_warning {
                    " (below clock resolution)"
                } else {
                    ""
                }
            );
        }
    }
    out
}
