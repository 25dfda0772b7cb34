mod config;
mod report;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anpd::metrics::{aggregate, run_case, sweep, wallclock_bench, BenchError, WallclockConfig};
use anpd::oracle::{MarkovOracle, ModelOracle};
use anpd::tokenizer::{self, corpus_stats, CorpusStats, Mode};
use anpd::trace::{write_trace, TraceHeader};
use anpd::wire::{OracleFactory, OracleServer};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::config::{load_vocab, read_source, RunConfig};
use crate::report::CaseReport;

/// Lossless n-gram speculative decoding: run, benchmark and serve oracles.
#[derive(Parser)]
#[command(name = "anpd", version, about)]
struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode with and without drafting, then report speed-up and write a trace.
    Run(RunArgs),
    /// Run every (n, k) grid point and write a CSV plus a JSON sidecar.
    Sweep(SweepArgs),
    /// Word and token counts per corpus file.
    Stats(StatsArgs),
    /// Train a byte-pair vocabulary.
    TrainBpe(TrainBpeArgs),
    /// Serve an oracle over TCP (newline-delimited JSON).
    ServeOracle(ServeArgs),
}

#[derive(Args)]
struct Overrides {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Freeze the n-gram store after the prompt.
    #[arg(long)]
    no_runtime_update: bool,
    /// Query only the highest n-gram order.
    #[arg(long)]
    fixed_level_only: bool,
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn apply(&self) -> Result<RunConfig> {
        let mut c = config::load(&self.config)?;
        if let Some(n) = self.n {
            c.decode.n_max = n;
        }
        if let Some(k) = self.k {
            c.decode.k_draft = k;
        }
        if let Some(m) = self.max_new_tokens {
            c.decode.max_new_tokens = m;
        }
        if self.no_runtime_update {
            c.decode.runtime_update = false;
        }
        if self.fixed_level_only {
            c.decode.fixed_level_only = true;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Trace JSONL path (one file per case when the config has several).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Human-readable report path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also time both decoders on the wall clock.
    #[arg(long)]
    wallclock: bool,
    /// With --wallclock, sleep this many milliseconds per simulated time unit.
    #[arg(long, requires = "wallclock")]
    inject_latency_ms: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Values of n, e.g. `2,3,4` or `2-6`.
    #[arg(long, value_parser = parse_grid)]
    n_grid: Option<Grid>,
    /// Values of k, e.g. `1-8`.
    #[arg(long, value_parser = parse_grid)]
    k_grid: Option<Grid>,
    /// CSV output; a `.json` sidecar is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone)]
struct Grid(Vec<usize>);

fn parse_grid(s: &str) -> Result<Grid, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let num = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(format!("empty range {part}"));
                }
                out.extend(a..=b);
            }
            None => out.push(num(part)?),
        }
    }
    Ok(Grid(out))
}

#[derive(Args)]
struct StatsArgs {
    /// Corpus files, or `bundled:<name>`.
    #[arg(required = true)]
    files: Vec<String>,
    #[arg(long, default_value = "byte")]
    mode: Mode,
    /// Vocabulary JSON (required for bpe mode).
    #[arg(long)]
    vocab: Option<String>,
}

#[derive(Args)]
struct TrainBpeArgs {
    #[arg(required = true)]
    corpus: Vec<String>,
    #[arg(long)]
    vocab_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleKind {
    Markov,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, value_enum, default_value = "markov")]
    kind: OracleKind,
    /// Training corpus, or `bundled:<name>`.
    #[arg(long)]
    corpus: String,
    #[arg(long, default_value_t = 3)]
    order: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Let the model predict the vocabulary's eos token.
    #[arg(long)]
    eos: bool,
    #[arg(long, default_value = "byte")]
    mode: Mode,
    #[arg(long)]
    vocab: Option<String>,
    #[arg(long, default_value = "127.0.0.1:7070")]
    listen: String,
}

/// Exit code for outputs that differ between the two decoders.
const EXIT_LOSSLESS: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json;
    let result = match cli.command {
        Command::Run(a) => cmd_run(a, json),
        Command::Sweep(a) => cmd_sweep(a, json),
        Command::Stats(a) => cmd_stats(a, json),
        Command::TrainBpe(a) => cmd_train_bpe(a, json),
        Command::ServeOracle(a) => cmd_serve(a, json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let lossless = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<BenchError>(), Some(BenchError::OutputMismatch { .. })));
            ExitCode::from(if lossless { EXIT_LOSSLESS } else { 1 })
        }
    }
}

/// Writes through a temp file in the target directory, renaming on success.
fn write_atomic(path: &Path, data: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("cannot write in {}", dir.display()))?;
    tmp.write_all(data)?;
    tmp.persist(path).map_err(|e| anyhow!("cannot write {}: {}", path.display(), e.error))?;
    Ok(())
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn trace_path(base: &Path, index: usize, total: usize) -> PathBuf {
    if total == 1 {
        return base.to_path_buf();
    }
    let stem = base.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match base.extension() {
        Some(ext) => format!("{stem}-{index}.{}", ext.to_string_lossy()),
        None => format!("{stem}-{index}"),
    };
    base.with_file_name(name)
}

fn cmd_run(args: RunArgs, json: bool) -> Result<()> {
    let mut config = args.overrides.apply()?;
    if args.trace.is_some() {
        config.trace = args.trace;
    }
    if args.report.is_some() {
        config.report = args.report;
    }
    let loaded = config.resolve()?;
    let c = &loaded.config;

    let mut cases = Vec::with_capacity(loaded.cases.len());
    let mut traces = Vec::new();
    for (i, case) in loaded.cases.iter().enumerate() {
        let (anpd_run, baseline, metrics) =
            run_case(case, &c.decode, &c.cost_model).with_context(|| format!("case {i}"))?;
        let text = tokenizer::decode(&anpd_run.output, &loaded.vocab)
            .map(|b| String::from_utf8_lossy(&b).into_owned())
            .unwrap_or_else(|e| format!("<undecodable output: {e}>"));
        if c.trace.is_some() {
            let header = TraceHeader {
                prompt_len: case.prompt.len(),
                n: c.decode.n_max,
                k: c.decode.k_draft,
                oracle: case.oracle.summary(),
                cost_model: c.cost_model,
            };
            let mut buf = Vec::new();
            write_trace(&mut buf, &header, &anpd_run)?;
            traces.push(buf);
        }
        cases.push(CaseReport {
            index: i,
            prompt_len: case.prompt.len(),
            output_tokens: anpd_run.output.len(),
            baseline_steps: baseline.steps.len(),
            replay_calls: anpd_run.totals.replay_calls,
            output_text: text,
            metrics,
        });
    }
    let summary = aggregate(&cases.iter().map(|r| r.metrics.clone()).collect::<Vec<_>>(), c.decode.k_draft);

    let wallclock = if args.wallclock {
        let cfg = WallclockConfig {
            inject_latency: args.inject_latency_ms.map(|ms| Duration::from_secs_f64(ms / 1000.0)),
            ..WallclockConfig::default()
        };
        let reports = loaded
            .cases
            .iter()
            .map(|case| wallclock_bench(case, &c.decode, &c.cost_model, &cfg))
            .collect::<Result<Vec<_>, _>>()?;
        Some(reports)
    } else {
        None
    };

    let text = report::render(c, &loaded.cases, &cases, &summary, wallclock.as_deref());
    if let Some(base) = &c.trace {
        for (i, buf) in traces.iter().enumerate() {
            write_atomic(&trace_path(base, i, traces.len()), buf)?;
        }
    }
    if let Some(path) = &c.report {
        write_atomic(path, text.as_bytes())?;
    }
    if json {
        print_json(&json!({
            "decode": c.decode,
            "cost_model": c.cost_model,
            "seed": c.seed,
            "cases": cases,
            "aggregate": summary,
            "wallclock": wallclock,
        }))
    } else {
        print!("{text}");
        Ok(())
    }
}

fn cmd_sweep(args: SweepArgs, json: bool) -> Result<()> {
    let config = args.overrides.apply()?;
    let n_grid = args
        .n_grid
        .map(|g| g.0)
        .or_else(|| config.n_grid.clone())
        .unwrap_or_else(|| vec![config.decode.n_max]);
    let k_grid = args
        .k_grid
        .map(|g| g.0)
        .or_else(|| config.k_grid.clone())
        .unwrap_or_else(|| vec![config.decode.k_draft]);
    if n_grid.is_empty() || k_grid.is_empty() {
        bail!("usage: --n-grid and --k-grid need at least one value each");
    }
    let loaded = config.resolve()?;
    let c = &loaded.config;
    let table = sweep(&loaded.cases, &n_grid, &k_grid, &c.decode, &c.cost_model)?;
    let csv = table.to_csv();
    let sidecar = json!({
        "n_grid": n_grid,
        "k_grid": k_grid,
        "decode": c.decode,
        "cost_model": c.cost_model,
        "seed": c.seed,
        "oracles": loaded.cases.iter().map(|c| c.oracle.summary()).collect::<Vec<_>>(),
        "aggregation": "per-prompt metrics averaged with the arithmetic mean; token and step counts summed",
        "rows": table.rows,
    });
    if let Some(out) = &args.out {
        write_atomic(out, csv.as_bytes())?;
        write_atomic(&out.with_extension("json"), serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    }
    let failed = table.rows.iter().filter(|r| r.error.is_some()).count();
    if json {
        print_json(&sidecar)?;
    } else if args.out.is_none() {
        print!("{csv}");
    } else {
        println!("{} rows, {failed} failed", table.rows.len());
    }
    for r in table.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("n={} k={}: {}", r.n_max, r.k_draft, r.error.as_deref().unwrap_or(""));
    }
    Ok(())
}

fn cmd_stats(args: StatsArgs, json: bool) -> Result<()> {
    let mut texts = Vec::with_capacity(args.files.len());
    for f in &args.files {
        texts.push(read_source(f)?);
    }
    let vocab = load_vocab(args.mode, args.vocab.as_deref(), || Ok(texts.concat()))?;
    let rows: Vec<(String, CorpusStats)> = args
        .files
        .iter()
        .zip(&texts)
        .map(|(f, t)| (f.clone(), corpus_stats(t, &vocab, args.mode)))
        .collect();
    let total = CorpusStats::new(
        rows.iter().map(|(_, s)| s.word_count).sum(),
        rows.iter().map(|(_, s)| s.token_count).sum(),
    );
    if json {
        let files: Vec<_> = rows
            .iter()
            .map(|(f, s)| json!({"file": f, "word_count": s.word_count, "token_count": s.token_count, "ratio": s.ratio}))
            .collect();
        return print_json(&json!({"mode": args.mode, "files": files, "total": total}));
    }
    println!("{:<40} {:>10} {:>10} {:>8}", "file", "words", "tokens", "ratio");
    for (f, s) in rows.iter().chain(std::iter::once(&("total".to_string(), total))) {
        println!("{f:<40} {:>10} {:>10} {:>8.4}", s.word_count, s.token_count, s.ratio);
    }
    Ok(())
}

fn cmd_train_bpe(args: TrainBpeArgs, json: bool) -> Result<()> {
    let mut corpus = Vec::new();
    for f in &args.corpus {
        corpus.extend(read_source(f)?);
    }
    let vocab = tokenizer::train_bpe(&corpus, args.vocab_size)?;
    write_atomic(&args.out, vocab.to_json().as_bytes())?;
    if json {
        print_json(&json!({"out": args.out, "vocab_size": vocab.len()}))
    } else {
        println!("wrote {} entries to {}", vocab.len(), args.out.display());
        Ok(())
    }
}

fn cmd_serve(args: ServeArgs, json: bool) -> Result<()> {
    let text = read_source(&args.corpus)?;
    let vocab = load_vocab(args.mode, args.vocab.as_deref(), || Ok(text.clone()))?;
    let corpus = tokenizer::encode(&text, &vocab, args.mode);
    let eos = if args.eos {
        Some(vocab.eos().ok_or_else(|| anyhow!("vocabulary has no eos token"))?)
    } else {
        None
    };
    let factory: OracleFactory = match args.kind {
        OracleKind::Markov => {
            // fail before binding if the corpus cannot train a model
            MarkovOracle::new(&corpus, args.order, args.seed)?;
            let (order, seed) = (args.order, args.seed);
            Arc::new(move || {
                Ok(Box::new(MarkovOracle::new(&corpus, order, seed)?.with_eos(eos)) as Box<dyn ModelOracle + Send>)
            })
        }
    };
    let server = OracleServer::bind(args.listen.as_str(), factory)
        .with_context(|| format!("cannot listen on {}", args.listen))?
        .log_connections(true);
    let addr = server.local_addr()?;
    if json {
        println!("{}", json!({"listening": addr.to_string()}));
    } else {
        println!("listening on {addr}");
    }
    std::io::stdout().flush()?;
    server.serve()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_accept_lists_and_ranges() {
        assert_eq!(parse_grid("2-4,7").unwrap().0, vec![2, 3, 4, 7]);
        assert_eq!(parse_grid(" 1 , 3 ").unwrap().0, vec![1, 3]);
        assert!(parse_grid("").unwrap().0.is_empty());
        assert!(parse_grid("5-2").is_err());
        assert!(parse_grid("x").is_err());
    }

    #[test]
    fn multi_case_traces_get_indexed_names() {
        assert_eq!(trace_path(Path::new("out/t.jsonl"), 0, 1), PathBuf::from("out/t.jsonl"));
        assert_eq!(trace_path(Path::new("out/t.jsonl"), 3, 5), PathBuf::from("out/t-3.jsonl"));
    }
}
