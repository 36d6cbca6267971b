//! `mcp` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 failed
//! gradient check. Log verbosity comes from `MCP_LOG_LEVEL`
//! (error, warn, info, debug; default warn).

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use mcp_core::inference::{Engine, Mode};
use mcp_core::io::{
    grid, read_snapshot, read_stream, run_engine, synth_in_memory, synth_stream, write_snapshot, GridSpec,
    RunConfig, RunSummary, SampleRecord, Snapshot, StreamHeader, SynthSpec, SynthStream,
};
use mcp_core::metrics::{
    self, compactness, density_constants_sim, fig2_experiment, pearson, quantile_radius, retention_ratio_sim,
    DensityConfig, Fig2Config, Mixture2d,
};
use mcp_core::tuning::{gradcheck, GradcheckConfig};
use mcp_core::Error;

#[derive(Parser)]
#[command(name = "mcp", version, about = "Multi-cache prototype test-time adaptation over embedding streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the engine over a stream; writes a summary JSON and per-sample JSONL.
    Run(RunArgs),
    /// Generate a synthetic stream file.
    Synth(SynthArgs),
    /// Check analytic gradients of the tuning losses against finite differences.
    Gradcheck(GradcheckArgs),
    /// Compactness of a labeled stream (original views).
    Compactness(StreamOnly),
    /// Pearson correlation of two comma-separated series.
    Pearson(PearsonArgs),
    /// Compactness versus accuracy-gain sweep over synthetic datasets.
    Fig2(Fig2Args),
    /// Retention-ratio and density-constant simulations.
    Theory(TheoryArgs),
    /// Grid search over the fusion weights and w.
    Gridsearch(GridArgs),
    /// Save the cache state after a run, or inspect a saved snapshot.
    Snapshot(SnapshotArgs),
}

#[derive(Args, Clone)]
struct EngineArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Stream file; defaults to the config's `stream` or its `synth.*` stream.
    #[arg(long)]
    stream: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// mcp or mcp++.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    no_entropy_cache: bool,
    #[arg(long)]
    no_align_cache: bool,
    #[arg(long)]
    no_negative_cache: bool,
    #[arg(long)]
    no_text_term: bool,
    #[arg(long)]
    no_visual_term: bool,
    #[arg(long)]
    no_cache_term: bool,
    #[arg(long)]
    no_align_loss: bool,
    #[arg(long)]
    no_contrast_loss: bool,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Summary JSON path (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-sample JSONL path; defaults to the summary path with a .jsonl extension.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Restore cache state from a snapshot before running.
    #[arg(long)]
    restore: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Config file whose `synth.*` keys describe the stream.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    shift: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 50)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StreamOnly {
    #[arg(long)]
    stream: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PearsonArgs {
    #[arg(long)]
    xs: String,
    #[arg(long)]
    ys: String,
}

#[derive(Args)]
struct Fig2Args {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output prefix; writes PREFIX.csv and PREFIX.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Monte-Carlo sample count.
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long, default_value = "0.5,1,2")]
    alpha1: String,
    #[arg(long, default_value = "0.5,1,2")]
    alpha2: String,
    #[arg(long, default_value = "0.5,1,2")]
    alpha3: String,
    #[arg(long, default_value = "0.2,0.5,0.8")]
    w: String,
    /// Results CSV path; the best configuration is written next to it as .cfg.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SnapshotArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Where to write the snapshot after running the stream.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print a JSON description of an existing snapshot instead.
    #[arg(long)]
    inspect: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Config(String),
    Data(String),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Check(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Check(m) => m,
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn data_err(e: impl std::fmt::Display) -> Failure {
    Failure::Data(e.to_string())
}

/// Errors raised while processing data: configuration problems still
/// count as configuration errors.
fn classify(e: Error) -> Failure {
    match e {
        Error::Config(m) => Failure::Config(m),
        other => Failure::Data(other.to_string()),
    }
}

fn init_logging() {
    let level = std::env::var("MCP_LOG_LEVEL").unwrap_or_else(|_| "warn".into());
    let filter = match level.to_ascii_lowercase().as_str() {
        l @ ("error" | "warn" | "info" | "debug") => l.to_string(),
        _ => "warn".to_string(),
    };
    env_logger::Builder::new().parse_filters(&filter).format_timestamp(None).init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Compactness(a) => cmd_compactness(a),
        Command::Pearson(a) => cmd_pearson(a),
        Command::Fig2(a) => cmd_fig2(a),
        Command::Theory(a) => cmd_theory(a),
        Command::Gridsearch(a) => cmd_grid(a),
        Command::Snapshot(a) => cmd_snapshot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn write_output(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| data_err(format!("cannot write {}: {e}", p.display()))),
        None => print_stdout(&format!("{text}\n")),
    }
}

/// Write to stdout; a closed pipe (e.g. `| head`) is not an error.
fn print_stdout(text: &str) -> CliResult<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(data_err(format!("cannot write output: {e}"))),
        _ => Ok(()),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn load_config(a: &EngineArgs) -> CliResult<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p).map_err(config_err)?,
        None => RunConfig::default(),
    };
    for (i, kv) in a.overrides.iter().enumerate() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim(), i + 1).map_err(config_err)?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
        if let Some(s) = &mut cfg.synth {
            s.seed = seed;
        }
    }
    if let Some(m) = &a.mode {
        cfg.engine.mode = Mode::parse(m).map_err(config_err)?;
    }
    let e = &mut cfg.engine;
    e.caches.entropy &= !a.no_entropy_cache;
    e.caches.align &= !a.no_align_cache;
    e.caches.negative &= !a.no_negative_cache;
    e.terms.text &= !a.no_text_term;
    e.terms.visual &= !a.no_visual_term;
    e.terms.cache &= !a.no_cache_term;
    e.losses.align &= !a.no_align_loss;
    e.losses.contrast &= !a.no_contrast_loss;
    if let Some(s) = &a.stream {
        cfg.stream = Some(s.clone());
    }
    cfg.engine.hp.validate().map_err(config_err)?;
    Ok(cfg)
}

/// Stream source: a file reader or an in-process generator.
enum Source {
    File(mcp_core::io::StreamReader<io::BufReader<File>>),
    Synth(SynthStream),
}

impl Source {
    fn open(cfg: &RunConfig) -> CliResult<Self> {
        if let Some(p) = &cfg.stream {
            return read_stream(p).map(Source::File).map_err(data_err);
        }
        if let Some(spec) = &cfg.synth {
            return SynthStream::new(spec).map(Source::Synth).map_err(config_err);
        }
        Err(Failure::Config("no stream given (use --stream or synth.* keys)".into()))
    }

    fn header(&self) -> &StreamHeader {
        match self {
            Source::File(r) => r.header(),
            Source::Synth(s) => s.header(),
        }
    }

    fn warnings(&self) -> u64 {
        match self {
            Source::File(r) => r.warnings(),
            Source::Synth(_) => 0,
        }
    }
}

impl Iterator for Source {
    type Item = mcp_core::Result<SampleRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        match self {
            Source::File(r) => r.next(),
            Source::Synth(s) => s.next(),
        }
    }
}

fn engine_for(cfg: &RunConfig, header: &StreamHeader) -> CliResult<Engine> {
    Engine::from_prompts(&header.prompts, cfg.engine.clone()).map_err(classify)
}

fn drive(engine: &mut Engine, source: &mut Source, log: Option<&mut dyn Write>) -> (RunSummary, Option<Error>) {
    let out = run_engine(engine, source.by_ref(), log);
    let mut summary = out.summary;
    summary.reader_warnings = source.warnings();
    (summary, out.error)
}

fn cmd_run(a: RunArgs) -> CliResult<()> {
    let cfg = load_config(&a.engine)?;
    let out = a.out.clone().or_else(|| cfg.out.clone());
    let mut source = Source::open(&cfg)?;
    let mut engine = engine_for(&cfg, source.header())?;
    if let Some(p) = &a.restore {
        let file = File::open(p).map_err(data_err)?;
        let snap = read_snapshot(io::BufReader::new(file)).map_err(data_err)?;
        snap.apply(&mut engine).map_err(data_err)?;
    }
    let log_path = a.log.clone().or_else(|| out.as_ref().map(|p| p.with_extension("jsonl")));
    let mut log_file = match &log_path {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(data_err)?)),
        None => None,
    };
    info!("running {} over {} classes", cfg.engine.mode.name(), source.header().classes());
    let (summary, error) = drive(
        &mut engine,
        &mut source,
        log_file.as_mut().map(|w| w as &mut dyn Write),
    );
    // The (possibly partial) summary is written even when the run failed.
    write_output(out.as_deref(), &summary.to_json())?;
    match error {
        None => Ok(()),
        Some(e) => Err(classify(e)),
    }
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let mut spec = match &a.config {
        Some(p) => RunConfig::load(p).map_err(config_err)?.synth.unwrap_or_default(),
        None => SynthSpec::default(),
    };
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    macro_rules! over {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { spec.$f = v; } )* };
    }
    over!(classes, dim, samples, views, spread, noise, shift);
    let n = synth_stream(&spec, &a.out).map_err(|e| match e {
        Error::InvalidArgument(m) => Failure::Config(m),
        other => data_err(other),
    })?;
    info!("wrote {n} records to {}", a.out.display());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let cfg = GradcheckConfig {
        instances: a.instances,
        seed: a.seed,
        tolerance: a.tolerance,
        ..GradcheckConfig::default()
    };
    let report = gradcheck(&cfg).map_err(data_err)?;
    write_output(a.out.as_deref(), &to_json(&report))?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient check failed: max relative error {:.3e} >= {:.1e}",
            report.max_rel(),
            cfg.tolerance
        )))
    }
}

fn cmd_compactness(a: StreamOnly) -> CliResult<()> {
    let reader = read_stream(&a.stream).map_err(data_err)?;
    let classes = reader.header().classes();
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for r in reader {
        let r = r.map_err(data_err)?;
        if let Some(l) = r.label {
            feats.push(r.views.row(0).to_vec());
            labels.push(l);
        }
    }
    let report = compactness(&feats, &labels, classes).map_err(data_err)?;
    write_output(a.out.as_deref(), &to_json(&report))
}

fn cmd_pearson(a: PearsonArgs) -> CliResult<()> {
    let xs = grid::parse_list(&a.xs).map_err(config_err)?;
    let ys = grid::parse_list(&a.ys).map_err(config_err)?;
    let r = pearson(&xs, &ys).map_err(config_err)?;
    write_output(None, &to_json(&r))
}

fn cmd_fig2(a: Fig2Args) -> CliResult<()> {
    let report = fig2_experiment(&Fig2Config::spread_sweep(a.seed)).map_err(classify)?;
    match &a.out {
        Some(prefix) => {
            write_output(Some(&prefix.with_extension("csv")), &report.to_csv())?;
            write_output(Some(&prefix.with_extension("json")), &to_json(&report))
        }
        None => write_output(None, &to_json(&report)),
    }
}

#[derive(serde::Serialize)]
struct TheoryReport {
    retention_independent: Vec<metrics::RetentionReport>,
    retention_dependent: metrics::RetentionReport,
    density: Vec<(f64, metrics::DensityReport)>,
}

fn cmd_theory(a: TheoryArgs) -> CliResult<()> {
    let n = a.samples as u64;
    let independent = (0..10)
        .map(|s| retention_ratio_sim(n, 0.3, 0.4, false, a.seed + s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(config_err)?;
    let dependent = retention_ratio_sim(n, 0.3, 0.4, true, a.seed).map_err(config_err)?;
    let mixture = Mixture2d::standard();
    let center = [0.0, 0.0];
    let mut density = Vec::new();
    for q in [0.9, 0.7, 0.5, 0.3] {
        let d0 = quantile_radius(&mixture, center, q, a.samples, a.seed);
        let cfg = DensityConfig {
            mixture: mixture.clone(),
            center,
            d0,
            samples: a.samples,
            ball_radius: 0.2 * d0.min(1.0),
            balls: 20,
            seed: a.seed,
        };
        density.push((d0, density_constants_sim(&cfg).map_err(config_err)?));
    }
    let report = TheoryReport {
        retention_independent: independent,
        retention_dependent: dependent,
        density,
    };
    write_output(a.out.as_deref(), &to_json(&report))
}

fn load_records(cfg: &RunConfig) -> CliResult<(StreamHeader, Vec<SampleRecord>)> {
    if let Some(p) = &cfg.stream {
        let reader = read_stream(p).map_err(data_err)?;
        let header = reader.header().clone();
        let records = reader.collect::<Result<Vec<_>, _>>().map_err(data_err)?;
        return Ok((header, records));
    }
    match &cfg.synth {
        Some(spec) => synth_in_memory(spec).map_err(config_err),
        None => Err(Failure::Config("no stream given (use --stream or synth.* keys)".into())),
    }
}

fn cmd_grid(a: GridArgs) -> CliResult<()> {
    let cfg = load_config(&a.engine)?;
    let spec = GridSpec {
        alpha1: grid::parse_list(&a.alpha1).map_err(config_err)?,
        alpha2: grid::parse_list(&a.alpha2).map_err(config_err)?,
        alpha3: grid::parse_list(&a.alpha3).map_err(config_err)?,
        w: grid::parse_list(&a.w).map_err(config_err)?,
    };
    let (header, records) = load_records(&cfg)?;
    let report = mcp_core::io::grid_search(&cfg.engine, &header.prompts, &records, &spec).map_err(classify)?;
    let best = report.best_row();
    let mut best_cfg = cfg.clone();
    best_cfg.engine.hp.alpha1 = best.alpha1;
    best_cfg.engine.hp.alpha2 = best.alpha2;
    best_cfg.engine.hp.alpha3 = best.alpha3;
    best_cfg.engine.hp.w = best.w;
    match &a.out {
        Some(p) => {
            write_output(Some(p), &report.to_csv())?;
            write_output(Some(&p.with_extension("cfg")), &best_cfg.to_config_string())
        }
        None => {
            print_stdout(&format!("{}# best: {}\n", report.to_csv(), to_json(best).replace('\n', " ")))
        }
    }
}

#[derive(serde::Serialize)]
struct SnapshotInfo {
    classes: usize,
    dim: usize,
    entropy_slots: usize,
    align_slots: usize,
    negative_slots: usize,
    residual_text_nonzero: bool,
    residual_visual_nonzero: bool,
}

fn cmd_snapshot(a: SnapshotArgs) -> CliResult<()> {
    if let Some(p) = &a.inspect {
        let file = File::open(p).map_err(data_err)?;
        let snap = read_snapshot(io::BufReader::new(file)).map_err(data_err)?;
        use mcp_core::CacheKind;
        let info = SnapshotInfo {
            classes: snap.bank.classes(),
            dim: snap.bank.dim(),
            entropy_slots: snap.bank.occupancy(CacheKind::Entropy),
            align_slots: snap.bank.occupancy(CacheKind::Align),
            negative_slots: snap.bank.occupancy(CacheKind::Negative),
            residual_text_nonzero: !snap.residual_text.is_zero(),
            residual_visual_nonzero: !snap.residual_visual.is_zero(),
        };
        return write_output(None, &to_json(&info));
    }
    let out = a
        .out
        .clone()
        .ok_or_else(|| Failure::Config("snapshot needs --out (or --inspect)".into()))?;
    let cfg = load_config(&a.engine)?;
    let mut source = Source::open(&cfg)?;
    let mut engine = engine_for(&cfg, source.header())?;
    let (_, error) = drive(&mut engine, &mut source, None);
    if let Some(e) = error {
        return Err(classify(e));
    }
    let file = File::create(&out).map_err(data_err)?;
    let mut w = BufWriter::new(file);
    write_snapshot(&mut w, &Snapshot::of(&engine)).map_err(data_err)?;
    w.flush().map_err(data_err)?;
    Ok(())
}
