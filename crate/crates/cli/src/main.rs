mod config;

use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dive_core::benchmark::{emit_report, leaderboard_markdown, load_report, run_benchmark, BenchConfig, BenchError, BenchManifest, ReportFormat};
use dive_core::curation::{curate, load_curation_manifest, CurationError};
use dive_core::degree::{annotate_batch, Annotator, DegreeCache, DegreeRequest, HttpChatClient, Lexicon};
use dive_core::dynamics::{dynamic_score_from_flows, pair_flows};
use dive_core::frame_io::{load_image, load_sequence, synthesize_static, textured_frame, write_sequence, FrameError, ImageFormat};
use dive_core::human_study::{aggregate, default_store_path, load_store, serve_study, StudyConfig, StudyService, StudyStore};
use dive_core::mca::{demo_fixture, run_demo, McaDemoFixture};
use dive_core::quality::quality_profile;
use serde::Serialize;

use crate::config::Config;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Io(String),
    Invariant(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Io(_) => 2,
            Self::Invariant(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Io(m) | Self::Invariant(m) => m,
        }
    }
}

impl From<FrameError> for CliError {
    fn from(e: FrameError) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Empty | BenchError::TooFewPairs(_) => Self::Invariant(e.to_string()),
            _ => Self::Io(e.to_string()),
        }
    }
}

impl From<CurationError> for CliError {
    fn from(e: CurationError) -> Self {
        Self::Io(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

/// Dynamics-aware evaluation for image-to-video generation.
#[derive(Debug, Parser)]
#[command(name = "dive", version)]
struct Cli {
    /// JSON settings file; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Never contact the degree-grading endpoint; use the lexicon.
    #[arg(long, global = true)]
    offline: bool,
    /// Seed for anything randomised.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: logical CPUs).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Log progress to stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Dynamic score and quality profile of one clip directory.
    Score(ScoreArgs),
    /// Score every item of a manifest and write DR / DC / DBQ reports.
    Bench(BenchArgs),
    /// Assign dynamic degrees (1-5) to manifest prompts.
    Annotate(AnnotateArgs),
    /// Split clips into keep / drop lists by cuts and camera motion.
    Curate(CurateArgs),
    /// Write a clip that repeats one image.
    StaticGen(StaticGenArgs),
    /// Run the adapter reference checks and print PASS / FAIL.
    McaDemo(McaDemoArgs),
    /// Human preference study utilities.
    HumanStudy {
        #[command(subcommand)]
        command: HumanStudyCommand,
    },
    /// Serve the study HTTP API and media.
    ServeStudy(ServeArgs),
    /// Report utilities.
    Report {
        #[command(subcommand)]
        command: ReportCommand,
    },
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// Directory of frame_NNNN.png / .ppm files.
    video_dir: PathBuf,
    /// Subtract fitted camera motion before measuring.
    #[arg(long)]
    subject_only: bool,
    /// Also write each pair's flow as JSON into this directory.
    #[arg(long, value_name = "DIR")]
    flow_dump: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Benchmark manifest (JSON).
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Output directory for report_<model>.json / .csv and leaderboard.md.
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    /// Degree cache (default: <out>/degree_cache.jsonl).
    #[arg(long, value_name = "FILE")]
    cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnnotateArgs {
    /// Benchmark manifest (JSON).
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Degree cache (default: degree_cache.jsonl next to the manifest).
    #[arg(long, value_name = "FILE")]
    cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CurateArgs {
    /// JSON list of {item_id, video_dir}.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Directory for keep.json and drop.json.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FrameFormat {
    Png,
    Ppm,
}

#[derive(Debug, Args)]
struct StaticGenArgs {
    /// Source image; a seeded texture is used when omitted.
    #[arg(long, value_name = "FILE")]
    image: Option<PathBuf>,
    /// Number of frames.
    #[arg(long, default_value_t = 49)]
    n: usize,
    /// Output clip directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Edge of the generated texture when no image is given.
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Frame file format.
    #[arg(long, value_enum, default_value = "png")]
    format: FrameFormat,
}

#[derive(Debug, Args)]
struct McaDemoArgs {
    /// Write the seeded fixture (shapes and output digest) here.
    #[arg(long, value_name = "FILE")]
    fixture_out: Option<PathBuf>,
    /// Compare against a previously written fixture.
    #[arg(long, value_name = "FILE")]
    fixture_check: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum HumanStudyCommand {
    /// Score a response store.
    Aggregate {
        /// Response store (JSONL).
        #[arg(long, value_name = "FILE")]
        store: PathBuf,
        /// Study config (JSON).
        #[arg(long = "study", visible_alias = "study-config", value_name = "FILE")]
        study: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Study config (JSON); falls back to --config.
    #[arg(long = "study", value_name = "FILE")]
    study: Option<PathBuf>,
    /// Port to listen on.
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Address to bind.
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Response store (default: study_<id>.jsonl next to the config).
    #[arg(long, value_name = "FILE")]
    store: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum ReportCommand {
    /// Combine model reports into one leaderboard.
    Merge {
        /// report_<model>.json files.
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Write the leaderboard here instead of stdout.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("output serializes"));
}

fn write_text(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

struct Ctx {
    cfg: Config,
    offline: bool,
    seed: u64,
    json: bool,
}

impl Ctx {
    fn annotator(&self, cache_path: &Path) -> Result<Annotator, CliError> {
        let cache = DegreeCache::open(cache_path).map_err(|e| CliError::Io(e.to_string()))?;
        let mut a = if !self.offline && self.cfg.llm.is_configured() {
            let client = HttpChatClient::new(&self.cfg.llm).map_err(|e| CliError::Usage(e.to_string()))?;
            Annotator::with_client(Box::new(client), cache, self.cfg.llm.max_retries)
        } else {
            Annotator::offline(cache)
        };
        if let Some(p) = &self.cfg.lexicon {
            a.lexicon = Lexicon::load(p).map_err(|e| CliError::Io(e.to_string()))?;
        }
        if let Some(p) = &self.cfg.degree_template {
            a.template = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        }
        Ok(a)
    }
}

#[derive(Serialize)]
struct ScoreOutput {
    dynamics: dive_core::dynamics::DynamicsProfile,
    quality: dive_core::quality::QualityProfile,
}

fn cmd_score(ctx: &Ctx, a: &ScoreArgs) -> CliResult {
    let seq = load_sequence(&a.video_dir)?;
    if seq.len() < 2 {
        return Err(CliError::Io(format!("{}: need at least two frames, got {}", a.video_dir.display(), seq.len())));
    }
    let mut dcfg = ctx.cfg.dynamics;
    dcfg.subject_only |= a.subject_only;
    let pf = pair_flows(&seq, dcfg.max_dim, &dcfg.flow).map_err(|e| CliError::Invariant(e.to_string()))?;
    if let Some(dir) = &a.flow_dump {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        for (k, f) in pf.flows.iter().enumerate() {
            f.dump(dir, k).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        }
    }
    let dynamics = dynamic_score_from_flows(seq.item_id(), &pf, &dcfg);
    let quality = quality_profile(&pf, &dynamics, &ctx.cfg.quality, None).map_err(|e| CliError::Invariant(e.to_string()))?;
    print_json(&ScoreOutput { dynamics, quality });
    Ok(())
}

fn cmd_bench(ctx: &Ctx, a: &BenchArgs) -> CliResult {
    let manifest = BenchManifest::load(&a.manifest)?;
    let cache = a.cache.clone().unwrap_or_else(|| a.out.join("degree_cache.jsonl"));
    let annotator = ctx.annotator(&cache)?;
    let cfg = BenchConfig { dynamics: ctx.cfg.dynamics, quality: ctx.cfg.quality };
    let report = run_benchmark(&manifest, &cfg, &annotator, None)?;
    let files = emit_report(&report, &a.out, &[ReportFormat::Json, ReportFormat::Csv, ReportFormat::Md])?;
    if ctx.json {
        print_json(&serde_json::json!({
            "model_name": report.model_name,
            "n_items": report.n_items,
            "n_failed": report.n_failed,
            "dr": report.dr,
            "dc": report.dc,
            "dbq": report.dbq,
            "files": files,
        }));
    } else {
        println!(
            "{}: DR {:.2}  DC {:.2}  DBQ {:.2}  ({} items, {} failed)",
            report.model_name, report.dr, report.dc, report.dbq, report.n_items, report.n_failed
        );
        for f in &report.failures {
            println!("  failed {}: {}", f.item_id, f.error);
        }
    }
    Ok(())
}

fn cmd_annotate(ctx: &Ctx, a: &AnnotateArgs) -> CliResult {
    let manifest = BenchManifest::load(&a.manifest)?;
    let cache = a.cache.clone().unwrap_or_else(|| a.manifest.parent().unwrap_or(Path::new("")).join("degree_cache.jsonl"));
    let annotator = ctx.annotator(&cache)?;
    let reqs: Vec<DegreeRequest> = manifest
        .items
        .iter()
        .filter(|it| it.degree.is_none())
        .map(|it| DegreeRequest { item_id: it.item_id.clone(), prompt: it.prompt.clone(), image_path: it.image_path.clone() })
        .collect();
    let mut out = annotate_batch(&reqs, &annotator, ctx.cfg.llm_in_flight.unwrap_or(4)).map_err(|e| CliError::Io(e.to_string()))?;
    out.extend(manifest.items.iter().filter_map(|it| {
        it.degree.map(|degree| dive_core::degree::DegreeAnnotation {
            item_id: it.item_id.clone(),
            degree,
            source: dive_core::degree::DegreeSource::Manifest,
            raw_reply: None,
        })
    }));
    out.sort_by(|x, y| x.item_id.cmp(&y.item_id));
    if ctx.json {
        print_json(&out);
    } else {
        for a in &out {
            println!("{}\t{}\t{:?}", a.item_id, a.degree, a.source);
        }
    }
    Ok(())
}

fn cmd_curate(ctx: &Ctx, a: &CurateArgs) -> CliResult {
    let entries = load_curation_manifest(&a.manifest)?;
    let outcome = curate(&entries, &ctx.cfg.curation_config());
    let (keep, drop) = outcome.write(&a.out)?;
    if ctx.json {
        print_json(&serde_json::json!({
            "kept": outcome.keep().len(),
            "dropped": outcome.drop().len(),
            "keep": keep,
            "drop": drop,
        }));
    } else {
        println!("kept {}, dropped {}", outcome.keep().len(), outcome.drop().len());
        for v in outcome.drop() {
            println!("  drop {}: {}", v.item_id, v.reasons.join(", "));
        }
    }
    Ok(())
}

fn cmd_static_gen(ctx: &Ctx, a: &StaticGenArgs) -> CliResult {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let frame = match &a.image {
        Some(p) => load_image(p)?,
        None => textured_frame(a.size, a.size, ctx.seed),
    };
    let seq = synthesize_static(&frame, a.n)?;
    let format = match a.format {
        FrameFormat::Png => ImageFormat::Png,
        FrameFormat::Ppm => ImageFormat::Ppm,
    };
    write_sequence(&seq, &a.out, format)?;
    if ctx.json {
        print_json(&serde_json::json!({ "out": a.out, "frames": a.n, "width": frame.width(), "height": frame.height() }));
    } else {
        println!("wrote {} frames to {}", a.n, a.out.display());
    }
    Ok(())
}

fn cmd_mca_demo(ctx: &Ctx, a: &McaDemoArgs) -> CliResult {
    let checks = run_demo(ctx.seed).map_err(|e| CliError::Invariant(e.to_string()))?;
    let fixture = demo_fixture(ctx.seed).map_err(|e| CliError::Invariant(e.to_string()))?;
    let mut all_pass = checks.iter().all(|c| c.pass);
    let mut fixture_ok = None;
    if let Some(p) = &a.fixture_check {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        let expected: McaDemoFixture = serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        let ok = expected == fixture;
        all_pass &= ok;
        fixture_ok = Some(ok);
    }
    if let Some(p) = &a.fixture_out {
        write_text(p, &(serde_json::to_string_pretty(&fixture).expect("fixture serializes") + "\n"))?;
    }
    if ctx.json {
        print_json(&serde_json::json!({ "seed": ctx.seed, "checks": checks, "fixture": fixture, "fixture_match": fixture_ok }));
    } else {
        for c in &checks {
            println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        if let Some(ok) = fixture_ok {
            println!("{} fixture_check: {}", if ok { "PASS" } else { "FAIL" }, fixture.f_c_sha256);
        }
    }
    if all_pass {
        Ok(())
    } else {
        Err(CliError::Invariant("mca-demo: one or more checks failed".into()))
    }
}

fn study_config(explicit: &Option<PathBuf>, global: &Option<PathBuf>) -> Result<StudyConfig, CliError> {
    let path = explicit
        .as_ref()
        .or(global.as_ref())
        .ok_or_else(|| CliError::Usage("a study config is required (--study FILE or --config FILE)".into()))?;
    StudyConfig::load(path).map_err(|e| CliError::Io(e.to_string()))
}

fn cmd_aggregate(ctx: &Ctx, store: &Path, study: &StudyConfig) -> CliResult {
    let records = load_store(store, study).map_err(|e| CliError::Io(e.to_string()))?;
    let res = aggregate(&records, study).map_err(|e| CliError::Io(e.to_string()))?;
    if ctx.json {
        print_json(&res);
        return Ok(());
    }
    for (dim, d) in &res.dimensions {
        println!("{dim:?} ({} responses, {} abstentions)", d.n_responses, d.n_abstentions);
        for (m, s) in &d.models {
            println!("  {m:<24} {:>10.2} {:>8.2}%", s.overall, s.normalized_pct);
        }
    }
    Ok(())
}

fn cmd_serve(study: StudyConfig, store_path: PathBuf, host: &str, port: u16) -> CliResult {
    let store = StudyStore::open(&store_path, &study).map_err(|e| CliError::Io(e.to_string()))?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Invariant(e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .map_err(|e| CliError::Io(format!("bind {host}:{port}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| CliError::Io(e.to_string()))?;
        eprintln!("serving study {:?} on http://{addr} (store {})", study.study_id, store_path.display());
        serve_study(StudyService { config: study, store }, listener).await.map_err(|e| CliError::Io(e.to_string()))
    })
}

fn cmd_merge(files: &[PathBuf], out: &Option<PathBuf>) -> CliResult {
    let reports = files.iter().map(|f| load_report(f)).collect::<Result<Vec<_>, _>>()?;
    let md = leaderboard_markdown(&reports);
    match out {
        Some(p) => write_text(p, &md),
        None => {
            print!("{md}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let cfg = match (&cli.config, &cli.command) {
        // a study file passed through --config is not a settings file
        (Some(_), Command::ServeStudy(_) | Command::HumanStudy { .. }) => Config::default(),
        (Some(p), _) => Config::load(p).map_err(CliError::Io)?,
        (None, _) => Config::default(),
    };
    cfg.validate().map_err(CliError::Usage)?;
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global().map_err(|e| CliError::Invariant(e.to_string()))?;
    }
    let ctx = Ctx { cfg, offline: cli.offline, seed: cli.seed, json: cli.json };
    match &cli.command {
        Command::Score(a) => cmd_score(&ctx, a),
        Command::Bench(a) => cmd_bench(&ctx, a),
        Command::Annotate(a) => cmd_annotate(&ctx, a),
        Command::Curate(a) => cmd_curate(&ctx, a),
        Command::StaticGen(a) => cmd_static_gen(&ctx, a),
        Command::McaDemo(a) => cmd_mca_demo(&ctx, a),
        Command::HumanStudy { command: HumanStudyCommand::Aggregate { store, study } } => {
            cmd_aggregate(&ctx, store, &study_config(study, &cli.config)?)
        }
        Command::ServeStudy(a) => {
            let study = study_config(&a.study, &cli.config)?;
            let dir = a.study.as_ref().or(cli.config.as_ref()).and_then(|p| p.parent()).unwrap_or(Path::new(""));
            let store = a.store.clone().unwrap_or_else(|| default_store_path(dir, &study.study_id));
            cmd_serve(study, store, &a.host, a.port)
        }
        Command::Report { command: ReportCommand::Merge { files, out } } => cmd_merge(files, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_target(false)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
