//! Command-line surface. [`run`] takes argv and output sinks so tests can
//! drive it in-process; `main` only forwards to it.

use std::collections::{BTreeMap, BTreeSet};
use std::error::Error;
use std::fmt;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::degradation::{self, DegradationKind, DegradationSpec};
use crate::demo;
use crate::encoder::{self, HandcraftedEncoder};
use crate::evaluation::{self, BenchmarkConfig, EvalConfig, EvalReport};
use crate::font::{self, FontSource, ProceduralFont, ProceduralFonts, RenderTree};
use crate::glyph;
use crate::ids::IdsTable;
use crate::refinement::{self, RefineConfig};
use crate::retrieval::{self, QueryParams, VoteRule};
use crate::service::{self, AppState, Workspace};
use crate::synthesis::{self, CharSpec, Dictionary, DictionaryConfig};

#[derive(Debug, Parser)]
#[command(name = "glyphdict", version, about = "Generative glyph dictionary for ancient character decipherment")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a dictionary of K variants per character.
    BuildDict(BuildDictArgs),
    /// Embed a dictionary and save its index next to it.
    Index(IndexArgs),
    /// Rank labels for one image; prints `label  score  best_similarity`.
    Query(QueryArgs),
    /// Dictionary vs direct-retrieval benchmark (optionally with the degradation suite).
    Eval(EvalArgs),
    /// Degrade every image of a tree under each kind and severity.
    DegradeSuite(DegradeSuiteArgs),
    /// Iteratively regenerate unsupported entries with validation early stopping.
    Refine(RefineArgs),
    /// HTTP API (and a built UI, if given).
    Serve(ServeArgs),
    /// Write the index embeddings plus an `entry_id  label` sidecar.
    ExportEmbeddings(ExportArgs),
    /// Build the bundled demo: dictionary, index, query/exemplar/validation sets.
    MakeDemo(MakeDemoArgs),
}

#[derive(Debug, Args)]
pub struct BuildDictArgs {
    /// One character per line (`#` starts a comment); the demo charset if omitted.
    #[arg(long)]
    pub charset: Option<PathBuf>,
    /// IDS table (`label<TAB>ids` per line); the bundled table if omitted.
    #[arg(long)]
    pub ids: Option<PathBuf>,
    /// Render tree `<font>/<codepoint_hex>.png`; procedural demo fonts if omitted.
    #[arg(long)]
    pub fonts: Option<PathBuf>,
    #[arg(long, default_value_t = synthesis::DEFAULT_VARIANTS)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub dict: PathBuf,
    /// Defaults to `<dict>/index`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub dict: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = service::DEFAULT_N)]
    pub n: usize,
    #[arg(long, default_value_t = retrieval::DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = VoteRule::Sum)]
    pub vote: VoteRule,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dict: PathBuf,
    /// Query manifest, directory with a manifest, or exemplar tree.
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Train fraction of the label split.
    #[arg(long, default_value_t = 0.9)]
    pub ratio: f64,
    /// Score every query instead of only the test labels.
    #[arg(long)]
    pub no_split: bool,
    /// Entry matches per query; 100 × K if omitted.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = VoteRule::Sum)]
    pub vote: VoteRule,
    #[arg(long, default_value_t = evaluation::DEFAULT_RESAMPLES)]
    pub resamples: usize,
    /// Also run all 12 degradation conditions.
    #[arg(long)]
    pub degradations: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Write an SVG chart next to the report.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Args)]
pub struct DegradeSuiteArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "blur,noise,erode,mask")]
    pub kinds: Vec<DegradationKind>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub severities: Vec<u8>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub dict: PathBuf,
    #[arg(long)]
    pub exemplars: PathBuf,
    #[arg(long)]
    pub validation: PathBuf,
    /// Test queries; the run aborts if any exemplar or validation image is one of them.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub iters: u32,
    #[arg(long, default_value_t = 3)]
    pub patience: u32,
    #[arg(long, default_value_t = retrieval::DEFAULT_K)]
    pub support_k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Without a dictionary the API answers 503 until one is installed.
    #[arg(long)]
    pub dict: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of a built UI to serve at `/`.
    #[arg(long)]
    pub ui: Option<PathBuf>,
    #[arg(long, default_value_t = retrieval::DEFAULT_K)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub dict: PathBuf,
    /// Embedding store path; the sidecar is written with a `.tsv` extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MakeDemoArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = synthesis::DEFAULT_VARIANTS)]
    pub k: usize,
    #[arg(long, default_value_t = 5)]
    pub queries_per_label: usize,
    /// Also write the procedural font renders as a render tree.
    #[arg(long)]
    pub fonts: bool,
}

/// Bad flag combinations found after parsing; exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Error for UsageError {}

type CmdResult = Result<(), Box<dyn Error>>;

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code: 0 success, 1 domain error, 2 usage error.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    2
                }
            };
        }
    };
    info!("config: {cli:?}");
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let usage = e.is::<UsageError>();
            let _ = writeln!(err, "error: {e}");
            if usage {
                2
            } else {
                1
            }
        }
    }
}

/// Process entry: sets up logging from `--log-level`, then [`run`]s with
/// the real standard streams.
pub fn main_entry() -> i32 {
    let args: Vec<std::ffi::OsString> = std::env::args_os().collect();
    let mut level = "info".to_owned();
    for (i, a) in args.iter().enumerate() {
        let a = a.to_string_lossy();
        if let Some(v) = a.strip_prefix("--log-level=") {
            level = v.to_owned();
        } else if a == "--log-level" {
            if let Some(v) = args.get(i + 1) {
                level = v.to_string_lossy().into_owned();
            }
        }
    }
    env_logger::Builder::new().parse_filters(&level).init();
    run(args, &mut std::io::stdout(), &mut std::io::stderr())
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> CmdResult {
    match &cli.command {
        Command::BuildDict(a) => build_dict(a, cli.seed, out),
        Command::Index(a) => index(a, out),
        Command::Query(a) => query(a, out),
        Command::Eval(a) => eval(a, cli.seed, out),
        Command::DegradeSuite(a) => degrade_suite(a, cli.seed, out),
        Command::Refine(a) => refine(a, out),
        Command::Serve(a) => serve(a),
        Command::ExportEmbeddings(a) => export(a, out),
        Command::MakeDemo(a) => make_demo(a, cli.seed, out),
    }
}

fn read_charset(path: &Path) -> Result<Vec<char>, Box<dyn Error>> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.chars().next())
        .collect())
}

fn load_ids(path: Option<&Path>) -> Result<IdsTable, Box<dyn Error>> {
    Ok(match path {
        Some(p) => IdsTable::load(p)?,
        None => demo::ids_table(),
    })
}

fn font_source(dir: Option<&Path>, table: &IdsTable) -> Result<Box<dyn FontSource>, Box<dyn Error>> {
    Ok(match dir {
        Some(d) => Box::new(RenderTree::open(d)?),
        None => Box::new(ProceduralFonts::new(ProceduralFont::demo_set(), table.clone())),
    })
}

/// Reopens the IDS table and font source a dictionary was built from and
/// rebuilds its character specs, refusing sources that changed since.
pub fn reopen_sources(d: &Dictionary) -> Result<(Box<dyn FontSource>, Vec<CharSpec>), Box<dyn Error>> {
    let cfg = &d.config;
    let table = load_ids(cfg.ids_table.as_deref())?;
    let fonts = font_source(cfg.font_dir.as_deref(), &table)?;
    if fonts.describe() != cfg.font_source {
        return Err("font source differs from the one the dictionary was built with".into());
    }
    let specs = synthesis::char_specs(&d.charset, &table, fonts.as_ref())?;
    if synthesis::config_fingerprint(cfg, &specs) != d.config_fingerprint {
        return Err("IDS table or fonts changed since the dictionary was built".into());
    }
    Ok((fonts, specs))
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(())
}

fn build_dict(a: &BuildDictArgs, seed: u64, out: &mut dyn Write) -> CmdResult {
    if a.k == 0 {
        return Err(Box::new(UsageError("--k must be at least 1".into())));
    }
    let labels = match &a.charset {
        Some(p) => read_charset(p)?,
        None => demo::charset(),
    };
    let table = load_ids(a.ids.as_deref())?;
    let fonts = font_source(a.fonts.as_deref(), &table)?;
    let specs = synthesis::char_specs(&labels, &table, fonts.as_ref())?;
    let mut cfg = DictionaryConfig::new(a.k, seed, fonts.as_ref());
    cfg.font_dir = a.fonts.clone();
    cfg.ids_table = a.ids.clone();
    let (d, report) = synthesis::build_dictionary(&specs, &cfg)?;
    d.save(&a.out)?;
    write_json(&a.out.join("build_report.json"), &report)?;
    info!("dictionary fingerprint {:016x}", d.config_fingerprint);
    writeln!(
        out,
        "labels\t{}\nentries\t{}\nfallbacks\t{}\nfingerprint\t{:016x}",
        d.charset.len(),
        d.len(),
        report.fallbacks.len(),
        d.config_fingerprint
    )?;
    Ok(())
}

fn index(a: &IndexArgs, out: &mut dyn Write) -> CmdResult {
    let d = Dictionary::load(&a.dict)?;
    let enc = HandcraftedEncoder::default();
    let ix = retrieval::build_index(&d, &enc)?;
    let dir = a.out.clone().unwrap_or_else(|| a.dict.join(service::INDEX_DIR));
    ix.save(&dir)?;
    writeln!(out, "entries\t{}\ndim\t{}\ngeneration\t{}", ix.len(), ix.dim(), ix.generation())?;
    Ok(())
}

fn query(a: &QueryArgs, out: &mut dyn Write) -> CmdResult {
    if a.n == 0 || a.n > service::MAX_N {
        return Err(Box::new(UsageError(format!("--n must be in 1..={}", service::MAX_N))));
    }
    if a.k == 0 {
        return Err(Box::new(UsageError("--k must be at least 1".into())));
    }
    let enc = HandcraftedEncoder::default();
    let ws = Workspace::open(&a.dict, &enc)?;
    let bytes = fs::read(&a.image).map_err(|e| format!("{}: {e}", a.image.display()))?;
    let img = glyph::decode_raster(&bytes)?;
    let params = QueryParams { k: a.k, rule: a.vote };
    let r = retrieval::decipher(&ws.index, &enc, &img, params, retrieval::query_id(&bytes, 0))?;
    for s in r.label_ranking.iter().take(a.n) {
        writeln!(out, "{}\t{}\t{}", s.label, s.score, s.best_similarity)?;
    }
    Ok(())
}

fn eval(a: &EvalArgs, seed: u64, out: &mut dyn Write) -> CmdResult {
    if a.k == Some(0) {
        return Err(Box::new(UsageError("--k must be at least 1".into())));
    }
    let enc = HandcraftedEncoder::default();
    let ws = Workspace::open(&a.dict, &enc)?;
    let (fonts, _) = reopen_sources(&ws.dictionary)?;
    let queries = evaluation::load_queries(&a.queries)?;
    let plain = evaluation::plain_renders(fonts.as_ref(), &ws.dictionary.charset)?;
    let cfg = EvalConfig {
        k: a.k,
        rule: a.vote,
        resamples: a.resamples,
        bootstrap_seed: seed,
        split: (!a.no_split).then_some((a.ratio, a.split_seed)),
        suite_seed: seed,
        ..Default::default()
    };
    let mut report = evaluation::run_benchmark(&ws.dictionary, &ws.index, &enc, &plain, &queries, &cfg)?;
    if a.degradations {
        let suite = evaluation::run_degradation_suite(
            &ws.dictionary,
            &ws.index,
            &enc,
            &queries,
            &DegradationSpec::grid(seed),
            &cfg,
        )?;
        merge_suite(&mut report, suite);
    }
    report.write(&a.out, a.svg)?;
    write!(out, "{}", report.to_tsv())?;
    Ok(())
}

/// Appends the degraded rows of a suite run to a benchmark report.
pub fn merge_suite(report: &mut EvalReport, suite: EvalReport) {
    report.config.suite_seed = suite.config.suite_seed;
    report
        .conditions
        .extend(suite.conditions.into_iter().filter(|c| c.kind.is_some()));
    report.failures.extend(suite.failures);
}

fn degrade_suite(a: &DegradeSuiteArgs, seed: u64, out: &mut dyn Write) -> CmdResult {
    if let Some(s) = a.severities.iter().find(|s| !(1..=3).contains(*s)) {
        return Err(Box::new(UsageError(format!("severity {s} outside 1..=3"))));
    }
    let rows = degradation::run_suite(&a.input, &a.kinds, &a.severities, seed, &a.out)?;
    writeln!(out, "images\t{}\nout\t{}", rows.len(), a.out.display())?;
    Ok(())
}

fn refine(a: &RefineArgs, out: &mut dyn Write) -> CmdResult {
    if a.iters == 0 {
        return Err(Box::new(UsageError("--iters must be at least 1".into())));
    }
    let d = Dictionary::load(&a.dict)?;
    let (_, specs) = reopen_sources(&d)?;
    let specs: BTreeMap<char, CharSpec> = specs.into_iter().map(|s| (s.label, s)).collect();
    let enc = HandcraftedEncoder::default();
    let exemplars = evaluation::load_queries(&a.exemplars)?;
    let validation = evaluation::load_queries(&a.validation)?;
    let mut cfg = RefineConfig::new(a.iters, d.config.variants_per_label);
    cfg.patience = a.patience;
    cfg.support_k = a.support_k;
    cfg.snapshot_dir = Some(a.out.join("snapshots"));
    if let Some(t) = &a.test {
        cfg.test_fingerprints = evaluation::load_queries(t)?
            .iter()
            .map(|q| evaluation::glyph_fingerprint(&q.glyph))
            .collect::<BTreeSet<u64>>();
    }
    let generator = d.config.generator();
    let (best, trace) = refinement::refine_loop(d, &specs, &generator, &enc, &exemplars, &validation, &cfg)?;
    let best_dir = a.out.join("dictionary");
    best.save(&best_dir)?;
    retrieval::build_index(&best, &enc)?.save(&best_dir.join(service::INDEX_DIR))?;
    trace.write(&a.out.join("trace.json"))?;
    writeln!(out, "iteration\tgeneration\tregenerated\ttop1\ttop10\ttop100")?;
    for it in &trace.iterations {
        writeln!(
            out,
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}",
            it.iteration,
            it.generation,
            it.regenerated,
            it.validation.at(1).unwrap_or(0.0),
            it.validation.at(10).unwrap_or(0.0),
            it.validation.at(100).unwrap_or(0.0)
        )?;
    }
    writeln!(out, "best_generation\t{}\nstop\t{}", trace.best_generation, trace.stop_reason)?;
    Ok(())
}

fn serve(a: &ServeArgs) -> CmdResult {
    let enc = HandcraftedEncoder::default();
    let ws = a.dict.as_deref().map(|d| Workspace::open(d, &enc)).transpose()?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let mut state = AppState::new(ws, &a.data)?;
        state.ui_dir = a.ui.clone();
        state.params.k = a.k;
        service::serve(a.addr, state).await
    })?;
    Ok(())
}

fn export(a: &ExportArgs, out: &mut dyn Write) -> CmdResult {
    let enc = HandcraftedEncoder::default();
    let ws = Workspace::open(&a.dict, &enc)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    encoder::write_store(&a.out, ws.index.dim(), ws.index.embeddings())?;
    let mut tsv = String::from("#entry_id\tlabel\n");
    for (id, label) in ws.index.entry_ids().iter().zip(ws.index.labels()) {
        tsv.push_str(&format!("{id:016x}\t{label}\n"));
    }
    let sidecar = a.out.with_extension("tsv");
    fs::write(&sidecar, tsv)?;
    writeln!(out, "rows\t{}\ndim\t{}\nsidecar\t{}", ws.index.len(), ws.index.dim(), sidecar.display())?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct DemoLayout<'a> {
    seed: u64,
    benchmark: &'a BenchmarkConfig,
    train_labels: String,
    test_labels: String,
    validation_labels: String,
}

fn make_demo(a: &MakeDemoArgs, seed: u64, out: &mut dyn Write) -> CmdResult {
    if a.k == 0 || a.queries_per_label == 0 {
        return Err(Box::new(UsageError("--k and --queries-per-label must be at least 1".into())));
    }
    let fonts = demo::procedural_fonts();
    let specs = synthesis::char_specs(&demo::charset(), &demo::ids_table(), &fonts)?;
    let cfg = DictionaryConfig::new(a.k, seed, &fonts);
    let (d, _) = synthesis::build_dictionary(&specs, &cfg)?;
    let dict_dir = a.out.join("dictionary");
    d.save(&dict_dir)?;
    let enc = HandcraftedEncoder::default();
    retrieval::build_index(&d, &enc)?.save(&dict_dir.join(service::INDEX_DIR))?;

    let bench = BenchmarkConfig {
        queries_per_label: a.queries_per_label,
        ..Default::default()
    };
    let sets = evaluation::benchmark_sets(&specs, &cfg.generator(), &cfg.schedule, a.k, &bench)?;
    evaluation::write_queries(&a.out.join("queries"), &sets.queries)?;
    evaluation::write_queries(&a.out.join("exemplars"), &sets.exemplars)?;
    evaluation::write_queries(&a.out.join("validation"), &sets.validation)?;
    if a.fonts {
        font::write_render_tree(&fonts, &d.charset, &a.out.join("fonts"))?;
    }
    let s = |v: &[char]| v.iter().collect::<String>();
    write_json(
        &a.out.join("layout.json"),
        &DemoLayout {
            seed,
            benchmark: &bench,
            train_labels: s(&sets.split.train_labels),
            test_labels: s(&sets.split.test_labels),
            validation_labels: s(&sets.validation_labels),
        },
    )?;
    writeln!(
        out,
        "dictionary\t{}\nentries\t{}\nqueries\t{}\nexemplars\t{}\nvalidation\t{}",
        dict_dir.display(),
        d.len(),
        sets.queries.len(),
        sets.exemplars.len(),
        sets.validation.len()
    )?;
    Ok(())
}
