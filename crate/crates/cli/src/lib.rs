//! The `segmil` command line: argument parsing, run configuration and one
//! function per subcommand.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use segmil_core::bagbuild::{build_bagpack, BuildConfig};
use segmil_core::bagio::{read_bagpack, write_bagpack, DatasetManifest, Split};
use segmil_core::benchmark::{run_spurious_benchmark, BenchConfig};
use segmil_core::checkpoint::{load_checkpoint, save_checkpoint};
use segmil_core::metrics::{
    corruption_eval, evaluate, seed_aggregate, seed_aggregate_corruption, write_aggregate_csv,
    CorruptionReport, EvalReport, SuiteCell,
};
use segmil_core::milmodel::{explain, forward, ExplanationRecord};
use segmil_core::synthbench::{corrupt, generate, CorruptionKind, Sidecar, SynthSpec};
use segmil_core::training::{model_dims, train, write_log_csv, TrainConfig};
use segmil_core::{Error, ErrorClass, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SCHEMA: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;
/// Numerical or internal failures.
pub const EXIT_INTERNAL: i32 = 1;

pub fn exit_code(e: &Error) -> i32 {
    match e.class() {
        ErrorClass::Schema => EXIT_SCHEMA,
        ErrorClass::Io => EXIT_IO,
        ErrorClass::Config => EXIT_CONFIG,
        ErrorClass::Internal => EXIT_INTERNAL,
    }
}

// ---------------------------------------------------------------------------
// run configuration

/// Default input/output locations; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub rawdet: Option<PathBuf>,
    pub bags: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Everything a run can be configured with, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub build: BuildConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub bench: BenchConfig,
    /// Concepts listed per instance by `eval --explain`.
    pub explain_top_m: usize,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            build: BuildConfig::default(),
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            bench: BenchConfig::default(),
            explain_top_m: 3,
            paths: PathsConfig::default(),
        }
    }
}

fn flatten_keys(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_keys(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

impl RunConfig {
    /// Every configuration key in dotted form with its default value.
    pub fn default_keys() -> Vec<(String, String)> {
        let v = serde_json::to_value(RunConfig::default()).expect("config serializes");
        let mut out = Vec::new();
        flatten_keys("", &v, &mut out);
        out
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies a `key=value` override. Keys are dotted paths into the
    /// config document; values are parsed as JSON, falling back to a string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let mut doc = serde_json::to_value(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.build.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        self.bench.train.validate()?;
        self.bench.spec.validate()
    }
}

// ---------------------------------------------------------------------------
// argument parsing

#[derive(Debug, Parser)]
#[command(
    name = "segmil",
    version,
    about = "Segment-level multiple-instance concept-bottleneck classifier",
    long_about = "Segment-level multiple-instance concept-bottleneck classifier.\n\n\
        Embeddings and concept similarities arrive precomputed (rawdet or bagpack files); \
        backbone fine-tuning happens outside this tool.\n\n\
        Exit codes: 0 ok, 2 schema/parse error, 3 I/O error, 4 config error."
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Seed for training, generation and corruption.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-bag parallel work. Results do not depend on it.
    #[arg(long, env = "SEGMILCBM_WORKERS", global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a bagpack from raw detections.
    BuildBags {
        #[arg(long)]
        rawdet: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic spurious-correlation benchmark.
    GenSynth {
        /// Directory receiving train.jsonl, test.jsonl and synth.json.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train a model on a bagpack.
    Train {
        #[arg(long)]
        bags: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Per-epoch CSV log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a bagpack or a corruption suite.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Require group ids and report worst-group accuracy.
        #[arg(long)]
        worst_group: bool,
        /// Corruption suite index written by `corrupt`.
        #[arg(long)]
        suite: Option<PathBuf>,
        /// Corruption report of a baseline model; adds normalized errors.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Write per-bag explanations as JSONL.
        #[arg(long)]
        explain: Option<PathBuf>,
        /// JSON report destination (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
        /// CSV with one row per group or per corruption cell.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write corrupted copies of a bagpack for every kind and severity 1..5.
    Corrupt {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Comma-separated subset of gauss_noise, shot_noise, blur_mix.
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<String>,
    },
    /// Aggregate eval reports from several seeds into mean/std/CI rows.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Attention pooling versus mean pooling on the synthetic benchmark.
    Bench {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn help_with_keys() -> clap::Command {
    let mut keys = String::from("Configuration keys (defaults):\n");
    for (k, v) in RunConfig::default_keys() {
        keys.push_str(&format!("  {k} = {v}\n"));
    }
    Cli::command().after_help(keys)
}

/// Parses arguments and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match help_with_keys().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_SCHEMA,
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_SCHEMA;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn resolve_config(global: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => {
            if !path.exists() {
                return Err(Error::io(path, std::io::ErrorKind::NotFound.into()));
            }
            RunConfig::from_file(path)?
        }
        None => RunConfig::default(),
    };
    for o in &global.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = global.seed {
        cfg.train.seed = seed;
        cfg.synth.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn configure_workers(workers: Option<usize>) -> Result<()> {
    if let Some(n) = workers {
        if n == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        // The global pool can only be set once per process; later calls keep it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn pick(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| Error::Config(format!("no {name} path given (flag or paths.{name})")))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::ErrorKind::NotFound.into()))
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    configure_workers(cli.global.workers)?;
    let cfg = resolve_config(&cli.global)?;
    let p = &cfg.paths;
    match &cli.command {
        Command::BuildBags { rawdet, out } => {
            let stats = cmd_build_bags(&cfg, &pick(rawdet, &p.rawdet, "rawdet")?, &pick(out, &p.bags, "bags")?)?;
            for s in stats {
                println!(
                    "{}: detections={} selected={} kept={} merged={} instances={}{}",
                    s.image_id,
                    s.detections,
                    s.after_concept_selection,
                    s.after_area_filter,
                    s.merged,
                    s.instances,
                    if s.fallback { " fallback" } else { "" }
                );
            }
            Ok(())
        }
        Command::GenSynth { out_dir } => cmd_gen_synth(&cfg, &pick(out_dir, &p.out_dir, "out_dir")?),
        Command::Train { bags, checkpoint, log } => {
            let bags = pick(bags, &p.bags, "bags")?;
            let ckpt = pick(checkpoint, &p.checkpoint, "checkpoint")?;
            let log = pick(log, &p.log, "log")?;
            cmd_train(&cfg, &bags, &ckpt, &log)
        }
        Command::Eval {
            checkpoint,
            data,
            worst_group,
            suite,
            baseline,
            explain,
            out,
            csv,
        } => {
            let ckpt = pick(checkpoint, &p.checkpoint, "checkpoint")?;
            match suite {
                Some(suite) => cmd_eval_suite(
                    &ckpt,
                    suite,
                    data.as_deref(),
                    baseline.as_deref(),
                    out.as_deref(),
                    csv.as_deref(),
                )
                .map(|_| ()),
                None => {
                    let data = pick(data, &p.data, "data")?;
                    let opts = EvalOptions {
                        worst_group: *worst_group,
                        explain: explain.clone(),
                        top_m: cfg.explain_top_m,
                        out: out.clone(),
                        csv: csv.clone(),
                    };
                    cmd_eval(&ckpt, &data, &opts).map(|_| ())
                }
            }
        }
        Command::Corrupt { data, out_dir, kinds } => {
            let kinds = if kinds.is_empty() {
                CorruptionKind::ALL.to_vec()
            } else {
                kinds.iter().map(|k| k.parse()).collect::<Result<Vec<_>>>()?
            };
            cmd_corrupt(
                &pick(data, &p.data, "data")?,
                &pick(out_dir, &p.out_dir, "out_dir")?,
                &kinds,
                cfg.synth.seed,
            )
        }
        Command::Report { out, reports } => cmd_report(reports, out),
        Command::Bench { out } => {
            let report = cmd_bench(&cfg, out.as_deref())?;
            for r in &report.runs {
                println!(
                    "seed {}: worst-group attention {:.3} uniform {:.3}; alpha core {:.3} spurious {:.3}",
                    r.seed,
                    r.attention.report.worst_group_acc.unwrap_or(f64::NAN),
                    r.uniform.report.worst_group_acc.unwrap_or(f64::NAN),
                    r.attention.alpha_core,
                    r.attention.alpha_spurious
                );
            }
            println!(
                "mean worst-group gap {:.3}; train-weighted accuracy gap {:.3}; balanced accuracy gap {:.3}",
                report.worst_group_gap(),
                report.weighted_avg_gap(),
                report.balanced_avg_gap()
            );
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// commands

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| Error::Format(e.to_string()))?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    require_file(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })
}

pub fn cmd_build_bags(cfg: &RunConfig, rawdet: &Path, out: &Path) -> Result<Vec<segmil_core::bagbuild::BuildStats>> {
    require_file(rawdet)?;
    build_bagpack(rawdet, out, &cfg.build)
}

pub const SYNTH_TRAIN: &str = "train.jsonl";
pub const SYNTH_TEST: &str = "test.jsonl";
pub const SYNTH_SIDECAR: &str = "synth.json";

pub fn cmd_gen_synth(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let data = generate(&cfg.synth)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_bagpack(&cfg.synth.manifest(Split::Train), &data.train, out_dir.join(SYNTH_TRAIN))?;
    write_bagpack(&cfg.synth.manifest(Split::Test), &data.test, out_dir.join(SYNTH_TEST))?;
    write_json(&Sidecar::new(&cfg.synth), &out_dir.join(SYNTH_SIDECAR))
}

pub fn cmd_train(cfg: &RunConfig, bags: &Path, checkpoint: &Path, log: &Path) -> Result<()> {
    require_file(bags)?;
    let (manifest, bags) = read_bagpack(bags)?;
    let outcome = train(&bags, model_dims(&manifest), &cfg.train)?;
    if let Some(dir) = checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_checkpoint(&outcome.params, checkpoint)?;
    let out = create(log)?;
    write_log_csv(&outcome.log, out).map_err(|e| Error::io(log, e))
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub worst_group: bool,
    pub explain: Option<PathBuf>,
    pub top_m: usize,
    pub out: Option<PathBuf>,
    pub csv: Option<PathBuf>,
}

fn check_dims(manifest: &DatasetManifest, params: &segmil_core::milmodel::ModelParams) -> Result<()> {
    if model_dims(manifest) != params.dims {
        return Err(Error::schema(
            "header",
            "D/C/num_classes",
            format!("data {:?} does not match checkpoint {:?}", model_dims(manifest), params.dims),
        ));
    }
    Ok(())
}

pub fn cmd_eval(checkpoint: &Path, data: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    require_file(checkpoint)?;
    require_file(data)?;
    let params = load_checkpoint(checkpoint)?;
    let (manifest, bags) = read_bagpack(data)?;
    check_dims(&manifest, &params)?;
    let report = evaluate(&params, &bags)?;
    if opts.worst_group && report.worst_group_acc.is_none() {
        return Err(Error::schema(
            data.display().to_string(),
            "group_id",
            "worst-group accuracy requested but the split has no group ids",
        ));
    }
    if let Some(path) = &opts.explain {
        let mut out = create(path)?;
        for bag in &bags {
            let trace = forward(&params, bag.embedding_matrix().view())?;
            let ex = explain(&trace, &manifest.concept_names, opts.top_m.min(manifest.num_concepts))?;
            let record = ExplanationRecord {
                image_id: bag.image_id.clone(),
                predicted: trace.predicted(),
                label: bag.label,
                instances: ex.instances,
                bag_concepts: ex.bag_concepts,
            };
            serde_json::to_writer(&mut out, &record).map_err(|e| Error::Format(e.to_string()))?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))?;
    }
    match &opts.out {
        Some(path) => write_json(&report, path)?,
        None => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
    }
    if let Some(path) = &opts.csv {
        report.write_csv(create(path)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}

/// Index of a corruption suite on disk; paths are relative to the index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteIndex {
    pub source: PathBuf,
    pub seed: u64,
    pub cells: Vec<SuiteEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteEntry {
    pub corruption: String,
    pub severity: u8,
    pub path: PathBuf,
}

pub const SUITE_INDEX: &str = "suite.json";

pub fn cmd_corrupt(data: &Path, out_dir: &Path, kinds: &[CorruptionKind], seed: u64) -> Result<()> {
    require_file(data)?;
    let (manifest, bags) = read_bagpack(data)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut cells = Vec::new();
    for &kind in kinds {
        for severity in 1..=5u8 {
            let name = format!("{kind}_s{severity}.jsonl");
            write_bagpack(&manifest, &corrupt(&bags, kind, severity, seed)?, out_dir.join(&name))?;
            cells.push(SuiteEntry {
                corruption: kind.name().to_string(),
                severity,
                path: PathBuf::from(name),
            });
        }
    }
    let index = SuiteIndex {
        source: data.to_path_buf(),
        seed,
        cells,
    };
    write_json(&index, &out_dir.join(SUITE_INDEX))
}

pub fn cmd_eval_suite(
    checkpoint: &Path,
    suite: &Path,
    clean: Option<&Path>,
    baseline: Option<&Path>,
    out: Option<&Path>,
    csv: Option<&Path>,
) -> Result<CorruptionReport> {
    require_file(checkpoint)?;
    let params = load_checkpoint(checkpoint)?;
    let index: SuiteIndex = read_json(suite)?;
    let base_dir = suite.parent().unwrap_or(Path::new("."));
    let mut cells = Vec::with_capacity(index.cells.len());
    for entry in &index.cells {
        let path = base_dir.join(&entry.path);
        require_file(&path)?;
        let (manifest, bags) = read_bagpack(&path)?;
        check_dims(&manifest, &params)?;
        cells.push(SuiteCell {
            corruption: entry.corruption.clone(),
            severity: entry.severity,
            bags,
        });
    }
    let clean_bags = match clean {
        Some(path) => {
            require_file(path)?;
            read_bagpack(path)?.1
        }
        None => Vec::new(),
    };
    let mut report = corruption_eval(&params, &clean_bags, &cells)?;
    if let Some(path) = baseline {
        report.normalize_against(&read_json(path)?)?;
    }
    match out {
        Some(path) => write_json(&report, path)?,
        None => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
    }
    if let Some(path) = csv {
        report.write_csv(create(path)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}

/// Merges per-seed reports (all plain eval or all corruption) into one CSV.
pub fn cmd_report(reports: &[PathBuf], out: &Path) -> Result<()> {
    let mut evals = Vec::new();
    let mut corruptions = Vec::new();
    for path in reports {
        let doc: Value = read_json(path)?;
        let parse_err = |e: serde_json::Error| Error::schema(path.display().to_string(), "report", e.to_string());
        if doc.get("corruptions").is_some() {
            corruptions.push(serde_json::from_value(doc).map_err(parse_err)?);
        } else {
            evals.push(serde_json::from_value(doc).map_err(parse_err)?);
        }
    }
    let rows = match (evals.is_empty(), corruptions.is_empty()) {
        (false, true) => seed_aggregate(&evals)?,
        (true, false) => seed_aggregate_corruption(&corruptions)?,
        _ => {
            return Err(Error::Protocol(
                "report inputs mix plain and corruption reports".into(),
            ))
        }
    };
    write_aggregate_csv(&rows, create(out)?).map_err(|e| Error::io(out, e))
}

pub fn cmd_bench(cfg: &RunConfig, out: Option<&Path>) -> Result<segmil_core::benchmark::BenchReport> {
    let report = run_spurious_benchmark(&cfg.bench)?;
    if let Some(path) = out {
        write_json(&report, path)?;
    }
    Ok(report)
}
