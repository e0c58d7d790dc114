//! Command-line front end.
//!
//! Every subcommand is a thin wrapper over library calls. Errors map to exit
//! code 1 (validation or usage) or 2 (I/O).

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::baselines::{DevConfig, DEFAULT_VAL_PER_CLASS};
use crate::error::{Error, Result};
use crate::feature_store::{
    load_manifest, load_prob_matrix, read_label_csv, read_logit_csv, read_prob_csv,
    save_label_vector, save_logit_matrix, save_prob_matrix,
};
use crate::selection::{
    report_csv, score_manifest, select_source_domain, Criterion, SelectionReport,
};
use crate::snd::{SndConfig, DEFAULT_BLOCK_ROWS, DEFAULT_SUBSAMPLE_PIXELS, DEFAULT_TEMPERATURE};
use crate::toy::{run_experiment, Experiment};

/// Environment variable capping the worker threads used by the kernels.
pub const THREADS_ENV: &str = "NBRSELECT_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "nbrselect",
    version,
    about = "Unsupervised model selection for domain adaptation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every checkpoint of a manifest and pick a winner per criterion.
    Score(ScoreArgs),
    /// Pick the source domain whose model gives the densest target neighborhoods.
    SelectSource(SelectSourceArgs),
    /// Run a synthetic Gaussian experiment.
    Toy(ToyArgs),
    /// Convert a CSV table to the binary dump format.
    Convert(ConvertArgs),
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Manifest JSON listing the candidate checkpoints.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated criteria: snd, snd_no_softmax, c_ent, source_risk, iwv, dev.
    #[arg(long, value_delimiter = ',', default_value = "snd")]
    pub criteria: Vec<String>,
    /// Softmax temperature of the neighborhood distribution.
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    pub tau: f64,
    #[arg(long)]
    pub out_json: Option<PathBuf>,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
    /// Seed for pixel sampling, validation subsets and the domain discriminator.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pixels sampled per image for segmentation manifests.
    #[arg(long, default_value_t = DEFAULT_SUBSAMPLE_PIXELS)]
    pub subsample_pixels: usize,
    /// Rows per tile of the similarity kernel.
    #[arg(long, default_value_t = DEFAULT_BLOCK_ROWS)]
    pub block_rows: usize,
    /// Source-validation samples kept per class for source_risk, iwv and dev.
    #[arg(long, default_value_t = DEFAULT_VAL_PER_CLASS, conflicts_with = "all_source_val")]
    pub val_per_class: usize,
    /// Use every supplied source-validation row instead of a per-class subset.
    #[arg(long)]
    pub all_source_val: bool,
    /// Gradient steps of the domain discriminator.
    #[arg(long, default_value_t = 200)]
    pub dev_epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dev_learning_rate: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub dev_l2: f64,
    /// Upper bound on importance weights.
    #[arg(long, default_value_t = 20.0)]
    pub dev_weight_clip: f64,
}

#[derive(Debug, Args)]
pub struct SelectSourceArgs {
    /// Target predictions of each candidate, as `name=path` or a bare path
    /// (the file stem becomes the name).
    #[arg(required = true)]
    pub candidates: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    pub tau: f64,
    /// Where to write the JSON result.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    /// Experiment name.
    #[arg(long)]
    pub experiment: String,
    /// First seed; seeds `seed..seed+seeds` are run.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Configuration override `key=value`, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, default_value = "toy_out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConvertKind {
    Probs,
    Logits,
    Labels,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = ConvertKind::Probs)]
    pub kind: ConvertKind,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {value:?}"
            ))
        })?;
    // a second initialization in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Score(a) => cmd_score(&a),
        Command::SelectSource(a) => cmd_select_source(&a),
        Command::Toy(a) => cmd_toy(&a),
        Command::Convert(a) => cmd_convert(&a),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn parse_criteria(names: &[String]) -> Result<BTreeSet<Criterion>> {
    let set = names
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<BTreeSet<_>>>()?;
    if set.is_empty() {
        return Err(Error::Config("no criteria given".into()));
    }
    Ok(set)
}

pub fn cmd_score(a: &ScoreArgs) -> Result<i32> {
    let criteria = parse_criteria(&a.criteria)?;
    let snd_config = SndConfig {
        temperature: a.tau,
        block_rows: a.block_rows,
        subsample_pixels: a.subsample_pixels,
        rng_seed: a.seed,
    };
    let dev_config = DevConfig {
        val_per_class: (!a.all_source_val).then_some(a.val_per_class),
        discriminator_epochs: a.dev_epochs,
        discriminator_lr: a.dev_learning_rate,
        l2_penalty: a.dev_l2,
        rng_seed: a.seed,
        weight_clip: a.dev_weight_clip,
    };
    let manifest = load_manifest(&a.manifest)?;
    let report = score_manifest(&manifest, &criteria, &snd_config, &dev_config)?;
    if let Some(p) = &a.out_json {
        write_file(p, &report.to_json())?;
    }
    if let Some(p) = &a.out_csv {
        write_file(p, &report_csv(&report))?;
    }
    print!("{}", winner_table(&report));
    Ok(0)
}

/// Human-readable winners, one line per criterion.
pub fn winner_table(report: &SelectionReport) -> String {
    let mut out = format!(
        "{:<16} {:<10} {:<24} {}\n",
        "criterion", "direction", "winner", "value"
    );
    for (c, id) in &report.winners {
        let value = report
            .scores
            .iter()
            .find(|s| s.criterion == *c && s.run_id == id.run_id && s.iteration == id.iteration)
            .map(|s| s.value)
            .unwrap_or(f64::NAN);
        out += &format!(
            "{:<16} {:<10} {:<24} {value:.6}\n",
            c.name(),
            c.direction().name(),
            id.to_string()
        );
    }
    if let Some(o) = &report.oracle {
        let best = o
            .accuracy
            .iter()
            .find(|a| a.run_id == o.winner.run_id && a.iteration == o.winner.iteration)
            .map(|a| a.value)
            .unwrap_or(f64::NAN);
        out += &format!(
            "{:<16} {:<10} {:<24} {best:.6}\n",
            "oracle_accuracy",
            "maximize",
            o.winner.to_string()
        );
    }
    out
}

fn candidate_name(arg: &str) -> Result<(String, PathBuf)> {
    if let Some((name, path)) = arg.split_once('=') {
        if name.is_empty() || path.is_empty() {
            return Err(Error::Config(format!(
                "bad candidate {arg:?}, expected name=path"
            )));
        }
        return Ok((name.to_string(), PathBuf::from(path)));
    }
    let path = PathBuf::from(arg);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::Config(format!("cannot derive a name from {arg:?}")))?;
    Ok((name, path))
}

pub fn cmd_select_source(a: &SelectSourceArgs) -> Result<i32> {
    let mut candidates = BTreeMap::new();
    for arg in &a.candidates {
        let (name, path) = candidate_name(arg)?;
        let probs = load_prob_matrix(&path)?;
        if candidates.insert(name.clone(), probs).is_some() {
            return Err(Error::Config(format!("duplicate candidate name {name:?}")));
        }
    }
    let result = select_source_domain(&candidates, &SndConfig::with_temperature(a.tau))?;
    for (name, v) in &result.scores {
        let mark = if *name == result.winner { "*" } else { " " };
        println!("{mark} {name:<24} snd {v:.6}");
    }
    println!("selected source: {}", result.winner);
    if let Some(p) = &a.out {
        let json = serde_json::json!({ "winner": result.winner, "snd": result.scores });
        let mut text = serde_json::to_string_pretty(&json).expect("json value serializes");
        text.push('\n');
        write_file(p, &text)?;
    }
    Ok(0)
}

pub fn cmd_toy(a: &ToyArgs) -> Result<i32> {
    let experiment: Experiment = a.experiment.parse()?;
    let mut config = experiment.fixture();
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        config.set(k.trim(), v)?;
    }
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let record = run_experiment(experiment, &config, &seeds)?;
    let written = record.write(&a.out_dir)?;
    println!("{}: {}", experiment, record.summary);
    println!(
        "{}: {}",
        experiment,
        if record.passed { "PASS" } else { "FAIL" }
    );
    println!("wrote {} files to {}", written.len(), a.out_dir.display());
    Ok(0)
}

pub fn cmd_convert(a: &ConvertArgs) -> Result<i32> {
    match a.kind {
        ConvertKind::Probs => save_prob_matrix(&a.output, &read_prob_csv(&a.input)?)?,
        ConvertKind::Logits => save_logit_matrix(&a.output, &read_logit_csv(&a.input)?)?,
        ConvertKind::Labels => save_label_vector(&a.output, &read_label_csv(&a.input)?)?,
    }
    println!("wrote {}", a.output.display());
    Ok(0)
}
