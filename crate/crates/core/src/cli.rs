//! The `taco` command-line interface.
//!
//! Commands: `gen-data`, `train`, `eval`, `align`, `sweep`. Settings come from
//! an optional TOML run config (sections `world`, `noise`, `train`, `eval`,
//! `paths`); flags override it. All randomness derives from `--seed`.
//!
//! Exit codes: `0` success, `1` usage or invalid configuration, `2` data error
//! (missing, malformed or incompatible files), `3` numeric failure.

use crate::alignment::{ctc_forward, decode_argmax, taco_forward};
use crate::evaluation::{agreement_pct, alignment_accuracy, evaluate_tasks, write_metrics_long_csv, Aligner, EvalConfig, MetricsReport};
use crate::navworld::{generate_dataset, load_dataset, to_dataset, write_dataset, DartNoise, WorldConfig};
use crate::policy::{Checkpoint, PolicyLibrary, SubtaskClassifier};
use crate::training::{train, write_history_csv, Algorithm, Dataset, TrainConfig};
use crate::{rng, Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

/// Everything a run can be configured with.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub noise: DartNoise,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Usage(format!("invalid config {}: {e}", path.display())))
    }

    fn from_flag(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

#[derive(Debug, Parser)]
#[command(name = "taco", version, about = "Temporal alignment for control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate NavWorld demonstrations.
    GenData(GenDataArgs),
    /// Train a sub-policy library.
    Train(TrainArgs),
    /// Evaluate a checkpoint on freshly sampled tasks.
    Eval(EvalArgs),
    /// Dump the lattice and decoded alignment of one demonstration.
    Align(AlignArgs),
    /// Run generation, training and evaluation over a grid.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub n: usize,
    /// Sketch length.
    #[arg(long)]
    pub length: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub algo: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training history CSV; defaults to `<out>` with extension `history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub dropout_decay: Option<f64>,
    /// Comma-separated hidden layer widths.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Record elapsed seconds in the history instead of zeros.
    #[arg(long)]
    pub wall_clock: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub l_test: Option<usize>,
    #[arg(long)]
    pub n_tasks: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Held-out dataset for alignment accuracy.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[arg(long)]
    pub stop_threshold: Option<f64>,
    #[arg(long)]
    pub step_cap: Option<usize>,
    /// Sample actions instead of using the policy means.
    #[arg(long)]
    pub stochastic: bool,
    /// Metrics JSON path; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Long-format metrics CSV path.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum LatticeKind {
    Taco,
    Ctc,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub index: usize,
    /// Lattice CSV path.
    #[arg(long, default_value = "lattice.csv")]
    pub out: PathBuf,
    /// Which lattice to build; defaults to CTC when the checkpoint carries a classifier.
    #[arg(long, value_enum)]
    pub lattice: Option<LatticeKind>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "50,400,1000")]
    pub sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "taco,gt-bc,ctc-bc-argmax")]
    pub algos: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 3)]
    pub length: usize,
    #[arg(long)]
    pub l_test: Option<usize>,
    #[arg(long)]
    pub n_tasks: Option<usize>,
    /// Held-out demonstrations per seed for alignment accuracy.
    #[arg(long, default_value_t = 100)]
    pub heldout: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-cell checkpoints and metrics.
    #[arg(long)]
    pub work_dir: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Maps an error to the documented exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Usage(_) | Error::Structural(_) | Error::Refused(_) | Error::Generation(_) => 1,
        Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) => 2,
        Error::Numeric { .. } | Error::DegenerateLattice { .. } => 3,
    }
}

/// Parses `args` (including the program name), runs the command, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Align(a) => cmd_align(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn require(path: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.ok_or_else(|| Error::Usage(format!("{flag} is required (flag or config paths section)")))
}

fn usage(e: Error) -> Error {
    match e {
        Error::Structural(m) => Error::Usage(m),
        other => other,
    }
}

pub fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = RunConfig::from_flag(a.config.as_deref())?;
    if a.n == 0 {
        return Err(Error::Usage("--n must be at least 1".into()));
    }
    let k = cfg.world.n_destinations();
    if a.length == 0 || a.length > k {
        return Err(Error::Usage(format!("--length must lie in 1..={k}")));
    }
    let out = require(a.out.or(cfg.paths.dataset), "--out")?;
    let (header, demos) = generate_dataset(&cfg.world, &cfg.noise, a.n, a.length, a.seed).map_err(usage)?;
    write_dataset(&out, &header, &demos)?;
    let mean_t = demos.iter().map(|d| d.states.len()).sum::<usize>() as f64 / demos.len() as f64;
    println!("n={} L={} mean_T={mean_t:.2} -> {}", header.n, header.l, out.display());
    Ok(())
}

fn train_config(cfg: &RunConfig, a: &TrainArgs) -> Result<TrainConfig> {
    let mut t = cfg.train.clone();
    if let Some(algo) = &a.algo {
        t.algorithm = algo.parse().map_err(usage)?;
    }
    if let Some(v) = a.seed {
        t.rng_seed = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.dropout {
        t.dropout_initial = v;
    }
    if let Some(v) = a.dropout_decay {
        t.dropout_decay = v;
    }
    if let Some(v) = &a.hidden {
        t.hidden_sizes = v.clone();
    }
    t.validate().map_err(usage)?;
    Ok(t)
}

/// Writes the checkpoint and history files of a finished run.
fn save_run(
    report: &crate::training::TrainReport,
    data: &Dataset,
    l_train: usize,
    out: &Path,
    history: &Path,
    wall_clock: bool,
) -> Result<()> {
    let mut ckpt = Checkpoint::new(&report.library, report.classifier.as_ref(), Some(report.algorithm.name()));
    ckpt.n_demos = Some(data.len());
    ckpt.l_train = Some(l_train);
    ckpt.save(out)?;
    write_history_csv(&report.history, wall_clock, BufWriter::new(File::create(history)?))?;
    if !report.classifier_history.is_empty() {
        let path = history.with_extension("classifier.csv");
        write_history_csv(&report.classifier_history, wall_clock, BufWriter::new(File::create(path)?))?;
    }
    Ok(())
}

pub fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = RunConfig::from_flag(a.config.as_deref())?;
    let t = train_config(&cfg, &a)?;
    let data_path = require(a.data.clone().or(cfg.paths.dataset.clone()), "--data")?;
    let out = require(a.out.clone().or(cfg.paths.checkpoint.clone()), "--out")?;
    let (header, data) = load_dataset(&data_path)?;
    if t.algorithm == Algorithm::GtBc && data.items().iter().any(|i| i.alignment.is_none()) {
        return Err(Error::Data(format!(
            "gt-bc requires ground-truth alignments, but {} has demonstrations without them",
            data_path.display()
        )));
    }
    let report = train(&t, &data)?;
    let history = a.history.clone().unwrap_or_else(|| out.with_extension("history.csv"));
    save_run(&report, &data, header.l, &out, &history, a.wall_clock)?;
    let last = report.history.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "{} epochs={} final_loss={last:.6} skipped={} -> {}",
        t.algorithm,
        report.history.len(),
        report.skipped_trajectories,
        out.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, PolicyLibrary, Option<SubtaskClassifier>)> {
    let ckpt = Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("cannot read checkpoint {}: {io}", path.display())),
        other => other,
    })?;
    let lib = ckpt.library()?;
    let clf = ckpt.classifier()?;
    Ok((ckpt, lib, clf))
}

fn check_compatible(lib: &PolicyLibrary, d_s: usize, d_a: usize, k: usize) -> Result<()> {
    if lib.state_dim() != d_s || lib.action_dim() != d_a || lib.k() != k {
        return Err(Error::Data(format!(
            "checkpoint (d_s={}, d_a={}, K={}) is incompatible with dataset (d_s={d_s}, d_a={d_a}, K={k})",
            lib.state_dim(),
            lib.action_dim(),
            lib.k()
        )));
    }
    Ok(())
}

/// Alignment accuracy with the classifier when there is one, else the library.
fn score_alignment(
    lib: &PolicyLibrary,
    clf: Option<&SubtaskClassifier>,
    heldout: &Dataset,
) -> Result<crate::evaluation::AlignmentScore> {
    match clf {
        Some(c) => alignment_accuracy(Aligner::Classifier(c), heldout),
        None => alignment_accuracy(Aligner::Library(lib), heldout),
    }
}

fn eval_config(cfg: &RunConfig, a: &EvalArgs) -> Result<EvalConfig> {
    let mut e = cfg.eval.clone();
    if let Some(v) = a.l_test {
        e.l_test = v;
    }
    if let Some(v) = a.n_tasks {
        e.n_tasks = v;
    }
    if let Some(v) = a.seed {
        e.rng_seed = v;
    }
    if let Some(v) = a.stop_threshold {
        e.stop_threshold = v;
    }
    if let Some(v) = a.step_cap {
        e.per_subtask_step_cap = v;
    }
    if a.stochastic {
        e.deterministic_actions = false;
    }
    e.validate().map_err(usage)?;
    Ok(e)
}

pub fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = RunConfig::from_flag(a.config.as_deref())?;
    let e = eval_config(&cfg, &a)?;
    let ckpt_path = require(a.checkpoint.clone().or(cfg.paths.checkpoint.clone()), "--checkpoint")?;
    let (ckpt, lib, clf) = load_checkpoint(&ckpt_path)?;
    check_compatible(&lib, cfg.world.state_dim(), 2, cfg.world.n_destinations())?;
    let stats = evaluate_tasks(&lib, &cfg.world, &e).map_err(usage)?;
    let (alignment, n_excluded) = match &a.heldout {
        Some(path) => {
            let (header, data) = load_dataset(path)?;
            check_compatible(&lib, header.d_s, header.d_a, header.k)?;
            let s = score_alignment(&lib, clf.as_ref(), &data)?;
            (s.pct, s.n_excluded)
        }
        None => (None, 0),
    };
    let report = MetricsReport {
        algorithm: ckpt.algorithm.clone().unwrap_or_else(|| "unknown".into()),
        n_demos: ckpt.n_demos.unwrap_or(0),
        l_train: ckpt.l_train.unwrap_or(0),
        l_test: e.l_test,
        task_accuracy: stats.task_accuracy,
        subtask_accuracy: stats.subtask_accuracy,
        alignment_accuracy_pct: alignment,
        n_excluded,
        seed: e.rng_seed,
    };
    let json = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => std::fs::write(p, format!("{json}\n"))?,
        None => println!("{json}"),
    }
    if let Some(p) = &a.csv {
        write_metrics_long_csv(std::slice::from_ref(&report), BufWriter::new(File::create(p)?))?;
    }
    if a.out.is_some() {
        println!(
            "task={:.3} subtask={:.3} alignment={}",
            report.task_accuracy,
            report.subtask_accuracy,
            report.alignment_accuracy_pct.map_or("n/a".into(), |v| format!("{v:.2}%"))
        );
    }
    Ok(())
}

pub fn cmd_align(a: AlignArgs) -> Result<()> {
    let (_, lib, clf) = load_checkpoint(&a.checkpoint)?;
    let (header, data) = load_dataset(&a.data)?;
    check_compatible(&lib, header.d_s, header.d_a, header.k)?;
    let item = data.items().get(a.index).ok_or_else(|| {
        Error::Usage(format!("--index {} out of range for {} demonstrations", a.index, data.len()))
    })?;
    let kind = a.lattice.unwrap_or(if clf.is_some() { LatticeKind::Ctc } else { LatticeKind::Taco });
    let lattice = match (kind, &clf) {
        (LatticeKind::Ctc, Some(c)) => ctc_forward(c, &item.trajectory, &item.sketch)?,
        (LatticeKind::Ctc, None) => return Err(Error::Usage("checkpoint has no classifier for a CTC lattice".into())),
        (LatticeKind::Taco, _) => taco_forward(&lib, &item.trajectory, &item.sketch, &lib.ones_masks())?,
    };
    lattice.write_csv(BufWriter::new(File::create(&a.out)?))?;
    let decoded = decode_argmax(&lattice);
    let ids: Vec<String> = decoded.iter().map(usize::to_string).collect();
    println!("sketch: {:?}", item.sketch.ids());
    println!("log_likelihood: {:.6}", lattice.log_likelihood);
    println!("decoded: {}", ids.join(" "));
    if let Some(truth) = &item.alignment {
        println!("agreement: {:.2}%", agreement_pct(&decoded, truth));
    }
    println!("lattice -> {}", a.out.display());
    Ok(())
}

/// One row of the sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub n_demos: usize,
    pub algorithm: String,
    #[serde(rename = "L_train")]
    pub l_train: usize,
    #[serde(rename = "L_test")]
    pub l_test: usize,
    pub task_accuracy: Option<f64>,
    pub subtask_accuracy: Option<f64>,
    pub alignment_accuracy_pct: Option<f64>,
    pub n_excluded: Option<usize>,
    pub error: String,
}

fn sweep_cell(
    cfg: &RunConfig,
    algo: &str,
    seed: u64,
    train_data: &Dataset,
    heldout: &Dataset,
    epochs: Option<usize>,
    l_train: usize,
    work_dir: Option<&Path>,
) -> Result<MetricsReport> {
    let mut t = cfg.train.clone();
    t.algorithm = algo.parse()?;
    t.rng_seed = seed;
    if let Some(e) = epochs {
        t.epochs = e;
    }
    let report = train(&t, train_data)?;
    let mut e = cfg.eval.clone();
    e.rng_seed = seed;
    let stats = evaluate_tasks(&report.library, &cfg.world, &e)?;
    let score = score_alignment(&report.library, report.classifier.as_ref(), heldout)?;
    let metrics = MetricsReport {
        algorithm: algo.to_string(),
        n_demos: train_data.len(),
        l_train,
        l_test: e.l_test,
        task_accuracy: stats.task_accuracy,
        subtask_accuracy: stats.subtask_accuracy,
        alignment_accuracy_pct: score.pct,
        n_excluded: score.n_excluded,
        seed,
    };
    if let Some(dir) = work_dir {
        let stem = dir.join(format!("{algo}_n{}_s{seed}", train_data.len()));
        save_run(
            &report,
            train_data,
            l_train,
            &stem.with_extension("json"),
            &stem.with_extension("history.csv"),
            false,
        )?;
        std::fs::write(stem.with_extension("metrics.json"), serde_json::to_string_pretty(&metrics)? + "\n")?;
    }
    Ok(metrics)
}

pub fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = RunConfig::from_flag(a.config.as_deref())?;
    if let Some(v) = a.l_test {
        cfg.eval.l_test = v;
    }
    if let Some(v) = a.n_tasks {
        cfg.eval.n_tasks = v;
    }
    cfg.eval.validate().map_err(usage)?;
    for algo in &a.algos {
        algo.parse::<Algorithm>().map_err(usage)?;
    }
    if a.sizes.is_empty() || a.sizes.contains(&0) || a.seeds.is_empty() {
        return Err(Error::Usage("--sizes and --seeds must be non-empty and sizes positive".into()));
    }
    if let Some(dir) = &a.work_dir {
        std::fs::create_dir_all(dir)?;
    }
    let largest = *a.sizes.iter().max().expect("non-empty");
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&a.out)?));
    for &seed in &a.seeds {
        // Smaller training sets are prefixes of the largest one.
        let (h, demos) = generate_dataset(
            &cfg.world,
            &cfg.noise,
            largest,
            a.length,
            rng::derive_seed(seed, "sweep/train-data"),
        )
        .map_err(usage)?;
        let full = to_dataset(&h, &demos)?;
        let (hh, hdemos) = generate_dataset(
            &cfg.world,
            &cfg.noise,
            a.heldout.max(1),
            a.length,
            rng::derive_seed(seed, "sweep/heldout"),
        )
        .map_err(usage)?;
        let heldout = to_dataset(&hh, &hdemos)?;
        for &n in &a.sizes {
            let data = full.take(n);
            for algo in &a.algos {
                let row = match sweep_cell(&cfg, algo, seed, &data, &heldout, a.epochs, a.length, a.work_dir.as_deref()) {
                    Ok(m) => SweepRow {
                        seed,
                        n_demos: n,
                        algorithm: algo.clone(),
                        l_train: a.length,
                        l_test: cfg.eval.l_test,
                        task_accuracy: Some(m.task_accuracy),
                        subtask_accuracy: Some(m.subtask_accuracy),
                        alignment_accuracy_pct: m.alignment_accuracy_pct,
                        n_excluded: Some(m.n_excluded),
                        error: String::new(),
                    },
                    Err(e) => {
                        log::error!("sweep cell seed={seed} n={n} algo={algo} failed: {e}");
                        SweepRow {
                            seed,
                            n_demos: n,
                            algorithm: algo.clone(),
                            l_train: a.length,
                            l_test: cfg.eval.l_test,
                            task_accuracy: None,
                            subtask_accuracy: None,
                            alignment_accuracy_pct: None,
                            n_excluded: None,
                            error: e.to_string(),
                        }
                    }
                };
                println!(
                    "seed={seed} n={n} algo={algo} task={} error={}",
                    row.task_accuracy.map_or("-".into(), |v| format!("{v:.3}")),
                    if row.error.is_empty() { "none" } else { &row.error }
                );
                w.serialize(&row)?;
                w.flush()?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(exit_code(&Error::Usage(String::new())), 1);
        assert_eq!(exit_code(&Error::Data(String::new())), 2);
        assert_eq!(exit_code(&Error::DegenerateLattice { t: 0 }), 3);
    }

    #[test]
    fn help_exits_zero_and_bad_flags_one() {
        assert_eq!(run(["taco", "--help"]), 0);
        assert_eq!(run(["taco", "gen-data", "--bogus"]), 1);
        assert_eq!(run(["taco", "gen-data", "--n", "5", "--length", "0", "--out", "/dev/null"]), 1);
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }
}
