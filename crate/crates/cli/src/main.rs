//! `ttdg` — generate data, train, evaluate, and inspect style-projection
//! models from the command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ttdg_core::bank::{BankError, StyleBasisBank};
use ttdg_core::config::{Config, ConfigError};
use ttdg_core::datagen::{generate_dataset, Dataset, SampleRecord, LABEL_LIVE};
use ttdg_core::harness::{self, ArmSpec, BankSource, HarnessError};
use ttdg_core::metrics::MetricsError;
use ttdg_core::model::{load_checkpoint, save_checkpoint, Model, ModelError, Trainer};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(
    name = "ttdg",
    version,
    about = "Style-projection liveness models on a synthetic multi-domain benchmark",
    long_about = "Generates the benchmark dataset, trains models whose style banks are \
learned alongside the network, and evaluates them on a held-out capture domain. \
Every command writes a config snapshot next to its outputs so a run can be replayed \
exactly. The TTDG_THREADS environment variable caps internal parallelism; this build \
computes on a single thread, so any cap of 1 or more behaves identically."
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize the multi-domain dataset and its manifest
    Generate {
        /// Config file (TOML); defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for dataset.ttdg, manifest.csv, config.snapshot
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and style bank on the retained domains
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset file written by `generate`
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint.ttdg, bank.ttdg, loss_log.csv
        #[arg(long)]
        out: PathBuf,
        /// Run seed for init, shuffling, and basis draws
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Resume from a previous train output directory
        /// (reads its checkpoint.ttdg and bank.ttdg)
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint + bank on the held-out domain
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        /// Output directory for metrics.csv and config.snapshot
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-sample diagnostic: similarities, weights, projected style, logits
    Project {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        /// Sample to project (its sample_id column in the manifest)
        #[arg(long)]
        sample_id: u32,
        /// Output directory for project.txt and config.snapshot
        #[arg(long)]
        out: PathBuf,
    },
    /// Export pooled features before and after the style shift
    ExportFeatures {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        /// Which records to export
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Output directory for features_pre.csv, features_post.csv
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the standard arms across seeds
    RunAblation {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Arms to run
        #[arg(long, value_delimiter = ',', default_values_t = default_arm_names())]
        arms: Vec<String>,
        /// Run seeds
        #[arg(long, value_delimiter = ',', default_values_t = vec![1u64, 2, 3, 4, 5])]
        seeds: Vec<u64>,
        /// Output root; artifacts land under <out>/<arm>/<seed>/
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    /// Records from the retained (training) domains
    Train,
    /// Records from the held-out domain
    Test,
    /// Every record
    All,
}

fn default_arm_names() -> Vec<String> {
    ArmSpec::default_set().into_iter().map(|a| a.name).collect()
}

/// A message plus the exit code it maps to.
struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    fn config(msg: impl Into<String>) -> CliError {
        CliError { code: EXIT_CONFIG, msg: msg.into() }
    }
    fn data(msg: impl Into<String>) -> CliError {
        CliError { code: EXIT_DATA, msg: msg.into() }
    }
}

fn model_error_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Io(_) => EXIT_DATA,
        _ => EXIT_NUMERIC,
    }
}

fn bank_error_code(e: &BankError) -> u8 {
    match e {
        BankError::Io(_) => EXIT_DATA,
        _ => EXIT_NUMERIC,
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> CliError {
        let code = match &e {
            HarnessError::Config(_)
            | HarnessError::UnknownArm(_)
            | HarnessError::PoolTooSmall { .. } => EXIT_CONFIG,
            HarnessError::Data(_) | HarnessError::Io(_) => EXIT_DATA,
            HarnessError::Metrics(MetricsError::SingleClass { .. }) => EXIT_DATA,
            HarnessError::Metrics(_) => EXIT_NUMERIC,
            HarnessError::Model(m) => model_error_code(m),
            HarnessError::Bank(b) => bank_error_code(b),
            HarnessError::Style(_) | HarnessError::Projection(_) | HarnessError::Diff(_) => {
                EXIT_NUMERIC
            }
        };
        CliError { code, msg: e.to_string() }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> CliError {
        CliError::config(e.to_string())
    }
}

impl From<ttdg_core::datagen::DatagenError> for CliError {
    fn from(e: ttdg_core::datagen::DatagenError) -> CliError {
        CliError::data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> CliError {
        CliError { code: model_error_code(&e), msg: e.to_string() }
    }
}

impl From<BankError> for CliError {
    fn from(e: BankError) -> CliError {
        CliError { code: bank_error_code(&e), msg: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::data(format!("i/o: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = thread_cap() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

/// Parse and validate `TTDG_THREADS`. The pipeline is single-threaded,
/// so every cap ≥ 1 is honored as-is.
fn thread_cap() -> Result<usize, String> {
    match std::env::var("TTDG_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(format!("TTDG_THREADS: {e}")),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(format!("TTDG_THREADS must be a positive integer, got `{s}`")),
        },
    }
}

/// Keep the classified exit code but lead the message with the path.
fn with_path<T, E: Into<CliError>>(r: Result<T, E>, path: &Path) -> Result<T, CliError> {
    r.map_err(|e| {
        let c: CliError = e.into();
        CliError { code: c.code, msg: format!("{}: {}", path.display(), c.msg) }
    })
}

fn load_config(path: &Option<PathBuf>) -> Result<Config, CliError> {
    let cfg = match path {
        Some(p) => with_path(Config::load(p), p)?,
        None => Config::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    with_path(Dataset::load(path), path)
}

/// The dataset a command reads must be the one its config describes;
/// otherwise the snapshot written next to the outputs could not replay
/// the run.
fn check_dataset(cfg: &Config, ds: &Dataset) -> Result<(), CliError> {
    let want = cfg.image_geometry();
    if ds.geometry != want {
        return Err(CliError::config(format!(
            "dataset geometry {}×{} (depth {}×{}) does not match config {}×{} (depth {}×{})",
            ds.geometry.h0,
            ds.geometry.w0,
            ds.geometry.dh,
            ds.geometry.dw,
            want.h0,
            want.w0,
            want.dh,
            want.dw,
        )));
    }
    let names: Vec<&str> = cfg.data.domains.iter().map(|d| d.id.as_str()).collect();
    let have: Vec<&str> = ds.domains.iter().map(|s| s.as_str()).collect();
    if names != have {
        return Err(CliError::config(format!(
            "dataset domains {have:?} do not match config domains {names:?}"
        )));
    }
    Ok(())
}

/// Load model + bank and check they fit the config's geometry.
fn load_artifacts(
    cfg: &Config,
    checkpoint: &Path,
    bank: &Path,
) -> Result<(Model, StyleBasisBank), CliError> {
    let ckpt = with_path(load_checkpoint(checkpoint), checkpoint)?;
    let bank = with_path(StyleBasisBank::load(bank), bank)?;
    if ckpt.geom != cfg.model_geometry() {
        return Err(CliError::config(format!(
            "checkpoint geometry {}×{}×{} does not match config {}×{}×{}",
            ckpt.geom.in_h,
            ckpt.geom.in_w,
            ckpt.geom.c,
            cfg.model_geometry().in_h,
            cfg.model_geometry().in_w,
            cfg.model_geometry().c,
        )));
    }
    if bank.c != cfg.net.channels || bank.n != cfg.net.n_bases {
        return Err(CliError::config(format!(
            "bank is {}×{} but config wants {}×{}",
            bank.n, bank.c, cfg.net.n_bases, cfg.net.channels
        )));
    }
    Ok((Model { geom: ckpt.geom, params: ckpt.params }, bank))
}

fn finite(t: &ttdg_core::model::LossTerms) -> bool {
    t.total.is_finite()
        && t.cls.is_finite()
        && t.dep.is_finite()
        && t.sty.is_finite()
        && t.con.is_finite()
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Cmd::Generate { config, out } => cmd_generate(&config, &out),
        Cmd::Train { config, data, out, seed, resume } => {
            cmd_train(&config, &data, &out, seed, resume.as_deref())
        }
        Cmd::Eval { config, data, checkpoint, bank, out } => {
            cmd_eval(&config, &data, &checkpoint, &bank, &out)
        }
        Cmd::Project { config, data, checkpoint, bank, sample_id, out } => {
            cmd_project(&config, &data, &checkpoint, &bank, sample_id, &out)
        }
        Cmd::ExportFeatures { config, data, checkpoint, bank, split, out } => {
            cmd_export(&config, &data, &checkpoint, &bank, split, &out)
        }
        Cmd::RunAblation { config, arms, seeds, out } => {
            cmd_run_ablation(&config, &arms, &seeds, &out)
        }
    }
}

fn cmd_generate(config: &Option<PathBuf>, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let geom = cfg.image_geometry();
    let ds = generate_dataset(&cfg.data.domains, cfg.data.n_per_class, cfg.data.seed, &geom)?;
    std::fs::create_dir_all(out)?;
    ds.save(&out.join("dataset.ttdg"))?;
    harness::write_atomic(&out.join("manifest.csv"), ds.manifest_csv().as_bytes())?;
    cfg.write_snapshot(out)?;
    println!(
        "wrote {} records across {} domains to {}",
        ds.records.len(),
        ds.domains.len(),
        out.join("dataset.ttdg").display()
    );
    Ok(())
}

fn cmd_train(
    config: &Option<PathBuf>,
    data: &Path,
    out: &Path,
    seed: u64,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let ds = load_dataset(data)?;
    check_dataset(&cfg, &ds)?;
    let geom = cfg.image_geometry();
    let held = ds.domain_ord(&cfg.data.held_out)?;
    let (train_recs, _) = ds.partition(held);

    let opts = cfg.train_options();
    let mut trainer = match resume {
        Some(dir) => harness::resume_trainer(
            &dir.join("checkpoint.ttdg"),
            &dir.join("bank.ttdg"),
            seed,
            opts,
        )?,
        None => Trainer::new(cfg.model_geometry(), cfg.net.n_bases, seed, opts)?,
    };
    let start_epoch = trainer.epoch;
    let log = harness::train_epochs(&mut trainer, &train_recs, &geom, BankSource::Learned)?;
    if let Some(bad) = log.iter().position(|t| !finite(t)) {
        return Err(CliError {
            code: EXIT_NUMERIC,
            msg: format!("loss became non-finite at epoch {}", start_epoch as usize + bad),
        });
    }

    std::fs::create_dir_all(out)?;
    save_checkpoint(&out.join("checkpoint.ttdg"), &trainer)?;
    trainer.bank.save(&out.join("bank.ttdg"))?;
    harness::write_atomic(&out.join("loss_log.csv"), harness::loss_log_csv(&log).as_bytes())?;
    cfg.write_snapshot(out)?;

    match log.last() {
        Some(t) => println!(
            "trained epochs {}..{} on {} records; final mean loss total={:.6} \
             (cls={:.6} dep={:.6} sty={:.6} con={:.6}), style-shift draws: {}",
            start_epoch,
            trainer.epoch,
            train_recs.len(),
            t.total,
            t.cls,
            t.dep,
            t.sty,
            t.con,
            trainer.dsss_invocations,
        ),
        None => println!("checkpoint already at epoch {}; nothing to train", trainer.epoch),
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

/// `metric,value` rows for an evaluation-only run.
fn eval_report_csv(
    auc: f64,
    eer: &ttdg_core::metrics::EerPoint,
    hter: f64,
    n_live: usize,
    n_spoof: usize,
) -> String {
    let mut s = String::from("metric,value\n");
    s.push_str(&format!("auc,{auc}\n"));
    s.push_str(&format!("eer_threshold,{}\n", eer.threshold));
    s.push_str(&format!("far,{}\n", eer.far));
    s.push_str(&format!("frr,{}\n", eer.frr));
    s.push_str(&format!("hter,{hter}\n"));
    s.push_str(&format!("n_live,{n_live}\n"));
    s.push_str(&format!("n_spoof,{n_spoof}\n"));
    s
}

fn cmd_eval(
    config: &Option<PathBuf>,
    data: &Path,
    checkpoint: &Path,
    bank: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let ds = load_dataset(data)?;
    check_dataset(&cfg, &ds)?;
    let (model, bank) = load_artifacts(&cfg, checkpoint, bank)?;
    let geom = cfg.image_geometry();
    let held = ds.domain_ord(&cfg.data.held_out)?;
    let (_, test_recs) = ds.partition(held);

    let (auc, eer, hter, n_live, n_spoof) = harness::evaluate(
        &model,
        &bank,
        &test_recs,
        &geom,
        cfg.train.projection,
        cfg.projection.similarity_variant,
        cfg.projection.temperature,
    )?;

    std::fs::create_dir_all(out)?;
    harness::write_atomic(
        &out.join("metrics.csv"),
        eval_report_csv(auc, &eer, hter, n_live, n_spoof).as_bytes(),
    )?;
    cfg.write_snapshot(out)?;

    println!("held-out domain: {} ({} live, {} spoof)", cfg.data.held_out, n_live, n_spoof);
    println!("auc            {auc:.6}");
    println!("eer threshold  {:.6} (far {:.6}, frr {:.6})", eer.threshold, eer.far, eer.frr);
    println!("hter           {hter:.6}");
    Ok(())
}

/// All-channel digest used in the projection printout: length, mean,
/// L2 norm, and the leading entries.
fn digest(name: &str, v: &[f64]) -> String {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let lead: Vec<String> = v.iter().take(4).map(|x| format!("{x:.6}")).collect();
    format!(
        "{name}: C={} mean={mean:.6} l2={norm:.6} head=[{}{}]",
        v.len(),
        lead.join(", "),
        if v.len() > 4 { ", …" } else { "" }
    )
}

fn cmd_project(
    config: &Option<PathBuf>,
    data: &Path,
    checkpoint: &Path,
    bank: &Path,
    sample_id: u32,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let ds = load_dataset(data)?;
    check_dataset(&cfg, &ds)?;
    let (model, bank) = load_artifacts(&cfg, checkpoint, bank)?;
    let record: &SampleRecord = ds
        .records
        .iter()
        .find(|r| r.sample_id == sample_id)
        .ok_or_else(|| CliError::data(format!("no record with sample_id {sample_id}")))?;

    let report = harness::project_one(
        &model,
        &bank,
        &ds,
        record,
        cfg.projection.similarity_variant,
        cfg.projection.temperature,
    )?;

    let mut text = String::new();
    text.push_str(&format!(
        "sample {} (domain {}, class {})\n",
        report.sample_id,
        report.domain,
        if report.cls_label == LABEL_LIVE { "live" } else { "spoof" }
    ));
    text.push_str(&format!("{}\n", digest("mined mu   ", &report.mined.mu)));
    text.push_str(&format!("{}\n", digest("mined sigma", &report.mined.sigma)));
    text.push_str("  n  d_n            w_n\n");
    for (i, (d, w)) in report.d.iter().zip(&report.w).enumerate() {
        text.push_str(&format!("{i:>3}  {d:<13.6}  {w:.6}\n"));
    }
    text.push_str(&format!("sum(w) = {:.6}\n", report.w.iter().sum::<f64>()));
    text.push_str(&format!("{}\n", digest("projected mu   ", &report.projected.mu)));
    text.push_str(&format!("{}\n", digest("projected sigma", &report.projected.sigma)));
    text.push_str(&format!(
        "logits: [{:.6}, {:.6}]  p_live: {:.6}\n",
        report.logits[0], report.logits[1], report.p_live
    ));

    std::fs::create_dir_all(out)?;
    harness::write_atomic(&out.join("project.txt"), text.as_bytes())?;
    cfg.write_snapshot(out)?;
    print!("{text}");
    Ok(())
}

fn cmd_export(
    config: &Option<PathBuf>,
    data: &Path,
    checkpoint: &Path,
    bank: &Path,
    split: Split,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let ds = load_dataset(data)?;
    check_dataset(&cfg, &ds)?;
    let (model, bank) = load_artifacts(&cfg, checkpoint, bank)?;
    let geom = cfg.image_geometry();
    let held = ds.domain_ord(&cfg.data.held_out)?;
    let (train_recs, test_recs) = ds.partition(held);
    let records: Vec<&SampleRecord> = match split {
        Split::Train => train_recs,
        Split::Test => test_recs,
        Split::All => ds.records.iter().collect(),
    };

    let (pre, post) = harness::pooled_features(
        &model,
        &bank,
        &records,
        &geom,
        cfg.train.projection,
        cfg.projection.similarity_variant,
        cfg.projection.temperature,
    )?;
    let width = 3 * cfg.net.channels;

    std::fs::create_dir_all(out)?;
    harness::write_atomic(
        &out.join("features_pre.csv"),
        harness::features_csv(&records, &ds, &pre, width).as_bytes(),
    )?;
    harness::write_atomic(
        &out.join("features_post.csv"),
        harness::features_csv(&records, &ds, &post, width).as_bytes(),
    )?;
    cfg.write_snapshot(out)?;
    println!("wrote {} feature rows ({} columns) to {}", records.len(), width, out.display());
    Ok(())
}

fn cmd_run_ablation(
    config: &Option<PathBuf>,
    arms: &[String],
    seeds: &[u64],
    out: &Path,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    if seeds.is_empty() {
        return Err(CliError::config("need at least one seed"));
    }
    let specs: Vec<ArmSpec> =
        arms.iter().map(|n| ArmSpec::by_name(n)).collect::<Result<_, _>>()?;

    std::fs::create_dir_all(out)?;
    cfg.write_snapshot(out)?;
    let summaries = harness::run_ablation(&cfg, &specs, seeds, Some(out))?;

    println!("arm        mean_hter  std_hter   mean_auc");
    for s in &summaries {
        println!("{:<10} {:<10.4} {:<10.4} {:.4}", s.arm, s.mean_hter, s.std_hter, s.mean_auc);
    }
    println!("artifacts under {}", out.display());
    Ok(())
}
