//! Training, evaluation, and the leave-one-domain-out ablation.
//!
//! An **arm** is one point in the ablation grid: how the style bank is
//! obtained (learned end-to-end, re-mined at random from source styles,
//! or re-mined by farthest-point coverage) crossed with how features
//! are shifted on their way to the heads (softmax-weighted projection,
//! hard nearest-basis, or not at all). The shift mode applies in
//! training and at evaluation alike, so each arm evaluates exactly the
//! wiring it trained.
//!
//! Every run is a pure function of `(config, arm, seed)`: data comes
//! from the config's own seed, parameter init / shuffling / basis draws
//! from per-purpose streams of the run seed. Re-running a finished run
//! reproduces its artifacts byte for byte.

use crate::bank::{BankError, StyleBasisBank};
use crate::config::{Config, ConfigError};
use crate::datagen::{
    generate_dataset, Dataset, DatagenError, ImageGeometry, SampleRecord, LABEL_LIVE,
};
use crate::diff::{DiffError, Tape, Tensor};
use crate::metrics::{auc, eer_threshold, EerPoint, MetricsError};
use crate::model::{
    load_checkpoint, save_checkpoint, tape_backbone, tape_logits, tape_model, tape_pool,
    LossTerms, ModelError, Trainer, TrainBatch, TrainOptions,
};
use crate::rng::{derive, Stream};
use crate::style::{mine_style, FeatureMap, StyleError, StyleStats};
use crate::ttsp::{
    project_style, similarity_weights, tape_shift_features, ShiftMode, SimilarityVariant,
    TtspError,
};
use rand::Rng;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Evaluation forward passes run in chunks of this many samples.
const EVAL_CHUNK: usize = 128;
/// Style pool size for the re-mined bank sources.
const MINE_POOL: usize = 256;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DatagenError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Style(#[from] StyleError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Projection(#[from] TtspError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown arm `{0}`; known arms: {names}", names = ArmSpec::known_names().join(", "))]
    UnknownArm(String),
    #[error("style pool has {pool} samples but the bank needs {need} bases")]
    PoolTooSmall { pool: usize, need: usize },
}

/// Where the style bank comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankSource {
    /// Bank rows are parameters, updated by the optimizer.
    Learned,
    /// Re-mined every epoch: a uniform sample of source styles.
    Random,
    /// Re-mined every epoch: farthest-point coverage of source styles
    /// under cosine distance on the mean vectors.
    Farthest,
}

/// One ablation arm.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArmSpec {
    pub name: String,
    pub projection: ShiftMode,
    pub bank_source: BankSource,
    pub train_bank: bool,
    pub use_sty: bool,
    pub use_dsss: bool,
}

impl ArmSpec {
    fn table() -> Vec<ArmSpec> {
        let arm = |name: &str,
                   projection: ShiftMode,
                   bank_source: BankSource,
                   train_bank: bool,
                   diversity: bool| ArmSpec {
            name: name.into(),
            projection,
            bank_source,
            train_bank,
            use_sty: diversity,
            use_dsss: diversity,
        };
        vec![
            // no bank anywhere: the cross-domain lower bound
            arm("baseline", ShiftMode::Off, BankSource::Learned, false, false),
            // learned bank, task gradients only
            arm("no_dsss", ShiftMode::Weighted, BankSource::Learned, true, false),
            // learned bank + diversity + consistency
            arm("full", ShiftMode::Weighted, BankSource::Learned, true, true),
            // as `full`, but hard single-basis shifts
            arm("nearest", ShiftMode::Nearest, BankSource::Learned, true, true),
            // frozen banks re-mined from source styles each epoch
            arm("random_bank", ShiftMode::Weighted, BankSource::Random, false, false),
            arm("fps_bank", ShiftMode::Weighted, BankSource::Farthest, false, false),
        ]
    }

    pub fn known_names() -> Vec<String> {
        Self::table().into_iter().map(|a| a.name).collect()
    }

    pub fn by_name(name: &str) -> Result<ArmSpec, HarnessError> {
        Self::table()
            .into_iter()
            .find(|a| a.name == name)
            .ok_or_else(|| HarnessError::UnknownArm(name.to_string()))
    }

    /// The four arms whose ordering the benchmark asserts.
    pub fn default_set() -> Vec<ArmSpec> {
        ["baseline", "no_dsss", "full", "nearest"]
            .iter()
            .map(|n| Self::by_name(n).expect("built-in arm"))
            .collect()
    }

    /// The config's training options with this arm's wiring applied.
    pub fn train_options(&self, cfg: &Config) -> TrainOptions {
        let mut opts = cfg.train_options();
        opts.projection = self.projection;
        opts.train_bank = self.train_bank;
        opts.use_sty = self.use_sty;
        opts.use_dsss = self.use_dsss;
        opts
    }
}

/// Metrics of one `(arm, seed)` run on its held-out domain.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub arm: String,
    pub seed: u64,
    pub auc: f64,
    pub eer: EerPoint,
    pub hter: f64,
    pub n_live: usize,
    pub n_spoof: usize,
    /// Mean loss terms of the last epoch.
    pub final_loss: LossTerms,
    /// Mean loss terms of every epoch, in order.
    pub loss_log: Vec<LossTerms>,
    pub dsss_invocations: u64,
    pub out_dir: Option<PathBuf>,
}

/// Fisher–Yates order for one epoch, from the run's shuffle stream.
pub fn epoch_order(n: usize, seed: u64, epoch: u32) -> Vec<usize> {
    let mut rng = derive(seed, Stream::Shuffle, epoch as u64, 0);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Pack records into one training batch.
pub fn make_batch(records: &[&SampleRecord], geom: &ImageGeometry) -> TrainBatch {
    let m = records.len();
    let mut images = Vec::with_capacity(m * 3 * geom.h0 * geom.w0);
    let mut depth_labels = Vec::with_capacity(m * geom.dh * geom.dw);
    let mut cls_labels = Vec::with_capacity(m);
    let mut domain_tags = Vec::with_capacity(m);
    for r in records {
        images.extend_from_slice(&r.image);
        depth_labels.extend_from_slice(&r.depth_label);
        cls_labels.push(r.cls_label);
        domain_tags.push(r.domain);
    }
    TrainBatch { m, images, cls_labels, depth_labels, domain_tags }
}

/// Backbone styles of an evenly-spaced pool of records (at most
/// [`MINE_POOL`]), under the trainer's current parameters.
fn pool_styles(
    trainer: &Trainer,
    records: &[&SampleRecord],
    geom: &ImageGeometry,
) -> Result<Vec<StyleStats>, HarnessError> {
    let take = records.len().min(MINE_POOL);
    let picked: Vec<&SampleRecord> =
        (0..take).map(|k| records[k * records.len() / take]).collect();
    let mg = trainer.model.geom;
    let (fh, fw, c) = (mg.feat_h(), mg.feat_w(), mg.c);
    let mut styles = Vec::with_capacity(take);
    for chunk in picked.chunks(EVAL_CHUNK) {
        let batch = make_batch(chunk, geom);
        let mut tape = Tape::new();
        let tm = tape_model(&mut tape, &trainer.model);
        let x = tape.input(&Tensor::new(&[batch.m, 3, mg.in_h, mg.in_w], batch.images));
        let f = tape_backbone(&mut tape, &tm, x)?;
        let vals = tape.value(f);
        for s in 0..batch.m {
            let map = FeatureMap::new(c, fh, fw, vals[s * c * fh * fw..(s + 1) * c * fh * fw].to_vec())?;
            styles.push(mine_style(&map)?);
        }
    }
    Ok(styles)
}

/// Greedy farthest-point selection on mean vectors under cosine
/// distance. Ties resolve to the lowest index.
fn farthest_point_indices(styles: &[StyleStats], n: usize, start: usize) -> Vec<usize> {
    let cos = |a: &[f64], b: &[f64]| crate::bank::cos_guarded(a, b);
    let mut chosen = vec![start];
    let mut min_dist: Vec<f64> =
        styles.iter().map(|s| 1.0 - cos(&s.mu, &styles[start].mu)).collect();
    while chosen.len() < n {
        let mut best = 0;
        for (i, &d) in min_dist.iter().enumerate() {
            if d > min_dist[best] {
                best = i;
            }
        }
        chosen.push(best);
        for (i, s) in styles.iter().enumerate() {
            let d = 1.0 - cos(&s.mu, &styles[best].mu);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
    }
    chosen
}

/// Replace the trainer's bank with styles re-mined from the source
/// pool (the non-learned bank sources).
fn remine_bank(
    trainer: &mut Trainer,
    records: &[&SampleRecord],
    geom: &ImageGeometry,
    source: BankSource,
    epoch: u32,
) -> Result<(), HarnessError> {
    let styles = pool_styles(trainer, records, geom)?;
    let n = trainer.bank.n;
    if styles.len() < n {
        return Err(HarnessError::PoolTooSmall { pool: styles.len(), need: n });
    }
    let mut rng = derive(trainer.seed, Stream::BankInit, 1 + epoch as u64, 1);
    let indices: Vec<usize> = match source {
        BankSource::Learned => return Ok(()),
        BankSource::Random => {
            // partial Fisher–Yates: n distinct indices
            let mut idx: Vec<usize> = (0..styles.len()).collect();
            for i in 0..n {
                let j = rng.gen_range(i..idx.len());
                idx.swap(i, j);
            }
            idx.truncate(n);
            idx
        }
        BankSource::Farthest => {
            let start = rng.gen_range(0..styles.len());
            farthest_point_indices(&styles, n, start)
        }
    };
    let picked: Vec<StyleStats> = indices.into_iter().map(|i| styles[i].clone()).collect();
    trainer.bank = StyleBasisBank::from_styles(&picked)?;
    Ok(())
}

/// Drive a trainer from its current epoch to `opts.epochs`. Shuffling,
/// basis draws, and (for re-mined sources) bank selection are all keyed
/// by the absolute epoch, so a resumed run retraces the original.
pub fn train_epochs(
    trainer: &mut Trainer,
    train_records: &[&SampleRecord],
    geom: &ImageGeometry,
    bank_source: BankSource,
) -> Result<Vec<LossTerms>, HarnessError> {
    let mut log = Vec::with_capacity(trainer.opts.epochs.saturating_sub(trainer.epoch) as usize);
    while trainer.epoch < trainer.opts.epochs {
        if bank_source != BankSource::Learned {
            remine_bank(trainer, train_records, geom, bank_source, trainer.epoch)?;
        }
        let order = epoch_order(train_records.len(), trainer.seed, trainer.epoch);
        let picked: Vec<&SampleRecord> = order.iter().map(|&i| train_records[i]).collect();
        let mut sum = LossTerms::default();
        let mut steps = 0usize;
        for (step, chunk) in picked.chunks(trainer.opts.batch_size).enumerate() {
            let batch = make_batch(chunk, geom);
            let t = trainer.step(&batch, step as u64)?;
            sum.total += t.total;
            sum.cls += t.cls;
            sum.dep += t.dep;
            sum.sty += t.sty;
            sum.con += t.con;
            steps += 1;
        }
        let inv = 1.0 / steps.max(1) as f64;
        log.push(LossTerms {
            total: sum.total * inv,
            cls: sum.cls * inv,
            dep: sum.dep * inv,
            sty: sum.sty * inv,
            con: sum.con * inv,
        });
        trainer.epoch += 1;
    }
    Ok(log)
}

/// Liveness scores (softmax probability of the live class) for a set
/// of records under the given shift mode.
pub fn score_records(
    model: &crate::model::Model,
    bank: &StyleBasisBank,
    records: &[&SampleRecord],
    geom: &ImageGeometry,
    mode: ShiftMode,
    variant: SimilarityVariant,
    temperature: f64,
) -> Result<Vec<f64>, HarnessError> {
    let mg = model.geom;
    let mut scores = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_CHUNK) {
        let batch = make_batch(chunk, geom);
        let mut tape = Tape::new();
        let tm = tape_model(&mut tape, model);
        let tb = crate::bank::tape_bank(&mut tape, bank);
        let x = tape.input(&Tensor::new(&[batch.m, 3, mg.in_h, mg.in_w], batch.images));
        let f = tape_backbone(&mut tape, &tm, x)?;
        let feats = tape_shift_features(&mut tape, f, &tb, mode, variant, temperature)?;
        let pooled = tape_pool(&mut tape, feats)?;
        let logits = tape_logits(&mut tape, &tm, pooled)?;
        let lv = tape.value(logits);
        for s in 0..batch.m {
            let (l0, l1) = (lv[2 * s], lv[2 * s + 1]);
            let m = l0.max(l1);
            let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
            scores.push(e1 / (e0 + e1));
        }
    }
    Ok(scores)
}

/// Pooled head inputs before and after the shift, as two `[M, 3C]`
/// row lists. With `ShiftMode::Off` the two are identical.
pub fn pooled_features(
    model: &crate::model::Model,
    bank: &StyleBasisBank,
    records: &[&SampleRecord],
    geom: &ImageGeometry,
    mode: ShiftMode,
    variant: SimilarityVariant,
    temperature: f64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), HarnessError> {
    let mg = model.geom;
    let width = 3 * mg.c;
    let mut pre = Vec::with_capacity(records.len());
    let mut post = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_CHUNK) {
        let batch = make_batch(chunk, geom);
        let mut tape = Tape::new();
        let tm = tape_model(&mut tape, model);
        let tb = crate::bank::tape_bank(&mut tape, bank);
        let x = tape.input(&Tensor::new(&[batch.m, 3, mg.in_h, mg.in_w], batch.images));
        let f = tape_backbone(&mut tape, &tm, x)?;
        let pooled_pre = tape_pool(&mut tape, f)?;
        let feats = tape_shift_features(&mut tape, f, &tb, mode, variant, temperature)?;
        let pooled_post = tape_pool(&mut tape, feats)?;
        let (vp, vq) = (tape.value(pooled_pre).to_vec(), tape.value(pooled_post));
        for s in 0..batch.m {
            pre.push(vp[s * width..(s + 1) * width].to_vec());
            post.push(vq[s * width..(s + 1) * width].to_vec());
        }
    }
    Ok((pre, post))
}

/// Everything `project` reports for one sample.
#[derive(Clone, Debug)]
pub struct ProjectReport {
    pub sample_id: u32,
    pub domain: String,
    pub cls_label: u8,
    pub mined: StyleStats,
    /// Per-basis similarity scores.
    pub d: Vec<f64>,
    /// Softmax weights (sum to 1).
    pub w: Vec<f64>,
    pub projected: StyleStats,
    pub logits: [f64; 2],
    pub p_live: f64,
}

/// Run one sample through mine → weigh → combine, and score it with
/// the weighted shift in place.
pub fn project_one(
    model: &crate::model::Model,
    bank: &StyleBasisBank,
    dataset: &Dataset,
    record: &SampleRecord,
    variant: SimilarityVariant,
    temperature: f64,
) -> Result<ProjectReport, HarnessError> {
    let mg = model.geom;
    let (fh, fw, c) = (mg.feat_h(), mg.feat_w(), mg.c);
    let mut tape = Tape::new();
    let tm = tape_model(&mut tape, model);
    let tb = crate::bank::tape_bank(&mut tape, bank);
    let x = tape.input(&Tensor::new(&[1, 3, mg.in_h, mg.in_w], record.image.clone()));
    let f = tape_backbone(&mut tape, &tm, x)?;
    let map = FeatureMap::new(c, fh, fw, tape.value(f).to_vec())?;
    let mined = mine_style(&map)?;
    let pw = similarity_weights(&mined, bank, variant, temperature)?;
    let projected = project_style(&pw, bank)?;

    let feats = tape_shift_features(&mut tape, f, &tb, ShiftMode::Weighted, variant, temperature)?;
    let pooled = tape_pool(&mut tape, feats)?;
    let logits_var = tape_logits(&mut tape, &tm, pooled)?;
    let lv = tape.value(logits_var);
    let m = lv[0].max(lv[1]);
    let (e0, e1) = ((lv[0] - m).exp(), (lv[1] - m).exp());
    Ok(ProjectReport {
        sample_id: record.sample_id,
        domain: dataset.domains[record.domain as usize].clone(),
        cls_label: record.cls_label,
        mined,
        d: pw.d,
        w: pw.w,
        projected,
        logits: [lv[0], lv[1]],
        p_live: e1 / (e0 + e1),
    })
}

/// Score records and reduce to held-out metrics.
pub fn evaluate(
    model: &crate::model::Model,
    bank: &StyleBasisBank,
    records: &[&SampleRecord],
    geom: &ImageGeometry,
    mode: ShiftMode,
    variant: SimilarityVariant,
    temperature: f64,
) -> Result<(f64, EerPoint, f64, usize, usize), HarnessError> {
    let scores = score_records(model, bank, records, geom, mode, variant, temperature)?;
    let mut live = Vec::new();
    let mut spoof = Vec::new();
    for (r, s) in records.iter().zip(&scores) {
        if r.cls_label == LABEL_LIVE {
            live.push(*s);
        } else {
            spoof.push(*s);
        }
    }
    let a = auc(&live, &spoof)?;
    let eer = eer_threshold(&live, &spoof)?;
    let hter = 0.5 * (eer.far + eer.frr);
    Ok((a, eer, hter, live.len(), spoof.len()))
}

/// Two-column `metric,value` report for one run. Floats are printed
/// with shortest-round-trip formatting so equal runs give equal bytes.
pub fn metrics_csv(r: &RunResult) -> String {
    let mut s = String::from("metric,value\n");
    let mut push = |k: &str, v: String| {
        s.push_str(k);
        s.push(',');
        s.push_str(&v);
        s.push('\n');
    };
    push("auc", format!("{}", r.auc));
    push("eer_threshold", format!("{}", r.eer.threshold));
    push("far", format!("{}", r.eer.far));
    push("frr", format!("{}", r.eer.frr));
    push("hter", format!("{}", r.hter));
    push("n_live", format!("{}", r.n_live));
    push("n_spoof", format!("{}", r.n_spoof));
    push("final_total_loss", format!("{}", r.final_loss.total));
    push("final_cls_loss", format!("{}", r.final_loss.cls));
    push("final_dep_loss", format!("{}", r.final_loss.dep));
    push("final_sty_loss", format!("{}", r.final_loss.sty));
    push("final_con_loss", format!("{}", r.final_loss.con));
    push("dsss_invocations", format!("{}", r.dsss_invocations));
    s
}

/// One row per record: identity columns plus the pooled feature vector.
pub fn features_csv(
    records: &[&SampleRecord],
    dataset: &Dataset,
    rows: &[Vec<f64>],
    width: usize,
) -> String {
    let mut s = String::from("sample_id,domain,class");
    for j in 0..width {
        s.push_str(&format!(",f{j}"));
    }
    s.push('\n');
    for (r, row) in records.iter().zip(rows) {
        s.push_str(&format!(
            "{},{},{}",
            r.sample_id,
            dataset.domains[r.domain as usize],
            if r.cls_label == LABEL_LIVE { "live" } else { "spoof" }
        ));
        for v in row {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

/// CSV of per-epoch mean loss terms, one row per epoch.
pub fn loss_log_csv(log: &[LossTerms]) -> String {
    let mut s = String::from("epoch,total,cls,dep,sty,con\n");
    for (e, t) in log.iter().enumerate() {
        s.push_str(&format!("{},{},{},{},{},{}\n", e, t.total, t.cls, t.dep, t.sty, t.con));
    }
    s
}

/// Write `bytes` to `path` through a temp file + rename, so partial
/// output never lands under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

/// Train one arm on the config's retained domains, evaluate on its
/// held-out domain, and (optionally) write the run's artifacts into
/// `out_dir`.
pub fn run_arm(
    cfg: &Config,
    arm: &ArmSpec,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<RunResult, HarnessError> {
    cfg.validate()?;
    let geom = cfg.image_geometry();
    let dataset = generate_dataset(&cfg.data.domains, cfg.data.n_per_class, cfg.data.seed, &geom)?;
    let held = dataset.domain_ord(&cfg.data.held_out)?;
    let (train_recs, test_recs) = dataset.partition(held);

    let opts = arm.train_options(cfg);
    let mut trainer = Trainer::new(cfg.model_geometry(), cfg.net.n_bases, seed, opts)?;
    let loss_log = train_epochs(&mut trainer, &train_recs, &geom, arm.bank_source)?;
    let final_loss = loss_log.last().cloned().unwrap_or_default();

    let (auc, eer, hter, n_live, n_spoof) = evaluate(
        &trainer.model,
        &trainer.bank,
        &test_recs,
        &geom,
        arm.projection,
        opts.variant,
        opts.temperature,
    )?;

    let mut result = RunResult {
        arm: arm.name.clone(),
        seed,
        auc,
        eer,
        hter,
        n_live,
        n_spoof,
        final_loss,
        loss_log,
        dsss_invocations: trainer.dsss_invocations,
        out_dir: None,
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&dir.join("checkpoint.ttdg"), &trainer)?;
        trainer.bank.save(&dir.join("bank.ttdg"))?;
        write_atomic(&dir.join("metrics.csv"), metrics_csv(&result).as_bytes())?;
        let (pre, post) = pooled_features(
            &trainer.model,
            &trainer.bank,
            &test_recs,
            &geom,
            arm.projection,
            opts.variant,
            opts.temperature,
        )?;
        let width = 3 * cfg.net.channels;
        write_atomic(
            &dir.join("features_pre.csv"),
            features_csv(&test_recs, &dataset, &pre, width).as_bytes(),
        )?;
        write_atomic(
            &dir.join("features_post.csv"),
            features_csv(&test_recs, &dataset, &post, width).as_bytes(),
        )?;
        cfg.write_snapshot(dir)?;
        result.out_dir = Some(dir.to_path_buf());
    }
    Ok(result)
}

/// Per-arm aggregate over seeds.
#[derive(Clone, Debug)]
pub struct ArmSummary {
    pub arm: String,
    pub runs: Vec<RunResult>,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub mean_hter: f64,
    pub std_hter: f64,
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(arm: &str, runs: Vec<RunResult>) -> ArmSummary {
    let aucs: Vec<f64> = runs.iter().map(|r| r.auc).collect();
    let hters: Vec<f64> = runs.iter().map(|r| r.hter).collect();
    let (mean_auc, std_auc) = mean_std(&aucs);
    let (mean_hter, std_hter) = mean_std(&hters);
    ArmSummary { arm: arm.to_string(), runs, mean_auc, std_auc, mean_hter, std_hter }
}

/// The cross-seed ablation: every arm × every seed, artifacts under
/// `out_root/<arm>/<seed>/`, plus a `summary.csv` at the root.
pub fn run_ablation(
    cfg: &Config,
    arms: &[ArmSpec],
    seeds: &[u64],
    out_root: Option<&Path>,
) -> Result<Vec<ArmSummary>, HarnessError> {
    let mut summaries = Vec::with_capacity(arms.len());
    for arm in arms {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let dir = out_root.map(|r| r.join(&arm.name).join(seed.to_string()));
            runs.push(run_arm(cfg, arm, seed, dir.as_deref())?);
        }
        summaries.push(summarize(&arm.name, runs));
    }
    if let Some(root) = out_root {
        std::fs::create_dir_all(root)?;
        write_atomic(&root.join("summary.csv"), summary_csv(&summaries).as_bytes())?;
    }
    Ok(summaries)
}

/// The ablation's one-table report: per-seed rows then mean/std rows
/// per arm, in the order the arms were run.
pub fn summary_csv(summaries: &[ArmSummary]) -> String {
    let mut s = String::from("arm,seed,auc,hter\n");
    for a in summaries {
        for r in &a.runs {
            s.push_str(&format!("{},{},{},{}\n", a.arm, r.seed, r.auc, r.hter));
        }
        s.push_str(&format!("{},mean,{},{}\n", a.arm, a.mean_auc, a.mean_hter));
        s.push_str(&format!("{},std,{},{}\n", a.arm, a.std_auc, a.std_hter));
    }
    s
}

/// Restore a trainer from a checkpoint + bank pair on disk.
pub fn resume_trainer(
    checkpoint: &Path,
    bank: &Path,
    seed: u64,
    opts: TrainOptions,
) -> Result<Trainer, HarnessError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let bank = StyleBasisBank::load(bank)?;
    Ok(Trainer::resume(ckpt, bank, seed, opts)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A config small enough for test-speed training.
    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.data.n_per_class = 8;
        cfg.net.channels = 6;
        cfg.net.n_bases = 3;
        cfg.train.epochs = 2;
        cfg.train.batch_size = 8;
        cfg
    }

    #[test]
    fn arm_table_resolves_names_and_rejects_unknowns() {
        for name in ArmSpec::known_names() {
            assert_eq!(ArmSpec::by_name(&name).unwrap().name, name);
        }
        assert!(matches!(ArmSpec::by_name("nope"), Err(HarnessError::UnknownArm(_))));
        let defaults: Vec<String> =
            ArmSpec::default_set().iter().map(|a| a.name.clone()).collect();
        assert_eq!(defaults, ["baseline", "no_dsss", "full", "nearest"]);
    }

    #[test]
    fn epoch_order_is_a_permutation_and_varies_by_epoch() {
        let a = epoch_order(100, 7, 0);
        let b = epoch_order(100, 7, 1);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(a, b);
        assert_eq!(a, epoch_order(100, 7, 0));
    }

    #[test]
    fn runs_are_reproducible_and_arms_differ() {
        let cfg = tiny_cfg();
        let full = ArmSpec::by_name("full").unwrap();
        let r1 = run_arm(&cfg, &full, 3, None).unwrap();
        let r2 = run_arm(&cfg, &full, 3, None).unwrap();
        assert_eq!(r1.auc, r2.auc);
        assert_eq!(r1.hter, r2.hter);
        assert_eq!(r1.final_loss, r2.final_loss);

        let base = run_arm(&cfg, &ArmSpec::by_name("baseline").unwrap(), 3, None).unwrap();
        assert_ne!(base.auc, r1.auc);
        assert_eq!(base.dsss_invocations, 0);
        assert!(r1.dsss_invocations > 0);
    }

    #[test]
    fn artifacts_are_byte_identical_across_reruns() {
        let cfg = tiny_cfg();
        let arm = ArmSpec::by_name("no_dsss").unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run_arm(&cfg, &arm, 11, Some(d1.path())).unwrap();
        run_arm(&cfg, &arm, 11, Some(d2.path())).unwrap();
        for name in [
            "metrics.csv",
            "bank.ttdg",
            "checkpoint.ttdg",
            "features_pre.csv",
            "features_post.csv",
            "config.snapshot",
        ] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
            assert!(!a.is_empty());
        }
    }

    #[test]
    fn baseline_features_ignore_the_shift() {
        let cfg = tiny_cfg();
        let arm = ArmSpec::by_name("baseline").unwrap();
        let dir = tempfile::tempdir().unwrap();
        run_arm(&cfg, &arm, 5, Some(dir.path())).unwrap();
        let pre = std::fs::read(dir.path().join("features_pre.csv")).unwrap();
        let post = std::fs::read(dir.path().join("features_post.csv")).unwrap();
        assert_eq!(pre, post);
    }

    #[test]
    fn projected_features_differ_from_raw() {
        let cfg = tiny_cfg();
        let arm = ArmSpec::by_name("full").unwrap();
        let dir = tempfile::tempdir().unwrap();
        run_arm(&cfg, &arm, 5, Some(dir.path())).unwrap();
        let pre = std::fs::read(dir.path().join("features_pre.csv")).unwrap();
        let post = std::fs::read(dir.path().join("features_post.csv")).unwrap();
        assert_ne!(pre, post);
    }

    #[test]
    fn remined_banks_change_across_epochs_and_runs_complete() {
        let cfg = tiny_cfg();
        for name in ["random_bank", "fps_bank"] {
            let arm = ArmSpec::by_name(name).unwrap();
            let r = run_arm(&cfg, &arm, 2, None).unwrap();
            assert_eq!(r.dsss_invocations, 0, "{name} must not simulate shifts");
            assert!(r.auc.is_finite());
        }
    }

    #[test]
    fn farthest_point_spreads_further_than_the_densest_cluster() {
        // ten near-identical styles plus three outliers: FPS from any
        // start must pick up all three outliers
        let mut styles = Vec::new();
        for i in 0..10 {
            let eps = i as f64 * 1e-4;
            styles.push(StyleStats { mu: vec![1.0, eps, 0.0], sigma: vec![1.0, 1.0, 1.0] });
        }
        styles.push(StyleStats { mu: vec![-1.0, 0.1, 0.0], sigma: vec![1.0, 1.0, 1.0] });
        styles.push(StyleStats { mu: vec![0.0, 1.0, 0.0], sigma: vec![1.0, 1.0, 1.0] });
        styles.push(StyleStats { mu: vec![0.0, 0.0, 1.0], sigma: vec![1.0, 1.0, 1.0] });
        let picked = farthest_point_indices(&styles, 4, 0);
        for outlier in [10usize, 11, 12] {
            assert!(picked.contains(&outlier), "picked {picked:?} misses {outlier}");
        }
    }

    #[test]
    fn resume_retraces_the_straight_run_bit_for_bit() {
        let cfg = tiny_cfg();
        let arm = ArmSpec::by_name("full").unwrap();
        let geom = cfg.image_geometry();
        let dataset =
            generate_dataset(&cfg.data.domains, cfg.data.n_per_class, cfg.data.seed, &geom)
                .unwrap();
        let held = dataset.domain_ord(&cfg.data.held_out).unwrap();
        let (train_recs, _) = dataset.partition(held);
        let opts = arm.train_options(&cfg);

        // straight: 2 epochs in one sitting
        let mut straight = Trainer::new(cfg.model_geometry(), cfg.net.n_bases, 9, opts).unwrap();
        train_epochs(&mut straight, &train_recs, &geom, arm.bank_source).unwrap();

        // split: 1 epoch, checkpoint to disk, resume, 1 more
        let mut half = Trainer::new(cfg.model_geometry(), cfg.net.n_bases, 9, opts).unwrap();
        half.opts.epochs = 1;
        train_epochs(&mut half, &train_recs, &geom, arm.bank_source).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&dir.path().join("c.ttdg"), &half).unwrap();
        half.bank.save(&dir.path().join("b.ttdg")).unwrap();
        let mut resumed =
            resume_trainer(&dir.path().join("c.ttdg"), &dir.path().join("b.ttdg"), 9, opts)
                .unwrap();
        assert_eq!(resumed.epoch, 1);
        train_epochs(&mut resumed, &train_recs, &geom, arm.bank_source).unwrap();

        assert_eq!(straight.model.params, resumed.model.params);
        assert_eq!(straight.bank, resumed.bank);
        assert_eq!(straight.adam, resumed.adam);
    }

    #[test]
    fn summary_stats_match_naive_oracle() {
        let values = [0.1, 0.4, 0.25, 0.3, 0.05];
        let (mean, std) = mean_std(&values);
        let naive_mean = values.iter().sum::<f64>() / 5.0;
        let naive_var =
            values.iter().map(|v| (v - naive_mean) * (v - naive_mean)).sum::<f64>() / 4.0;
        assert!((mean - naive_mean).abs() < 1e-15);
        assert!((std - naive_var.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn ablation_writes_summary_with_per_seed_and_aggregate_rows() {
        let cfg = tiny_cfg();
        let arms = vec![ArmSpec::by_name("baseline").unwrap()];
        let root = tempfile::tempdir().unwrap();
        let summaries = run_ablation(&cfg, &arms, &[1, 2], Some(root.path())).unwrap();
        assert_eq!(summaries.len(), 1);
        assert_eq!(summaries[0].runs.len(), 2);
        let text = std::fs::read_to_string(root.path().join("summary.csv")).unwrap();
        let lines: Vec<&str> = text.trim_end().lines().collect();
        assert_eq!(lines[0], "arm,seed,auc,hter");
        assert_eq!(lines.len(), 1 + 2 + 2); // header + 2 seeds + mean + std
        assert!(lines[3].starts_with("baseline,mean,"));
        assert!(lines[4].starts_with("baseline,std,"));
        assert!(root.path().join("baseline/1/metrics.csv").exists());
        assert!(root.path().join("baseline/2/checkpoint.ttdg").exists());

        // aggregate rows agree with a naive recomputation from the
        // per-seed rows
        let s = &summaries[0];
        let hters: Vec<f64> = s.runs.iter().map(|r| r.hter).collect();
        let (m, sd) = mean_std(&hters);
        assert_eq!(m, s.mean_hter);
        assert_eq!(sd, s.std_hter);
    }

    #[test]
    fn project_report_weights_sum_to_one_and_styles_are_combined() {
        let cfg = tiny_cfg();
        let geom = cfg.image_geometry();
        let dataset =
            generate_dataset(&cfg.data.domains, cfg.data.n_per_class, cfg.data.seed, &geom)
                .unwrap();
        let opts = cfg.train_options();
        let trainer = Trainer::new(cfg.model_geometry(), cfg.net.n_bases, 4, opts).unwrap();
        let rec = &dataset.records[5];
        let report = project_one(
            &trainer.model,
            &trainer.bank,
            &dataset,
            rec,
            opts.variant,
            opts.temperature,
        )
        .unwrap();
        assert_eq!(report.d.len(), cfg.net.n_bases);
        assert!((report.w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(report.d.iter().all(|d| (-2.0..=2.0).contains(d)));
        // projected style is inside the convex hull coordinate-wise
        let eff = trainer.bank.effective_sigma();
        for j in 0..cfg.net.channels {
            let col: Vec<f64> =
                (0..cfg.net.n_bases).map(|n| trainer.bank.mu[n * cfg.net.channels + j]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(report.projected.mu[j] >= lo - 1e-12 && report.projected.mu[j] <= hi + 1e-12);
            let cols: Vec<f64> =
                (0..cfg.net.n_bases).map(|n| eff[n * cfg.net.channels + j]).collect();
            let lo = cols.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = cols.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(
                report.projected.sigma[j] >= lo - 1e-12 && report.projected.sigma[j] <= hi + 1e-12
            );
        }
        assert!((0.0..=1.0).contains(&report.p_live));
        assert_eq!(report.domain, dataset.domains[rec.domain as usize]);
    }
}
