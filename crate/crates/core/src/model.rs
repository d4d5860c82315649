//! The trainable pipeline: a two-layer convolutional feature extractor,
//! a pooled linear classifier, a per-pixel depth head, the supervised
//! losses, and the training loop that ties them to the style bank.
//!
//! The second convolution is deliberately linear (no squashing): feature
//! statistics then carry the input's photometric style, which is what
//! the test-time projection manipulates. Pooling keeps per-channel
//! mean, absolute deviation, and gradient roughness, so class evidence
//! survives restylization (a plain mean would be erased by it).

use crate::bank::{tape_bank, BankError, StyleBasisBank, TapeBank};
use crate::diff::{DiffError, Tape, Tensor, Var};
use crate::dsss::choose_bases;
use crate::io::{self, IoError};
use crate::optim::Adam;
use crate::ttsp::{ShiftMode, SimilarityVariant};
use thiserror::Error;

pub const CKPT_MAGIC: &[u8; 8] = b"TTDGCKPT";
pub const CKPT_VERSION: u16 = 1;

/// Hidden width of the first convolution.
pub const MID_CHANNELS: usize = 8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("label at index {index} is {value}, want 0 or 1")]
    BadLabel { index: usize, value: u8 },
    #[error("{what}: {detail}")]
    ShapeMismatch { what: &'static str, detail: String },
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: u32 },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Input and feature-map dimensions. The backbone halves the spatial
/// extent once, so features are `c × (in_h/2) × (in_w/2)` for even
/// inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelGeometry {
    pub in_h: usize,
    pub in_w: usize,
    /// Feature channels; must equal the bank's C.
    pub c: usize,
}

impl ModelGeometry {
    pub fn feat_h(&self) -> usize {
        (self.in_h + 2 * 1 - 3) / 2 + 1
    }
    pub fn feat_w(&self) -> usize {
        (self.in_w + 2 * 1 - 3) / 2 + 1
    }

    /// (name, tensor shape) of every parameter segment, in flat order.
    pub fn segments(&self) -> [(&'static str, Vec<usize>); 8] {
        let c = self.c;
        [
            ("conv1_w", vec![MID_CHANNELS, 3, 3, 3]),
            ("conv1_b", vec![MID_CHANNELS]),
            ("conv2_w", vec![c, MID_CHANNELS, 3, 3]),
            ("conv2_b", vec![c]),
            ("cls_w", vec![3 * c, 2]),
            ("cls_b", vec![2]),
            ("dep_w", vec![1, c, 1, 1]),
            ("dep_b", vec![1]),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.segments().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Backbone + heads as one flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub geom: ModelGeometry,
    pub params: Vec<f64>,
}

impl Model {
    /// Uniform `±1/√fan_in` for weights, zeros for biases.
    /// Deterministic per seed, independent per segment.
    pub fn init(geom: ModelGeometry, seed: u64) -> Model {
        use rand::Rng;
        let mut params = Vec::with_capacity(geom.n_params());
        for (si, (name, shape)) in geom.segments().iter().enumerate() {
            let len: usize = shape.iter().product();
            if name.ends_with("_b") {
                params.extend(std::iter::repeat(0.0).take(len));
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut rng =
                    crate::rng::derive(seed, crate::rng::Stream::ParamInit, si as u64, 0);
                params.extend((0..len).map(|_| rng.gen_range(-bound..bound)));
            }
        }
        Model { geom, params }
    }
}

/// The model's parameter segments as tape variables.
pub struct TapeModel {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
    pub cls_w: Var,
    pub cls_b: Var,
    pub dep_w: Var,
    pub dep_b: Var,
    segment_order: Vec<Var>,
}

impl TapeModel {
    /// Assemble from already-recorded segment variables, in the order
    /// given by [`ModelGeometry::segments`]. Lets callers differentiate
    /// with respect to individual parameter segments.
    pub fn from_vars(vars: &[Var]) -> TapeModel {
        assert_eq!(vars.len(), 8, "a model has exactly 8 parameter segments");
        TapeModel {
            conv1_w: vars[0],
            conv1_b: vars[1],
            conv2_w: vars[2],
            conv2_b: vars[3],
            cls_w: vars[4],
            cls_b: vars[5],
            dep_w: vars[6],
            dep_b: vars[7],
            segment_order: vars.to_vec(),
        }
    }
}

/// Put every parameter segment on the tape.
pub fn tape_model(tape: &mut Tape, model: &Model) -> TapeModel {
    let mut vars = Vec::with_capacity(8);
    let mut off = 0;
    for (_, shape) in model.geom.segments() {
        let len: usize = shape.iter().product();
        let t = Tensor::new(&shape, model.params[off..off + len].to_vec());
        vars.push(tape.input(&t));
        off += len;
    }
    TapeModel::from_vars(&vars)
}

/// Feature extractor: 3×3 conv (stride 1, pad 1) + tanh, then a linear
/// 3×3 conv (stride 2, pad 1). Input `[M,3,H0,W0]` → `[M,C,H,W]`.
pub fn tape_backbone(tape: &mut Tape, tm: &TapeModel, x: Var) -> Result<Var, DiffError> {
    let h1 = tape.conv2d(x, tm.conv1_w, tm.conv1_b, 1, 1)?;
    let a1 = tape.tanh(h1);
    tape.conv2d(a1, tm.conv2_w, tm.conv2_b, 2, 1)
}

/// Shape-aware pooling: per channel, keep the spatial mean, the mean
/// absolute deviation from it, and the gradient roughness. `[M,C,H,W]`
/// → `[M,3C]`.
pub fn tape_pool(tape: &mut Tape, f: Var) -> Result<Var, DiffError> {
    let shape = tape.shape(f).to_vec();
    let (h, w) = (shape[2], shape[3]);
    let mean = tape.channel_mean(f)?;
    let mean_b = tape.bcast_spatial(mean, h, w)?;
    let centered = tape.sub(f, mean_b)?;
    let absdev_map = tape.abs(centered);
    let absdev = tape.channel_mean(absdev_map)?;
    let rough = tape.channel_roughness(f)?;
    tape.concat_cols(&[mean, absdev, rough])
}

/// Classifier head: pooled `[M,3C]` → logits `[M,2]`.
pub fn tape_logits(tape: &mut Tape, tm: &TapeModel, pooled: Var) -> Result<Var, DiffError> {
    let z = tape.matmul(pooled, tm.cls_w)?;
    tape.add_rowvec(z, tm.cls_b)
}

/// Depth head: 1×1 conv over features, `[M,C,H,W]` → `[M,1,H,W]`.
pub fn tape_depth(tape: &mut Tape, tm: &TapeModel, f: Var) -> Result<Var, DiffError> {
    tape.conv2d(f, tm.dep_w, tm.dep_b, 1, 0)
}

fn validate_labels(labels: &[u8]) -> Result<(), ModelError> {
    for (index, &value) in labels.iter().enumerate() {
        if value > 1 {
            return Err(ModelError::BadLabel { index, value });
        }
    }
    Ok(())
}

/// Mean cross-entropy of `[M,2]` logits against binary labels.
pub fn classification_loss(logits: &[f64], labels: &[u8]) -> Result<f64, ModelError> {
    validate_labels(labels)?;
    let m = labels.len();
    if logits.len() != 2 * m {
        return Err(ModelError::ShapeMismatch {
            what: "classification_loss",
            detail: format!("{} logits for {} labels", logits.len(), m),
        });
    }
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let (a, b) = (logits[2 * i], logits[2 * i + 1]);
        let mx = a.max(b);
        let lse = mx + ((a - mx).exp() + (b - mx).exp()).ln();
        total += lse - logits[2 * i + l as usize];
    }
    Ok(total / m as f64)
}

/// Tape version of [`classification_loss`].
pub fn tape_classification_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[u8],
) -> Result<Var, ModelError> {
    validate_labels(labels)?;
    let idx: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let lse = tape.logsumexp_rows(logits)?;
    let correct = tape.select_cols(logits, &idx)?;
    let gap = tape.sub(lse, correct)?;
    Ok(tape.mean(gap))
}

/// Mean over the batch of per-pixel-normalized squared error — i.e. the
/// mean squared entry of `pred − label`.
pub fn depth_loss(pred: &[f64], labels: &[f64]) -> Result<f64, ModelError> {
    if pred.len() != labels.len() || pred.is_empty() {
        return Err(ModelError::ShapeMismatch {
            what: "depth_loss",
            detail: format!("{} predictions vs {} labels", pred.len(), labels.len()),
        });
    }
    let total: f64 = pred.iter().zip(labels).map(|(p, l)| (p - l) * (p - l)).sum();
    Ok(total / pred.len() as f64)
}

/// Tape version of [`depth_loss`]; `pred` and `labels` must already
/// share a shape.
pub fn tape_depth_loss(tape: &mut Tape, pred: Var, labels: Var) -> Result<Var, DiffError> {
    let d = tape.sub(pred, labels)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Term weights for the composite objective.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_d: 0.1, lambda_c: 0.4 }
    }
}

/// One training batch. `domain_tags` are bookkeeping only; no loss may
/// read them.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub m: usize,
    /// `M × 3 × H0 × W0`, row-major.
    pub images: Vec<f64>,
    pub cls_labels: Vec<u8>,
    /// `M × H × W`, row-major.
    pub depth_labels: Vec<f64>,
    pub domain_tags: Vec<u32>,
}

/// Everything that shapes a training step besides the data.
#[derive(Clone, Copy, Debug)]
pub struct TrainOptions {
    pub lr: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub variant: SimilarityVariant,
    pub temperature: f64,
    /// How features are restyled before the heads, in training and at
    /// inference alike (test-path parity). `Off` restores the literal
    /// raw-feature wiring.
    pub projection: ShiftMode,
    /// Treat the originals in the content-consistency loss as constants.
    pub detach_content_targets: bool,
    /// When false the bank receives no updates (gradients masked).
    pub train_bank: bool,
    /// Include the style-diversity term.
    pub use_sty: bool,
    /// Include the style-shift simulation and its consistency term.
    pub use_dsss: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            lr: 1e-3,
            epochs: 64,
            batch_size: 16,
            weights: LossWeights::default(),
            variant: SimilarityVariant::SigmaSigma,
            temperature: 1.0,
            projection: ShiftMode::Weighted,
            detach_content_targets: false,
            train_bank: true,
            use_sty: true,
            use_dsss: true,
        }
    }
}

/// Per-term values of one step's objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub cls: f64,
    pub dep: f64,
    pub sty: f64,
    pub con: f64,
}

/// Build the full training objective on a tape. `chosen` carries the
/// pre-drawn per-sample basis indices for the style-shift branch; pass
/// `None` to skip that branch (it then contributes exactly nothing to
/// the graph).
pub fn tape_total_loss(
    tape: &mut Tape,
    tm: &TapeModel,
    tb: &TapeBank,
    x: Var,
    batch: &TrainBatch,
    opts: &TrainOptions,
    chosen: Option<&[usize]>,
) -> Result<(Var, LossTerms), ModelError> {
    let f = tape_backbone(tape, tm, x)?;
    let head_feats =
        crate::ttsp::tape_shift_features(tape, f, tb, opts.projection, opts.variant, opts.temperature)?;

    let pooled = tape_pool(tape, head_feats)?;
    let logits = tape_logits(tape, tm, pooled)?;
    let l_cls = tape_classification_loss(tape, logits, &batch.cls_labels)?;

    let fh = tape.shape(f)[2];
    let fw = tape.shape(f)[3];
    if batch.depth_labels.len() != batch.m * fh * fw {
        return Err(ModelError::ShapeMismatch {
            what: "depth labels",
            detail: format!(
                "{} entries for {}×{}×{} predictions",
                batch.depth_labels.len(),
                batch.m,
                fh,
                fw
            ),
        });
    }
    let depth_pred = tape_depth(tape, tm, head_feats)?;
    let pred_flat = tape.reshape(depth_pred, &[batch.m, fh * fw])?;
    let label_var = tape.input(&Tensor::new(&[batch.m, fh * fw], batch.depth_labels.clone()));
    let l_dep = tape_depth_loss(tape, pred_flat, label_var)?;

    let dep_scaled = tape.scale(l_dep, opts.weights.lambda_d);
    let mut total = tape.add(l_cls, dep_scaled)?;

    let mut terms = LossTerms {
        cls: tape.value(l_cls)[0],
        dep: tape.value(l_dep)[0],
        ..Default::default()
    };

    if opts.use_sty {
        let l_sty = crate::bank::tape_style_diversity_loss(tape, tb)?;
        terms.sty = tape.value(l_sty)[0];
        total = tape.add(total, l_sty)?;
    }

    if let Some(chosen) = chosen {
        let shifted = crate::dsss::tape_reassemble(tape, f, tb, chosen)?;
        let originals = if opts.detach_content_targets {
            let shape = tape.shape(f).to_vec();
            let frozen = Tensor::new(&shape, tape.value(f).to_vec());
            tape.input(&frozen)
        } else {
            f
        };
        let l_con = crate::dsss::tape_content_consistency(tape, shifted, originals)?;
        terms.con = tape.value(l_con)[0];
        let con_scaled = tape.scale(l_con, opts.weights.lambda_c);
        total = tape.add(total, con_scaled)?;
    }

    terms.total = tape.value(total)[0];
    Ok((total, terms))
}

/// Decompose `terms` exactly: `cls + λ_d·dep + sty + λ_c·con`, with the
/// convention that absent terms were stored as 0.
pub fn recompose_total(terms: &LossTerms, w: &LossWeights, used_con: bool) -> f64 {
    let con = if used_con { w.lambda_c * terms.con } else { 0.0 };
    terms.cls + w.lambda_d * terms.dep + terms.sty + con
}

/// Owns the model, the bank, and the optimizer state; advances one
/// batch at a time.
pub struct Trainer {
    pub model: Model,
    pub bank: StyleBasisBank,
    pub adam: Adam,
    pub epoch: u32,
    /// How many times the style-shift simulation actually ran.
    pub dsss_invocations: u64,
    pub opts: TrainOptions,
    pub seed: u64,
}

impl Trainer {
    pub fn new(
        geom: ModelGeometry,
        n_bases: usize,
        seed: u64,
        opts: TrainOptions,
    ) -> Result<Trainer, ModelError> {
        let model = Model::init(geom, seed);
        let bank = StyleBasisBank::init(n_bases, geom.c, seed)?;
        let n_total = model.params.len() + 2 * n_bases * geom.c;
        let adam = Adam::new(n_total, opts.lr);
        Ok(Trainer { model, bank, adam, epoch: 0, dsss_invocations: 0, opts, seed })
    }

    /// Rebuild a trainer from a checkpoint and its bank.
    pub fn resume(
        ckpt: Checkpoint,
        bank: StyleBasisBank,
        seed: u64,
        opts: TrainOptions,
    ) -> Result<Trainer, ModelError> {
        let n_total = ckpt.params.len() + 2 * bank.n * bank.c;
        if ckpt.adam_m.len() != n_total {
            return Err(ModelError::ShapeMismatch {
                what: "resume",
                detail: format!(
                    "optimizer state covers {} values, model+bank have {}",
                    ckpt.adam_m.len(),
                    n_total
                ),
            });
        }
        let mut adam = Adam::new(n_total, opts.lr);
        adam.m = ckpt.adam_m;
        adam.v = ckpt.adam_v;
        adam.t = ckpt.adam_t;
        Ok(Trainer {
            model: Model { geom: ckpt.geom, params: ckpt.params },
            bank,
            adam,
            epoch: ckpt.epoch,
            dsss_invocations: 0,
            opts,
            seed,
        })
    }

    /// One optimization step over one batch. `step_idx` must be unique
    /// within the epoch (it seeds the basis draws).
    pub fn step(&mut self, batch: &TrainBatch, step_idx: u64) -> Result<LossTerms, ModelError> {
        let geom = self.model.geom;
        let mut tape = Tape::new();
        let tm = tape_model(&mut tape, &self.model);
        let tb = tape_bank(&mut tape, &self.bank);
        let x = tape.input(&Tensor::new(
            &[batch.m, 3, geom.in_h, geom.in_w],
            batch.images.clone(),
        ));

        let chosen;
        let chosen_ref = if self.opts.use_dsss && self.opts.weights.lambda_c > 0.0 {
            chosen = choose_bases(
                batch.m,
                self.bank.n,
                crate::rng::fold(self.seed, self.epoch as u64, step_idx),
            );
            self.dsss_invocations += 1;
            Some(chosen.as_slice())
        } else {
            None
        };

        let (total, terms) =
            tape_total_loss(&mut tape, &tm, &tb, x, batch, &self.opts, chosen_ref)?;
        if !terms.total.is_finite() {
            return Err(ModelError::NonFiniteLoss { epoch: self.epoch });
        }
        let grads = tape.backward(total)?;

        let n_model = self.model.params.len();
        let nc = self.bank.n * self.bank.c;
        let mut flat_g = Vec::with_capacity(n_model + 2 * nc);
        for &v in &tm.segment_order {
            flat_g.extend_from_slice(grads.get(v));
        }
        if self.opts.train_bank {
            flat_g.extend_from_slice(grads.get(tb.mu));
            flat_g.extend_from_slice(grads.get(tb.sigma_raw));
        } else {
            flat_g.extend(std::iter::repeat(0.0).take(2 * nc));
        }

        let mut flat_p = Vec::with_capacity(flat_g.len());
        flat_p.extend_from_slice(&self.model.params);
        flat_p.extend_from_slice(&self.bank.mu);
        flat_p.extend_from_slice(&self.bank.sigma_raw);
        self.adam.step(&mut flat_p, &flat_g);
        self.model.params.copy_from_slice(&flat_p[..n_model]);
        self.bank.mu.copy_from_slice(&flat_p[n_model..n_model + nc]);
        self.bank.sigma_raw.copy_from_slice(&flat_p[n_model + nc..]);

        Ok(terms)
    }
}

/// Model parameters plus optimizer state; the bank travels in its own
/// file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub geom: ModelGeometry,
    pub params: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub adam_t: u64,
    pub epoch: u32,
}

pub fn save_checkpoint(path: &std::path::Path, trainer: &Trainer) -> Result<(), ModelError> {
    let geom = trainer.model.geom;
    let mut payload = Vec::new();
    io::push_f64s(&mut payload, &trainer.model.params);
    io::push_f64s(&mut payload, &trainer.adam.m);
    io::push_f64s(&mut payload, &trainer.adam.v);
    let fields = [
        geom.in_h as u32,
        geom.in_w as u32,
        geom.c as u32,
        trainer.model.params.len() as u32,
        trainer.adam.m.len() as u32,
        trainer.epoch,
        (trainer.adam.t & 0xffff_ffff) as u32,
        (trainer.adam.t >> 32) as u32,
    ];
    io::write_container(path, CKPT_MAGIC, CKPT_VERSION, &fields, &payload)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<Checkpoint, ModelError> {
    let (fields, payload) = io::read_container(path, CKPT_MAGIC, CKPT_VERSION)?;
    if fields.len() != 8 {
        return Err(IoError::Corrupt(format!(
            "checkpoint header has {} fields, want 8",
            fields.len()
        ))
        .into());
    }
    let geom = ModelGeometry {
        in_h: fields[0] as usize,
        in_w: fields[1] as usize,
        c: fields[2] as usize,
    };
    let n_model = fields[3] as usize;
    let n_moment = fields[4] as usize;
    if n_model != geom.n_params() {
        return Err(IoError::Corrupt(format!(
            "checkpoint claims {n_model} parameters, geometry implies {}",
            geom.n_params()
        ))
        .into());
    }
    let mut off = 0;
    let params = io::take_f64s(&payload, &mut off, n_model)?;
    let adam_m = io::take_f64s(&payload, &mut off, n_moment)?;
    let adam_v = io::take_f64s(&payload, &mut off, n_moment)?;
    if off != payload.len() {
        return Err(IoError::Corrupt(format!(
            "checkpoint payload has {} trailing bytes",
            payload.len() - off
        ))
        .into());
    }
    Ok(Checkpoint {
        geom,
        params,
        adam_m,
        adam_v,
        adam_t: fields[6] as u64 | ((fields[7] as u64) << 32),
        epoch: fields[5],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::finite_diff_check;
    use rand::Rng;

    fn micro_geom() -> ModelGeometry {
        ModelGeometry { in_h: 4, in_w: 4, c: 6 }
    }

    fn micro_batch(m: usize, geom: ModelGeometry, seed: u64) -> TrainBatch {
        let mut rng = crate::rng::derive(seed, crate::rng::Stream::Content, 77, 0);
        let (fh, fw) = (geom.feat_h(), geom.feat_w());
        TrainBatch {
            m,
            images: (0..m * 3 * geom.in_h * geom.in_w)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
            cls_labels: (0..m).map(|i| (i % 2) as u8).collect(),
            depth_labels: (0..m * fh * fw).map(|_| rng.gen_range(0.0..1.0)).collect(),
            domain_tags: vec![0; m],
        }
    }

    #[test]
    fn parameter_count_is_desk_scale() {
        let geom = ModelGeometry { in_h: 16, in_w: 16, c: 16 };
        assert!(geom.n_params() <= 50_000, "{} params", geom.n_params());
        assert_eq!(geom.feat_h(), 8);
        assert_eq!(geom.feat_w(), 8);
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let geom = micro_geom();
        let a = Model::init(geom, 5);
        let b = Model::init(geom, 5);
        let c = Model::init(geom, 6);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn saturated_correct_logits_cost_nothing() {
        let loss = classification_loss(&[20.0, -20.0], &[0]).unwrap();
        assert!(loss <= 1e-8);
    }

    #[test]
    fn uniform_logits_cost_ln_two() {
        for label in [0u8, 1] {
            let loss = classification_loss(&[0.0, 0.0], &[label]).unwrap();
            assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn classification_matches_per_sample_oracle() {
        let mut rng = crate::rng::derive(3, crate::rng::Stream::Content, 1, 1);
        let m = 8;
        let logits: Vec<f64> = (0..2 * m).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let labels: Vec<u8> = (0..m).map(|_| rng.gen_range(0..2) as u8).collect();
        let got = classification_loss(&logits, &labels).unwrap();
        let mut expect = 0.0;
        for i in 0..m {
            let (a, b) = (logits[2 * i], logits[2 * i + 1]);
            let p = if labels[i] == 0 {
                a.exp() / (a.exp() + b.exp())
            } else {
                b.exp() / (a.exp() + b.exp())
            };
            expect += -p.ln();
        }
        assert!((got - expect / m as f64).abs() < 1e-12);

        let mut tape = Tape::new();
        let lv = tape.input(&Tensor::new(&[m, 2], logits.clone()));
        let tl = tape_classification_loss(&mut tape, lv, &labels).unwrap();
        assert!((tape.value(tl)[0] - got).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_an_error() {
        assert!(matches!(
            classification_loss(&[0.0, 0.0], &[2]),
            Err(ModelError::BadLabel { index: 0, value: 2 })
        ));
    }

    #[test]
    fn depth_loss_examples() {
        let a = vec![0.3, 0.7, 0.1, 0.9];
        assert_eq!(depth_loss(&a, &a).unwrap(), 0.0);
        let ones = vec![1.0; 4];
        let zeros = vec![0.0; 4];
        assert_eq!(depth_loss(&ones, &zeros).unwrap(), 1.0);
        let mut rng = crate::rng::derive(4, crate::rng::Stream::Content, 2, 2);
        let p: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let l: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = depth_loss(&p, &l).unwrap();
        let expect: f64 =
            p.iter().zip(&l).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 24.0;
        assert!((got - expect).abs() < 1e-12);
        assert!(depth_loss(&p, &l[..12]).is_err());
    }

    #[test]
    fn breakdown_sums_to_total() {
        let geom = micro_geom();
        let batch = micro_batch(4, geom, 1);
        let mut trainer = Trainer::new(geom, 3, 9, TrainOptions::default()).unwrap();
        let terms = trainer.step(&batch, 0).unwrap();
        let recomposed = recompose_total(&terms, &trainer.opts.weights, true);
        assert!((terms.total - recomposed).abs() < 1e-12);
        assert!(terms.total.is_finite());
        assert!(terms.cls > 0.0 && terms.sty > 0.0);
    }

    #[test]
    fn zero_weights_leave_cls_plus_sty_floor() {
        let geom = micro_geom();
        let batch = micro_batch(2, geom, 2);
        let mut opts = TrainOptions::default();
        opts.weights = LossWeights { lambda_d: 0.0, lambda_c: 0.0 };
        let mut trainer = Trainer::new(geom, 2, 9, opts).unwrap();
        // freeze an orthogonal bank: disjoint μ supports, near-disjoint
        // effective sigmas (softplus keeps them strictly positive)
        trainer.bank.mu = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        trainer.bank.sigma_raw = vec![
            2.0, -40.0, -40.0, -40.0, -40.0, -40.0, -40.0, 2.0, -40.0, -40.0, -40.0, -40.0,
        ];
        let terms = trainer.step(&batch, 0).unwrap();
        assert_eq!(terms.dep * 0.0, 0.0);
        assert_eq!(terms.con, 0.0, "λ_c = 0 must skip the consistency branch");
        assert!(terms.sty < 1e-12, "orthogonal bank floor, got {}", terms.sty);
        assert!((terms.total - (terms.cls + terms.sty)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_gradient_passes_finite_differences() {
        let geom = micro_geom();
        let batch = micro_batch(2, geom, 3);
        let model = Model::init(geom, 11);
        let bank = StyleBasisBank::init(3, geom.c, 12).unwrap();
        let opts = TrainOptions::default();
        let chosen = choose_bases(2, 3, 99);

        let mut inputs = Vec::new();
        let mut off = 0;
        for (_, shape) in geom.segments() {
            let len: usize = shape.iter().product();
            inputs.push(Tensor::new(&shape, model.params[off..off + len].to_vec()));
            off += len;
        }
        inputs.push(Tensor::new(&[3, geom.c], bank.mu.clone()));
        inputs.push(Tensor::new(&[3, geom.c], bank.sigma_raw.clone()));
        inputs.push(Tensor::new(&[2, 3, 4, 4], batch.images.clone()));

        finite_diff_check(
            |t, v| {
                let tm = TapeModel {
                    conv1_w: v[0],
                    conv1_b: v[1],
                    conv2_w: v[2],
                    conv2_b: v[3],
                    cls_w: v[4],
                    cls_b: v[5],
                    dep_w: v[6],
                    dep_b: v[7],
                    segment_order: v[..8].to_vec(),
                };
                let sigma_eff = t.softplus(v[9]);
                let tb = TapeBank { mu: v[8], sigma_raw: v[9], sigma_eff };
                let (total, _) =
                    tape_total_loss(t, &tm, &tb, v[10], &batch, &opts, Some(&chosen))
                        .map_err(|e| match e {
                            ModelError::Diff(d) => d,
                            other => panic!("unexpected error: {other}"),
                        })?;
                Ok(total)
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
    }

    #[test]
    fn lambda_c_zero_never_invokes_the_shift_path() {
        let geom = micro_geom();
        let batch = micro_batch(4, geom, 4);

        let mut opts_zero = TrainOptions::default();
        opts_zero.weights.lambda_c = 0.0;
        let mut a = Trainer::new(geom, 3, 7, opts_zero).unwrap();

        let mut opts_off = TrainOptions::default();
        opts_off.use_dsss = false;
        let mut b = Trainer::new(geom, 3, 7, opts_off).unwrap();

        for step in 0..4 {
            a.step(&batch, step).unwrap();
            b.step(&batch, step).unwrap();
        }
        assert_eq!(a.dsss_invocations, 0);
        assert_eq!(b.dsss_invocations, 0);
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.bank, b.bank);
        assert_eq!(a.adam, b.adam);
    }

    #[test]
    fn masked_bank_receives_no_updates() {
        let geom = micro_geom();
        let batch = micro_batch(4, geom, 5);
        let mut opts = TrainOptions::default();
        opts.train_bank = false;
        let mut trainer = Trainer::new(geom, 3, 8, opts).unwrap();
        let before = trainer.bank.clone();
        for step in 0..3 {
            trainer.step(&batch, step).unwrap();
        }
        assert_eq!(trainer.bank, before);
        assert_ne!(trainer.model.params, Model::init(geom, 8).params);
    }

    #[test]
    fn checkpoint_round_trips_and_resume_is_bit_exact() {
        let geom = micro_geom();
        let batch = micro_batch(4, geom, 6);
        let dir = tempfile::tempdir().unwrap();
        let ckpt_path = dir.path().join("checkpoint.ttdg");
        let bank_path = dir.path().join("bank.ttdg");

        let opts = TrainOptions::default();
        let mut full = Trainer::new(geom, 3, 13, opts).unwrap();
        let mut half = Trainer::new(geom, 3, 13, opts).unwrap();

        let mut full_logs = Vec::new();
        for epoch in 0..4 {
            full.epoch = epoch;
            full_logs.push(full.step(&batch, 0).unwrap());
        }
        for epoch in 0..2 {
            half.epoch = epoch;
            half.step(&batch, 0).unwrap();
        }
        half.epoch = 2;
        save_checkpoint(&ckpt_path, &half).unwrap();
        half.bank.save(&bank_path).unwrap();

        let ckpt = load_checkpoint(&ckpt_path).unwrap();
        let bank = StyleBasisBank::load(&bank_path).unwrap();
        let mut resumed = Trainer::resume(ckpt, bank, 13, opts).unwrap();
        assert_eq!(resumed.epoch, 2);
        let mut resumed_logs = Vec::new();
        for epoch in 2..4 {
            resumed.epoch = epoch;
            resumed_logs.push(resumed.step(&batch, 0).unwrap());
        }
        assert_eq!(&full_logs[2..], &resumed_logs[..]);
        assert_eq!(full.model.params, resumed.model.params);
        assert_eq!(full.bank, resumed.bank);
        assert_eq!(full.adam, resumed.adam);
    }

    #[test]
    fn raw_wiring_differs_from_projected_wiring() {
        let geom = micro_geom();
        let batch = micro_batch(4, geom, 7);
        let mut raw_opts = TrainOptions::default();
        raw_opts.projection = ShiftMode::Off;
        let mut a = Trainer::new(geom, 3, 21, TrainOptions::default()).unwrap();
        let mut b = Trainer::new(geom, 3, 21, raw_opts).unwrap();
        let ta = a.step(&batch, 0).unwrap();
        let tb = b.step(&batch, 0).unwrap();
        assert!((ta.cls - tb.cls).abs() > 1e-12);
    }
}
