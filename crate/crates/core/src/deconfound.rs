//! Stage 1: single-modality encoder training with a main risk head, confounder
//! heads and a confusion loss, using separate backward graphs.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::datamodel::{Cohort, Horizon, Modality, Split, N_AGE_BINS, N_HORIZONS};
use crate::encoder::{class_rows, scatter_class_rows, Depth, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::evalkit::auc;
use crate::nn::{bce_with_logits, join, log_softmax_rows, AdamW, AdamWConfig, Linear, Params, Scalar, Tensor};
use crate::rng::{stream_id, stream_rng};

pub const STAGE1_KIND: &str = "stage1";
pub const N_SEX: usize = 2;
const PROB_FLOOR: f64 = 1e-12;

/// Which tap rows the confounder heads read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapMode {
    /// The normalised class token only.
    #[default]
    ClassToken,
    /// Every normalised token (class and patches); losses are averaged over rows.
    Tokens,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate of the confounder heads (pass B1).
    pub conf_lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub tap_mode: TapMode,
    /// Samples per split used for the per-epoch AUC columns of the log (0 disables).
    pub log_eval_samples: usize,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 30,
            batch_size: 32,
            lr: 3e-4,
            conf_lr: 1e-2,
            weight_decay: 0.01,
            alpha: 0.5,
            tap_mode: TapMode::ClassToken,
            log_eval_samples: 256,
            seed: 42,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("stage1: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.conf_lr > 0.0 && self.conf_lr.is_finite()) {
            return bad("lr and conf_lr must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be >= 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Heads<T> {
    pub main: Linear<T>,
    pub sex: Linear<T>,
    pub age: Linear<T>,
}

impl<T: Scalar> Stage1Heads<T> {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, stream_id("stage1-heads"), 0);
        Stage1Heads {
            main: Linear::new(dim, N_HORIZONS, &mut rng),
            sex: Linear::new(dim, N_SEX, &mut rng),
            age: Linear::new(dim, N_AGE_BINS, &mut rng),
        }
    }
}

/// Confounder heads only, as a parameter collection of their own.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfHeads<T> {
    pub sex: Linear<T>,
    pub age: Linear<T>,
}

impl<T: Scalar> Params<T> for Stage1Heads<T> {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.main.named(&join(prefix, "main"), out);
        self.sex.named(&join(prefix, "sex"), out);
        self.age.named(&join(prefix, "age"), out);
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.main.tensors_mut(out);
        self.sex.tensors_mut(out);
        self.age.tensors_mut(out);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Model<T> {
    pub encoder: Encoder<T>,
    pub heads: Stage1Heads<T>,
}

impl<T: Scalar> Params<T> for Stage1Model<T> {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.encoder.named(&join(prefix, "encoder"), out);
        self.heads.named(&join(prefix, "heads"), out);
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.encoder.tensors_mut(out);
        self.heads.tensors_mut(out);
    }
}

impl<T: Scalar> Stage1Model<T> {
    pub fn init(encoder: &EncoderConfig) -> Result<Self> {
        let encoder = Encoder::init(encoder)?;
        let heads = Stage1Heads::new(encoder.dim(), encoder.config.seed);
        Ok(Stage1Model { encoder, heads })
    }

    /// Main-head probabilities `[batch][horizon]`.
    pub fn predict(&self, images: &[&[f32]]) -> Result<Vec<[f64; N_HORIZONS]>> {
        Ok(self.predict_with_pooled(images)?.0)
    }

    /// Main-head probabilities plus the pooled features they were computed from.
    pub fn predict_with_pooled(&self, images: &[&[f32]]) -> Result<(Vec<[f64; N_HORIZONS]>, Vec<Vec<f64>>)> {
        let pass = self.encoder.forward_batch(images, Depth::Full)?;
        let pooled = self.encoder.pooled(&pass);
        let logits = self.heads.main.forward(&pooled, pass.batch);
        let probs =
            logits.chunks(N_HORIZONS).map(|row| std::array::from_fn(|h| crate::nn::sigmoid(row[h].as_f64()))).collect();
        let feats = pooled.chunks(self.encoder.dim()).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect();
        Ok((probs, feats))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1LossBundle {
    pub loss_main: f64,
    pub loss_conf_ce: f64,
    pub loss_confusion: f64,
    pub alpha: f64,
}

/// Instrumented gradient norms: the encoder's gradient during the confounder
/// CE pass and the heads' gradient during the confusion pass. Both must be zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradAudit {
    pub encoder_grad_b1: f64,
    pub conf_heads_grad_b2: f64,
}

/// Mean binary cross-entropy with logits over horizons.
pub fn main_loss(logits: &[f64], y: &[u8]) -> f64 {
    assert_eq!(logits.len(), y.len());
    logits.iter().zip(y).map(|(&z, &t)| bce_with_logits(z, t as f64).0).sum::<f64>() / logits.len() as f64
}

/// Cross-entropy against the uniform distribution, `-(1/C) sum_c log p_c`.
pub fn confusion_loss(probs: &[f64]) -> f64 {
    -probs.iter().map(|p| p.max(PROB_FLOOR).ln()).sum::<f64>() / probs.len() as f64
}

/// Mean BCE over a `[rows, cols]` logit matrix and its gradient.
pub fn bce_rows<T: Scalar>(logits: &[T], labels: &[T]) -> (f64, Vec<T>) {
    let n = T::lit(logits.len() as f64);
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&z, &t)| {
            let (l, g) = bce_with_logits(z, t);
            loss += l.as_f64();
            g / n
        })
        .collect();
    (loss / logits.len() as f64, grad)
}

/// Mean softmax cross-entropy over rows and its gradient w.r.t. the logits.
pub fn softmax_ce_rows<T: Scalar>(logits: &[T], cols: usize, targets: &[usize]) -> (f64, Vec<T>) {
    let rows = targets.len();
    let ls = log_softmax_rows(logits, cols);
    let inv = T::lit(1.0 / rows as f64);
    let mut loss = 0.0;
    let mut grad = vec![T::zero(); logits.len()];
    for (r, &t) in targets.iter().enumerate() {
        loss -= ls[r * cols + t].as_f64();
        for j in 0..cols {
            let p = ls[r * cols + j].exp();
            grad[r * cols + j] = (p - if j == t { T::one() } else { T::zero() }) * inv;
        }
    }
    (loss / rows as f64, grad)
}

/// Mean confusion loss over rows and its gradient w.r.t. the logits. Log
/// probabilities below `ln 1e-12` are clamped and pass no gradient.
pub fn confusion_rows<T: Scalar>(logits: &[T], cols: usize) -> (f64, Vec<T>) {
    let rows = logits.len() / cols;
    let ls = log_softmax_rows(logits, cols);
    let floor = T::lit(PROB_FLOOR.ln());
    let scale = T::lit(1.0 / (rows * cols) as f64);
    let mut loss = 0.0;
    let mut grad = vec![T::zero(); logits.len()];
    for r in 0..rows {
        let row = &ls[r * cols..(r + 1) * cols];
        let mut active = 0usize;
        for &v in row {
            loss -= v.max(floor).as_f64();
            if v > floor {
                active += 1;
            }
        }
        for j in 0..cols {
            let p = row[j].exp();
            let own = if row[j] > floor { T::one() } else { T::zero() };
            grad[r * cols + j] = (T::lit(active as f64) * p - own) * scale;
        }
    }
    (loss / (rows * cols) as f64, grad)
}

/// Labels of one batch.
#[derive(Clone, Debug)]
pub struct BatchLabels {
    pub y: Vec<[u8; N_HORIZONS]>,
    pub sex: Vec<usize>,
    pub age: Vec<usize>,
}

impl BatchLabels {
    fn len(&self) -> usize {
        self.y.len()
    }
}

/// Optimizer states for the three update passes.
#[derive(Clone, Debug)]
pub struct Stage1Optim<T> {
    pub main: AdamW<T>,
    pub conf: AdamW<T>,
    pub confusion: AdamW<T>,
}

impl<T: Scalar> Stage1Optim<T> {
    pub fn new(config: &Stage1Config) -> Self {
        let base = AdamWConfig { weight_decay: config.weight_decay, ..AdamWConfig::with_lr(config.lr) };
        Stage1Optim {
            main: AdamW::new(base),
            conf: AdamW::new(AdamWConfig { lr: config.conf_lr, ..base }),
            confusion: AdamW::new(AdamWConfig { weight_decay: 0.0, ..base }),
        }
    }
}

fn check_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { what: what.into(), diagnostics: format!("value {v}") })
    }
}

fn l2(t: &[&Tensor<impl Scalar>]) -> f64 {
    t.iter().flat_map(|t| t.data.iter()).map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
}

/// Pass A: main BCE updates the encoder and the main head.
pub fn main_step<T: Scalar>(
    model: &mut Stage1Model<T>,
    opt: &mut AdamW<T>,
    images: &[&[f32]],
    labels: &BatchLabels,
) -> Result<f64> {
    let enc = &model.encoder;
    let (batch, seq, d) = (images.len(), enc.config.seq_len(), enc.dim());
    let pass = enc.forward_batch(images, Depth::Full)?;
    let pooled = enc.pooled(&pass);
    let logits = model.heads.main.forward(&pooled, batch);
    let targets: Vec<T> = labels.y.iter().flat_map(|y| y.iter().map(|&v| T::lit(v as f64))).collect();
    let (loss, dlogits) = bce_rows(&logits, &targets);
    check_finite("main loss", loss)?;
    let mut g_enc = enc.zeros_like();
    let mut g_main = model.heads.main.zeros_like();
    let d_pooled = model.heads.main.backward(&pooled, batch, &dlogits, &mut g_main, true).expect("dx");
    enc.backward(&pass, Some(&scatter_class_rows(&d_pooled, batch, seq, d)), None, &mut g_enc);
    let mut params = model.encoder.all_tensors_mut();
    params.extend(model.heads.main.all_tensors_mut());
    let mut grads: Vec<&Tensor<T>> = g_enc.named_tensors().into_iter().map(|(_, t)| t).collect();
    grads.extend(g_main.named_tensors().into_iter().map(|(_, t)| t));
    opt.step_tensors(params, grads);
    Ok(loss)
}

fn tap_features<T: Scalar>(
    model: &Stage1Model<T>,
    images: &[&[f32]],
    mode: TapMode,
) -> Result<(crate::encoder::EncoderPass<T>, Vec<T>, usize)> {
    let enc = &model.encoder;
    let pass = enc.forward_batch(images, Depth::Tap)?;
    let (batch, seq, d) = (pass.batch, enc.config.seq_len(), enc.dim());
    Ok(match mode {
        TapMode::ClassToken => {
            let f = class_rows(pass.tap_sequence(), batch, seq, d);
            (pass, f, 1)
        }
        TapMode::Tokens => {
            let f = pass.tap_sequence().to_vec();
            (pass, f, seq)
        }
    })
}

fn repeat_targets(t: &[usize], per: usize) -> Vec<usize> {
    t.iter().flat_map(|&v| std::iter::repeat(v).take(per)).collect()
}

/// One dual-graph step: pass A (main), pass B1 (confounder CE on the heads
/// only) and, when `alpha > 0`, pass B2 (weighted confusion on the encoder only).
pub fn stage1_step<T: Scalar>(
    model: &mut Stage1Model<T>,
    opt: &mut Stage1Optim<T>,
    images: &[&[f32]],
    labels: &BatchLabels,
    alpha: f64,
    mode: TapMode,
) -> Result<(Stage1LossBundle, GradAudit)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} images, nonempty", labels.len()),
            got: format!("{} images", images.len()),
        });
    }
    let loss_main = main_step(model, &mut opt.main, images, labels)?;

    // B1
    let (pass, feats, per) = tap_features(model, images, mode)?;
    let rows = pass.batch * per;
    let (sex_t, age_t) = (repeat_targets(&labels.sex, per), repeat_targets(&labels.age, per));
    let sex_logits = model.heads.sex.forward(&feats, rows);
    let age_logits = model.heads.age.forward(&feats, rows);
    let (l_sex, d_sex) = softmax_ce_rows(&sex_logits, N_SEX, &sex_t);
    let (l_age, d_age) = softmax_ce_rows(&age_logits, N_AGE_BINS, &age_t);
    let loss_conf_ce = l_sex + l_age;
    check_finite("confounder loss", loss_conf_ce)?;
    let g_enc_b1 = model.encoder.zeros_like();
    let mut g_conf = ConfHeads { sex: model.heads.sex.zeros_like(), age: model.heads.age.zeros_like() };
    model.heads.sex.backward(&feats, rows, &d_sex, &mut g_conf.sex, false);
    model.heads.age.backward(&feats, rows, &d_age, &mut g_conf.age, false);
    let encoder_grad_b1 = l2(&g_enc_b1.named_tensors().into_iter().map(|(_, t)| t).collect::<Vec<_>>());
    {
        let mut params = model.heads.sex.all_tensors_mut();
        params.extend(model.heads.age.all_tensors_mut());
        let mut grads: Vec<&Tensor<T>> = g_conf.sex.named_tensors().into_iter().map(|(_, t)| t).collect();
        grads.extend(g_conf.age.named_tensors().into_iter().map(|(_, t)| t));
        opt.conf.step_tensors(params, grads);
    }

    // B2
    let sex_logits = model.heads.sex.forward(&feats, rows);
    let age_logits = model.heads.age.forward(&feats, rows);
    let (c_sex, dc_sex) = confusion_rows(&sex_logits, N_SEX);
    let (c_age, dc_age) = confusion_rows(&age_logits, N_AGE_BINS);
    let loss_confusion = c_sex + c_age;
    check_finite("confusion loss", loss_confusion)?;
    let mut audit = GradAudit { encoder_grad_b1, conf_heads_grad_b2: 0.0 };
    if alpha > 0.0 {
        let a = T::lit(alpha);
        let g_heads_b2 = ConfHeads { sex: model.heads.sex.zeros_like(), age: model.heads.age.zeros_like() };
        let scaled = |g: Vec<T>| g.into_iter().map(|v| v * a).collect::<Vec<T>>();
        let mut d_feats = model.heads.sex.backward_input(&scaled(dc_sex), rows);
        let d_age = model.heads.age.backward_input(&scaled(dc_age), rows);
        d_feats.iter_mut().zip(&d_age).for_each(|(x, &y)| *x += y);
        let enc = &model.encoder;
        let (seq, d) = (enc.config.seq_len(), enc.dim());
        let d_tap = match mode {
            TapMode::ClassToken => scatter_class_rows(&d_feats, pass.batch, seq, d),
            TapMode::Tokens => d_feats,
        };
        let mut g_enc = enc.zeros_like();
        enc.backward(&pass, None, Some(&d_tap), &mut g_enc);
        let mut hg: Vec<&Tensor<T>> = g_heads_b2.sex.named_tensors().into_iter().map(|(_, t)| t).collect();
        hg.extend(g_heads_b2.age.named_tensors().into_iter().map(|(_, t)| t));
        audit.conf_heads_grad_b2 = l2(&hg);
        opt.confusion.step(&mut model.encoder, &g_enc);
    }
    Ok((Stage1LossBundle { loss_main, loss_conf_ce, loss_confusion, alpha }, audit))
}

impl<T: Scalar> Params<T> for ConfHeads<T> {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.sex.named(&join(prefix, "sex"), out);
        self.age.named(&join(prefix, "age"), out);
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.sex.tensors_mut(out);
        self.age.tensors_mut(out);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1EpochLog {
    pub epoch: usize,
    pub loss_main: f64,
    pub loss_conf_ce: f64,
    pub loss_confusion: f64,
    pub holdout_auc_1yr: Option<f64>,
    pub shift_auc_1yr: Option<f64>,
}

pub const STAGE1_LOG_HEADER: &str = "epoch,loss_main,loss_conf_ce,loss_confusion,holdout_auc_1yr,shift_auc_1yr";

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn stage1_log_csv(rows: &[Stage1EpochLog]) -> String {
    let mut out = format!("{STAGE1_LOG_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{},{}\n",
            r.epoch,
            r.loss_main,
            r.loss_conf_ce,
            r.loss_confusion,
            opt_cell(r.holdout_auc_1yr),
            opt_cell(r.shift_auc_1yr)
        ));
    }
    out
}

pub(crate) fn batch_labels(cohort: &Cohort, idx: &[usize]) -> BatchLabels {
    let s = &cohort.manifest.samples;
    BatchLabels {
        y: idx.iter().map(|&i| s[i].y).collect(),
        sex: idx.iter().map(|&i| s[i].c.sex as usize).collect(),
        age: idx.iter().map(|&i| s[i].c.age_bin()).collect(),
    }
}

/// Main-head 1yr AUC on the first `n` samples of a split; `None` when
/// undefined or disabled.
fn split_auc(
    model: &Stage1Model<f32>,
    cohort: &Cohort,
    modality: Modality,
    split: Split,
    n: usize,
) -> Result<Option<f64>> {
    if n == 0 {
        return Ok(None);
    }
    let idx: Vec<usize> = cohort.indices(split).into_iter().take(n).collect();
    if idx.is_empty() {
        return Ok(None);
    }
    let mut scores = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(64) {
        let imgs: Vec<&[f32]> = chunk.iter().map(|&i| cohort.image(i, modality)).collect();
        scores.extend(model.predict(&imgs)?.into_iter().map(|p| p[Horizon::Y1.index()]));
    }
    let labels: Vec<u8> = idx.iter().map(|&i| cohort.manifest.samples[i].y[Horizon::Y1.index()]).collect();
    Ok(auc(&scores, &labels).ok())
}

pub struct Stage1Outcome {
    pub model: Stage1Model<f32>,
    pub log: Vec<Stage1EpochLog>,
}

/// Trains one modality's encoder from its initialisation. `progress` is
/// called after every epoch.
pub fn train_stage1(
    cohort: &Cohort,
    modality: Modality,
    encoder: &EncoderConfig,
    config: &Stage1Config,
    mut progress: impl FnMut(&Stage1EpochLog),
) -> Result<Stage1Outcome> {
    config.validate()?;
    if encoder.image_side != cohort.image_side() {
        return Err(Error::InvalidConfig(format!(
            "encoder image_side {} does not match cohort image side {}",
            encoder.image_side,
            cohort.image_side()
        )));
    }
    let train = cohort.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::InvalidConfig("cohort has no train split".into()));
    }
    let mut model = Stage1Model::<f32>::init(encoder)?;
    let mut opt = Stage1Optim::new(config);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order = train.clone();
        order.shuffle(&mut stream_rng(config.seed, stream_id("stage1-shuffle"), epoch as u64));
        let mut sums = [0.0f64; 3];
        let mut n = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let imgs: Vec<&[f32]> = chunk.iter().map(|&i| cohort.image(i, modality)).collect();
            let labels = batch_labels(cohort, chunk);
            let (b, _) = stage1_step(&mut model, &mut opt, &imgs, &labels, config.alpha, config.tap_mode)?;
            let w = chunk.len() as f64;
            sums[0] += b.loss_main * w;
            sums[1] += b.loss_conf_ce * w;
            sums[2] += b.loss_confusion * w;
            n += chunk.len();
        }
        let row = Stage1EpochLog {
            epoch: epoch + 1,
            loss_main: sums[0] / n as f64,
            loss_conf_ce: sums[1] / n as f64,
            loss_confusion: sums[2] / n as f64,
            holdout_auc_1yr: split_auc(&model, cohort, modality, Split::Holdout, config.log_eval_samples)?,
            shift_auc_1yr: split_auc(&model, cohort, modality, Split::Shift, config.log_eval_samples)?,
        };
        log::info!(
            "stage1 {modality} alpha={} epoch {}: main {:.4} conf {:.4} confusion {:.4} holdout {:?} shift {:?}",
            config.alpha,
            row.epoch,
            row.loss_main,
            row.loss_conf_ce,
            row.loss_confusion,
            row.holdout_auc_1yr,
            row.shift_auc_1yr
        );
        progress(&row);
        log.push(row);
    }
    Ok(Stage1Outcome { model, log })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1CheckpointConfig {
    pub modality: Modality,
    pub encoder: EncoderConfig,
    pub stage1: Stage1Config,
}

impl Stage1Model<f32> {
    /// Writes the whole stage-1 model plus a standalone encoder checkpoint
    /// next to it (`<stem>.encoder.json`).
    pub fn save(&self, path: &Path, meta: &Stage1CheckpointConfig, config_hash: Option<String>) -> Result<String> {
        let cfg = serde_json::to_value(meta).map_err(|e| Error::json(path, e))?;
        let enc_path = encoder_path(path);
        self.encoder.save(&enc_path, config_hash.clone())?;
        let refs = vec![enc_path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()];
        checkpoint::save(path, STAGE1_KIND, cfg, config_hash, refs, self)?;
        Ok(checkpoint::params_hash(self))
    }

    pub fn load(path: &Path) -> Result<(Self, Stage1CheckpointConfig)> {
        let manifest = checkpoint::read_manifest(path)?;
        let meta: Stage1CheckpointConfig =
            serde_json::from_value(manifest.config.clone()).map_err(|e| Error::json(path, e))?;
        let mut model = Stage1Model::init(&meta.encoder)?;
        checkpoint::load_into(path, STAGE1_KIND, &mut model)?;
        Ok((model, meta))
    }
}

/// Standalone encoder checkpoint written alongside a stage-1 checkpoint.
pub fn encoder_path(stage1_path: &Path) -> std::path::PathBuf {
    let stem = stage1_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    stage1_path.with_file_name(format!("{stem}.encoder.json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{gen_cohort, GeneratorParams};
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn main_loss_examples() {
        assert!(close(main_loss(&[0.0; 4], &[1, 0, 1, 1]), std::f64::consts::LN_2, 1e-12));
        assert!(close(main_loss(&[10.0; 4], &[1; 4]), 4.5399e-5, 1e-8));
        let (z, y) = ([0.3, -1.2, 2.0, 0.1], [1, 0, 0, 1]);
        let perm = [2, 0, 3, 1];
        let zp: Vec<f64> = perm.iter().map(|&i| z[i]).collect();
        let yp: Vec<u8> = perm.iter().map(|&i| y[i]).collect();
        assert!(close(main_loss(&z, &y), main_loss(&zp, &yp), 1e-15));
    }

    #[test]
    fn confusion_loss_examples() {
        assert!(close(confusion_loss(&[0.5, 0.5]), 0.693147, 1e-6));
        assert!(close(confusion_loss(&[1.0 / 3.0; 3]), 1.098612, 1e-6));
        assert!(close(confusion_loss(&[0.9, 0.1]), 1.203973, 1e-6));
        assert!(confusion_loss(&[1.0, 0.0]).is_finite());
    }

    #[test]
    fn confusion_loss_is_minimised_at_uniform() {
        let mut rng = stream_rng(1, 1, 1);
        for c in 2..6 {
            let uniform = vec![1.0 / c as f64; c];
            assert!(close(confusion_loss(&uniform), (c as f64).ln(), 1e-9));
            for _ in 0..200 {
                let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
                assert!(confusion_loss(&p) >= (c as f64).ln() - 1e-12);
            }
        }
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], g: &[f64]) {
        let h = 1e-5;
        for j in 0..x.len() {
            let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
            xp[j] += h;
            xm[j] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-6);
            assert!(rel < 1e-4, "component {j}: fd {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn confusion_and_ce_gradients_match_finite_differences() {
        let logits = [0.3, -1.1, 2.0, 0.4, 0.0, -0.7, 1.5, 0.2];
        let (_, g) = confusion_rows(&logits, 4);
        fd_check(|z| confusion_rows(z, 4).0, &logits, &g);
        let (_, g) = softmax_ce_rows(&logits, 2, &[1, 0, 0, 1]);
        fd_check(|z| softmax_ce_rows(z, 2, &[1, 0, 0, 1]).0, &logits, &g);
        let t = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let (_, g) = bce_rows(&logits, &t);
        fd_check(|z| bce_rows(z, &t).0, &logits, &g);
    }

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            image_side: 16,
            patch_side: 4,
            embed_dim: 16,
            n_heads: 2,
            n_layers: 2,
            tap_layer: 0,
            mlp_ratio: 2,
            seed: 3,
        }
    }

    fn tiny_batch(n: usize) -> (Vec<Vec<f32>>, BatchLabels) {
        let mut rng = stream_rng(8, 8, 8);
        let imgs = (0..n).map(|_| (0..256).map(|_| rng.gen::<f32>()).collect()).collect();
        let labels = BatchLabels {
            y: (0..n).map(|i| [0, (i % 2) as u8, (i % 2) as u8, 1]).collect(),
            sex: (0..n).map(|i| i % 2).collect(),
            age: (0..n).map(|i| i % 4).collect(),
        };
        (imgs, labels)
    }

    #[test]
    fn alpha_zero_equals_plain_main_step_bitwise() {
        let (imgs, labels) = tiny_batch(4);
        let refs: Vec<&[f32]> = imgs.iter().map(|v| v.as_slice()).collect();
        let cfg = Stage1Config { alpha: 0.0, ..Default::default() };
        let mut full = Stage1Model::<f32>::init(&tiny_config()).unwrap();
        let mut plain = full.clone();
        let mut opt_full = Stage1Optim::new(&cfg);
        let mut opt_plain = Stage1Optim::<f32>::new(&cfg);
        for _ in 0..3 {
            stage1_step(&mut full, &mut opt_full, &refs, &labels, 0.0, TapMode::ClassToken).unwrap();
            main_step(&mut plain, &mut opt_plain.main, &refs, &labels).unwrap();
        }
        assert_eq!(full.encoder, plain.encoder);
        assert_eq!(full.heads.main, plain.heads.main);
        assert_eq!(opt_full.confusion.steps(), 0);
    }

    #[test]
    fn gradient_blocking_is_exact() {
        for mode in [TapMode::ClassToken, TapMode::Tokens] {
            let (imgs, labels) = tiny_batch(4);
            let refs: Vec<&[f32]> = imgs.iter().map(|v| v.as_slice()).collect();
            let cfg = Stage1Config::default();
            let mut model = Stage1Model::<f32>::init(&tiny_config()).unwrap();
            let before = model.clone();
            let mut opt = Stage1Optim::new(&cfg);
            let (bundle, audit) = stage1_step(&mut model, &mut opt, &refs, &labels, 0.5, mode).unwrap();
            assert_eq!(audit, GradAudit::default());
            assert_ne!(model.heads.sex, before.heads.sex);
            assert_ne!(model.heads.age, before.heads.age);
            assert!(bundle.loss_main >= 0.0 && bundle.loss_conf_ce >= 0.0 && bundle.loss_confusion >= 0.0);
        }
    }

    /// Pass B1 in isolation: only the confounder heads move.
    #[test]
    fn confounder_ce_pass_leaves_encoder_untouched() {
        let (imgs, labels) = tiny_batch(4);
        let refs: Vec<&[f32]> = imgs.iter().map(|v| v.as_slice()).collect();
        let mut model = Stage1Model::<f32>::init(&tiny_config()).unwrap();
        let before = model.clone();
        let mut opt = Stage1Optim::new(&Stage1Config::default());
        // run with the main pass neutralised by zero lr so only B1 can change anything
        opt.main.config.lr = 0.0;
        opt.main.config.weight_decay = 0.0;
        stage1_step(&mut model, &mut opt, &refs, &labels, 0.0, TapMode::ClassToken).unwrap();
        assert_eq!(model.encoder, before.encoder);
        assert_eq!(model.heads.main, before.heads.main);
        assert_ne!(model.heads.sex, before.heads.sex);
    }

    /// Confusion gradient through heads and encoder tap, f64, central differences.
    #[test]
    fn confusion_gradient_through_encoder_matches_finite_differences() {
        let mut model = Stage1Model::<f64>::init(&tiny_config()).unwrap();
        let mut rng = stream_rng(4, 4, 4);
        for t in model.all_tensors_mut() {
            t.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
        let (imgs, _) = tiny_batch(3);
        let refs: Vec<&[f32]> = imgs.iter().map(|v| v.as_slice()).collect();
        let loss = |m: &Stage1Model<f64>| {
            let (_, f, per) = tap_features(m, &refs, TapMode::Tokens).unwrap();
            let rows = 3 * per;
            confusion_rows(&m.heads.sex.forward(&f, rows), N_SEX).0
                + confusion_rows(&m.heads.age.forward(&f, rows), N_AGE_BINS).0
        };
        let (pass, f, per) = tap_features(&model, &refs, TapMode::Tokens).unwrap();
        let rows = 3 * per;
        let (_, ds) = confusion_rows(&model.heads.sex.forward(&f, rows), N_SEX);
        let (_, da) = confusion_rows(&model.heads.age.forward(&f, rows), N_AGE_BINS);
        let mut d = model.heads.sex.backward_input(&ds, rows);
        d.iter_mut().zip(model.heads.age.backward_input(&da, rows)).for_each(|(x, y)| *x += y);
        let mut g = model.encoder.zeros_like();
        model.encoder.backward(&pass, None, Some(&d), &mut g);
        let grads: Vec<Vec<f64>> = g.named_tensors().into_iter().map(|(_, t)| t.data.clone()).collect();
        let h = 1e-5;
        for (ti, gt) in grads.iter().enumerate() {
            for j in (0..gt.len()).step_by((gt.len() / 3).max(1)) {
                let mut mp = model.clone();
                mp.encoder.all_tensors_mut()[ti].data[j] += h;
                let mut mm = model.clone();
                mm.encoder.all_tensors_mut()[ti].data[j] -= h;
                let fd = (loss(&mp) - loss(&mm)) / (2.0 * h);
                let rel = (fd - gt[j]).abs() / fd.abs().max(gt[j].abs()).max(1e-7);
                assert!(rel < 1e-4, "tensor {ti}[{j}]: fd {fd} vs {}", gt[j]);
            }
        }
    }

    fn tiny_cohort(dir: &Path) -> Cohort {
        let params = GeneratorParams { n_train: 24, n_holdout: 16, n_shift: 16, image_side: 16, ..Default::default() };
        gen_cohort(&params, dir, "tiny", None).unwrap();
        crate::datamodel::load_cohort(dir).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialisation_and_runs_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = tiny_cohort(dir.path());
        let enc = tiny_config();
        let zero = Stage1Config { epochs: 0, ..Default::default() };
        let out = train_stage1(&cohort, Modality::Cxr, &enc, &zero, |_| {}).unwrap();
        assert_eq!(out.model, Stage1Model::init(&enc).unwrap());
        assert!(out.log.is_empty());

        let cfg = Stage1Config { epochs: 2, batch_size: 8, log_eval_samples: 16, ..Default::default() };
        let a = train_stage1(&cohort, Modality::Ecg, &enc, &cfg, |_| {}).unwrap();
        let b = train_stage1(&cohort, Modality::Ecg, &enc, &cfg, |_| {}).unwrap();
        assert_eq!(checkpoint::params_hash(&a.model), checkpoint::params_hash(&b.model));
        assert_eq!(stage1_log_csv(&a.log), stage1_log_csv(&b.log));
        assert!(stage1_log_csv(&a.log).starts_with(STAGE1_LOG_HEADER));

        let path = dir.path().join("ck/stage1.json");
        let meta = Stage1CheckpointConfig { modality: Modality::Ecg, encoder: enc.clone(), stage1: cfg };
        let hash = a.model.save(&path, &meta, Some("h".into())).unwrap();
        let (back, meta_back) = Stage1Model::load(&path).unwrap();
        assert_eq!(checkpoint::params_hash(&back), hash);
        assert_eq!(meta_back, meta);
        assert_eq!(Encoder::load(&encoder_path(&path)).unwrap(), a.model.encoder);
    }
}
