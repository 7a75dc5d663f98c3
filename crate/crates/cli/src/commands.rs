use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use moscard_core::checkpoint::{params_hash, read_manifest};
use moscard_core::datamodel::{
    load_cohort, Cohort, CohortManifest, Horizon, Image, Modality, Split, AGE_BIN_LABELS, MANIFEST_FILE, N_HORIZONS,
};
use moscard_core::deconfound::{
    encoder_path, stage1_log_csv, train_stage1, Stage1CheckpointConfig, Stage1Config, Stage1Model,
};
use moscard_core::encoder::{Encoder, FeatureBundle};
use moscard_core::evalkit::{
    horizon_metrics, occlusion_saliency, probe_confounder, subgroup_report, EvalReport, HeadScores, ProbeResult,
    SubgroupRow,
};
use moscard_core::fusion::{
    precompute_features, predict_main, stage2_log_csv, train_stage2, Branch, FusionBatch, FusionCheckpointConfig,
    FusionConfig, FusionModel, MAIN_HEADS,
};
use moscard_core::synthgen::gen_cohort;

use crate::config::{RunConfig, Workdir};
use crate::error::{PipelineError, Result};

const PREDICT_CHUNK: usize = 64;

/// Named model variants produced by the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Stage 1 with alpha = 0.
    Baseline,
    /// Stage 1 with the confusion loss.
    Conf,
    /// Full fusion model.
    Moscard,
    /// Fusion with the causal branches masked out of the loss.
    MoscardNocausal,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Conf, Variant::Moscard, Variant::MoscardNocausal];
    pub const STAGE1: [Variant; 2] = [Variant::Baseline, Variant::Conf];
    pub const FUSION: [Variant; 2] = [Variant::Moscard, Variant::MoscardNocausal];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Conf => "conf",
            Variant::Moscard => "moscard",
            Variant::MoscardNocausal => "moscard-nocausal",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| PipelineError::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serialises");
    text.push('\n');
    write_file(path, text)
}

pub fn read_json_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::MissingInput(format!("malformed {}: {e}", path.display())))
}

fn check_hash(found: Option<&str>, expected: &str, what: &Path, force: bool) -> Result<()> {
    if force || found == Some(expected) {
        return Ok(());
    }
    Err(PipelineError::HashMismatch(format!(
        "{} was produced by config {}, current config is {expected}",
        what.display(),
        found.unwrap_or("<none>")
    )))
}

fn checkpoint_hash_ok(path: &Path, expected: &str, force: bool) -> Result<()> {
    let manifest = read_manifest(path)?;
    check_hash(manifest.config_hash.as_deref(), expected, path, force)
}

/// Loads the workdir cohort, refusing one generated from another config.
pub fn load_cohort_checked(cfg: &RunConfig, wd: &Workdir, force: bool) -> Result<Cohort> {
    let dir = wd.cohort();
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(PipelineError::MissingInput(format!("no cohort at {}; run `gen` first", dir.display())));
    }
    let cohort = load_cohort(&dir)?;
    check_hash(cohort.manifest.config_hash.as_deref(), &cfg.hash(), &dir, force)?;
    Ok(cohort)
}

/// Generates the cohort. Overwriting a cohort made from another config needs `force`.
pub fn cmd_gen(cfg: &RunConfig, wd: &Workdir, force: bool) -> Result<CohortManifest> {
    cfg.validate()?;
    let dir = wd.cohort();
    let hash = cfg.hash();
    let existing = dir.join(MANIFEST_FILE);
    if existing.exists() {
        let m: CohortManifest = read_json_file(&existing)?;
        check_hash(m.config_hash.as_deref(), &hash, &dir, force)?;
    }
    let manifest = gen_cohort(&cfg.generator, &dir, "synthetic", Some(hash))?;
    log::info!("cohort written to {} ({} samples)", dir.display(), manifest.len());
    Ok(manifest)
}

/// Stage 1 for the requested modalities: trains `baseline` (alpha 0) and `conf`.
/// Returns `(variant, modality, parameter hash)` per checkpoint.
pub fn cmd_train_stage1(
    cfg: &RunConfig,
    wd: &Workdir,
    modality: Option<Modality>,
    force: bool,
) -> Result<Vec<(Variant, Modality, String)>> {
    let cohort = load_cohort_checked(cfg, wd, force)?;
    let hash = cfg.hash();
    let modalities: Vec<Modality> = modality.map_or(Modality::ALL.to_vec(), |m| vec![m]);
    let mut out = Vec::new();
    for m in modalities {
        for v in Variant::STAGE1 {
            let stage1 = Stage1Config {
                alpha: if v == Variant::Baseline { 0.0 } else { cfg.stage1.alpha },
                ..cfg.stage1.clone()
            };
            log::info!("stage 1: {v} {m}");
            let trained = train_stage1(&cohort, m, cfg.encoder.get(m), &stage1, |_| {})?;
            let meta = Stage1CheckpointConfig { modality: m, encoder: cfg.encoder.get(m).clone(), stage1 };
            let ph = trained.model.save(&wd.stage1_checkpoint(v.name(), m), &meta, Some(hash.clone()))?;
            write_file(&wd.logs().join(format!("stage1-{v}-{m}.csv")), stage1_log_csv(&trained.log))?;
            out.push((v, m, ph));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeRecord {
    pub variant: Variant,
    pub before: [String; 2],
    pub after: [String; 2],
    pub identical: bool,
}

fn conf_encoder_paths(wd: &Workdir) -> [PathBuf; 2] {
    Modality::ALL.map(|m| encoder_path(&wd.stage1_checkpoint(Variant::Conf.name(), m)))
}

/// Stage 2 on the frozen `conf` encoders: trains `moscard` and `moscard-nocausal`.
pub fn cmd_train_stage2(cfg: &RunConfig, wd: &Workdir, force: bool) -> Result<Vec<FreezeRecord>> {
    let paths = conf_encoder_paths(wd);
    for p in &paths {
        if !p.exists() {
            return Err(PipelineError::MissingCheckpoint(p.clone()));
        }
    }
    let cohort = load_cohort_checked(cfg, wd, force)?;
    let hash = cfg.hash();
    for p in &paths {
        checkpoint_hash_ok(p, &hash, force)?;
    }
    let cxr = Encoder::load(&paths[0])?;
    let ecg = Encoder::load(&paths[1])?;
    let refs: Vec<PathBuf> =
        paths.iter().map(|p| PathBuf::from(p.file_name().expect("checkpoint file name"))).collect();
    let n_causal = cohort.manifest.samples.first().map_or(0, |s| s.a.len());
    let mut records = Vec::new();
    for v in Variant::FUSION {
        let fusion = FusionConfig { mask_causal: v == Variant::MoscardNocausal, ..cfg.stage2.clone() };
        log::info!("stage 2: {v}");
        let trained = train_stage2(&cohort, &cxr, &ecg, &fusion, |_| {})?;
        let meta = FusionCheckpointConfig {
            fusion,
            dim: cxr.dim(),
            n_causal,
            encoder_hashes: trained.encoder_hash_after.clone(),
        };
        trained.model.save(&wd.fusion_checkpoint(v.name()), &meta, [&refs[0], &refs[1]], Some(hash.clone()))?;
        write_file(&wd.logs().join(format!("stage2-{v}.csv")), stage2_log_csv(&trained.log))?;
        let rec = FreezeRecord {
            variant: v,
            identical: trained.encoder_hash_before == trained.encoder_hash_after,
            before: trained.encoder_hash_before,
            after: trained.encoder_hash_after,
        };
        write_json(&wd.logs().join(format!("freeze-{v}.json")), &rec)?;
        records.push(rec);
    }
    Ok(records)
}

type PooledScores = (Vec<[f64; N_HORIZONS]>, Vec<Vec<f64>>);

fn stage1_scores(model: &Stage1Model<f32>, cohort: &Cohort, m: Modality, idx: &[usize]) -> Result<PooledScores> {
    let (mut probs, mut pooled) = (Vec::with_capacity(idx.len()), Vec::with_capacity(idx.len()));
    for chunk in idx.chunks(PREDICT_CHUNK) {
        let imgs: Vec<&[f32]> = chunk.iter().map(|&i| cohort.image(i, m)).collect();
        let (p, f) = model.predict_with_pooled(&imgs)?;
        probs.extend(p);
        pooled.extend(f);
    }
    Ok((probs, pooled))
}

fn confounder_labels(cohort: &Cohort, idx: &[usize]) -> [(&'static str, Vec<u8>); 2] {
    let s = &cohort.manifest.samples;
    [
        ("sex", idx.iter().map(|&i| s[i].c.sex).collect()),
        ("age", idx.iter().map(|&i| u8::from(s[i].c.age_bin() >= 2)).collect()),
    ]
}

fn group_tags(cohort: &Cohort, idx: &[usize], variable: &str) -> Vec<String> {
    idx.iter()
        .map(|&i| {
            let c = &cohort.manifest.samples[i].c;
            match variable {
                "sex" => c.sex.to_string(),
                _ => AGE_BIN_LABELS[c.age_bin()].to_string(),
            }
        })
        .collect()
}

fn build_report(
    cfg: &RunConfig,
    cohort: &Cohort,
    variant: Variant,
    split: Split,
    idx: &[usize],
    heads: Vec<HeadScores>,
    checkpoint_hash: String,
) -> Result<EvalReport> {
    let y: Vec<[u8; N_HORIZONS]> = idx.iter().map(|&i| cohort.manifest.samples[i].y).collect();
    let metrics = horizon_metrics(&heads, &y, cfg.eval.bootstrap_b, cfg.seed)?
        .into_iter()
        .filter(|m| cfg.eval.horizons.contains(&m.horizon))
        .collect();
    let mut subgroups = Vec::new();
    for head in &heads {
        for &h in &cfg.eval.horizons {
            let scores: Vec<f64> = head.probs.iter().map(|p| p[h.index()]).collect();
            let labels: Vec<u8> = y.iter().map(|l| l[h.index()]).collect();
            for var in &cfg.eval.subgroup_variables {
                for metric in subgroup_report(&scores, &labels, &group_tags(cohort, idx, var)) {
                    subgroups.push(SubgroupRow { head: head.head.clone(), horizon: h, variable: var.clone(), metric });
                }
            }
        }
    }
    Ok(EvalReport {
        variant: variant.name().to_string(),
        split: split.name().to_string(),
        in_sample: split == Split::Train,
        seed: cfg.seed,
        bootstrap_b: cfg.eval.bootstrap_b,
        checkpoint_hash,
        config_hash: cfg.hash(),
        metrics,
        subgroups,
        probes: Vec::new(),
    })
}

/// Loads a fusion checkpoint and the encoders it references (resolved next to it).
pub fn load_fusion(path: &Path) -> Result<(FusionModel<f32>, [Encoder<f32>; 2])> {
    if !path.exists() {
        return Err(PipelineError::MissingCheckpoint(path.to_path_buf()));
    }
    let (model, meta, refs) = FusionModel::load(path)?;
    if refs.len() != 2 {
        return Err(PipelineError::MissingInput(format!("{} must reference two encoders", path.display())));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut encs = Vec::with_capacity(2);
    for (r, want) in refs.iter().zip(&meta.encoder_hashes) {
        let p = dir.join(r);
        if !p.exists() {
            return Err(PipelineError::MissingCheckpoint(p));
        }
        let enc = Encoder::load(&p)?;
        if params_hash(&enc) != *want {
            return Err(moscard_core::Error::CheckpointMismatch(format!(
                "{} differs from the encoder the fusion model was trained on",
                p.display()
            ))
            .into());
        }
        encs.push(enc);
    }
    let ecg = encs.pop().expect("two encoders");
    let cxr = encs.pop().expect("two encoders");
    Ok((model, [cxr, ecg]))
}

/// Evaluates every variant whose checkpoints exist on `split`; writes
/// `reports/eval-<variant>-<split>.{json,csv}` and `subgroups-<variant>-<split>.csv`.
pub fn cmd_eval(cfg: &RunConfig, wd: &Workdir, split: Split, force: bool) -> Result<Vec<EvalReport>> {
    let cohort = load_cohort_checked(cfg, wd, force)?;
    let idx = cohort.indices(split);
    if idx.is_empty() {
        return Err(PipelineError::MissingInput(format!("split {split} is absent from the cohort")));
    }
    let hash = cfg.hash();
    let mut reports = Vec::new();
    for v in Variant::STAGE1 {
        let paths = Modality::ALL.map(|m| wd.stage1_checkpoint(v.name(), m));
        if !paths.iter().all(|p| p.exists()) {
            log::warn!("skipping {v}: stage-1 checkpoints missing");
            continue;
        }
        let mut heads = Vec::new();
        let mut hashes = Vec::new();
        let mut probes = Vec::new();
        for (m, p) in Modality::ALL.into_iter().zip(&paths) {
            checkpoint_hash_ok(p, &hash, force)?;
            let (model, _) = Stage1Model::load(p)?;
            let (probs, pooled) = stage1_scores(&model, &cohort, m, &idx)?;
            for (name, labels) in confounder_labels(&cohort, &idx) {
                let auc = probe_confounder(&pooled, &labels, cfg.seed)?;
                probes.push(ProbeResult { confounder: name.into(), features: format!("{m} pooled"), auc });
            }
            heads.push(HeadScores { head: m.name().to_string(), probs });
            hashes.push(params_hash(&model));
        }
        let mut report = build_report(cfg, &cohort, v, split, &idx, heads, hashes.join("+"))?;
        report.probes = probes;
        reports.push(report);
    }
    let mut feats: Option<(Vec<String>, Vec<(FeatureBundle, FeatureBundle)>)> = None;
    for v in Variant::FUSION {
        let path = wd.fusion_checkpoint(v.name());
        if !path.exists() {
            log::warn!("skipping {v}: fusion checkpoint missing");
            continue;
        }
        checkpoint_hash_ok(&path, &hash, force)?;
        let (model, [cxr, ecg]) = load_fusion(&path)?;
        let enc_hashes = vec![params_hash(&cxr), params_hash(&ecg)];
        if feats.as_ref().map(|(h, _)| h) != Some(&enc_hashes) {
            feats = Some((enc_hashes, precompute_features(&cohort, &cxr, &ecg, &idx)?));
        }
        let probs = predict_main(&model, &feats.as_ref().expect("features computed").1)?;
        let heads = MAIN_HEADS
            .iter()
            .enumerate()
            .map(|(k, name)| HeadScores { head: name.to_string(), probs: probs.iter().map(|p| p[k]).collect() })
            .collect();
        reports.push(build_report(cfg, &cohort, v, split, &idx, heads, params_hash(&model))?);
    }
    if reports.is_empty() {
        return Err(PipelineError::MissingCheckpoint(wd.checkpoints()));
    }
    for r in &reports {
        let stem = format!("{}-{}", r.variant, r.split);
        write_json(&wd.reports().join(format!("eval-{stem}.json")), r)?;
        write_file(&wd.reports().join(format!("eval-{stem}.csv")), r.to_csv())?;
        write_file(&wd.reports().join(format!("subgroups-{stem}.csv")), r.subgroups_csv())?;
    }
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub variant: Variant,
    pub modality: Modality,
    /// `sex`, or `age` (binarised as age bin >= 60).
    pub confounder: String,
    pub features: String,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub config_hash: String,
    pub split: Split,
    pub seed: u64,
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    pub fn auc(&self, variant: Variant, modality: Modality, confounder: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.modality == modality && r.confounder == confounder)
            .map(|r| r.auc)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,modality,confounder,features,split,auc\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.variant, r.modality, r.confounder, r.features, self.split, r.auc
            ));
        }
        out
    }
}

/// Linear confounder probes on the frozen pooled features of every stage-1 encoder.
pub fn cmd_probe(cfg: &RunConfig, wd: &Workdir, force: bool) -> Result<ProbeReport> {
    let cohort = load_cohort_checked(cfg, wd, force)?;
    let split = cfg.eval.probe_split;
    let idx = cohort.indices(split);
    if idx.is_empty() {
        return Err(PipelineError::MissingInput(format!("split {split} is absent from the cohort")));
    }
    let labels = confounder_labels(&cohort, &idx);
    let mut rows = Vec::new();
    for v in Variant::STAGE1 {
        for m in Modality::ALL {
            let path = wd.stage1_checkpoint(v.name(), m);
            if !path.exists() {
                return Err(PipelineError::MissingCheckpoint(path));
            }
            checkpoint_hash_ok(&path, &cfg.hash(), force)?;
            let (model, _) = Stage1Model::load(&path)?;
            let (_, pooled) = stage1_scores(&model, &cohort, m, &idx)?;
            for (name, y) in &labels {
                let auc = probe_confounder(&pooled, y, cfg.seed)?;
                rows.push(ProbeRow {
                    variant: v,
                    modality: m,
                    confounder: (*name).into(),
                    features: "pooled".into(),
                    auc,
                });
            }
        }
    }
    let report = ProbeReport { config_hash: cfg.hash(), split, seed: cfg.seed, rows };
    write_json(&wd.reports().join("probe.json"), &report)?;
    write_file(&wd.reports().join("probe.csv"), report.to_csv())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyRow {
    pub sample: String,
    pub base: f64,
    pub argmax_cell: usize,
    /// Pixel centre of the max-|saliency| cell.
    pub cell_center: [f64; 2],
    pub disk_box: [usize; 4],
    pub hit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    pub config_hash: String,
    pub variant: Variant,
    pub head: String,
    pub horizon: Horizon,
    pub mask_side: usize,
    pub stride: usize,
    pub fill: f32,
    pub rows: Vec<SaliencyRow>,
    pub hits: usize,
}

/// Occlusion saliency of the full model's combined 1yr output over the CXR
/// of the first positive holdout samples.
pub fn cmd_saliency(cfg: &RunConfig, wd: &Workdir, force: bool) -> Result<SaliencyReport> {
    let cohort = load_cohort_checked(cfg, wd, force)?;
    let path = wd.fusion_checkpoint(Variant::Moscard.name());
    if path.exists() {
        checkpoint_hash_ok(&path, &cfg.hash(), force)?;
    }
    let (model, [cxr, ecg]) = load_fusion(&path)?;
    let sc = &cfg.eval.saliency;
    let h = Horizon::Y1;
    let chosen: Vec<usize> = cohort
        .indices(Split::Holdout)
        .into_iter()
        .filter(|&i| cohort.manifest.samples[i].y[h.index()] == 1)
        .take(sc.samples)
        .collect();
    let side = cohort.image_side();
    let mut rows = Vec::new();
    for &i in &chosen {
        let entry = &cohort.manifest.samples[i];
        let disk_box = entry
            .truth
            .as_ref()
            .map(|t| t.disk_box)
            .ok_or_else(|| PipelineError::MissingInput(format!("sample {} has no generator truth", entry.id)))?;
        let ecg_feat = ecg.encode(cohort.image(i, Modality::Ecg))?;
        let forward = |img: &Image| -> f64 {
            let run = || -> moscard_core::Result<f64> {
                let cf = cxr.encode(&img.data)?;
                let (o, _) = model.forward(&FusionBatch::from_bundles(&[(&cf, &ecg_feat)])?)?;
                Ok(o.probs(Branch::MainConcat, 0)[h.index()])
            };
            run().unwrap_or(f64::NAN)
        };
        let image = Image { side, data: cohort.image(i, Modality::Cxr).to_vec() };
        let map = occlusion_saliency(forward, &image, sc.mask_side, sc.stride, sc.fill)?;
        if !map.base.is_finite() || map.cells.iter().any(|v| !v.is_finite()) {
            return Err(
                moscard_core::Error::NonFinite { what: "saliency".into(), diagnostics: entry.id.clone() }.into()
            );
        }
        let cell = map.argmax_abs();
        let (ox, oy) = map.origin(cell);
        let half = sc.mask_side as f64 / 2.0;
        let center = [ox as f64 + half, oy as f64 + half];
        let hit = center[0] >= disk_box[0] as f64
            && center[0] < disk_box[2] as f64
            && center[1] >= disk_box[1] as f64
            && center[1] < disk_box[3] as f64;
        write_file(&wd.reports().join("saliency").join(format!("{}.csv", entry.id)), map.to_csv())?;
        rows.push(SaliencyRow {
            sample: entry.id.clone(),
            base: map.base,
            argmax_cell: cell,
            cell_center: center,
            disk_box,
            hit,
        });
    }
    let report = SaliencyReport {
        config_hash: cfg.hash(),
        variant: Variant::Moscard,
        head: MAIN_HEADS[0].to_string(),
        horizon: h,
        mask_side: sc.mask_side,
        stride: sc.stride,
        fill: sc.fill,
        hits: rows.iter().filter(|r| r.hit).count(),
        rows,
    };
    write_json(&wd.reports().join("saliency.json"), &report)?;
    Ok(report)
}

/// Every step in order: gen, both training stages, eval on holdout and
/// shift, probe, saliency, report.
pub fn cmd_pipeline(cfg: &RunConfig, wd: &Workdir, force: bool) -> Result<Vec<crate::report::SummaryRow>> {
    cmd_gen(cfg, wd, force)?;
    cmd_train_stage1(cfg, wd, None, force)?;
    cmd_train_stage2(cfg, wd, force)?;
    for split in [Split::Holdout, Split::Shift] {
        cmd_eval(cfg, wd, split, force)?;
    }
    cmd_probe(cfg, wd, force)?;
    cmd_saliency(cfg, wd, force)?;
    crate::report::cmd_report(wd, force)
}
