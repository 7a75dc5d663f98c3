//! Paired CXR/ECG samples, cohort manifests and the on-disk cohort format.
//!
//! A cohort directory holds `manifest.json` plus one `<split>.bin` blob per
//! split. Each blob starts with a 16-byte header (`"MSCD"`, version,
//! sample count, image side; little-endian `u32`s) followed by, for every
//! sample in offset order, the CXR image then the ECG image as row-major
//! little-endian `f32`.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::GeneratorParams;

pub const MAGIC: &[u8; 4] = b"MSCD";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Prediction horizons, in order of increasing follow-up.
pub const HORIZONS: [Horizon; 4] = [Horizon::M6, Horizon::Y1, Horizon::Y2, Horizon::Y5];
pub const N_HORIZONS: usize = 4;
pub const N_AGE_BINS: usize = 4;
pub const AGE_BIN_LABELS: [&str; N_AGE_BINS] = ["<40", "40-60", "60-80", ">80"];
pub const DEFAULT_CAUSAL_FACTORS: [&str; 4] = ["chf", "ckd", "diabetes", "hypertension"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Horizon {
    #[serde(rename = "6M")]
    M6,
    #[serde(rename = "1yr")]
    Y1,
    #[serde(rename = "2yr")]
    Y2,
    #[serde(rename = "5yr")]
    Y5,
}

impl Horizon {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn days(self) -> f64 {
        match self {
            Horizon::M6 => 182.5,
            Horizon::Y1 => 365.0,
            Horizon::Y2 => 730.0,
            Horizon::Y5 => 1825.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Horizon::M6 => "6M",
            Horizon::Y1 => "1yr",
            Horizon::Y2 => "2yr",
            Horizon::Y5 => "5yr",
        }
    }
}

impl FromStr for Horizon {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HORIZONS
            .iter()
            .copied()
            .find(|h| h.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown horizon {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Holdout,
    Shift,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Holdout, Split::Shift];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Holdout => "holdout",
            Split::Shift => "shift",
        }
    }

    pub fn blob_file(self) -> String {
        format!("{}.bin", self.name())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .iter()
            .copied()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Cxr,
    Ecg,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Cxr, Modality::Ecg];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Cxr => "cxr",
            Modality::Ecg => "ecg",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .iter()
            .copied()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown modality {s:?}")))
    }
}

/// Square grayscale image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub side: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(side: usize, v: f32) -> Self {
        Image { side, data: vec![v; side * side] }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.side + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.side + x] = v;
    }

    pub fn add(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.side + x] += v;
    }

    pub fn clamp_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
}

/// Confounder labels: sex bit and one-hot age bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confounders {
    pub sex: u8,
    pub age: [u8; N_AGE_BINS],
}

impl Confounders {
    pub fn new(sex: u8, age_bin: usize) -> Self {
        let mut age = [0u8; N_AGE_BINS];
        age[age_bin] = 1;
        Confounders { sex, age }
    }

    /// Index of the active age bin; the first active one if the one-hot is malformed.
    pub fn age_bin(&self) -> usize {
        self.age.iter().position(|&a| a == 1).unwrap_or(0)
    }
}

/// Generator-side ground truth kept for oracles; absent for real cohorts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    /// Latent risk in (0, 1).
    pub risk: f64,
    pub event_days: f64,
    /// CXR disease-disk bounding box `[x0, y0, x1, y1]`, inclusive-exclusive pixels.
    pub disk_box: [usize; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub cxr: Image,
    pub ecg: Image,
    pub y: [u8; N_HORIZONS],
    pub a: Vec<u8>,
    pub c: Confounders,
    pub split: Split,
    pub truth: Option<SyntheticTruth>,
}

impl Sample {
    /// Checks every record invariant, naming the first failed rule.
    pub fn validate(&self) -> Result<()> {
        let fail = |rule: &str| Err(Error::validation(&self.id, rule));
        if self.y.iter().any(|&v| v > 1) {
            return fail("labels must be binary");
        }
        if self.y.windows(2).any(|w| w[0] > w[1]) {
            return fail("horizon monotonicity");
        }
        if self.a.iter().any(|&v| v > 1) {
            return fail("causal factors must be binary");
        }
        if self.c.sex > 1 {
            return fail("sex must be binary");
        }
        if self.c.age.iter().any(|&v| v > 1) || self.c.age.iter().map(|&v| v as u32).sum::<u32>() != 1 {
            return fail("exactly one age bin active");
        }
        for (name, img) in [("cxr", &self.cxr), ("ecg", &self.ecg)] {
            if img.data.len() != img.side * img.side {
                return fail(&format!("{name} image shape"));
            }
            if img.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return fail(&format!("{name} values within [0,1]"));
            }
        }
        Ok(())
    }

    pub fn label(&self, h: Horizon) -> u8 {
        self.y[h.index()]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub holdout: usize,
    pub shift: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Holdout => self.holdout,
            Split::Shift => self.shift,
        }
    }

    fn bump(&mut self, split: Split) {
        match split {
            Split::Train => self.train += 1,
            Split::Holdout => self.holdout += 1,
            Split::Shift => self.shift += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.holdout + self.shift
    }
}

/// Per-sample manifest row. `offset` is the sample's position inside its split blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub split: Split,
    pub offset: usize,
    pub y: [u8; N_HORIZONS],
    pub a: Vec<u8>,
    pub c: Confounders,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<SyntheticTruth>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub name: String,
    pub image_side: usize,
    pub samples: Vec<SampleEntry>,
    pub split_counts: SplitCounts,
    pub label_prevalence: [f64; N_HORIZONS],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_params: Option<GeneratorParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl CohortManifest {
    /// Builds a manifest for `samples`, assigning blob offsets and recomputing counts.
    pub fn build(name: &str, image_side: usize, samples: &[Sample]) -> Self {
        let mut counts = SplitCounts::default();
        let mut entries = Vec::with_capacity(samples.len());
        for s in samples {
            entries.push(SampleEntry {
                id: s.id.clone(),
                split: s.split,
                offset: counts.get(s.split),
                y: s.y,
                a: s.a.clone(),
                c: s.c,
                truth: s.truth.clone(),
            });
            counts.bump(s.split);
        }
        CohortManifest {
            name: name.to_string(),
            image_side,
            label_prevalence: prevalence(entries.iter().map(|e| &e.y)),
            samples: entries,
            split_counts: counts,
            generator_params: None,
            config_hash: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let mut counts = SplitCounts::default();
        let mut next_offset = SplitCounts::default();
        for e in &self.samples {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::validation(&e.id, "ids unique"));
            }
            if e.offset != next_offset.get(e.split) {
                return Err(Error::validation(&e.id, "blob offsets follow manifest order"));
            }
            next_offset.bump(e.split);
            counts.bump(e.split);
        }
        if counts != self.split_counts {
            return Err(Error::validation(&self.name, "split_counts sum to total"));
        }
        let recomputed = prevalence(self.samples.iter().map(|e| &e.y));
        for (h, (&a, &b)) in self.label_prevalence.iter().zip(&recomputed).enumerate() {
            if !(0.0..=1.0).contains(&a) || (a - b).abs() > 1e-9 {
                return Err(Error::validation(&self.name, format!("label prevalence for horizon {h}")));
            }
        }
        Ok(())
    }
}

fn prevalence<'a>(ys: impl Iterator<Item = &'a [u8; N_HORIZONS]>) -> [f64; N_HORIZONS] {
    let mut pos = [0usize; N_HORIZONS];
    let mut n = 0usize;
    for y in ys {
        n += 1;
        for (p, &v) in pos.iter_mut().zip(y) {
            *p += v as usize;
        }
    }
    if n == 0 {
        return [0.0; N_HORIZONS];
    }
    pos.map(|p| p as f64 / n as f64)
}

/// A loaded cohort: manifest plus the image blobs of every split.
#[derive(Clone, Debug)]
pub struct Cohort {
    pub manifest: CohortManifest,
    root: PathBuf,
    blobs: [Vec<f32>; 3],
}

impl Cohort {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn image_side(&self) -> usize {
        self.manifest.image_side
    }

    fn blob(&self, split: Split) -> &[f32] {
        &self.blobs[split as usize]
    }

    /// Sample at manifest position `i`.
    pub fn sample(&self, i: usize) -> Sample {
        let e = &self.manifest.samples[i];
        let area = self.image_side() * self.image_side();
        let blob = self.blob(e.split);
        let base = e.offset * 2 * area;
        Sample {
            id: e.id.clone(),
            cxr: Image { side: self.image_side(), data: blob[base..base + area].to_vec() },
            ecg: Image { side: self.image_side(), data: blob[base + area..base + 2 * area].to_vec() },
            y: e.y,
            a: e.a.clone(),
            c: e.c,
            split: e.split,
            truth: e.truth.clone(),
        }
    }

    /// CXR and ECG pixel slices of the sample at manifest position `i`, without copying.
    pub fn images(&self, i: usize) -> (&[f32], &[f32]) {
        let e = &self.manifest.samples[i];
        let area = self.image_side() * self.image_side();
        let blob = self.blob(e.split);
        let base = e.offset * 2 * area;
        (&blob[base..base + area], &blob[base + area..base + 2 * area])
    }

    pub fn iter(&self) -> impl Iterator<Item = Sample> + '_ {
        (0..self.len()).map(move |i| self.sample(i))
    }

    pub fn image(&self, i: usize, modality: Modality) -> &[f32] {
        let (cxr, ecg) = self.images(i);
        match modality {
            Modality::Cxr => cxr,
            Modality::Ecg => ecg,
        }
    }

    /// Manifest positions of every sample in `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest.samples.iter().enumerate().filter(|(_, e)| e.split == split).map(|(i, _)| i).collect()
    }
}

fn encode_blob(side: usize, samples: &[&Sample]) -> Vec<u8> {
    let area = side * side;
    let mut out = Vec::with_capacity(HEADER_LEN + samples.len() * area * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    out.extend_from_slice(&(side as u32).to_le_bytes());
    for s in samples {
        for v in s.cxr.data.iter().chain(&s.ecg.data) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_blob(path: &Path, bytes: &[u8], want_count: usize, want_side: usize) -> Result<Vec<f32>> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("{}: missing MSCD header", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    if word(4) != FORMAT_VERSION as usize {
        return Err(Error::Format(format!("{}: unsupported version {}", path.display(), word(4))));
    }
    let (count, side) = (word(8), word(12));
    if count != want_count || side != want_side {
        return Err(Error::Format(format!(
            "{}: header says {count} samples of side {side}, manifest expects {want_count} of side {want_side}",
            path.display()
        )));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != count * side * side * 2 * 4 {
        return Err(Error::Format(format!("{}: truncated blob", path.display())));
    }
    Ok(body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
}

/// Writes `manifest.json` and one blob per split under `dir`.
///
/// The manifest is rebuilt from `samples` (offsets, counts, prevalence);
/// `name`, `generator_params` and `config_hash` are taken from `manifest`.
pub fn save_cohort(manifest: &CohortManifest, samples: &[Sample], dir: &Path) -> Result<CohortManifest> {
    for s in samples {
        s.validate()?;
        if s.cxr.side != manifest.image_side || s.ecg.side != manifest.image_side {
            return Err(Error::validation(&s.id, "image side matches manifest"));
        }
    }
    let mut out = CohortManifest::build(&manifest.name, manifest.image_side, samples);
    out.generator_params = manifest.generator_params.clone();
    out.config_hash = manifest.config_hash.clone();
    out.validate()?;

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in Split::ALL {
        let members: Vec<&Sample> = samples.iter().filter(|s| s.split == split).collect();
        let path = dir.join(split.blob_file());
        write_atomic(&path, &encode_blob(manifest.image_side, &members))?;
    }
    let json = serde_json::to_vec_pretty(&out).map_err(|e| Error::json(dir.join(MANIFEST_FILE), e))?;
    write_atomic(&dir.join(MANIFEST_FILE), &json)?;
    Ok(out)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads and validates a cohort directory.
pub fn load_cohort(dir: &Path) -> Result<Cohort> {
    let mpath = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CohortManifest = serde_json::from_slice(&bytes).map_err(|e| Error::json(&mpath, e))?;
    manifest.validate()?;
    let mut blobs: [Vec<f32>; 3] = Default::default();
    for split in Split::ALL {
        let count = manifest.split_counts.get(split);
        let path = dir.join(split.blob_file());
        if count == 0 && !path.exists() {
            continue;
        }
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        blobs[split as usize] = decode_blob(&path, &raw, count, manifest.image_side)?;
    }
    let cohort = Cohort { manifest, root: dir.to_path_buf(), blobs };
    for s in cohort.iter() {
        s.validate()?;
    }
    Ok(cohort)
}
