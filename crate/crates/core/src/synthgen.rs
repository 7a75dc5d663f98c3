//! Synthetic paired CXR/ECG cohorts with a planted causal factor and a
//! planted confounder.
//!
//! Comorbidities `A` raise a latent risk `r`, which sets an exponential
//! event-time hazard; labels at each horizon are `1[T <= horizon]`. The
//! confounders (sex, age bin) are driven by a shared Gaussian latent whose
//! mean depends on the 1-year label in the train/holdout process and not
//! at all in the shift process. Both images carry all three signals.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::datamodel::{
    save_cohort, CohortManifest, Confounders, Horizon, Image, Sample, Split, SyntheticTruth, HORIZONS, N_AGE_BINS,
    N_HORIZONS,
};
use crate::error::{Error, Result};
use crate::evalkit::auc;
use crate::nn::sigmoid;
use crate::rng::{stream_id, stream_rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalAmplitudes {
    pub disease: f64,
    pub causal: f64,
    pub confounder: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorParams {
    pub seed: u64,
    pub n_train: usize,
    pub n_holdout: usize,
    pub n_shift: usize,
    pub image_side: usize,
    /// Confounder/label association in train and holdout:
    /// `P(sex=1 | y1yr=1) = (1 + rho) / 2`, `P(sex=1 | y1yr=0) = (1 - rho) / 2`.
    pub rho_train: f64,
    /// Same association for the shift split (0 severs it).
    pub rho_shift: f64,
    /// Bernoulli rate of each comorbidity.
    pub causal_prevalence: Vec<f64>,
    /// Per-comorbidity contribution to the risk logit.
    pub causal_weights: Vec<f64>,
    pub risk_bias: f64,
    /// Standard deviation of the patient-level risk-logit noise.
    pub latent_noise: f64,
    /// Standard deviation of the independent per-modality error on the
    /// risk value each renderer draws (risk scale, clamped to [0,1]).
    pub render_noise: f64,
    /// Baseline hazard per day.
    pub base_rate: f64,
    /// Log-hazard slope in the latent risk.
    pub hazard_slope: f64,
    /// Extra noise separating the age latent from the sex latent.
    pub age_noise: f64,
    pub signal_amplitudes: SignalAmplitudes,
    pub noise_sigma: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            seed: 42,
            n_train: 2000,
            n_holdout: 1000,
            n_shift: 1000,
            image_side: 64,
            rho_train: 0.8,
            rho_shift: 0.0,
            causal_prevalence: vec![0.3; 4],
            causal_weights: vec![0.8; 4],
            risk_bias: -0.5,
            latent_noise: 1.5,
            render_noise: 0.08,
            base_rate: 3.5e-7,
            hazard_slope: 12.0,
            age_noise: 0.5,
            signal_amplitudes: SignalAmplitudes { disease: 0.8, causal: 0.5, confounder: 0.5 },
            noise_sigma: 0.05,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, v) in [("rho_train", self.rho_train), ("rho_shift", self.rho_shift)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0,1], got {v}"));
            }
        }
        if self.causal_prevalence.len() != self.causal_weights.len() || self.causal_weights.is_empty() {
            return bad("causal_prevalence and causal_weights need equal, nonzero length".into());
        }
        if self.causal_prevalence.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("causal_prevalence entries must lie in [0,1]".into());
        }
        let a = &self.signal_amplitudes;
        if [a.disease, a.causal, a.confounder].iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return bad("signal amplitudes must be finite and >= 0".into());
        }
        if self.noise_sigma < 0.0
            || self.latent_noise < 0.0
            || self.render_noise < 0.0
            || self.age_noise < 0.0
            || self.base_rate < 0.0
        {
            return bad("noise levels and base_rate must be >= 0".into());
        }
        if self.image_side < 16 || self.image_side % 8 != 0 {
            return bad(format!("image_side must be a multiple of 8 and >= 16, got {}", self.image_side));
        }
        Ok(())
    }

    pub fn n_causal(&self) -> usize {
        self.causal_weights.len()
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Holdout => self.n_holdout,
            Split::Shift => self.n_shift,
        }
    }

    fn rho(&self, split: Split) -> f64 {
        match split {
            Split::Train | Split::Holdout => self.rho_train,
            Split::Shift => self.rho_shift,
        }
    }
}

/// Unrendered draw of one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct Latents {
    pub a: Vec<u8>,
    pub risk: f64,
    /// Risk as rendered into the CXR and the ECG.
    pub risk_seen: [f64; 2],
    pub event_days: f64,
    pub y: [u8; N_HORIZONS],
    pub sex: u8,
    pub age_bin: usize,
}

fn probit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

/// Draws the latent variables of one patient from the split's process.
pub fn draw_latents(params: &GeneratorParams, split: Split, rng: &mut ChaCha8Rng) -> Latents {
    let a: Vec<u8> = params.causal_prevalence.iter().map(|&p| u8::from(rng.gen::<f64>() < p)).collect();
    let eps: f64 = StandardNormal.sample(rng);
    let logit = params.risk_bias
        + a.iter().zip(&params.causal_weights).map(|(&x, &w)| x as f64 * w).sum::<f64>()
        + params.latent_noise * eps;
    let risk = sigmoid(logit);
    let rate = params.base_rate * (params.hazard_slope * risk).exp();
    let event_days = if rate > 0.0 { Exp::new(rate).expect("positive rate").sample(rng) } else { f64::INFINITY };
    let y = HORIZONS.map(|h| u8::from(event_days <= h.days()));

    let rho = params.rho(split);
    let p_sex = if y[Horizon::Y1.index()] == 1 { 0.5 + rho / 2.0 } else { 0.5 - rho / 2.0 };
    let z: f64 = StandardNormal.sample(rng);
    let g = probit(p_sex) + z;
    let sex = u8::from(g > 0.0);
    let za: f64 = StandardNormal.sample(rng);
    let age_latent = g + params.age_noise * za;
    let age_bin = [-1.0, 0.0, 1.0].iter().filter(|&&t| age_latent > t).count();
    let risk_seen = [0, 1].map(|_| {
        let e: f64 = StandardNormal.sample(rng);
        (risk + params.render_noise * e).clamp(0.0, 1.0)
    });
    Latents { a, risk, risk_seen, event_days, y, sex, age_bin }
}

/// Pixel rectangles used by the renderer, `[x0, y0, x1, y1)`.
pub mod layout {
    /// Sex marker in the CXR's top-left cell.
    pub fn sex_marker(side: usize) -> [usize; 4] {
        let u = side / 8;
        [1, 1, u - 1, u - 1]
    }

    /// Age marker in the CXR's top-right cell.
    pub fn age_marker(side: usize) -> [usize; 4] {
        let u = side / 8;
        [side - u + 1, 1, side - 1, u - 1]
    }

    /// Texture patch of comorbidity `k` along the CXR's top row.
    pub fn causal_patch(side: usize, k: usize) -> [usize; 4] {
        let u = side / 8;
        let x0 = 2 * u + k * u;
        [x0 + 1, 1, x0 + u - 1, u - 1]
    }

    pub fn disk_center(side: usize) -> (f64, f64) {
        (side as f64 / 2.0, side as f64 / 2.0 + side as f64 / 16.0)
    }

    pub fn disk_radius(side: usize, risk: f64) -> f64 {
        side as f64 * (0.12 + 0.22 * risk)
    }
}

fn checker(img: &mut Image, rect: [usize; 4], v: f32) {
    for y in rect[1]..rect[3] {
        for x in rect[0]..rect[2] {
            if (x + y) % 2 == 0 {
                img.add(x, y, v);
            }
        }
    }
}

fn render_cxr(params: &GeneratorParams, lat: &Latents, rng: &mut ChaCha8Rng) -> (Image, [usize; 4]) {
    let s = params.image_side;
    let amp = &params.signal_amplitudes;
    let mut img = Image::filled(s, 0.0);

    let (cx, cy) = layout::disk_center(s);
    let r = lat.risk_seen[0];
    let radius = layout::disk_radius(s, r);
    let intensity = amp.disease * (0.6 + 0.4 * r);
    for y in 0..s {
        for x in 0..s {
            let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
            let cover = (radius - d + 0.5).clamp(0.0, 1.0);
            if cover > 0.0 {
                img.add(x, y, (intensity * cover) as f32);
            }
        }
    }
    let bbox = [
        (cx - radius - 0.5).floor().max(0.0) as usize,
        (cy - radius - 0.5).floor().max(0.0) as usize,
        ((cx + radius + 0.5).ceil() as usize).min(s),
        ((cy + radius + 0.5).ceil() as usize).min(s),
    ];

    for (k, &on) in lat.a.iter().enumerate() {
        let rect = layout::causal_patch(s, k);
        if on == 1 && rect[2] <= s {
            for y in rect[1]..rect[3] {
                for x in (rect[0]..rect[2]).filter(|x| x % 2 == 0) {
                    img.add(x, y, amp.causal as f32);
                }
            }
        }
    }

    checker(&mut img, layout::sex_marker(s), (amp.confounder * lat.sex as f64) as f32);
    let age_level = (lat.age_bin + 1) as f64 / N_AGE_BINS as f64;
    checker(&mut img, layout::age_marker(s), (amp.confounder * age_level) as f32);

    add_noise(&mut img, params.noise_sigma, rng);
    (img, bbox)
}

fn render_ecg(params: &GeneratorParams, lat: &Latents, rng: &mut ChaCha8Rng) -> Image {
    let s = params.image_side;
    let amp = &params.signal_amplitudes;
    let offset = amp.confounder * (0.5 * lat.sex as f64 + 0.5 * lat.age_bin as f64 / (N_AGE_BINS - 1) as f64);
    let mut img = Image::filled(s, offset as f32);

    let leads = 4;
    let strip = s as f64 / leads as f64;
    let wave_amp = s as f64 / 16.0;
    let cycles = 1.5 + 4.5 * lat.risk_seen[1];
    for lead in 0..leads {
        let phase = rng.gen::<f64>() * 2.0 * PI;
        let notch = lat.a.get(lead).copied().unwrap_or(0) == 1;
        let centre = strip / 2.0 + lead as f64 * strip;
        for x in 0..s {
            let t = 2.0 * PI * cycles * (x as f64 + 0.5) / s as f64 + phase;
            let mut yv = centre + wave_amp * t.sin();
            if notch {
                yv += 0.35 * wave_amp * (3.0 * t).sin() * (1.0 + amp.causal);
            }
            for y in 0..s {
                let w = 1.0 - ((y as f64 + 0.5) - yv).abs();
                if w > 0.0 {
                    img.add(x, y, (amp.disease * w) as f32);
                }
            }
        }
    }
    add_noise(&mut img, params.noise_sigma, rng);
    img
}

fn add_noise(img: &mut Image, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma > 0.0 {
        for v in img.data.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += (sigma * z) as f32;
        }
    }
    img.clamp_unit();
}

pub fn sample_id(split: Split, index: usize) -> String {
    format!("{}-{index:06}", split.name())
}

/// Generates one sample; a pure function of `(params, index, split)`.
pub fn gen_sample(params: &GeneratorParams, index: usize, split: Split) -> Sample {
    let mut rng = stream_rng(params.seed, stream_id(split.name()), index as u64);
    let lat = draw_latents(params, split, &mut rng);
    let (cxr, disk_box) = render_cxr(params, &lat, &mut rng);
    let ecg = render_ecg(params, &lat, &mut rng);
    Sample {
        id: sample_id(split, index),
        cxr,
        ecg,
        y: lat.y,
        a: lat.a.clone(),
        c: Confounders::new(lat.sex, lat.age_bin),
        split,
        truth: Some(SyntheticTruth { risk: lat.risk, event_days: lat.event_days, disk_box }),
    }
}

/// Generates every split in memory, in train/holdout/shift order.
pub fn gen_samples(params: &GeneratorParams) -> Result<Vec<Sample>> {
    params.validate()?;
    let jobs: Vec<(Split, usize)> =
        Split::ALL.iter().flat_map(|&s| (0..params.count(s)).map(move |i| (s, i))).collect();
    Ok(jobs.into_par_iter().map(|(split, i)| gen_sample(params, i, split)).collect())
}

/// Generates the cohort and writes it to `dir` in the standard cohort format.
pub fn gen_cohort(
    params: &GeneratorParams,
    dir: &Path,
    name: &str,
    config_hash: Option<String>,
) -> Result<CohortManifest> {
    let samples = gen_samples(params)?;
    let mut manifest = CohortManifest::build(name, params.image_side, &[]);
    manifest.generator_params = Some(params.clone());
    manifest.config_hash = config_hash;
    save_cohort(&manifest, &samples, dir)
}

/// Per-horizon Monte-Carlo AUC of the true latent risk on the train-process
/// population; no image-based score can do better in expectation.
pub fn oracle_auc(params: &GeneratorParams, n_mc: usize) -> Result<[f64; N_HORIZONS]> {
    if n_mc < 1000 {
        return Err(Error::InvalidConfig(format!("oracle_auc needs n_mc >= 1000, got {n_mc}")));
    }
    params.validate()?;
    let stream = stream_id("oracle");
    let lats: Vec<Latents> = (0..n_mc)
        .map(|i| draw_latents(params, Split::Holdout, &mut stream_rng(params.seed, stream, i as u64)))
        .collect();
    let risk: Vec<f64> = lats.iter().map(|l| l.risk).collect();
    let mut out = [0.0; N_HORIZONS];
    for h in HORIZONS {
        let labels: Vec<u8> = lats.iter().map(|l| l.y[h.index()]).collect();
        out[h.index()] = auc(&risk, &labels)?;
    }
    Ok(out)
}
