//! Discrimination metrics, percentile-bootstrap intervals, subgroup tables,
//! confounder probes and occlusion saliency.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Horizon, Image};
use crate::error::{Error, Result};
use crate::rng::{stream_id, stream_rng};

/// Mann-Whitney AUC: fraction of (positive, negative) pairs ordered
/// correctly, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", scores.len()),
            got: labels.len().to_string(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("AUC of NaN scores".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of positives, kept doubled to stay integral.
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let doubled_rank = (i + 1 + j + 1) as u128;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank2_sum += doubled_rank * pos_in_tie;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let u2 = rank2_sum - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Fraction of correct predictions with `score >= threshold` read as positive.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    if scores.is_empty() {
        return f64::NAN;
    }
    let correct = scores.iter().zip(labels).filter(|(&s, &l)| u8::from(s >= threshold) == l).count();
    correct as f64 / scores.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Auc,
    Accuracy,
}

impl Metric {
    pub fn eval(self, scores: &[f64], labels: &[u8]) -> Result<f64> {
        match self {
            Metric::Auc => auc(scores, labels),
            Metric::Accuracy => Ok(accuracy(scores, labels, 0.5)),
        }
    }

    fn needs_both_classes(self) -> bool {
        matches!(self, Metric::Auc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    /// Replicates dropped after repeated single-class redraws.
    pub dropped: usize,
}

const MAX_REDRAWS: usize = 10;

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// 95% percentile-bootstrap interval with `b` replicates.
pub fn bootstrap_ci(scores: &[f64], labels: &[u8], metric: Metric, b: usize, seed: u64) -> Result<Interval> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::UndefinedMetric(format!("bootstrap needs n >= 2, got {n}")));
    }
    let point = metric.eval(scores, labels)?;
    let stream = stream_id("bootstrap");
    let reps: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream_rng(seed, stream, rep as u64);
            let mut s = vec![0.0; n];
            let mut l = vec![0u8; n];
            for _ in 0..MAX_REDRAWS {
                for k in 0..n {
                    let j = rng.gen_range(0..n);
                    s[k] = scores[j];
                    l[k] = labels[j];
                }
                let first = l[0];
                if metric.needs_both_classes() && l.iter().all(|&v| v == first) {
                    continue;
                }
                return metric.eval(&s, &l).ok();
            }
            None
        })
        .collect();
    let mut vals: Vec<f64> = reps.iter().flatten().copied().collect();
    let dropped = b - vals.len();
    if dropped > 0 {
        log::warn!("bootstrap dropped {dropped} single-class replicates");
    }
    if vals.is_empty() {
        return Ok(Interval { point, lo: point, hi: point, dropped });
    }
    vals.sort_by(f64::total_cmp);
    Ok(Interval { point, lo: quantile(&vals, 0.025), hi: quantile(&vals, 0.975), dropped })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupMetric {
    pub level: String,
    pub n: usize,
    pub positives: usize,
    /// `None` when the level holds a single class.
    pub auc: Option<f64>,
    pub accuracy: f64,
}

/// Per-level AUC and accuracy; levels are sorted by name.
pub fn subgroup_report(scores: &[f64], labels: &[u8], groups: &[String]) -> Vec<SubgroupMetric> {
    let mut by_level: BTreeMap<&str, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for ((&s, &l), g) in scores.iter().zip(labels).zip(groups) {
        let e = by_level.entry(g.as_str()).or_default();
        e.0.push(s);
        e.1.push(l);
    }
    by_level
        .into_iter()
        .map(|(level, (s, l))| SubgroupMetric {
            level: level.to_string(),
            n: s.len(),
            positives: l.iter().filter(|&&v| v == 1).count(),
            auc: auc(&s, &l).ok(),
            accuracy: accuracy(&s, &l, 0.5),
        })
        .collect()
}

/// Max-minus-min AUC over the levels that have one.
pub fn subgroup_auc_gap(rows: &[SubgroupMetric]) -> Option<f64> {
    let aucs: Vec<f64> = rows.iter().filter_map(|r| r.auc).collect();
    if aucs.is_empty() {
        return None;
    }
    let max = aucs.iter().copied().fold(f64::MIN, f64::max);
    let min = aucs.iter().copied().fold(f64::MAX, f64::min);
    Some(max - min)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub rows: usize,
    pub cols: usize,
    pub mask_side: usize,
    pub stride: usize,
    pub base: f64,
    /// Row-major `p_base - p_masked` per mask position.
    pub cells: Vec<f64>,
}

impl SaliencyMap {
    /// Pixel-space origin of cell `i`.
    pub fn origin(&self, i: usize) -> (usize, usize) {
        ((i % self.cols) * self.stride, (i / self.cols) * self.stride)
    }

    pub fn argmax_abs(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.cells.iter().enumerate() {
            if v.abs() > self.cells[best].abs() {
                best = i;
            }
        }
        best
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows {
            let row: Vec<String> =
                self.cells[r * self.cols..(r + 1) * self.cols].iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }
}

/// Occlusion saliency: slide a `mask_side` square filled with `fill` over the
/// image and record the drop in the model's probability at each position.
pub fn occlusion_saliency<F>(
    forward: F,
    image: &Image,
    mask_side: usize,
    stride: usize,
    fill: f32,
) -> Result<SaliencyMap>
where
    F: Fn(&Image) -> f64 + Sync,
{
    let side = image.side;
    if mask_side == 0 || mask_side > side || stride == 0 {
        return Err(Error::InvalidConfig(format!("mask {mask_side}/stride {stride} invalid for side {side}")));
    }
    let positions: Vec<usize> = (0..=side - mask_side).step_by(stride).collect();
    let base = forward(image);
    let grid: Vec<(usize, usize)> = positions.iter().flat_map(|&y| positions.iter().map(move |&x| (x, y))).collect();
    let cells = grid
        .par_iter()
        .map(|&(x0, y0)| {
            let mut masked = image.clone();
            for y in y0..y0 + mask_side {
                for x in x0..x0 + mask_side {
                    masked.set(x, y, fill);
                }
            }
            base - forward(&masked)
        })
        .collect();
    Ok(SaliencyMap { rows: positions.len(), cols: positions.len(), mask_side, stride, base, cells })
}

/// L2-regularised logistic regression fitted by Newton iterations.
#[derive(Clone, Debug)]
pub struct LogisticProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: DVector<f64>,
}

impl LogisticProbe {
    pub fn fit(features: &[Vec<f64>], labels: &[u8], l2: f64) -> Self {
        let d = features[0].len();
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            mean.iter_mut().zip(f).for_each(|(m, v)| *m += v / n);
        }
        let mut scale = vec![0.0; d];
        for f in features {
            scale.iter_mut().zip(f.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
        }
        scale.iter_mut().for_each(|s| *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 0.0 });
        let x =
            DMatrix::from_fn(
                features.len(),
                d + 1,
                |i, j| {
                    if j == d {
                        1.0
                    } else {
                        (features[i][j] - mean[j]) * scale[j]
                    }
                },
            );
        let y = DVector::from_iterator(labels.len(), labels.iter().map(|&l| l as f64));
        let mut w = DVector::zeros(d + 1);
        for _ in 0..50 {
            let z = &x * &w;
            let p = z.map(crate::nn::sigmoid);
            let mut grad = x.transpose() * (&p - &y);
            let mut reg = DMatrix::identity(d + 1, d + 1) * l2;
            reg[(d, d)] = 1e-8;
            for j in 0..d {
                grad[j] += l2 * w[j];
            }
            let wts = p.map(|v| (v * (1.0 - v)).max(1e-10));
            let mut xw = x.clone();
            for (i, mut row) in xw.row_iter_mut().enumerate() {
                row *= wts[i];
            }
            let hess = x.transpose() * xw + reg;
            let Some(chol) = hess.cholesky() else { break };
            let step = chol.solve(&grad);
            w -= &step;
            if step.amax() < 1e-9 {
                break;
            }
        }
        LogisticProbe { mean, scale, weights: w }
    }

    pub fn score(&self, f: &[f64]) -> f64 {
        let d = self.mean.len();
        let mut z = self.weights[d];
        for j in 0..d {
            z += self.weights[j] * (f[j] - self.mean[j]) * self.scale[j];
        }
        z
    }
}

pub const PROBE_FOLDS: usize = 5;
pub const PROBE_L2: f64 = 1.0;

/// Stratified 5-fold linear probe; mean held-fold AUC.
pub fn probe_confounder(features: &[Vec<f64>], labels: &[u8], seed: u64) -> Result<f64> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", features.len()),
            got: labels.len().to_string(),
        });
    }
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    if pos.len() < PROBE_FOLDS || neg.len() < PROBE_FOLDS {
        return Err(Error::UndefinedMetric("probe needs at least 5 samples of each class".into()));
    }
    let mut rng = stream_rng(seed, stream_id("probe"), 0);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut fold = vec![0usize; labels.len()];
    for (k, &i) in pos.iter().enumerate() {
        fold[i] = k % PROBE_FOLDS;
    }
    for (k, &i) in neg.iter().enumerate() {
        fold[i] = k % PROBE_FOLDS;
    }
    let mut total = 0.0;
    for f in 0..PROBE_FOLDS {
        let (mut tr_x, mut tr_y, mut te_x, mut te_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in 0..labels.len() {
            if fold[i] == f {
                te_x.push(&features[i]);
                te_y.push(labels[i]);
            } else {
                tr_x.push(features[i].clone());
                tr_y.push(labels[i]);
            }
        }
        let probe = LogisticProbe::fit(&tr_x, &tr_y, PROBE_L2);
        let scores: Vec<f64> = te_x.iter().map(|x| probe.score(x)).collect();
        total += auc(&scores, &te_y)?;
    }
    Ok(total / PROBE_FOLDS as f64)
}

/// Scores of one prediction head for every sample and horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadScores {
    pub head: String,
    /// `[sample][horizon]` probabilities.
    pub probs: Vec<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub head: String,
    pub horizon: Horizon,
    pub n: usize,
    pub prevalence: f64,
    pub accuracy: Interval,
    pub auc: Option<Interval>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub head: String,
    pub horizon: Horizon,
    pub variable: String,
    #[serde(flatten)]
    pub metric: SubgroupMetric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub confounder: String,
    pub features: String,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub split: String,
    pub in_sample: bool,
    pub seed: u64,
    pub bootstrap_b: usize,
    pub checkpoint_hash: String,
    pub config_hash: String,
    pub metrics: Vec<HorizonMetrics>,
    pub subgroups: Vec<SubgroupRow>,
    pub probes: Vec<ProbeResult>,
}

impl EvalReport {
    pub fn metric(&self, head: &str, horizon: Horizon) -> Option<&HorizonMetrics> {
        self.metrics.iter().find(|m| m.head == head && m.horizon == horizon)
    }

    pub fn auc(&self, head: &str, horizon: Horizon) -> Option<f64> {
        self.metric(head, horizon).and_then(|m| m.auc.map(|a| a.point))
    }

    pub const CSV_HEADER: &'static str =
        "variant,split,head,horizon,n,prevalence,accuracy,accuracy_lo,accuracy_hi,auc,auc_lo,auc_hi,in_sample";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for m in &self.metrics {
            let (a, alo, ahi) = match m.auc {
                Some(i) => (i.point.to_string(), i.lo.to_string(), i.hi.to_string()),
                None => ("n/a".into(), "n/a".into(), "n/a".into()),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                self.variant,
                self.split,
                m.head,
                m.horizon.label(),
                m.n,
                m.prevalence,
                m.accuracy.point,
                m.accuracy.lo,
                m.accuracy.hi,
                a,
                alo,
                ahi,
                self.in_sample
            );
        }
        out
    }

    pub fn subgroups_csv(&self) -> String {
        let mut out = String::from("variant,split,head,horizon,variable,level,n,positives,auc,accuracy\n");
        for r in &self.subgroups {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                self.variant,
                self.split,
                r.head,
                r.horizon.label(),
                r.variable,
                r.metric.level,
                r.metric.n,
                r.metric.positives,
                r.metric.auc.map_or("n/a".to_string(), |v| v.to_string()),
                r.metric.accuracy
            );
        }
        out
    }
}

/// Per-head, per-horizon metrics with bootstrap intervals.
pub fn horizon_metrics(heads: &[HeadScores], y: &[[u8; 4]], b: usize, seed: u64) -> Result<Vec<HorizonMetrics>> {
    let mut out = Vec::new();
    for head in heads {
        for h in crate::datamodel::HORIZONS {
            let scores: Vec<f64> = head.probs.iter().map(|p| p[h.index()]).collect();
            let labels: Vec<u8> = y.iter().map(|l| l[h.index()]).collect();
            let n = labels.len();
            let prevalence = labels.iter().map(|&v| v as f64).sum::<f64>() / n.max(1) as f64;
            let accuracy = bootstrap_ci(&scores, &labels, Metric::Accuracy, b, seed)?;
            let auc = match bootstrap_ci(&scores, &labels, Metric::Auc, b, seed) {
                Ok(i) => Some(i),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
            out.push(HorizonMetrics { head: head.head.clone(), horizon: h, n, prevalence, accuracy, auc });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert_eq, prop_assume, proptest};

    /// Direct O(n^2) pair count; the independent reference for `auc`.
    fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.7, 0.1], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0.9, 0.1], &[1, 0], 0.5), 1.0);
        assert_eq!(accuracy(&[0.4, 0.6], &[1, 0], 0.5), 0.0);
        assert_eq!(accuracy(&[0.9, 0.4, 0.4, 0.6], &[1, 1, 0, 0], 0.5), 0.5);
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(data in prop::collection::vec((0u8..6, any::<bool>()), 2..60)) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 5.0).collect();
            let labels: Vec<u8> = data.iter().map(|(_, l)| u8::from(*l)).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            prop_assert_eq!(auc(&scores, &labels).unwrap(), pair_count_auc(&scores, &labels));
        }

        #[test]
        fn auc_is_invariant_under_monotone_maps(data in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..60)) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s).collect();
            let labels: Vec<u8> = data.iter().map(|(_, l)| u8::from(*l)).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let mapped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 3.0).collect();
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&mapped, &labels).unwrap());
        }
    }

    #[test]
    fn bootstrap_of_a_perfect_classifier_has_zero_width() {
        let scores: Vec<f64> = (0..100).map(|i| if i < 50 { 1.0 } else { 0.0 }).collect();
        let labels: Vec<u8> = (0..100).map(|i| u8::from(i < 50)).collect();
        let ci = bootstrap_ci(&scores, &labels, Metric::Auc, 1000, 3).unwrap();
        assert_eq!((ci.point, ci.lo, ci.hi), (1.0, 1.0, 1.0));
    }

    #[test]
    fn bootstrap_is_seed_deterministic_and_brackets_the_point() {
        let scores: Vec<f64> = (0..80).map(|i| ((i * 37) % 80) as f64 / 80.0).collect();
        let labels: Vec<u8> = (0..80).map(|i| u8::from((i * 37) % 80 > 30 + i % 7)).collect();
        let a = bootstrap_ci(&scores, &labels, Metric::Auc, 500, 11).unwrap();
        let b = bootstrap_ci(&scores, &labels, Metric::Auc, 500, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.lo <= a.point && a.point <= a.hi);
    }

    #[test]
    fn bootstrap_drops_hopeless_replicates() {
        // one positive in 40: many resamples miss it
        let scores: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let labels: Vec<u8> = (0..40).map(|i| u8::from(i == 39)).collect();
        let ci = bootstrap_ci(&scores, &labels, Metric::Auc, 300, 5).unwrap();
        assert_eq!(ci.point, 1.0);
        assert!(ci.lo <= ci.hi);
    }

    #[test]
    fn subgroups_aggregate_and_flag_single_class_levels() {
        let scores = [0.9, 0.2, 0.7, 0.4, 0.6, 0.1];
        let labels = [1, 0, 1, 0, 1, 1];
        let one: Vec<String> = vec!["all".into(); 6];
        let rows = subgroup_report(&scores, &labels, &one);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].auc.unwrap(), auc(&scores, &labels).unwrap());
        assert_eq!(rows[0].accuracy, accuracy(&scores, &labels, 0.5));

        let groups: Vec<String> = ["a", "a", "b", "b", "c", "c"].iter().map(|s| s.to_string()).collect();
        let rows = subgroup_report(&scores, &labels, &groups);
        assert_eq!(rows[0].auc, Some(1.0));
        assert_eq!(rows[0].auc, rows[1].auc);
        assert_eq!(rows[2].auc, None);
        assert_eq!(subgroup_auc_gap(&rows), Some(0.0));
    }

    #[test]
    fn saliency_of_constant_model_is_zero_and_single_cell_is_full_mask() {
        let img = Image { side: 16, data: (0..256).map(|i| (i % 7) as f32 / 7.0).collect() };
        let map = occlusion_saliency(|_| 0.3, &img, 4, 4, 0.0).unwrap();
        assert_eq!((map.rows, map.cols), (4, 4));
        assert!(map.cells.iter().all(|&v| v == 0.0));

        let mean = |im: &Image| im.data.iter().map(|&v| v as f64).sum::<f64>() / 256.0;
        let map = occlusion_saliency(mean, &img, 16, 16, 0.0).unwrap();
        assert_eq!(map.cells.len(), 1);
        assert_eq!(map.cells[0], mean(&img) - 0.0);
        assert!(occlusion_saliency(mean, &img, 17, 1, 0.0).is_err());
    }

    #[test]
    fn probe_detects_leak_and_ignores_noise() {
        let n = 2000;
        let mut rng = stream_rng(1, 2, 3);
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen::<bool>())).collect();
        let leak: Vec<Vec<f64>> = labels.iter().map(|&l| vec![l as f64, rng.gen::<f64>()]).collect();
        assert!(probe_confounder(&leak, &labels, 0).unwrap() >= 0.99);
        let noise: Vec<Vec<f64>> = (0..n).map(|_| (0..8).map(|_| rng.gen::<f64>()).collect()).collect();
        let a = probe_confounder(&noise, &labels, 0).unwrap();
        assert!((0.45..=0.55).contains(&a), "{a}");
        assert_eq!(a, probe_confounder(&noise, &labels, 0).unwrap());
    }
}
