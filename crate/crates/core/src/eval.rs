//! Verification (ROC, TAR@FAR), identification (CMC), retrieval (mAP) and the
//! attribute-vs-angle rank correlation.
//!
//! Scores are cosine similarities: higher means more alike, a pair is accepted when its score is
//! `>=` the threshold. Rankings sort by descending similarity and break ties by lower gallery index.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::attributes::{attribute_discrepancy, AttributeTable};
use crate::data::{make_verification_pairs, Dataset, Pair};
use crate::error::{Error, Result};
use crate::model::{ClassifierHead, Model};
use crate::numerics::{cosine_and_angle, cosine_similarity, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_far_levels")]
    pub far_levels: Vec<f64>,
    #[serde(default = "default_max_rank")]
    pub max_rank: usize,
    #[serde(default = "default_num_pairs")]
    pub num_pairs: usize,
    #[serde(default)]
    pub pair_seed: u64,
}

fn default_far_levels() -> Vec<f64> {
    vec![0.1, 0.01, 0.001]
}

fn default_max_rank() -> usize {
    10
}

fn default_num_pairs() -> usize {
    6000
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            far_levels: default_far_levels(),
            max_rank: default_max_rank(),
            num_pairs: default_num_pairs(),
            pair_seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.far_levels.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::InvalidConfig("far_levels must lie in [0, 1]".into()));
        }
        if self.max_rank == 0 {
            return Err(Error::InvalidConfig("max_rank must be >= 1".into()));
        }
        if self.num_pairs < 2 {
            return Err(Error::InvalidConfig("num_pairs must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub far: f64,
    pub tar: f64,
    /// `None` for the origin (nothing accepted).
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub far_level: f64,
    pub tar: f64,
    /// Empirical FAR of the chosen operating point.
    pub far: f64,
    pub threshold: Option<f64>,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub roc: Vec<RocPoint>,
    pub auc: f64,
    pub tar_at_far: Vec<TarAtFar>,
    pub best_accuracy: f64,
    pub best_threshold: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmcReport {
    /// `cmc[k - 1]` is the rank-k accuracy.
    pub cmc: Vec<f64>,
    pub evaluated: usize,
    /// Probes whose identity has no gallery entry.
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    pub evaluated: usize,
    pub excluded: usize,
}

pub fn embed_all(model: &Model, ds: &Dataset) -> Result<Matrix> {
    if ds.input_dim() != model.encoder.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.encoder.input_dim(),
            actual: ds.input_dim(),
        });
    }
    Ok(model.encoder.encode_batch(&ds.features)?.0)
}

/// Verification scores for labelled pairs: `(score, same)`.
pub fn pair_scores(embeddings: &Matrix, pairs: &[Pair]) -> Result<Vec<(f64, bool)>> {
    pairs
        .iter()
        .map(|p| {
            if p.a >= embeddings.rows() || p.b >= embeddings.rows() {
                return Err(Error::DimensionMismatch {
                    expected: embeddings.rows(),
                    actual: p.a.max(p.b) + 1,
                });
            }
            Ok((cosine_similarity(embeddings.row(p.a), embeddings.row(p.b)), p.same))
        })
        .collect()
}

pub fn verification_eval(embeddings: &Matrix, pairs: &[Pair], far_levels: &[f64]) -> Result<VerificationReport> {
    verification_from_scores(&pair_scores(embeddings, pairs)?, far_levels)
}

/// ROC over every distinct score threshold, TAR at the requested FAR levels, best accuracy.
pub fn verification_from_scores(scores: &[(f64, bool)], far_levels: &[f64]) -> Result<VerificationReport> {
    let positives = scores.iter().filter(|s| s.1).count();
    let negatives = scores.len() - positives;
    if positives == 0 {
        return Err(Error::InsufficientSamples("no positive pairs".into()));
    }
    if negatives == 0 {
        return Err(Error::InsufficientSamples("no negative pairs".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let (np, nn) = (positives as f64, negatives as f64);
    let mut roc = vec![RocPoint {
        far: 0.0,
        tar: 0.0,
        threshold: None,
    }];
    let mut best_accuracy = nn / (np + nn);
    let mut best_threshold = None;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        roc.push(RocPoint {
            far: fp as f64 / nn,
            tar: tp as f64 / np,
            threshold: Some(t),
        });
        let acc = (tp + negatives - fp) as f64 / (np + nn);
        if acc > best_accuracy {
            best_accuracy = acc;
            best_threshold = Some(t);
        }
    }

    let auc = roc
        .windows(2)
        .map(|w| (w[1].far - w[0].far) * (w[1].tar + w[0].tar) / 2.0)
        .sum();

    let tar_at_far = far_levels
        .iter()
        .map(|&level| {
            // Points are ordered by increasing FAR; take the last one within the level.
            let point = roc.iter().rev().find(|p| p.far <= level).copied().unwrap_or(roc[0]);
            let warning = (level < 1.0 / nn).then(|| {
                format!(
                    "FAR level {level:e} is below the resolution 1/{negatives} of the negative pairs; \
                     reporting TAR at FAR = {}",
                    point.far
                )
            });
            TarAtFar {
                far_level: level,
                tar: point.tar,
                far: point.far,
                threshold: point.threshold,
                warning,
            }
        })
        .collect();

    Ok(VerificationReport {
        roc,
        auc,
        tar_at_far,
        best_accuracy,
        best_threshold,
        positives,
        negatives,
    })
}

/// Gallery indices sorted by descending similarity, ties by lower index.
fn ranking(probe: &[f64], gallery: &Matrix) -> Vec<usize> {
    let sims: Vec<f64> = (0..gallery.rows())
        .map(|g| cosine_similarity(probe, gallery.row(g)))
        .collect();
    let mut order: Vec<usize> = (0..gallery.rows()).collect();
    order.sort_by(|&a, &b| match sims[b].total_cmp(&sims[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

fn check_gallery(probes: &Matrix, probe_labels: &[usize], gallery: &Matrix, gallery_labels: &[usize]) -> Result<()> {
    if gallery.rows() == 0 {
        return Err(Error::InsufficientSamples("empty gallery".into()));
    }
    if probes.rows() != probe_labels.len() || gallery.rows() != gallery_labels.len() {
        return Err(Error::DimensionMismatch {
            expected: probes.rows(),
            actual: probe_labels.len(),
        });
    }
    if probes.cols() != gallery.cols() {
        return Err(Error::DimensionMismatch {
            expected: gallery.cols(),
            actual: probes.cols(),
        });
    }
    Ok(())
}

pub fn identification_eval(
    probes: &Matrix,
    probe_labels: &[usize],
    gallery: &Matrix,
    gallery_labels: &[usize],
    max_rank: usize,
) -> Result<CmcReport> {
    check_gallery(probes, probe_labels, gallery, gallery_labels)?;
    if max_rank == 0 {
        return Err(Error::InvalidConfig("max_rank must be >= 1".into()));
    }
    let mut hits = vec![0usize; max_rank];
    let mut evaluated = 0;
    let mut excluded = 0;
    for p in 0..probes.rows() {
        let order = ranking(probes.row(p), gallery);
        match order.iter().position(|&g| gallery_labels[g] == probe_labels[p]) {
            None => excluded += 1,
            Some(pos) => {
                evaluated += 1;
                for h in hits.iter_mut().skip(pos) {
                    *h += 1;
                }
            }
        }
    }
    let denom = evaluated.max(1) as f64;
    Ok(CmcReport {
        cmc: hits.iter().map(|&h| h as f64 / denom).collect(),
        evaluated,
        excluded,
    })
}

/// Mean over probes of average precision (precision at each correct-match rank, averaged).
pub fn mean_average_precision(
    probes: &Matrix,
    probe_labels: &[usize],
    gallery: &Matrix,
    gallery_labels: &[usize],
) -> Result<MapReport> {
    check_gallery(probes, probe_labels, gallery, gallery_labels)?;
    let mut total = 0.0;
    let mut evaluated = 0;
    let mut excluded = 0;
    for p in 0..probes.rows() {
        let order = ranking(probes.row(p), gallery);
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        for (rank, &g) in order.iter().enumerate() {
            if gallery_labels[g] == probe_labels[p] {
                found += 1;
                precision_sum += found as f64 / (rank + 1) as f64;
            }
        }
        if found == 0 {
            excluded += 1;
        } else {
            evaluated += 1;
            total += precision_sum / found as f64;
        }
    }
    Ok(MapReport {
        map: if evaluated == 0 { 0.0 } else { total / evaluated as f64 },
        evaluated,
        excluded,
    })
}

/// Ranks starting at 1, ties receive the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's ρ as the Pearson correlation of average ranks. `None` if either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

/// Pairwise attribute discrepancies and angles between unit class weights, over all `j < y`.
pub fn discrepancy_angle_pairs(head: &ClassifierHead, table: &AttributeTable) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = head.classes();
    if table.class_count() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            actual: table.class_count(),
        });
    }
    let w = head.raw().transpose();
    let mut disc = Vec::with_capacity(m * (m - 1) / 2);
    let mut angles = Vec::with_capacity(m * (m - 1) / 2);
    for j in 0..m {
        for y in j + 1..m {
            disc.push(attribute_discrepancy(table.row(j), table.row(y))?);
            angles.push(cosine_and_angle(w.row(j), w.row(y))?.1);
        }
    }
    Ok((disc, angles))
}

pub fn angle_attribute_correlation(head: &ClassifierHead, table: &AttributeTable) -> Result<f64> {
    if head.classes() < 3 {
        return Err(Error::InvalidConfig("need at least 3 classes for a rank correlation".into()));
    }
    let (disc, angles) = discrepancy_angle_pairs(head, table)?;
    if disc.iter().all(|d| *d == disc[0]) {
        return Err(Error::DegenerateAttributeTable);
    }
    spearman(&disc, &angles).ok_or(Error::DegenerateVector)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub verification: VerificationReport,
    pub cmc: CmcReport,
    pub rank1: f64,
    pub map: MapReport,
    pub spearman: Option<f64>,
    pub warnings: Vec<String>,
}

/// Standard protocol: verification pairs drawn from `test`; identification and retrieval with
/// `test` as probes against `train` as gallery; correlation from the classifier head.
pub fn evaluate_model(model: &Model, train: &Dataset, test: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let test_emb = embed_all(model, test)?;
    let train_emb = embed_all(model, train)?;
    let pairs = make_verification_pairs(test, cfg.num_pairs, cfg.pair_seed)?;
    let verification = verification_eval(&test_emb, &pairs, &cfg.far_levels)?;
    let cmc = identification_eval(&test_emb, &test.labels, &train_emb, &train.labels, cfg.max_rank)?;
    let map = mean_average_precision(&test_emb, &test.labels, &train_emb, &train.labels)?;
    let mut warnings: Vec<String> = verification
        .tar_at_far
        .iter()
        .filter_map(|t| t.warning.clone())
        .collect();
    if cmc.excluded > 0 {
        warnings.push(format!("{} probes have no gallery match and were excluded", cmc.excluded));
    }
    let spearman = match &train.attributes {
        Some(table) if model.classes() >= 3 => match angle_attribute_correlation(&model.head, table) {
            Ok(rho) => Some(rho),
            Err(e) => {
                warnings.push(format!("attribute correlation unavailable: {e}"));
                None
            }
        },
        _ => None,
    };
    Ok(EvalReport {
        rank1: cmc.cmc[0],
        verification,
        cmc,
        map,
        spearman,
        warnings,
    })
}

/// `far,tar` rows of the ROC.
pub fn roc_csv(report: &VerificationReport) -> String {
    let mut out = String::from("far,tar\n");
    for p in &report.roc {
        out.push_str(&format!("{},{}\n", p.far, p.tar));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        let emb = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let pairs = [
            Pair { a: 0, b: 1, same: true },
            Pair { a: 2, b: 3, same: true },
            Pair { a: 0, b: 2, same: false },
            Pair { a: 1, b: 3, same: false },
        ];
        let r = verification_eval(&emb, &pairs, &[0.0]).unwrap();
        assert_eq!(r.tar_at_far[0].tar, 1.0);
        assert_eq!(r.best_accuracy, 1.0);
        assert_eq!(r.auc, 1.0);
    }

    #[test]
    fn verification_requires_both_classes() {
        let s = [(0.5, true), (0.2, true)];
        assert!(verification_from_scores(&s, &[0.1]).is_err());
        let s = [(0.5, false)];
        assert!(verification_from_scores(&s, &[0.1]).is_err());
    }

    #[test]
    fn far_below_resolution_warns() {
        let s = [(0.9, true), (0.8, false), (0.7, true), (0.1, false)];
        let r = verification_from_scores(&s, &[1e-6, 0.5]).unwrap();
        assert!(r.tar_at_far[0].warning.is_some());
        assert_eq!(r.tar_at_far[0].far, 0.0);
        assert_eq!(r.tar_at_far[0].tar, 0.5);
        assert!(r.tar_at_far[1].warning.is_none());
        assert_eq!(r.tar_at_far[1].tar, 1.0);
    }

    #[test]
    fn cmc_simple_cases() {
        let gallery = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let probes = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let r = identification_eval(&probes, &[7], &gallery, &[3, 7], 2).unwrap();
        assert_eq!(r.cmc, vec![1.0, 1.0]);

        let single = Matrix::from_rows(&[vec![0.3, 0.4]]).unwrap();
        let r = identification_eval(&probes, &[1], &single, &[1], 1).unwrap();
        assert_eq!(r.cmc, vec![1.0]);

        let r = identification_eval(&probes, &[9], &gallery, &[3, 7], 2).unwrap();
        assert_eq!((r.evaluated, r.excluded), (0, 1));
    }

    #[test]
    fn ap_simple_cases() {
        let gallery = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let probes = Matrix::from_rows(&[vec![1.0, 0.1]]).unwrap();
        let r = mean_average_precision(&probes, &[0], &gallery, &[0, 1]).unwrap();
        assert_eq!(r.map, 1.0);
        let r = mean_average_precision(&probes, &[1], &gallery, &[0, 1]).unwrap();
        assert_eq!(r.map, 0.5);
    }

    #[test]
    fn ties_break_by_lower_index() {
        let gallery = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let probes = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let r = identification_eval(&probes, &[1], &gallery, &[0, 1], 2).unwrap();
        assert_eq!(r.cmc, vec![0.0, 1.0]);
    }

    #[test]
    fn spearman_extremes_and_ties() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[0.1, 0.5, 0.9]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[0.9, 0.5, 0.1]), Some(-1.0));
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(spearman(&[1.0, 1.0], &[0.0, 1.0]), None);
    }

    #[test]
    fn degenerate_attribute_table() {
        let head = ClassifierHead::from_raw(Matrix::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]]).unwrap());
        // every pair differs in exactly one attribute
        let table = AttributeTable::new(vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(angle_attribute_correlation(&head, &table).is_ok());
        let flat = AttributeTable::new(vec![vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let err = angle_attribute_correlation(&head, &flat).unwrap_err();
        assert_eq!(err.to_string(), "degenerate attribute table: all pairwise discrepancies are equal");
    }
}
