//! Evaluation: cosine-similarity AUC over labeled pairs, Frobenius error
//! reports against simulated ground truth, and threshold grid search.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::catalog::{FeatureCatalog, Site, SiteMatrix};
use crate::error::{Error, Result};
use crate::pipeline::{self, EmbeddingSet, PipelineConfig, SiteWeights};

/// One labeled feature pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairLabel {
    pub id_a: String,
    pub id_b: String,
    pub positive: bool,
    /// same-group | cross-group | feature-effect | target-specific | none
    pub category: String,
    /// freq | rare
    pub freq_tag: String,
    /// Tr | NTr
    pub transfer_tag: String,
    /// tune | eval
    pub split: String,
}

/// A labeled pair collection with no duplicate unordered pairs.
#[derive(Debug, Clone, Default)]
pub struct PairLabelSet {
    pub pairs: Vec<PairLabel>,
}

impl PairLabelSet {
    pub fn new(pairs: Vec<PairLabel>) -> Result<PairLabelSet> {
        let mut seen = BTreeSet::new();
        for p in &pairs {
            if p.id_a == p.id_b {
                return Err(Error::Validation(format!("self pair `{}`", p.id_a)));
            }
            let key = if p.id_a <= p.id_b {
                (p.id_a.clone(), p.id_b.clone())
            } else {
                (p.id_b.clone(), p.id_a.clone())
            };
            if !seen.insert(key) {
                return Err(Error::Validation(format!(
                    "duplicate pair ({}, {})",
                    p.id_a, p.id_b
                )));
            }
            if !["tune", "eval"].contains(&p.split.as_str()) {
                return Err(Error::Validation(format!(
                    "split must be tune or eval, got `{}`",
                    p.split
                )));
            }
        }
        Ok(PairLabelSet { pairs })
    }

    pub fn validate_against(&self, catalog: &FeatureCatalog) -> Result<()> {
        for p in &self.pairs {
            for id in [&p.id_a, &p.id_b] {
                if catalog.lookup(id).is_none() {
                    return Err(Error::Validation(format!(
                        "pair endpoint `{id}` not in the catalog"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("id_a,id_b,label,category,freq_tag,transfer_tag,split\n");
        for p in &self.pairs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                p.id_a,
                p.id_b,
                if p.positive { "pos" } else { "neg" },
                p.category,
                p.freq_tag,
                p.transfer_tag,
                p.split
            ));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<PairLabelSet> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with("id_a")) {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 7 {
                return Err(Error::Validation(format!(
                    "labels line {} has {} columns, expected 7",
                    lineno + 1,
                    cols.len()
                )));
            }
            let positive = match cols[2] {
                "pos" => true,
                "neg" => false,
                other => {
                    return Err(Error::Validation(format!(
                        "labels line {}: label `{other}` is not pos/neg",
                        lineno + 1
                    )))
                }
            };
            pairs.push(PairLabel {
                id_a: cols[0].to_string(),
                id_b: cols[1].to_string(),
                positive,
                category: cols[3].to_string(),
                freq_tag: cols[4].to_string(),
                transfer_tag: cols[5].to_string(),
                split: cols[6].to_string(),
            });
        }
        PairLabelSet::new(pairs)
    }
}

/// Mann–Whitney AUC: the fraction of (positive, negative) score pairs where
/// the positive wins; ties count one half.
pub fn auc(pos_scores: &[f64], neg_scores: &[f64]) -> Result<f64> {
    if pos_scores.is_empty() || neg_scores.is_empty() {
        return Err(Error::Validation(format!(
            "AUC needs both classes nonempty: {} positives, {} negatives",
            pos_scores.len(),
            neg_scores.len()
        )));
    }
    // Midrank computation over the combined sample.
    let mut all: Vec<(f64, bool)> = pos_scores
        .iter()
        .map(|&s| (s, true))
        .chain(neg_scores.iter().map(|&s| (s, false)))
        .collect();
    if all.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::Numerical("NaN score in AUC input".into()));
    }
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("no NaN"));
    let n = all.len();
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && all[j].0 == all[i].0 {
            j += 1;
        }
        // Tied block [i, j): midrank of 1-based ranks.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let n_pos = pos_scores.len() as f64;
    let n_neg = neg_scores.len() as f64;
    Ok((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Cosine scores per labeled pair at one site.
#[derive(Debug, Clone)]
pub struct PairScores {
    /// One entry per pair in the label set; None if skipped.
    pub scores: Vec<Option<f64>>,
    pub skipped_zero_norm: usize,
    pub skipped_missing: usize,
}

pub fn score_pairs(
    emb: &EmbeddingSet,
    site: Site,
    labels: &PairLabelSet,
) -> Result<PairScores> {
    let mut scores = Vec::with_capacity(labels.pairs.len());
    let mut skipped_zero_norm = 0;
    let mut skipped_missing = 0;
    for p in &labels.pairs {
        let (u, v) = match (emb.get(site, &p.id_a), emb.get(site, &p.id_b)) {
            (Some(u), Some(v)) => (u, v),
            _ => {
                skipped_missing += 1;
                scores.push(None);
                continue;
            }
        };
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu == 0.0 || nv == 0.0 {
            skipped_zero_norm += 1;
            scores.push(None);
            continue;
        }
        let dot: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        scores.push(Some(dot / (nu * nv)));
    }
    Ok(PairScores {
        scores,
        skipped_zero_norm,
        skipped_missing,
    })
}

/// Frobenius reconstruction errors on the target site: overall, rare
/// submatrix, and frequent submatrix, each divided by its feature count.
pub fn frobenius_report(
    emb: &EmbeddingSet,
    catalog: &FeatureCatalog,
    m2: &Array2<f64>,
    rare: &BTreeSet<usize>,
) -> Result<(f64, f64, f64)> {
    let order = catalog.site_order(Site::Two);
    let n2 = order.len();
    if m2.nrows() != n2 || m2.ncols() != n2 {
        return Err(Error::Dim(format!(
            "signal matrix is {}×{}, expected {n2}×{n2}",
            m2.nrows(),
            m2.ncols()
        )));
    }
    let x2 = emb.to_matrix(catalog, Site::Two)?;
    let resid = m2 - &x2.dot(&x2.t());
    let rare_pos: Vec<usize> = (0..n2).filter(|&p| rare.contains(&order[p])).collect();
    let freq_pos: Vec<usize> = (0..n2).filter(|&p| !rare.contains(&order[p])).collect();
    let sub_norm = |pos: &[usize]| -> f64 {
        let mut s = 0.0;
        for &a in pos {
            for &b in pos {
                s += resid[[a, b]] * resid[[a, b]];
            }
        }
        s.sqrt()
    };
    let f_err = resid.iter().map(|v| v * v).sum::<f64>().sqrt() / n2 as f64;
    let f_rare = if rare_pos.is_empty() {
        0.0
    } else {
        sub_norm(&rare_pos) / rare_pos.len() as f64
    };
    let f_freq = if freq_pos.is_empty() {
        0.0
    } else {
        sub_norm(&freq_pos) / freq_pos.len() as f64
    };
    Ok((f_err, f_rare, f_freq))
}

/// Evaluation summary serialized with fixed key names.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc_freq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc_rare: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc_freq_tr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc_freq_ntr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc_rare_tr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc_rare_ntr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_err: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_rare_err: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_freq_err: Option<f64>,
    /// Scored pair counts per (label, tag) bucket on the evaluation split.
    pub counts: BTreeMap<String, usize>,
    pub skipped_pairs: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

fn auc_for<F: Fn(&PairLabel) -> bool>(
    labels: &PairLabelSet,
    scores: &PairScores,
    filter: F,
) -> Option<f64> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (p, s) in labels.pairs.iter().zip(scores.scores.iter()) {
        if let Some(s) = s {
            if filter(p) {
                if p.positive {
                    pos.push(*s);
                } else {
                    neg.push(*s);
                }
            }
        }
    }
    auc(&pos, &neg).ok()
}

/// Scores the evaluation split of `labels` with target-site cosines and
/// assembles the report; Frobenius metrics are added when truth is given.
pub fn evaluate_embeddings(
    emb: &EmbeddingSet,
    catalog: &FeatureCatalog,
    labels: &PairLabelSet,
    split: &str,
    truth: Option<(&Array2<f64>, &BTreeSet<usize>)>,
) -> Result<EvalReport> {
    labels.validate_against(catalog)?;
    let scores = score_pairs(emb, Site::Two, labels)?;
    let on_split = |p: &PairLabel| p.split == split;
    let overall = {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (p, s) in labels.pairs.iter().zip(scores.scores.iter()) {
            if let Some(s) = s {
                if on_split(p) {
                    if p.positive {
                        pos.push(*s);
                    } else {
                        neg.push(*s);
                    }
                }
            }
        }
        auc(&pos, &neg).map_err(|e| {
            Error::Validation(format!("overall AUC on split `{split}`: {e}"))
        })?
    };
    let tagged = |freq: &'static str, tr: Option<&'static str>| {
        auc_for(labels, &scores, |p| {
            on_split(p) && p.freq_tag == freq && tr.map_or(true, |t| p.transfer_tag == t)
        })
    };
    let mut counts = BTreeMap::new();
    for (p, s) in labels.pairs.iter().zip(scores.scores.iter()) {
        if s.is_some() && on_split(p) {
            let label = if p.positive { "pos" } else { "neg" };
            *counts.entry(format!("{label}:{}", p.category)).or_insert(0) += 1;
            *counts
                .entry(format!("{label}:{}:{}", p.freq_tag, p.transfer_tag))
                .or_insert(0) += 1;
        }
    }
    let mut notes = Vec::new();
    if scores.skipped_zero_norm > 0 {
        notes.push(format!(
            "{} pairs skipped for zero-norm embeddings",
            scores.skipped_zero_norm
        ));
    }
    if scores.skipped_missing > 0 {
        notes.push(format!(
            "{} pairs skipped for missing embeddings",
            scores.skipped_missing
        ));
    }
    let (f_err, f_rare_err, f_freq_err) = match truth {
        Some((m2, rare)) => {
            let (a, b, c) = frobenius_report(emb, catalog, m2, rare)?;
            (Some(a), Some(b), Some(c))
        }
        None => (None, None, None),
    };
    Ok(EvalReport {
        auc: overall,
        auc_freq: tagged("freq", None),
        auc_rare: tagged("rare", None),
        auc_freq_tr: tagged("freq", Some("Tr")),
        auc_freq_ntr: tagged("freq", Some("NTr")),
        auc_rare_tr: tagged("rare", Some("Tr")),
        auc_rare_ntr: tagged("rare", Some("NTr")),
        f_err,
        f_rare_err,
        f_freq_err,
        counts,
        skipped_pairs: scores.skipped_zero_norm + scores.skipped_missing,
        notes,
    })
}

/// Candidate thresholds for the grid search.
#[derive(Debug, Clone)]
pub struct ThresholdGrid {
    pub lambdas: Vec<f64>,
    pub mus: Vec<f64>,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Ten log-spaced values across the [5th, 99.5th] percentile range of the
/// observed statistics, plus 0 and ∞ so the no-transfer and all-transfer
/// regimes are always reachable.
fn grid_from_stats(stats: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = stats.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mut grid = vec![0.0];
    if !sorted.is_empty() {
        let hi = percentile(&sorted, 99.5);
        let lo = percentile(&sorted, 5.0);
        if hi > 0.0 {
            let lo = if lo > 0.0 { lo } else { hi * 1e-6 };
            for t in 0..10 {
                let f = t as f64 / 9.0;
                let v = (lo.ln() * (1.0 - f) + hi.ln() * f).exp();
                grid.push(v);
            }
        }
    }
    grid.push(f64::INFINITY);
    grid.dedup_by(|a, b| a == b);
    grid
}

/// Builds the default data-driven grid from one preparation pass.
pub fn default_grid(
    s1: &SiteMatrix,
    s2: &SiteMatrix,
    catalog: &FeatureCatalog,
    rank: usize,
    site_weights: SiteWeights,
) -> Result<ThresholdGrid> {
    let config = PipelineConfig {
        rank,
        lambda: f64::INFINITY,
        mu: f64::INFINITY,
        site_weights,
    };
    let prep = pipeline::prepare(s1, s2, catalog, &config)?;
    let lambda_stats: Vec<f64> = prep.lambda_stats(catalog).values().copied().collect();
    // Merge statistics from the all-transfer reference classification.
    let (_, _, diag) = pipeline::run_from_prep(&prep, catalog, f64::INFINITY, f64::INFINITY)?;
    let mu_stats: Vec<f64> = diag.mu_stats.values().copied().collect();
    Ok(ThresholdGrid {
        lambdas: grid_from_stats(&lambda_stats),
        mus: grid_from_stats(&mu_stats),
    })
}

/// Grid search over (λ, μ): fits every grid point once and keeps the pair
/// maximizing overall AUC on the tuning split; ties break toward smaller λ,
/// then smaller μ. Failing grid points are skipped.
pub fn tune_thresholds(
    s1: &SiteMatrix,
    s2: &SiteMatrix,
    catalog: &FeatureCatalog,
    rank: usize,
    site_weights: SiteWeights,
    grid: Option<ThresholdGrid>,
    labels: &PairLabelSet,
) -> Result<(f64, f64)> {
    labels.validate_against(catalog)?;
    if !labels.pairs.iter().any(|p| p.split == "tune") {
        return Err(Error::Validation("empty tuning split".into()));
    }
    let grid = match grid {
        Some(g) => g,
        None => default_grid(s1, s2, catalog, rank, site_weights)?,
    };
    if grid.lambdas.is_empty() || grid.mus.is_empty() {
        return Err(Error::Config("empty threshold grid".into()));
    }
    let config = PipelineConfig {
        rank,
        lambda: f64::INFINITY,
        mu: f64::INFINITY,
        site_weights,
    };
    let prep = pipeline::prepare(s1, s2, catalog, &config)?;
    let mut best: Option<(f64, f64, f64)> = None; // (auc, lambda, mu)
    let mut failures: Vec<String> = Vec::new();
    let mut lambdas = grid.lambdas.clone();
    let mut mus = grid.mus.clone();
    lambdas.sort_by(|a, b| a.partial_cmp(b).expect("valid lambda"));
    mus.sort_by(|a, b| a.partial_cmp(b).expect("valid mu"));
    for &lambda in &lambdas {
        for &mu in &mus {
            let fitted = pipeline::run_from_prep(&prep, catalog, lambda, mu)
                .and_then(|(emb, _, _)| {
                    let scores = score_pairs(&emb, Site::Two, labels)?;
                    let mut pos = Vec::new();
                    let mut neg = Vec::new();
                    for (p, s) in labels.pairs.iter().zip(scores.scores.iter()) {
                        if let Some(s) = s {
                            if p.split == "tune" {
                                if p.positive {
                                    pos.push(*s);
                                } else {
                                    neg.push(*s);
                                }
                            }
                        }
                    }
                    auc(&pos, &neg)
                });
            match fitted {
                Ok(a) => {
                    // Ascending iteration order makes strict improvement the
                    // smaller-λ-then-smaller-μ tie break.
                    if best.map_or(true, |(b, _, _)| a > b) {
                        best = Some((a, lambda, mu));
                    }
                }
                Err(e) => failures.push(format!("λ={lambda}, μ={mu}: {e}")),
            }
        }
    }
    match best {
        Some((_, lambda, mu)) => Ok((lambda, mu)),
        None => Err(Error::Numerical(format!(
            "every grid point failed: {}",
            failures.join("; ")
        ))),
    }
}
