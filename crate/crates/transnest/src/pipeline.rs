//! The TransNEST estimator: per-site initial factorizations, cross-site
//! alignment, consistency and group-merge thresholding, and the refinement
//! solves that produce final embeddings plus the full feature classification.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2};
use ndarray_linalg::{Eigh, UPLO};

use crate::catalog::{FeatureCatalog, Site, SiteMatrix};
use crate::error::{Error, Result};
use crate::numerics::{
    procrustes, truncated_psd_factorization, Factorization, OrthogonalMatrix, SymmetricMatrix,
    least_squares, least_squares_multi,
};

/// Alignment frame an embedding set lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    RawSite1,
    RawSite2,
    AlignedToSite1,
    Refined,
}

impl Frame {
    pub fn as_str(self) -> &'static str {
        match self {
            Frame::RawSite1 => "raw-site-1",
            Frame::RawSite2 => "raw-site-2",
            Frame::AlignedToSite1 => "aligned-to-site-1",
            Frame::Refined => "refined",
        }
    }

    pub fn parse(s: &str) -> Result<Frame> {
        match s {
            "raw-site-1" => Ok(Frame::RawSite1),
            "raw-site-2" => Ok(Frame::RawSite2),
            "aligned-to-site-1" => Ok(Frame::AlignedToSite1),
            "refined" => Ok(Frame::Refined),
            _ => Err(Error::Validation(format!("unknown frame tag `{s}`"))),
        }
    }
}

/// Per-site embeddings keyed by feature id, with per-site frame tags.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub rank: usize,
    pub frame: [Frame; 2],
    pub per_site: [BTreeMap<String, Vec<f64>>; 2],
}

impl EmbeddingSet {
    pub fn new(rank: usize, frame: [Frame; 2]) -> Self {
        EmbeddingSet {
            rank,
            frame,
            per_site: [BTreeMap::new(), BTreeMap::new()],
        }
    }

    pub fn insert(&mut self, site: Site, id: &str, vec: Vec<f64>) -> Result<()> {
        if vec.len() != self.rank {
            return Err(Error::Dim(format!(
                "embedding for `{id}` has length {}, expected rank {}",
                vec.len(),
                self.rank
            )));
        }
        if vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite embedding entry for `{id}` at site {site}"
            )));
        }
        self.per_site[site.index()].insert(id.to_string(), vec);
        Ok(())
    }

    pub fn get(&self, site: Site, id: &str) -> Option<&[f64]> {
        self.per_site[site.index()].get(id).map(|v| v.as_slice())
    }

    /// Checks the presence invariant: a vector exists for a site only if the
    /// feature is present there.
    pub fn validate_against(&self, catalog: &FeatureCatalog) -> Result<()> {
        for site in Site::BOTH {
            for (id, vec) in &self.per_site[site.index()] {
                if vec.len() != self.rank || vec.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!(
                        "bad embedding vector for `{id}` at site {site}"
                    )));
                }
                let idx = catalog
                    .lookup(id)
                    .ok_or_else(|| Error::Validation(format!("unknown feature id `{id}`")))?;
                if !catalog.present(idx, site) {
                    return Err(Error::Validation(format!(
                        "embedding given for `{id}` at absent site {site}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Site-k embeddings as a matrix over the catalog's canonical site order;
    /// every present feature must have a vector.
    pub fn to_matrix(&self, catalog: &FeatureCatalog, site: Site) -> Result<Array2<f64>> {
        let order = catalog.site_order(site);
        let mut m = Array2::zeros((order.len(), self.rank));
        for (row, &idx) in order.iter().enumerate() {
            let id = catalog.id(idx);
            let vec = self.get(site, id).ok_or_else(|| {
                Error::Validation(format!("missing embedding for `{id}` at site {site}"))
            })?;
            for (c, &v) in vec.iter().enumerate() {
                m[[row, c]] = v;
            }
        }
        Ok(m)
    }

    fn from_matrices(
        catalog: &FeatureCatalog,
        rank: usize,
        frame: [Frame; 2],
        x: &[Array2<f64>; 2],
    ) -> EmbeddingSet {
        let mut emb = EmbeddingSet::new(rank, frame);
        for site in Site::BOTH {
            for (row, &idx) in catalog.site_order(site).iter().enumerate() {
                let v: Vec<f64> = x[site.index()].row(row).to_vec();
                emb.per_site[site.index()].insert(catalog.id(idx).to_string(), v);
            }
        }
        emb
    }
}

/// How the convex-combination site weights are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SiteWeights {
    /// Residual-based rule: each site is weighted by the other site's
    /// normalized squared spectral residual.
    Auto,
    /// Explicit positive weights summing to 1.
    Explicit(f64, f64),
}

/// Estimator configuration.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub rank: usize,
    pub lambda: f64,
    pub mu: f64,
    pub site_weights: SiteWeights,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be positive".into()));
        }
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu)] {
            if v.is_nan() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be ≥ 0, got {v}")));
            }
        }
        if let SiteWeights::Explicit(w1, w2) = self.site_weights {
            if !(w1 > 0.0 && w2 > 0.0 && w1.is_finite() && w2.is_finite()) {
                return Err(Error::Config(format!(
                    "site weights must be positive, got ({w1}, {w2})"
                )));
            }
            if (w1 + w2 - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "site weights must sum to 1, got {w1} + {w2} = {}",
                    w1 + w2
                )));
            }
        }
        Ok(())
    }
}

/// Full feature classification produced by the thresholding steps. Feature
/// sets hold canonical catalog indices.
#[derive(Debug, Clone)]
pub struct FeatureClassification {
    pub consistent: BTreeSet<usize>,
    pub divergent: BTreeSet<usize>,
    /// Merge indicator over all features except the divergent ones.
    pub h_hat: BTreeMap<usize, bool>,
    pub anchored: BTreeSet<usize>,
    pub solo: BTreeSet<usize>,
    pub outliers: BTreeSet<usize>,
    /// Disjoint blocks covering `consistent`; block members share one
    /// refined embedding.
    pub partition: Vec<Vec<usize>>,
    pub group_centers: BTreeMap<String, Array1<f64>>,
}

impl FeatureClassification {
    /// Features refined through the shared (cross-site) solves.
    pub fn transfer_set(&self) -> BTreeSet<usize> {
        let mut t = self.consistent.clone();
        t.extend(self.anchored.iter().copied());
        t.extend(self.solo.iter().copied());
        t
    }
}

/// Run-level diagnostics: rotation, weights, per-feature threshold
/// statistics, set sizes, and numerical event notes.
#[derive(Debug, Clone)]
pub struct Diagnostics {
    pub q_hat: OrthogonalMatrix,
    pub site_weights: (f64, f64),
    pub lambda_stats: BTreeMap<String, f64>,
    pub mu_stats: BTreeMap<String, f64>,
    pub set_sizes: BTreeMap<String, usize>,
    pub clipped_initial: [usize; 2],
    pub clipped_refine: usize,
    pub demoted_solo: Vec<String>,
    pub notes: Vec<String>,
}

/// Cached quantities that do not depend on the thresholds: initial
/// factorizations, alignment, site weights, and per-feature cross-site
/// statistics. Reused across threshold grids during tuning.
#[derive(Debug, Clone)]
pub struct PipelinePrep {
    pub rank: usize,
    s: [SymmetricMatrix; 2],
    x_raw: [Array2<f64>; 2],
    x_aligned: [Array2<f64>; 2],
    pub q_hat: OrthogonalMatrix,
    pub site_weights: (f64, f64),
    /// Cross-site consistency statistic per overlap feature (catalog index).
    lambda_stats_idx: Vec<(usize, f64)>,
    pub clipped_initial: [usize; 2],
    pub notes: Vec<String>,
}

impl PipelinePrep {
    pub fn lambda_stats(&self, catalog: &FeatureCatalog) -> BTreeMap<String, f64> {
        self.lambda_stats_idx
            .iter()
            .map(|&(i, v)| (catalog.id(i).to_string(), v))
            .collect()
    }
}

fn position_map(catalog: &FeatureCatalog, site: Site) -> Vec<Option<usize>> {
    let mut pos = vec![None; catalog.n()];
    for (row, &idx) in catalog.site_order(site).iter().enumerate() {
        pos[idx] = Some(row);
    }
    pos
}

fn spectral_norm_sym(a: &Array2<f64>) -> Result<f64> {
    let (vals, _) = a
        .eigh(UPLO::Lower)
        .map_err(|e| Error::Numerical(format!("eigensolver failed on residual: {e}")))?;
    Ok(vals.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Per-site truncated factorizations of the similarity matrices.
pub fn initial_embeddings(
    s1: &SiteMatrix,
    s2: &SiteMatrix,
    r: usize,
) -> Result<(EmbeddingSet, [Factorization; 2])> {
    let n_min = s1.dim().min(s2.dim());
    if r > n_min {
        return Err(Error::Dim(format!(
            "rank {r} exceeds the smaller site dimension {n_min}"
        ))
        .at_stage("initial-embeddings"));
    }
    let f1 = truncated_psd_factorization(&s1.matrix, r).map_err(|e| e.at_stage("initial-embeddings"))?;
    let f2 = truncated_psd_factorization(&s2.matrix, r).map_err(|e| e.at_stage("initial-embeddings"))?;
    let mut emb = EmbeddingSet::new(r, [Frame::RawSite1, Frame::RawSite2]);
    for (sm, f, site) in [(s1, &f1, Site::One), (s2, &f2, Site::Two)] {
        for (row, id) in sm.feature_order.iter().enumerate() {
            emb.insert(site, id, f.x.row(row).to_vec())?;
        }
    }
    Ok((emb, [f1, f2]))
}

/// Rotates site-2 embeddings onto site 1's frame using the overlap features.
pub fn align_sites(
    emb: &EmbeddingSet,
    catalog: &FeatureCatalog,
) -> Result<(EmbeddingSet, OrthogonalMatrix)> {
    if emb.frame != [Frame::RawSite1, Frame::RawSite2] {
        return Err(Error::Validation(format!(
            "alignment expects raw per-site frames, got ({}, {})",
            emb.frame[0].as_str(),
            emb.frame[1].as_str()
        )));
    }
    emb.validate_against(catalog)?;
    let x = [
        emb.to_matrix(catalog, Site::One)?,
        emb.to_matrix(catalog, Site::Two)?,
    ];
    let (aligned, q) = align_core(catalog, emb.rank, &x)?;
    Ok((
        EmbeddingSet::from_matrices(
            catalog,
            emb.rank,
            [Frame::AlignedToSite1, Frame::AlignedToSite1],
            &aligned,
        ),
        q,
    ))
}

fn align_core(
    catalog: &FeatureCatalog,
    rank: usize,
    x: &[Array2<f64>; 2],
) -> Result<([Array2<f64>; 2], OrthogonalMatrix)> {
    let n_o = catalog.n_overlap();
    if n_o < rank {
        return Err(Error::Validation(format!(
            "overlap has {n_o} features, need at least rank {rank} to align"
        ))
        .at_stage("alignment"));
    }
    let pos = [position_map(catalog, Site::One), position_map(catalog, Site::Two)];
    let overlap = catalog.overlap_order();
    let mut xo = [
        Array2::zeros((n_o, rank)),
        Array2::zeros((n_o, rank)),
    ];
    for (row, &idx) in overlap.iter().enumerate() {
        for k in 0..2 {
            xo[k].row_mut(row).assign(&x[k].row(pos[k][idx].unwrap()));
        }
    }
    let q = procrustes(xo[1].view(), xo[0].view()).map_err(|e| {
        Error::Numerical(format!(
            "overlap alignment is degenerate ({n_o} overlap features, rank {rank}): {e}"
        ))
        .at_stage("alignment")
    })?;
    let aligned = [x[0].clone(), x[1].dot(q.as_array())];
    Ok((aligned, q))
}

fn lambda_stats_core(
    catalog: &FeatureCatalog,
    x_aligned: &[Array2<f64>; 2],
) -> Vec<(usize, f64)> {
    let pos = [position_map(catalog, Site::One), position_map(catalog, Site::Two)];
    catalog
        .overlap_order()
        .iter()
        .map(|&idx| {
            let w1 = catalog.weight(idx, Site::One);
            let w2 = catalog.weight(idx, Site::Two);
            let v1 = x_aligned[0].row(pos[0][idx].unwrap());
            let v2 = x_aligned[1].row(pos[1][idx].unwrap());
            let r = v1.len();
            let mut d1 = 0.0;
            let mut d2 = 0.0;
            for c in 0..r {
                let mean = (w1 * v1[c] + w2 * v2[c]) / (w1 + w2);
                d1 += (v1[c] - mean) * (v1[c] - mean);
                d2 += (v2[c] - mean) * (v2[c] - mean);
            }
            let stat = (w1 * (w1 + w2) * d1).max(w2 * (w1 + w2) * d2);
            (idx, stat)
        })
        .collect()
}

/// Splits the overlap into cross-site consistent and divergent features by
/// thresholding the weighted deviation from the weighted mean embedding.
/// Returns the per-feature statistic alongside the two sets.
pub fn classify_cross_site(
    emb_aligned: &EmbeddingSet,
    catalog: &FeatureCatalog,
    lambda: f64,
) -> Result<(BTreeSet<usize>, BTreeSet<usize>, BTreeMap<String, f64>)> {
    if emb_aligned.frame != [Frame::AlignedToSite1, Frame::AlignedToSite1] {
        return Err(Error::Validation(
            "cross-site classification requires the aligned frame".into(),
        ));
    }
    emb_aligned.validate_against(catalog)?;
    let x = [
        emb_aligned.to_matrix(catalog, Site::One)?,
        emb_aligned.to_matrix(catalog, Site::Two)?,
    ];
    let stats = lambda_stats_core(catalog, &x);
    let (cons, div) = split_by_lambda(&stats, lambda);
    let named = stats
        .iter()
        .map(|&(i, v)| (catalog.id(i).to_string(), v))
        .collect();
    Ok((cons, div, named))
}

fn split_by_lambda(stats: &[(usize, f64)], lambda: f64) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let mut cons = BTreeSet::new();
    let mut div = BTreeSet::new();
    for &(idx, stat) in stats {
        if stat <= lambda {
            cons.insert(idx);
        } else {
            div.insert(idx);
        }
    }
    (cons, div)
}

/// Group centers and the merge indicator ĥ. Ungrouped features and members of
/// weightless groups get ĥ = 0; divergent features are excluded throughout.
pub fn group_centers_and_outliers(
    emb_aligned: &EmbeddingSet,
    catalog: &FeatureCatalog,
    divergent: &BTreeSet<usize>,
    mu: f64,
) -> Result<(
    BTreeMap<String, Array1<f64>>,
    BTreeMap<usize, bool>,
    BTreeMap<String, f64>,
    Vec<String>,
)> {
    if emb_aligned.frame != [Frame::AlignedToSite1, Frame::AlignedToSite1] {
        return Err(Error::Validation(
            "group merging requires the aligned frame".into(),
        ));
    }
    emb_aligned.validate_against(catalog)?;
    let x = [
        emb_aligned.to_matrix(catalog, Site::One)?,
        emb_aligned.to_matrix(catalog, Site::Two)?,
    ];
    let (centers, h_hat, mu_stats, notes) =
        centers_core(catalog, emb_aligned.rank, &x, divergent, mu);
    let named_stats = mu_stats
        .into_iter()
        .map(|(i, v)| (catalog.id(i).to_string(), v))
        .collect();
    Ok((centers, h_hat, named_stats, notes))
}

fn centers_core(
    catalog: &FeatureCatalog,
    rank: usize,
    x_aligned: &[Array2<f64>; 2],
    divergent: &BTreeSet<usize>,
    mu: f64,
) -> (
    BTreeMap<String, Array1<f64>>,
    BTreeMap<usize, bool>,
    BTreeMap<usize, f64>,
    Vec<String>,
) {
    let pos = [position_map(catalog, Site::One), position_map(catalog, Site::Two)];
    let mut centers = BTreeMap::new();
    let mut group_weight: BTreeMap<&str, f64> = BTreeMap::new();
    let mut notes = Vec::new();
    for (g, members) in catalog.groups() {
        let mut sum = Array1::<f64>::zeros(rank);
        let mut w_g = 0.0;
        for &i in members {
            if divergent.contains(&i) {
                continue;
            }
            for site in Site::BOTH {
                if let Some(row) = pos[site.index()][i] {
                    let w = catalog.weight(i, site);
                    sum = sum + &x_aligned[site.index()].row(row).mapv(|v| v * w);
                    w_g += w;
                }
            }
        }
        if w_g > 0.0 {
            centers.insert(g.to_string(), sum.mapv(|v| v / w_g));
            group_weight.insert(g, w_g);
        } else {
            notes.push(format!(
                "group `{g}` has zero usable weight; its members are not merged"
            ));
        }
    }
    let mut h_hat = BTreeMap::new();
    let mut mu_stats = BTreeMap::new();
    for i in 0..catalog.n() {
        if divergent.contains(&i) {
            continue;
        }
        let merged = match catalog.group_of(i) {
            Some(g) => match (centers.get(g), group_weight.get(g)) {
                (Some(center), Some(&w_g)) => {
                    let mut stat = 0.0f64;
                    for site in Site::BOTH {
                        if let Some(row) = pos[site.index()][i] {
                            let w = catalog.weight(i, site);
                            let mut d = 0.0;
                            for c in 0..rank {
                                let diff = x_aligned[site.index()][[row, c]] - center[c];
                                d += diff * diff;
                            }
                            stat = stat.max(w * w_g * d);
                        }
                    }
                    mu_stats.insert(i, stat);
                    stat <= mu
                }
                _ => false,
            },
            None => false,
        };
        h_hat.insert(i, merged);
    }
    (centers, h_hat, mu_stats, notes)
}

/// Assembles the feature sets and the consistent-block partition from the
/// two thresholding outcomes.
pub fn derive_feature_sets(
    catalog: &FeatureCatalog,
    consistent: &BTreeSet<usize>,
    divergent: &BTreeSet<usize>,
    h_hat: &BTreeMap<usize, bool>,
    group_centers: &BTreeMap<String, Array1<f64>>,
) -> FeatureClassification {
    let merged = |i: usize| h_hat.get(&i).copied().unwrap_or(false);
    let mut anchored = BTreeSet::new();
    let mut solo = BTreeSet::new();
    let mut outliers: BTreeSet<usize> = divergent.clone();
    for &i in catalog.non_overlap_order() {
        if merged(i) {
            let g = catalog.group_of(i).expect("merged features are grouped");
            let has_anchor = catalog
                .group_members(g)
                .iter()
                .any(|&j| consistent.contains(&j) && merged(j));
            if has_anchor {
                anchored.insert(i);
            } else {
                solo.insert(i);
            }
        } else {
            outliers.insert(i);
        }
    }
    let mut partition: Vec<Vec<usize>> = Vec::new();
    let mut in_block: BTreeSet<usize> = BTreeSet::new();
    for (_, members) in catalog.groups() {
        let block: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&i| consistent.contains(&i) && merged(i))
            .collect();
        if !block.is_empty() {
            in_block.extend(block.iter().copied());
            partition.push(block);
        }
    }
    for &i in consistent {
        if !in_block.contains(&i) {
            partition.push(vec![i]);
        }
    }
    partition.sort_by_key(|b| b[0]);
    FeatureClassification {
        consistent: consistent.clone(),
        divergent: divergent.clone(),
        h_hat: h_hat.clone(),
        anchored,
        solo,
        outliers,
        partition,
        group_centers: group_centers.clone(),
    }
}

/// Residual-based site weights: each site is weighted by the *other* site's
/// normalized squared spectral residual, so the cleaner site gets the larger
/// weight.
pub fn compute_site_weights(
    s1: &SiteMatrix,
    s2: &SiteMatrix,
    emb_initial: &EmbeddingSet,
    catalog: &FeatureCatalog,
) -> Result<((f64, f64), Vec<String>)> {
    let x = [
        emb_initial.to_matrix(catalog, Site::One)?,
        emb_initial.to_matrix(catalog, Site::Two)?,
    ];
    let mut norm_sq = [0.0f64; 2];
    for (k, sm) in [s1, s2].into_iter().enumerate() {
        let resid = sm.matrix.as_array() - &x[k].dot(&x[k].t());
        norm_sq[k] = spectral_norm_sym(&resid)?.powi(2);
    }
    Ok(site_weights_from_residuals(
        [norm_sq[0] / s1.dim() as f64, norm_sq[1] / s2.dim() as f64],
    ))
}

fn site_weights_from_residuals(normalized: [f64; 2]) -> ((f64, f64), Vec<String>) {
    let total = normalized[0] + normalized[1];
    if total <= 0.0 {
        return (
            (0.5, 0.5),
            vec!["both residuals are zero; falling back to equal site weights".into()],
        );
    }
    ((normalized[1] / total, normalized[0] / total), Vec::new())
}

/// Shared refinement of the consistent overlap features: a block-collapsed
/// truncated factorization of the weighted average similarity submatrix.
/// Every feature in a block receives the identical vector, used at both
/// sites. Returns the vectors and the count of clipped eigenvalues.
pub fn refine_consistent(
    s1: &SiteMatrix,
    s2: &SiteMatrix,
    catalog: &FeatureCatalog,
    classification: &FeatureClassification,
    w: (f64, f64),
    r: usize,
) -> Result<(BTreeMap<usize, Array1<f64>>, usize)> {
    refine_consistent_core(&[&s1.matrix, &s2.matrix], catalog, classification, w, r)
}

fn refine_consistent_core(
    s: &[&SymmetricMatrix; 2],
    catalog: &FeatureCatalog,
    classification: &FeatureClassification,
    w: (f64, f64),
    r: usize,
) -> Result<(BTreeMap<usize, Array1<f64>>, usize)> {
    let cons: Vec<usize> = classification.consistent.iter().copied().collect();
    if cons.is_empty() {
        return Ok((BTreeMap::new(), 0));
    }
    let blocks = &classification.partition;
    let l = blocks.len();
    if l < r {
        return Err(Error::Validation(format!(
            "consistent partition has {l} blocks, need at least rank {r}"
        ))
        .at_stage("consistent-refinement"));
    }
    let pos = [position_map(catalog, Site::One), position_map(catalog, Site::Two)];
    let mut block_of = BTreeMap::new();
    for (b, block) in blocks.iter().enumerate() {
        for &i in block {
            block_of.insert(i, b);
        }
    }
    // Weighted average similarity over the consistent features.
    let total_w = w.0 + w.1;
    if !(total_w > 0.0) {
        return Err(Error::Config("site weights sum to zero".into()).at_stage("consistent-refinement"));
    }
    let m = cons.len();
    let mut sbar = Array2::<f64>::zeros((m, m));
    for k in 0..2 {
        let wk = if k == 0 { w.0 } else { w.1 };
        if wk == 0.0 {
            continue;
        }
        let rows: Vec<usize> = cons.iter().map(|&i| pos[k][i].unwrap()).collect();
        let sub = s[k].submatrix(&rows);
        sbar = sbar + &sub.mapv(|v| v * (wk / total_w));
    }
    // Collapse onto blocks: M[a,b] = Σ_{i∈a, j∈b} S̄[i,j], then factorize
    // D^{-1/2} M D^{-1/2} at rank r and expand back through the indicator.
    let d: Vec<f64> = blocks.iter().map(|b| b.len() as f64).collect();
    let mut collapsed = Array2::<f64>::zeros((l, l));
    for (ci, &i) in cons.iter().enumerate() {
        let a = block_of[&i];
        for (cj, &j) in cons.iter().enumerate() {
            let b = block_of[&j];
            collapsed[[a, b]] += sbar[[ci, cj]];
        }
    }
    for a in 0..l {
        for b in 0..l {
            collapsed[[a, b]] /= (d[a] * d[b]).sqrt();
        }
    }
    let fact = truncated_psd_factorization(&SymmetricMatrix::from_exact(collapsed)?, r)
        .map_err(|e| e.at_stage("consistent-refinement"))?;
    let mut refined = BTreeMap::new();
    for (b, block) in blocks.iter().enumerate() {
        let z: Array1<f64> = fact.x.row(b).mapv(|v| v / d[b].sqrt());
        for &i in block {
            refined.insert(i, z.clone());
        }
    }
    Ok((refined, fact.clipped_count))
}

/// Copies each anchored feature's vector from its group's refined block
/// vector (the lexicographically smallest eligible anchor, though the choice
/// is immaterial by block equality).
pub fn propagate_anchor(
    catalog: &FeatureCatalog,
    classification: &FeatureClassification,
    refined_consistent: &BTreeMap<usize, Array1<f64>>,
) -> Result<BTreeMap<usize, Array1<f64>>> {
    let merged = |i: usize| classification.h_hat.get(&i).copied().unwrap_or(false);
    let mut out = BTreeMap::new();
    for &i in &classification.anchored {
        let g = catalog
            .group_of(i)
            .ok_or_else(|| Error::Validation(format!("anchored `{}` has no group", catalog.id(i))))?;
        let anchor = catalog
            .group_members(g)
            .iter()
            .copied()
            .find(|&j| classification.consistent.contains(&j) && merged(j))
            .ok_or_else(|| {
                Error::Validation(format!("anchored `{}` has no eligible anchor", catalog.id(i)))
            })?;
        let vec = refined_consistent.get(&anchor).ok_or_else(|| {
            Error::Validation(format!(
                "anchor `{}` is missing a refined vector",
                catalog.id(anchor)
            ))
        })?;
        out.insert(i, vec.clone());
    }
    Ok(out)
}

/// One shared vector per solo group, fit by weighted regression of the
/// similarities onto the refined consistent embeddings. With no consistent
/// features the step is skipped and the members are reported as demoted.
pub fn refine_solo_groups(
    s1: &SiteMatrix,
    s2: &SiteMatrix,
    catalog: &FeatureCatalog,
    classification: &FeatureClassification,
    refined_consistent: &BTreeMap<usize, Array1<f64>>,
    w: (f64, f64),
) -> Result<(BTreeMap<usize, Array1<f64>>, BTreeSet<usize>)> {
    refine_solo_core(
        &[&s1.matrix, &s2.matrix],
        catalog,
        classification,
        refined_consistent,
        w,
    )
}

fn refine_solo_core(
    s: &[&SymmetricMatrix; 2],
    catalog: &FeatureCatalog,
    classification: &FeatureClassification,
    refined_consistent: &BTreeMap<usize, Array1<f64>>,
    w: (f64, f64),
) -> Result<(BTreeMap<usize, Array1<f64>>, BTreeSet<usize>)> {
    if classification.consistent.is_empty() {
        return Ok((BTreeMap::new(), classification.solo.clone()));
    }
    let rank = refined_consistent
        .values()
        .next()
        .map(|v| v.len())
        .unwrap_or(0);
    let pos = [position_map(catalog, Site::One), position_map(catalog, Site::Two)];
    let cons: Vec<usize> = classification.consistent.iter().copied().collect();
    // Groups of solo members.
    let mut solo_groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in &classification.solo {
        let g = catalog
            .group_of(i)
            .ok_or_else(|| Error::Validation(format!("solo `{}` has no group", catalog.id(i))))?;
        solo_groups.entry(g).or_default().push(i);
    }
    let mut out = BTreeMap::new();
    for (g, members) in solo_groups {
        let mut design_rows: Vec<f64> = Vec::new();
        let mut responses: Vec<f64> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for k in 0..2 {
            let wk = if k == 0 { w.0 } else { w.1 };
            let site = Site::BOTH[k];
            for &i in &members {
                let Some(row_i) = pos[k][i] else { continue };
                debug_assert!(catalog.present(i, site));
                for &j in &cons {
                    let row_j = pos[k][j].unwrap();
                    design_rows.extend(refined_consistent[&j].iter());
                    responses.push(s[k].as_array()[[row_i, row_j]]);
                    weights.push(wk);
                }
            }
        }
        let m = responses.len();
        let design = Array2::from_shape_vec((m, rank), design_rows)
            .map_err(|e| Error::Dim(format!("solo design shape: {e}")))?;
        let gamma = least_squares(
            design.view(),
            Array1::from_vec(responses).view(),
            Array1::from_vec(weights).view(),
        )
        .map_err(|e| {
            Error::Validation(format!("group `{g}`: {e}")).at_stage("solo-group-refinement")
        })?;
        for &i in &members {
            out.insert(i, gamma.clone());
        }
    }
    Ok((out, BTreeSet::new()))
}

/// Per-feature, per-site unweighted regression for the outliers (and any
/// demoted solo members). Design rows over every feature of the site: refined
/// vectors where available, otherwise initial embeddings rotated onto the
/// refined frame.
pub fn refine_outliers(
    s1: &SiteMatrix,
    s2: &SiteMatrix,
    catalog: &FeatureCatalog,
    classification: &FeatureClassification,
    refined_all: &BTreeMap<usize, Array1<f64>>,
    emb_initial: &EmbeddingSet,
) -> Result<([BTreeMap<usize, Array1<f64>>; 2], Vec<String>)> {
    let x_raw = [
        emb_initial.to_matrix(catalog, Site::One)?,
        emb_initial.to_matrix(catalog, Site::Two)?,
    ];
    let targets: BTreeSet<usize> = classification
        .outliers
        .iter()
        .copied()
        .chain(
            classification
                .solo
                .iter()
                .copied()
                .filter(|i| !refined_all.contains_key(i)),
        )
        .collect();
    refine_outliers_core(
        &[&s1.matrix, &s2.matrix],
        catalog,
        refined_all,
        &x_raw,
        &targets,
        emb_initial.rank,
    )
}

fn refine_outliers_core(
    s: &[&SymmetricMatrix; 2],
    catalog: &FeatureCatalog,
    refined_all: &BTreeMap<usize, Array1<f64>>,
    x_raw: &[Array2<f64>; 2],
    targets: &BTreeSet<usize>,
    rank: usize,
) -> Result<([BTreeMap<usize, Array1<f64>>; 2], Vec<String>)> {
    let pos = [position_map(catalog, Site::One), position_map(catalog, Site::Two)];
    let mut notes = Vec::new();
    let mut out: [BTreeMap<usize, Array1<f64>>; 2] = [BTreeMap::new(), BTreeMap::new()];
    for k in 0..2 {
        let site = Site::BOTH[k];
        let order = catalog.site_order(site);
        let n_k = order.len();
        // Rotation carrying this site's initial frame onto the refined frame,
        // fit on the features that have both representations.
        let trans_rows: Vec<usize> = order
            .iter()
            .copied()
            .filter(|i| refined_all.contains_key(i))
            .collect();
        let w_k = if trans_rows.is_empty() {
            notes.push(format!(
                "site {site}: no shared refined features; using initial embeddings as-is"
            ));
            OrthogonalMatrix::identity(rank)
        } else {
            let mut from = Array2::zeros((trans_rows.len(), rank));
            let mut to = Array2::zeros((trans_rows.len(), rank));
            for (r_i, &i) in trans_rows.iter().enumerate() {
                from.row_mut(r_i).assign(&x_raw[k].row(pos[k][i].unwrap()));
                to.row_mut(r_i).assign(&refined_all[&i].view());
            }
            match procrustes(from.view(), to.view()) {
                Ok(q) => q,
                Err(e) => {
                    notes.push(format!(
                        "site {site}: degenerate frame alignment ({e}); using identity"
                    ));
                    OrthogonalMatrix::identity(rank)
                }
            }
        };
        let mut design = Array2::<f64>::zeros((n_k, rank));
        for (row, &j) in order.iter().enumerate() {
            match refined_all.get(&j) {
                Some(v) => design.row_mut(row).assign(&v.view()),
                None => design
                    .row_mut(row)
                    .assign(&x_raw[k].row(row).dot(w_k.as_array())),
            }
        }
        let site_targets: Vec<usize> = targets
            .iter()
            .copied()
            .filter(|&i| pos[k][i].is_some())
            .collect();
        if site_targets.is_empty() {
            continue;
        }
        let mut responses = Array2::<f64>::zeros((n_k, site_targets.len()));
        for (c, &i) in site_targets.iter().enumerate() {
            let col_i = pos[k][i].unwrap();
            for row in 0..n_k {
                responses[[row, c]] = s[k].as_array()[[row, col_i]];
            }
        }
        let sol = least_squares_multi(design.view(), responses.view())
            .map_err(|e| e.at_stage("outlier-refinement"))?;
        for (c, &i) in site_targets.iter().enumerate() {
            out[k].insert(i, sol.column(c).to_owned());
        }
    }
    Ok((out, notes))
}

/// Threshold-independent preparation: factorizations, alignment, site
/// weights, and consistency statistics.
pub fn prepare(
    s1: &SiteMatrix,
    s2: &SiteMatrix,
    catalog: &FeatureCatalog,
    config: &PipelineConfig,
) -> Result<PipelinePrep> {
    config.validate()?;
    let (_, facts) = initial_embeddings(s1, s2, config.rank)?;
    let x_raw = [facts[0].x.clone(), facts[1].x.clone()];
    let clipped = [facts[0].clipped_count, facts[1].clipped_count];
    let mut notes = Vec::new();
    let site_weights = match config.site_weights {
        SiteWeights::Explicit(w1, w2) => (w1, w2),
        SiteWeights::Auto => {
            let normalized = [
                facts[0].residual_spectral_norm().powi(2) / s1.dim() as f64,
                facts[1].residual_spectral_norm().powi(2) / s2.dim() as f64,
            ];
            let (w, mut notes2) = site_weights_from_residuals(normalized);
            notes.append(&mut notes2);
            w
        }
    };
    finish_prep(s1, s2, catalog, config, x_raw, clipped, site_weights, notes)
}

/// Like [`prepare`], but starting from externally supplied initial
/// embeddings in the raw per-site frames.
pub fn prepare_with_initial(
    s1: &SiteMatrix,
    s2: &SiteMatrix,
    catalog: &FeatureCatalog,
    config: &PipelineConfig,
    initial: &EmbeddingSet,
) -> Result<PipelinePrep> {
    config.validate()?;
    if initial.rank != config.rank {
        return Err(Error::Config(format!(
            "initial embeddings have rank {}, config says {}",
            initial.rank, config.rank
        )));
    }
    if initial.frame != [Frame::RawSite1, Frame::RawSite2] {
        return Err(Error::Validation(
            "initial embeddings must be in the raw per-site frames".into(),
        ));
    }
    initial.validate_against(catalog)?;
    let x_raw = [
        initial.to_matrix(catalog, Site::One)?,
        initial.to_matrix(catalog, Site::Two)?,
    ];
    let mut notes = Vec::new();
    let site_weights = match config.site_weights {
        SiteWeights::Explicit(w1, w2) => (w1, w2),
        SiteWeights::Auto => {
            let (w, notes2) = compute_site_weights(s1, s2, initial, catalog)?;
            notes.extend(notes2);
            w
        }
    };
    finish_prep(s1, s2, catalog, config, x_raw, [0, 0], site_weights, notes)
}

#[allow(clippy::too_many_arguments)]
fn finish_prep(
    s1: &SiteMatrix,
    s2: &SiteMatrix,
    catalog: &FeatureCatalog,
    config: &PipelineConfig,
    x_raw: [Array2<f64>; 2],
    clipped: [usize; 2],
    site_weights: (f64, f64),
    notes: Vec<String>,
) -> Result<PipelinePrep> {
    if s1.dim() != catalog.n_site(Site::One) || s2.dim() != catalog.n_site(Site::Two) {
        return Err(Error::Dim(format!(
            "site matrices are {}x{} and {}x{}, catalog has {} and {} features",
            s1.dim(),
            s1.dim(),
            s2.dim(),
            s2.dim(),
            catalog.n_site(Site::One),
            catalog.n_site(Site::Two)
        )));
    }
    let (x_aligned, q_hat) = align_core(catalog, config.rank, &x_raw)?;
    let lambda_stats_idx = lambda_stats_core(catalog, &x_aligned);
    Ok(PipelinePrep {
        rank: config.rank,
        s: [s1.matrix.clone(), s2.matrix.clone()],
        x_raw,
        x_aligned,
        q_hat,
        site_weights,
        lambda_stats_idx,
        clipped_initial: clipped,
        notes,
    })
}

/// Runs the threshold-dependent stages from a prepared state.
pub fn run_from_prep(
    prep: &PipelinePrep,
    catalog: &FeatureCatalog,
    lambda: f64,
    mu: f64,
) -> Result<(EmbeddingSet, FeatureClassification, Diagnostics)> {
    for (name, v) in [("lambda", lambda), ("mu", mu)] {
        if v.is_nan() || v < 0.0 {
            return Err(Error::Config(format!("{name} must be ≥ 0, got {v}")));
        }
    }
    let r = prep.rank;
    let (consistent, divergent) = split_by_lambda(&prep.lambda_stats_idx, lambda);
    let (centers, h_hat, mu_stats_idx, mut notes) =
        centers_core(catalog, r, &prep.x_aligned, &divergent, mu);
    notes.splice(0..0, prep.notes.iter().cloned());
    let classification = derive_feature_sets(catalog, &consistent, &divergent, &h_hat, &centers);
    let s_refs = [&prep.s[0], &prep.s[1]];
    let (refined_cons, clipped_refine) =
        refine_consistent_core(&s_refs, catalog, &classification, prep.site_weights, r)?;
    let anchored = propagate_anchor(catalog, &classification, &refined_cons)
        .map_err(|e| e.at_stage("anchor-propagation"))?;
    let (solo, demoted) = refine_solo_core(
        &s_refs,
        catalog,
        &classification,
        &refined_cons,
        prep.site_weights,
    )?;
    if !demoted.is_empty() {
        notes.push(format!(
            "{} solo-group features had no consistent design and fall back to per-site refinement",
            demoted.len()
        ));
    }
    let mut refined_all = refined_cons;
    refined_all.extend(anchored);
    refined_all.extend(solo);
    let mut targets: BTreeSet<usize> = classification.outliers.clone();
    targets.extend(demoted.iter().copied());
    let (outlier_vecs, notes2) = refine_outliers_core(
        &s_refs,
        catalog,
        &refined_all,
        &prep.x_raw,
        &targets,
        r,
    )?;
    notes.extend(notes2);
    // Assemble the refined embedding set, covering every (feature, site) pair
    // exactly once.
    let mut emb = EmbeddingSet::new(r, [Frame::Refined, Frame::Refined]);
    for site in Site::BOTH {
        let k = site.index();
        for &i in catalog.site_order(site) {
            let id = catalog.id(i);
            let vec = if let Some(v) = refined_all.get(&i) {
                v.to_vec()
            } else if let Some(v) = outlier_vecs[k].get(&i) {
                v.to_vec()
            } else {
                return Err(Error::Validation(format!(
                    "internal coverage gap: `{id}` at site {site} received no refined vector"
                )));
            };
            emb.insert(site, id, vec)?;
        }
    }
    let mut set_sizes = BTreeMap::new();
    set_sizes.insert("consistent".to_string(), classification.consistent.len());
    set_sizes.insert("divergent".to_string(), classification.divergent.len());
    set_sizes.insert("anchored".to_string(), classification.anchored.len());
    set_sizes.insert("solo".to_string(), classification.solo.len());
    set_sizes.insert("outliers".to_string(), classification.outliers.len());
    set_sizes.insert("blocks".to_string(), classification.partition.len());
    let diagnostics = Diagnostics {
        q_hat: prep.q_hat.clone(),
        site_weights: prep.site_weights,
        lambda_stats: prep.lambda_stats(catalog),
        mu_stats: mu_stats_idx
            .into_iter()
            .map(|(i, v)| (catalog.id(i).to_string(), v))
            .collect(),
        set_sizes,
        clipped_initial: prep.clipped_initial,
        clipped_refine,
        demoted_solo: demoted.iter().map(|&i| catalog.id(i).to_string()).collect(),
        notes,
    };
    Ok((emb, classification, diagnostics))
}

/// Full estimator: preparation followed by the threshold-dependent stages.
pub fn run_pipeline(
    s1: &SiteMatrix,
    s2: &SiteMatrix,
    catalog: &FeatureCatalog,
    config: &PipelineConfig,
) -> Result<(EmbeddingSet, FeatureClassification, Diagnostics)> {
    let prep = prepare(s1, s2, catalog, config)?;
    run_from_prep(&prep, catalog, config.lambda, config.mu)
}
