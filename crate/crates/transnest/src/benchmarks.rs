//! Comparison estimators: single-site SVD (SSVD), its group-mean variant
//! (SSG), direct pooling with Procrustes alignment (DP), and a simplified
//! rotation-based matrix completion (BONMI). Site 2 is the transfer target
//! throughout.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::catalog::{FeatureCatalog, Site, SiteMatrix};
use crate::error::{Error, Result};
use crate::numerics::{procrustes, truncated_psd_factorization, SymmetricMatrix};
use crate::pipeline::{EmbeddingSet, Frame};

fn raw_frame(site: Site) -> Frame {
    match site {
        Site::One => Frame::RawSite1,
        Site::Two => Frame::RawSite2,
    }
}

/// Single-site truncated factorization of the target matrix.
pub fn ssvd(s_target: &SiteMatrix, r: usize) -> Result<EmbeddingSet> {
    let fact = truncated_psd_factorization(&s_target.matrix, r)?;
    let site = s_target.site;
    let mut emb = EmbeddingSet::new(r, [raw_frame(site); 2]);
    for (row, id) in s_target.feature_order.iter().enumerate() {
        emb.insert(site, id, fact.x.row(row).to_vec())?;
    }
    Ok(emb)
}

/// Replaces each grouped feature's vector by the unweighted mean over its
/// group members present at `site`; ungrouped features are untouched.
fn group_mean_replace(
    emb: &EmbeddingSet,
    catalog: &FeatureCatalog,
    site: Site,
) -> Result<EmbeddingSet> {
    let mut out = emb.clone();
    let mut means: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (g, members) in catalog.groups() {
        let present: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&i| catalog.present(i, site))
            .collect();
        if present.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; emb.rank];
        for &i in &present {
            let v = emb.get(site, catalog.id(i)).ok_or_else(|| {
                Error::Validation(format!("missing vector for `{}`", catalog.id(i)))
            })?;
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= present.len() as f64;
        }
        means.insert(g, mean);
    }
    for (g, members) in catalog.groups() {
        if let Some(mean) = means.get(g) {
            for &i in members {
                if catalog.present(i, site) {
                    out.insert(site, catalog.id(i), mean.clone())?;
                }
            }
        }
    }
    Ok(out)
}

/// SSVD followed by group-mean smoothing on the target site.
pub fn ssg(s_target: &SiteMatrix, catalog: &FeatureCatalog, r: usize) -> Result<EmbeddingSet> {
    let emb = ssvd(s_target, r)?;
    group_mean_replace(&emb, catalog, s_target.site)
}

fn overlap_rows(catalog: &FeatureCatalog, site: Site) -> Vec<usize> {
    let pos: BTreeMap<usize, usize> = catalog
        .site_order(site)
        .iter()
        .enumerate()
        .map(|(row, &idx)| (idx, row))
        .collect();
    catalog.overlap_order().iter().map(|i| pos[i]).collect()
}

fn rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), x.ncols()));
    for (r_i, &i) in idx.iter().enumerate() {
        out.row_mut(r_i).assign(&x.row(i));
    }
    out
}

/// Direct pooling: factorize the weighted sum of the overlap submatrices,
/// then carry each site's specific features into the pooled frame through a
/// Procrustes rotation of that site's SSVD embeddings.
pub fn dp(
    s1: &SiteMatrix,
    s2: &SiteMatrix,
    catalog: &FeatureCatalog,
    r: usize,
    w: (f64, f64),
) -> Result<EmbeddingSet> {
    let n_o = catalog.n_overlap();
    if n_o == 0 {
        return Err(Error::Validation("direct pooling needs a nonempty overlap".into()));
    }
    if n_o < r {
        return Err(Error::Validation(format!(
            "direct pooling: overlap has {n_o} features, rank is {r}"
        )));
    }
    let o_rows = [overlap_rows(catalog, Site::One), overlap_rows(catalog, Site::Two)];
    let pooled_mat = w.0 * &s1.matrix.submatrix(&o_rows[0]) + w.1 * &s2.matrix.submatrix(&o_rows[1]);
    let pooled = truncated_psd_factorization(&SymmetricMatrix::from_exact(pooled_mat)?, r)?;
    let mut emb = EmbeddingSet::new(r, [Frame::Refined, Frame::Refined]);
    for (row, &idx) in catalog.overlap_order().iter().enumerate() {
        for site in Site::BOTH {
            if catalog.present(idx, site) {
                emb.insert(site, catalog.id(idx), pooled.x.row(row).to_vec())?;
            }
        }
    }
    for (sm, k) in [(s1, 0usize), (s2, 1usize)] {
        let site = sm.site;
        let fact = truncated_psd_factorization(&sm.matrix, r)?;
        let q = procrustes(rows(&fact.x, &o_rows[k]).view(), pooled.x.view()).map_err(|e| {
            Error::Numerical(format!("degenerate overlap alignment for site {site}: {e}"))
        })?;
        let rotated = fact.x.dot(q.as_array());
        for (row, id) in sm.feature_order.iter().enumerate() {
            let idx = catalog.lookup(id).unwrap();
            if !catalog.present(idx, site.other()) {
                emb.insert(site, id, rotated.row(row).to_vec())?;
            }
        }
    }
    Ok(emb)
}

/// Completed full matrix used by the simplified BONMI: weighted average on
/// jointly observed entries, single-site values elsewhere, and the
/// unobserved specific-by-specific block filled through the overlap rotation.
fn bonmi_completed_matrix(
    s1: &SiteMatrix,
    s2: &SiteMatrix,
    catalog: &FeatureCatalog,
    r: usize,
    w: (f64, f64),
) -> Result<Array2<f64>> {
    let n = catalog.n();
    let pos = |site: Site| -> Vec<Option<usize>> {
        let mut p = vec![None; n];
        for (row, &idx) in catalog.site_order(site).iter().enumerate() {
            p[idx] = Some(row);
        }
        p
    };
    let p = [pos(Site::One), pos(Site::Two)];
    let s = [&s1.matrix, &s2.matrix];
    // Overlap rotation carrying site-1 embeddings into site 2's frame.
    let o_rows = [overlap_rows(catalog, Site::One), overlap_rows(catalog, Site::Two)];
    let facts = [
        truncated_psd_factorization(&s1.matrix, r)?,
        truncated_psd_factorization(&s2.matrix, r)?,
    ];
    let q = procrustes(
        rows(&facts[0].x, &o_rows[0]).view(),
        rows(&facts[1].x, &o_rows[1]).view(),
    )
    .map_err(|e| Error::Numerical(format!("degenerate overlap for completion: {e}")))?;
    let x1_rot = facts[0].x.dot(q.as_array());
    let mut m = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v = match (
                p[0][i].zip(p[0][j]),
                p[1][i].zip(p[1][j]),
            ) {
                (Some((a, b)), Some((c, d))) => {
                    w.0 * s[0].as_array()[[a, b]] + w.1 * s[1].as_array()[[c, d]]
                }
                (Some((a, b)), None) => s[0].as_array()[[a, b]],
                (None, Some((c, d))) => s[1].as_array()[[c, d]],
                (None, None) => {
                    // One endpoint is site-1-only, the other site-2-only.
                    let (one, two) = if p[0][i].is_some() { (i, j) } else { (j, i) };
                    x1_rot
                        .row(p[0][one].unwrap())
                        .dot(&facts[1].x.row(p[1][two].unwrap()))
                }
            };
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
    Ok(m)
}

/// Simplified BONMI: factorizes the completed full matrix at rank `r`. The
/// estimator ignores site heterogeneity and group structure by design and is
/// reported as "BONMI (simplified)".
pub fn bonmi(
    s1: &SiteMatrix,
    s2: &SiteMatrix,
    catalog: &FeatureCatalog,
    r: usize,
    w: (f64, f64),
) -> Result<EmbeddingSet> {
    let completed = bonmi_completed_matrix(s1, s2, catalog, r, w)?;
    let fact = truncated_psd_factorization(&SymmetricMatrix::from_exact(completed)?, r)?;
    let mut emb = EmbeddingSet::new(r, [Frame::Refined, Frame::Refined]);
    for i in 0..catalog.n() {
        for site in Site::BOTH {
            if catalog.present(i, site) {
                emb.insert(site, catalog.id(i), fact.x.row(i).to_vec())?;
            }
        }
    }
    Ok(emb)
}

/// Display labels used in reports and CLI output.
pub fn method_label(method: &str) -> &str {
    match method {
        "bonmi" => "BONMI (simplified)",
        "ssvd" => "SSVD",
        "ssg" => "SSG",
        "dp" => "DP",
        "transnest" => "TransNEST",
        other => other,
    }
}
