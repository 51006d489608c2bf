//! Feature registry and site data model: identifiers, group structure, site
//! presence, per-site feature weights, and ingestion of co-occurrence counts
//! into SPPMI similarity matrices.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SymmetricMatrix;

/// One of the two data sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    One,
    Two,
}

impl Site {
    pub const BOTH: [Site; 2] = [Site::One, Site::Two];

    pub fn index(self) -> usize {
        match self {
            Site::One => 0,
            Site::Two => 1,
        }
    }

    pub fn number(self) -> u8 {
        self.index() as u8 + 1
    }

    pub fn other(self) -> Site {
        match self {
            Site::One => Site::Two,
            Site::Two => Site::One,
        }
    }

    pub fn from_number(n: u8) -> Result<Site> {
        match n {
            1 => Ok(Site::One),
            2 => Ok(Site::Two),
            _ => Err(Error::Validation(format!("site must be 1 or 2, got {n}"))),
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// One registered feature.
#[derive(Debug, Clone)]
pub struct Feature {
    pub id: String,
    pub group: Option<String>,
    pub present: [bool; 2],
    /// Per-site weight where present; `None` defaults to 1.
    pub weight: [Option<f64>; 2],
}

/// Validated global feature registry with derived index sets. Feature indices
/// refer to the canonical lexicographic order by id.
#[derive(Debug, Clone)]
pub struct FeatureCatalog {
    features: Vec<Feature>,
    index: HashMap<String, usize>,
    groups: BTreeMap<String, Vec<usize>>,
    site_members: [Vec<usize>; 2],
    overlap: Vec<usize>,
    non_overlap: Vec<usize>,
}

/// JSON document form of a catalog ("features": [{"id", "group", "sites", "weights"}]).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CatalogDoc {
    pub features: Vec<FeatureDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeatureDoc {
    pub id: String,
    #[serde(default)]
    pub group: Option<String>,
    pub sites: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<BTreeMap<String, f64>>,
}

impl FeatureCatalog {
    /// Validates a catalog document and derives index sets.
    pub fn validate(doc: CatalogDoc) -> Result<FeatureCatalog> {
        let mut seen = BTreeSet::new();
        let mut features = Vec::with_capacity(doc.features.len());
        for fd in &doc.features {
            if !seen.insert(fd.id.clone()) {
                return Err(Error::Validation(format!("duplicate feature id `{}`", fd.id)));
            }
            let mut present = [false; 2];
            for &s in &fd.sites {
                present[Site::from_number(s)?.index()] = true;
            }
            if !present[0] && !present[1] {
                return Err(Error::Validation(format!(
                    "feature `{}` is present in no site",
                    fd.id
                )));
            }
            let mut weight = [None; 2];
            if let Some(ws) = &fd.weights {
                for (key, &w) in ws {
                    let site = key
                        .parse::<u8>()
                        .ok()
                        .map(Site::from_number)
                        .transpose()?
                        .ok_or_else(|| {
                            Error::Validation(format!("bad weight key `{key}` for `{}`", fd.id))
                        })?;
                    if !(w > 0.0) {
                        return Err(Error::Validation(format!(
                            "nonpositive weight {w} for feature `{}` at site {site}",
                            fd.id
                        )));
                    }
                    if !present[site.index()] {
                        return Err(Error::Validation(format!(
                            "weight given for feature `{}` at absent site {site}",
                            fd.id
                        )));
                    }
                    weight[site.index()] = Some(w);
                }
            }
            features.push(Feature {
                id: fd.id.clone(),
                group: fd.group.clone(),
                present,
                weight,
            });
        }
        features.sort_by(|a, b| a.id.cmp(&b.id));
        let index: HashMap<String, usize> = features
            .iter()
            .enumerate()
            .map(|(i, f)| (f.id.clone(), i))
            .collect();
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut site_members: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        let mut overlap = Vec::new();
        let mut non_overlap = Vec::new();
        for (i, f) in features.iter().enumerate() {
            if let Some(g) = &f.group {
                groups.entry(g.clone()).or_default().push(i);
            }
            for site in Site::BOTH {
                if f.present[site.index()] {
                    site_members[site.index()].push(i);
                }
            }
            if f.present[0] && f.present[1] {
                overlap.push(i);
            } else {
                non_overlap.push(i);
            }
        }
        Ok(FeatureCatalog {
            features,
            index,
            groups,
            site_members,
            overlap,
            non_overlap,
        })
    }

    pub fn to_doc(&self) -> CatalogDoc {
        CatalogDoc {
            features: self
                .features
                .iter()
                .map(|f| FeatureDoc {
                    id: f.id.clone(),
                    group: f.group.clone(),
                    sites: Site::BOTH
                        .iter()
                        .filter(|s| f.present[s.index()])
                        .map(|s| s.number())
                        .collect(),
                    weights: {
                        let m: BTreeMap<String, f64> = Site::BOTH
                            .iter()
                            .filter_map(|s| {
                                f.weight[s.index()].map(|w| (s.number().to_string(), w))
                            })
                            .collect();
                        if m.is_empty() {
                            None
                        } else {
                            Some(m)
                        }
                    },
                })
                .collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.features.len()
    }

    pub fn n_site(&self, site: Site) -> usize {
        self.site_members[site.index()].len()
    }

    pub fn n_overlap(&self) -> usize {
        self.overlap.len()
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn id(&self, idx: usize) -> &str {
        &self.features[idx].id
    }

    pub fn feature(&self, idx: usize) -> &Feature {
        &self.features[idx]
    }

    pub fn lookup(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn group_of(&self, idx: usize) -> Option<&str> {
        self.features[idx].group.as_deref()
    }

    pub fn group_members(&self, group: &str) -> &[usize] {
        self.groups.get(group).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn groups(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.groups.iter().map(|(g, m)| (g.as_str(), m.as_slice()))
    }

    pub fn present(&self, idx: usize, site: Site) -> bool {
        self.features[idx].present[site.index()]
    }

    /// Feature weight at a site; defaults to 1 when not supplied.
    pub fn weight(&self, idx: usize, site: Site) -> f64 {
        self.features[idx].weight[site.index()].unwrap_or(1.0)
    }

    /// Members of 𝒱ₖ in canonical (lexicographic) order.
    pub fn site_order(&self, site: Site) -> &[usize] {
        &self.site_members[site.index()]
    }

    /// Members of 𝒱_o in canonical order.
    pub fn overlap_order(&self) -> &[usize] {
        &self.overlap
    }

    /// Members of 𝒱_no in canonical order.
    pub fn non_overlap_order(&self) -> &[usize] {
        &self.non_overlap
    }

    pub fn load(path: &Path) -> Result<FeatureCatalog> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: CatalogDoc = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("bad catalog JSON at {}: {e}", path.display())))?;
        Self::validate(doc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_doc())
            .map_err(|e| Error::Validation(format!("catalog serialization: {e}")))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// One site's symmetric similarity matrix over that site's features in
/// canonical order.
#[derive(Debug, Clone)]
pub struct SiteMatrix {
    pub site: Site,
    pub feature_order: Vec<String>,
    pub matrix: SymmetricMatrix,
}

impl SiteMatrix {
    /// Checks that `feature_order` covers exactly the catalog's 𝒱ₖ and sorts
    /// rows/columns into canonical order.
    pub fn new(
        site: Site,
        feature_order: Vec<String>,
        matrix: SymmetricMatrix,
        catalog: &FeatureCatalog,
    ) -> Result<SiteMatrix> {
        if feature_order.len() != matrix.dim() {
            return Err(Error::Dim(format!(
                "site {site}: {} ids for a {}x{} matrix",
                feature_order.len(),
                matrix.dim(),
                matrix.dim()
            )));
        }
        let expected: Vec<&str> = catalog
            .site_order(site)
            .iter()
            .map(|&i| catalog.id(i))
            .collect();
        let given: BTreeSet<&str> = feature_order.iter().map(|s| s.as_str()).collect();
        if given.len() != feature_order.len() {
            return Err(Error::Validation(format!(
                "site {site}: duplicate feature ids in matrix header"
            )));
        }
        let expected_set: BTreeSet<&str> = expected.iter().copied().collect();
        if given != expected_set {
            let missing: Vec<&&str> = expected_set.difference(&given).take(3).collect();
            let extra: Vec<&&str> = given.difference(&expected_set).take(3).collect();
            return Err(Error::Validation(format!(
                "site {site}: matrix features do not match catalog 𝒱{site} (missing e.g. {missing:?}, extra e.g. {extra:?})"
            )));
        }
        // Permute into canonical order if needed.
        let already_canonical = feature_order
            .iter()
            .zip(expected.iter())
            .all(|(a, b)| a == b);
        if already_canonical {
            let feature_order = expected.iter().map(|s| s.to_string()).collect();
            return Ok(SiteMatrix {
                site,
                feature_order,
                matrix,
            });
        }
        let pos: HashMap<&str, usize> = feature_order
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let perm: Vec<usize> = expected.iter().map(|id| pos[id]).collect();
        let reordered = matrix.submatrix(&perm);
        Ok(SiteMatrix {
            site,
            feature_order: expected.iter().map(|s| s.to_string()).collect(),
            matrix: SymmetricMatrix::new(reordered)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }
}

/// Symmetric co-occurrence counts with derived marginals and grand total.
#[derive(Debug, Clone, Default)]
pub struct CooccurrenceTable {
    counts: BTreeMap<(String, String), f64>,
    marginals: BTreeMap<String, f64>,
    total: f64,
}

impl CooccurrenceTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a symmetric count for the unordered pair `(a, b)`.
    pub fn add(&mut self, a: &str, b: &str, count: f64) -> Result<()> {
        if !(count >= 0.0) || !count.is_finite() {
            return Err(Error::Validation(format!(
                "nonnegative count required for ({a},{b}), got {count}"
            )));
        }
        let key = if a <= b {
            (a.to_string(), b.to_string())
        } else {
            (b.to_string(), a.to_string())
        };
        *self.counts.entry(key).or_insert(0.0) += count;
        // Row sums of the symmetric matrix: off-diagonals count once per row,
        // the diagonal once.
        *self.marginals.entry(a.to_string()).or_insert(0.0) += count;
        if a != b {
            *self.marginals.entry(b.to_string()).or_insert(0.0) += count;
        }
        self.total += if a == b { count } else { 2.0 * count };
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn marginal(&self, id: &str) -> f64 {
        self.marginals.get(id).copied().unwrap_or(0.0)
    }

    pub fn ids(&self) -> Vec<String> {
        self.marginals.keys().cloned().collect()
    }

    pub fn count(&self, a: &str, b: &str) -> f64 {
        let key = if a <= b { (a, b) } else { (b, a) };
        self.counts
            .get(&(key.0.to_string(), key.1.to_string()))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn load_csv(path: &Path) -> Result<CooccurrenceTable> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table = CooccurrenceTable::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with("id_a")) {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Validation(format!(
                    "co-occurrence line {} must be `id_a,id_b,count`: {line}",
                    lineno + 1
                )));
            }
            let count: f64 = parts[2].parse().map_err(|_| {
                Error::Validation(format!("bad count on line {}: {}", lineno + 1, parts[2]))
            })?;
            table.add(parts[0], parts[1], count)?;
        }
        Ok(table)
    }
}

/// SPPMI construction: entry `(i,j) = max(log(c_ij·total/(m_i·m_j)) − log(shift), 0)`.
pub fn sppmi_from_cooccurrence(
    table: &CooccurrenceTable,
    shift: u32,
) -> Result<(Vec<String>, SymmetricMatrix)> {
    if shift == 0 {
        return Err(Error::Validation("SPPMI shift must be positive".into()));
    }
    if !(table.total() > 0.0) {
        return Err(Error::Validation("co-occurrence grand total is zero".into()));
    }
    let ids = table.ids();
    for id in &ids {
        if !(table.marginal(id) > 0.0) {
            return Err(Error::Validation(format!(
                "zero marginal for retained feature `{id}`"
            )));
        }
    }
    let n = ids.len();
    let log_shift = f64::from(shift).ln();
    let mut m = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let c = table.count(&ids[i], &ids[j]);
            if c > 0.0 {
                let pmi =
                    (c * table.total() / (table.marginal(&ids[i]) * table.marginal(&ids[j]))).ln();
                let v = (pmi - log_shift).max(0.0);
                m[[i, j]] = v;
                m[[j, i]] = v;
            }
        }
    }
    Ok((ids, SymmetricMatrix::new(m)?))
}
