//! Synthetic two-site data generator: hierarchical embeddings (group,
//! feature, and feature-site effects with block-AR1 covariances),
//! heteroskedastic similarity noise, and ground-truth pair labels.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::catalog::{CatalogDoc, FeatureCatalog, FeatureDoc, Site, SiteMatrix};
use crate::error::{Error, Result};
use crate::eval::{PairLabel, PairLabelSet};
use crate::numerics::SymmetricMatrix;
use crate::pipeline::derive_feature_sets;

/// Labeled RNG substreams: adding draws in one stage never perturbs another.
mod stream {
    pub const BETA: u64 = 1;
    pub const ZETA: u64 = 2;
    pub const DELTA1: u64 = 3;
    pub const DELTA2: u64 = 4;
    pub const SELECT_ZETA: u64 = 5;
    pub const SELECT_DELTA1: u64 = 6;
    pub const SELECT_DELTA2: u64 = 7;
    pub const RARE: u64 = 8;
    pub const NOISE1: u64 = 9;
    pub const NOISE2: u64 = 10;
    pub const NEGATIVES: u64 = 11;
    pub const SPLIT: u64 = 12;
    pub const GROUPS: u64 = 13;
}

fn substream(seed: u64, label: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label);
    rng
}

/// Generator configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub n1: usize,
    pub n2: usize,
    pub n_o: usize,
    pub groups: usize,
    pub group_size: usize,
    pub n_ungrouped_per_site: usize,
    pub n_zeta_zero: usize,
    pub n_delta: usize,
    pub rank: usize,
    pub rho_beta: f64,
    pub rho_zeta: f64,
    pub rho_delta: f64,
    pub sigma_source: f64,
    pub n_freq: usize,
    pub sigma_freq: f64,
    pub n_rare: usize,
    pub sigma_rare: f64,
    /// Multiplier on the similarity noise; 0 yields exact signal matrices.
    pub noise_scale: f64,
    /// Mix overlap and site-specific features within groups, the way a
    /// shared ontology does. Disabled in the scaled preset: at small n,
    /// homogeneous groups keep the group-center statistics well separated.
    #[serde(default = "default_mixed_groups")]
    pub mixed_groups: bool,
    pub seed: u64,
}

fn default_mixed_groups() -> bool {
    true
}

impl SimConfig {
    /// Reference configuration: homogeneous groups, moderate site effects.
    pub fn paper_c1(seed: u64) -> SimConfig {
        SimConfig {
            n: 3000,
            n1: 2000,
            n2: 2000,
            n_o: 1000,
            groups: 400,
            group_size: 5,
            n_ungrouped_per_site: 500,
            n_zeta_zero: 1000,
            n_delta: 100,
            rank: 50,
            rho_beta: 0.4,
            rho_zeta: 0.4,
            rho_delta: 0.95,
            sigma_source: 5.0,
            n_freq: 1300,
            sigma_freq: 20.0,
            n_rare: 700,
            sigma_rare: 80.0,
            noise_scale: 1.0,
            mixed_groups: true,
            seed,
        }
    }

    /// Larger site heterogeneity (more feature-site effects).
    pub fn paper_c2(seed: u64) -> SimConfig {
        SimConfig {
            n_delta: 200,
            ..Self::paper_c1(seed)
        }
    }

    /// No pure group effects (every feature keeps a feature effect).
    pub fn paper_c3(seed: u64) -> SimConfig {
        SimConfig {
            n_zeta_zero: 0,
            ..Self::paper_c1(seed)
        }
    }

    /// Both heterogeneity sources increased.
    pub fn paper_c4(seed: u64) -> SimConfig {
        SimConfig {
            n_zeta_zero: 0,
            n_delta: 200,
            ..Self::paper_c1(seed)
        }
    }

    /// A 10× smaller instance with low noise, for fast consistency checks.
    pub fn scaled(seed: u64) -> SimConfig {
        SimConfig {
            n: 300,
            n1: 200,
            n2: 200,
            n_o: 100,
            groups: 40,
            group_size: 5,
            n_ungrouped_per_site: 50,
            n_zeta_zero: 100,
            n_delta: 10,
            rank: 10,
            rho_beta: 0.4,
            rho_zeta: 0.4,
            rho_delta: 0.95,
            sigma_source: 2.5,
            n_freq: 130,
            sigma_freq: 20.0,
            n_rare: 70,
            sigma_rare: 20.0,
            noise_scale: 0.05,
            mixed_groups: false,
            seed,
        }
    }

    fn spec1(&self) -> usize {
        self.n1 - self.n_o
    }

    fn spec2(&self) -> usize {
        self.n2 - self.n_o
    }

    pub fn validate(&self) -> Result<()> {
        if self.n1 + self.n2 < self.n_o || self.n1 + self.n2 - self.n_o != self.n {
            return Err(Error::Config(format!(
                "feature counts must satisfy n1 + n2 − n_o = n; got {} + {} − {} ≠ {}",
                self.n1, self.n2, self.n_o, self.n
            )));
        }
        if self.n_o > self.n1.min(self.n2) {
            return Err(Error::Config(format!(
                "overlap {} exceeds a site size ({}, {})",
                self.n_o, self.n1, self.n2
            )));
        }
        if self.n_freq + self.n_rare != self.n2 {
            return Err(Error::Config(format!(
                "n_freq + n_rare must equal n2: {} + {} ≠ {}",
                self.n_freq, self.n_rare, self.n2
            )));
        }
        for (name, v) in [
            ("sigma_source", self.sigma_source),
            ("sigma_freq", self.sigma_freq),
            ("sigma_rare", self.sigma_rare),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::Config("noise_scale must be ≥ 0".into()));
        }
        for (name, rho) in [
            ("rho_beta", self.rho_beta),
            ("rho_zeta", self.rho_zeta),
            ("rho_delta", self.rho_delta),
        ] {
            if !(-1.0 < rho && rho < 1.0) {
                return Err(Error::Config(format!(
                    "{name} must lie in (−1, 1), got {rho}"
                )));
            }
        }
        if self.rank == 0 || self.rank > self.n1.min(self.n2) {
            return Err(Error::Config(format!("rank {} out of range", self.rank)));
        }
        if self.n_zeta_zero > self.n_o {
            return Err(Error::Config(format!(
                "n_zeta_zero {} exceeds overlap {}",
                self.n_zeta_zero, self.n_o
            )));
        }
        if self.n_delta > self.n_o {
            return Err(Error::Config(format!(
                "n_delta {} exceeds overlap {}",
                self.n_delta, self.n_o
            )));
        }
        if self.n_ungrouped_per_site > self.spec1().min(self.spec2()) {
            return Err(Error::Config(format!(
                "{} ungrouped features per site exceed the site-specific counts",
                self.n_ungrouped_per_site
            )));
        }
        let grouped_specific = self.spec1() + self.spec2() - 2 * self.n_ungrouped_per_site;
        let grouped_total = self.n_o + grouped_specific;
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be at least 2".into()));
        }
        if grouped_total != self.groups * self.group_size {
            return Err(Error::Config(format!(
                "grouped features ({grouped_total}) must fill {} groups of size {}",
                self.groups, self.group_size
            )));
        }
        if self.n_o % self.group_size != 0 {
            return Err(Error::Config(format!(
                "overlap size {} must be a multiple of the group size {}",
                self.n_o, self.group_size
            )));
        }
        Ok(())
    }
}

/// Ground truth for one simulated replicate.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub catalog: FeatureCatalog,
    /// True embeddings per site over global feature indices (zero rows where
    /// a feature is absent from the site).
    pub x: [Array2<f64>; 2],
    /// Signal matrices over each site's canonical feature order.
    pub m: [Array2<f64>; 2],
    pub consistent: BTreeSet<usize>,
    pub divergent: BTreeSet<usize>,
    pub h: BTreeMap<usize, bool>,
    pub anchored: BTreeSet<usize>,
    pub solo: BTreeSet<usize>,
    pub outliers: BTreeSet<usize>,
    pub partition: Vec<Vec<usize>>,
    /// Per-site noise scale per global feature (0 where absent).
    pub sigma: [Vec<f64>; 2],
    /// Site-2 rare features.
    pub rare: BTreeSet<usize>,
    /// Features whose feature effect was zeroed.
    pub zeta_zero: BTreeSet<usize>,
    /// Per-site feature-site-effect index sets, in selection order.
    pub delta_sets: [Vec<usize>; 2],
    /// Features with a nonzero feature effect.
    pub zeta_nonzero: BTreeSet<usize>,
}

impl GroundTruth {
    /// Features eligible for transfer: consistent, anchored, or solo.
    pub fn transfer_set(&self) -> BTreeSet<usize> {
        let mut t = self.consistent.clone();
        t.extend(self.anchored.iter().copied());
        t.extend(self.solo.iter().copied());
        t
    }
}

/// Block layout (list of block sizes) covering `dim` by cycling `pattern`.
fn cycle_layout(dim: usize, pattern: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut left = dim;
    let mut i = 0;
    while left > 0 {
        let b = pattern[i % pattern.len()].min(left);
        out.push(b);
        left -= b;
        i += 1;
    }
    out
}

fn uniform_layout(dim: usize, block: usize) -> Vec<usize> {
    cycle_layout(dim, &[block])
}

/// Zero-mean Gaussian draws with block-diagonal AR1 covariance: each column
/// is one sample of dimension `dim`. Within a block the lag-1 recursion
/// applies the exact AR1 Cholesky factor.
pub fn sample_block_ar1(
    dim: usize,
    block_layout: &[usize],
    rho: f64,
    cols: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    if block_layout.iter().sum::<usize>() != dim {
        return Err(Error::Dim(format!(
            "block layout covers {} of {dim} rows",
            block_layout.iter().sum::<usize>()
        )));
    }
    if !(-1.0 < rho && rho < 1.0) {
        return Err(Error::Numerical(format!(
            "AR1 correlation {rho} outside (−1, 1): covariance not positive definite"
        )));
    }
    let scale = (1.0 - rho * rho).sqrt();
    let mut out = Array2::<f64>::zeros((dim, cols));
    for c in 0..cols {
        let mut row = 0;
        for &b in block_layout {
            let mut prev = 0.0;
            for t in 0..b {
                let z: f64 = rng.sample(StandardNormal);
                let v = if t == 0 { z } else { rho * prev + scale * z };
                out[[row + t, c]] = v;
                prev = v;
            }
            row += b;
        }
    }
    Ok(out)
}

/// Feature layout in construction (= lexicographic id) order: the overlap
/// block first, then the grouped site-specific features of each site as
/// contiguous runs, then the ungrouped features of each site. With
/// `mixed_groups`, groups are drawn by a seeded shuffle over all grouped
/// features, so a typical group mixes shared and site-specific features the
/// way a common ontology does; this keeps the anchored-transfer pathway
/// exercised. Otherwise groups are contiguous slices.
struct Layout {
    sites: Vec<[bool; 2]>,
    group_of: Vec<Option<usize>>,
}

fn build_layout(config: &SimConfig) -> Layout {
    let n = config.n;
    let gs1 = config.spec1() - config.n_ungrouped_per_site;
    let gs2 = config.spec2() - config.n_ungrouped_per_site;
    let mut sites = Vec::with_capacity(n);
    let mut group_of: Vec<Option<usize>> = Vec::with_capacity(n);
    // Overlap features.
    for _ in 0..config.n_o {
        sites.push([true, true]);
        group_of.push(None);
    }
    // Site-specific grouped features: contiguous runs per site, so the
    // feature-effect correlation blocks stay within one site.
    for _ in 0..gs1 {
        sites.push([true, false]);
        group_of.push(None);
    }
    for _ in 0..gs2 {
        sites.push([false, true]);
        group_of.push(None);
    }
    // Group membership. With `mixed_groups`, a seeded shuffle of every
    // grouped feature is sliced into uniform groups, so groups mix overlap
    // and site-specific features; otherwise groups are contiguous slices in
    // construction order, which keeps every group homogeneous.
    let n_grouped = config.n_o + gs1 + gs2;
    let mut order: Vec<usize> = (0..n_grouped).collect();
    if config.mixed_groups {
        let mut rng = substream(config.seed, stream::GROUPS);
        order.shuffle(&mut rng);
    }
    for (pos, &i) in order.iter().enumerate() {
        group_of[i] = Some(pos / config.group_size);
    }
    // Ungrouped site-specific features.
    for _ in 0..config.n_ungrouped_per_site {
        sites.push([true, false]);
        group_of.push(None);
    }
    for _ in 0..config.n_ungrouped_per_site {
        sites.push([false, true]);
        group_of.push(None);
    }
    debug_assert_eq!(sites.len(), n);
    Layout { sites, group_of }
}

fn feature_id(i: usize, n: usize) -> String {
    let width = (n.max(2) - 1).to_string().len();
    format!("f{i:0width$}")
}

fn group_id(g: usize, groups: usize) -> String {
    let width = (groups.max(2) - 1).to_string().len();
    format!("g{g:0width$}")
}

/// Draws the hierarchical embeddings and derives the oracle feature sets.
pub fn generate_ground_truth(config: &SimConfig) -> Result<GroundTruth> {
    config.validate()?;
    let n = config.n;
    let r = config.rank;
    let layout = build_layout(config);
    // Group effects: AR1 triplets of correlated groups within every run of
    // ten, the remaining seven independent.
    let beta = sample_block_ar1(
        config.groups,
        &cycle_layout(config.groups, &[3, 1, 1, 1, 1, 1, 1, 1]),
        config.rho_beta,
        r,
        &mut substream(config.seed, stream::BETA),
    )?;
    // Feature effects: AR1 blocks of six in construction order.
    let mut zeta = sample_block_ar1(
        n,
        &uniform_layout(n, 6),
        config.rho_zeta,
        r,
        &mut substream(config.seed, stream::ZETA),
    )?;
    let zeta_zero: BTreeSet<usize> = sample(
        &mut substream(config.seed, stream::SELECT_ZETA),
        config.n_o,
        config.n_zeta_zero,
    )
    .into_iter()
    .collect();
    for &i in &zeta_zero {
        zeta.row_mut(i).fill(0.0);
    }
    // Feature-site effects: independently selected overlap features per
    // site, AR1 blocks of fifty in selection order.
    let mut delta_sets: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    let mut delta: [Array2<f64>; 2] = [Array2::zeros((0, r)), Array2::zeros((0, r))];
    for (k, sel_stream, draw_stream) in [
        (0usize, stream::SELECT_DELTA1, stream::DELTA1),
        (1usize, stream::SELECT_DELTA2, stream::DELTA2),
    ] {
        delta_sets[k] = sample(
            &mut substream(config.seed, sel_stream),
            config.n_o,
            config.n_delta,
        )
        .into_iter()
        .collect();
        delta[k] = sample_block_ar1(
            config.n_delta,
            &uniform_layout(config.n_delta, 50),
            config.rho_delta,
            r,
            &mut substream(config.seed, draw_stream),
        )?;
    }
    // Compose x_{k,i} = β_{g_i}·1(grouped) + ζ_i + δ_{k,i}.
    let mut x: [Array2<f64>; 2] = [Array2::zeros((n, r)), Array2::zeros((n, r))];
    for k in 0..2 {
        let delta_of: BTreeMap<usize, usize> = delta_sets[k]
            .iter()
            .enumerate()
            .map(|(row, &i)| (i, row))
            .collect();
        for i in 0..n {
            if !layout.sites[i][k] {
                continue;
            }
            for c in 0..r {
                let mut v = zeta[[i, c]];
                if let Some(g) = layout.group_of[i] {
                    v += beta[[g, c]];
                }
                if let Some(&row) = delta_of.get(&i) {
                    v += delta[k][[row, c]];
                }
                x[k][[i, c]] = v;
            }
        }
    }
    // Noise scales and the rare/frequent split on site 2.
    let site2_features: Vec<usize> = (0..n).filter(|&i| layout.sites[i][1]).collect();
    let rare: BTreeSet<usize> = sample(
        &mut substream(config.seed, stream::RARE),
        site2_features.len(),
        config.n_rare,
    )
    .into_iter()
    .map(|p| site2_features[p])
    .collect();
    // The noise multiplier scales σ itself, so derived weights w = 1/σ grow
    // as the noise shrinks; noise_scale = 0 yields exact matrices.
    let mut sigma: [Vec<f64>; 2] = [vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        if layout.sites[i][0] {
            sigma[0][i] = config.noise_scale * config.sigma_source;
        }
        if layout.sites[i][1] {
            sigma[1][i] = config.noise_scale
                * if rare.contains(&i) {
                    config.sigma_rare
                } else {
                    config.sigma_freq
                };
        }
    }
    // Catalog with weights w = 1/σ.
    let features: Vec<FeatureDoc> = (0..n)
        .map(|i| {
            let mut weights = BTreeMap::new();
            let mut site_nums = Vec::new();
            for k in 0..2 {
                if layout.sites[i][k] {
                    site_nums.push(k as u8 + 1);
                    let w = if sigma[k][i] > 0.0 { 1.0 / sigma[k][i] } else { 1.0 };
                    weights.insert((k + 1).to_string(), w);
                }
            }
            FeatureDoc {
                id: feature_id(i, n),
                group: layout.group_of[i].map(|g| group_id(g, config.groups)),
                sites: site_nums,
                weights: Some(weights),
            }
        })
        .collect();
    let catalog = FeatureCatalog::validate(CatalogDoc { features })?;
    // Oracle sets.
    let mut divergent = BTreeSet::new();
    let mut consistent = BTreeSet::new();
    for i in 0..config.n_o {
        let differs = (0..r).any(|c| (x[0][[i, c]] - x[1][[i, c]]).abs() > 0.0);
        if differs {
            divergent.insert(i);
        } else {
            consistent.insert(i);
        }
    }
    let mut h = BTreeMap::new();
    let mut zeta_nonzero = BTreeSet::new();
    for i in 0..n {
        if zeta.row(i).iter().any(|v| *v != 0.0) {
            zeta_nonzero.insert(i);
        }
        if divergent.contains(&i) {
            continue;
        }
        let merged = layout.group_of[i].is_some()
            && (0..2).all(|k| {
                !layout.sites[i][k]
                    || (0..r).all(|c| {
                        let resid = x[k][[i, c]]
                            - layout.group_of[i].map(|g| beta[[g, c]]).unwrap_or(0.0);
                        resid == 0.0
                    })
            });
        h.insert(i, merged);
    }
    let cls = derive_feature_sets(&catalog, &consistent, &divergent, &h, &BTreeMap::new());
    // Signal matrices over each site's canonical order (identical to the
    // construction order by the zero-padded id scheme).
    let mut m: [Array2<f64>; 2] = [Array2::zeros((0, 0)), Array2::zeros((0, 0))];
    for (k, site) in [(0usize, Site::One), (1usize, Site::Two)] {
        let order = catalog.site_order(site);
        let nk = order.len();
        let mut mk = Array2::zeros((nk, nk));
        for a in 0..nk {
            for b in 0..nk {
                mk[[a, b]] = x[k].row(order[a]).dot(&x[k].row(order[b]));
            }
        }
        m[k] = mk;
    }
    Ok(GroundTruth {
        catalog,
        x,
        m,
        consistent,
        divergent,
        h,
        anchored: cls.anchored,
        solo: cls.solo,
        outliers: cls.outliers,
        partition: cls.partition,
        sigma,
        rare,
        zeta_zero,
        delta_sets,
        zeta_nonzero,
    })
}

/// Observed similarity matrices: signal plus symmetric heteroskedastic noise
/// on the upper triangle (diagonal included).
pub fn generate_site_matrices(
    truth: &GroundTruth,
    config: &SimConfig,
) -> Result<(SiteMatrix, SiteMatrix)> {
    let mut out: Vec<SiteMatrix> = Vec::with_capacity(2);
    for (k, site, noise_stream) in [
        (0usize, Site::One, stream::NOISE1),
        (1usize, Site::Two, stream::NOISE2),
    ] {
        let order = truth.catalog.site_order(site);
        let nk = order.len();
        let mut rng = substream(config.seed, noise_stream);
        let mut s = truth.m[k].clone();
        if config.noise_scale > 0.0 {
            for a in 0..nk {
                for b in a..nk {
                    let sd = (truth.sigma[k][order[a]] * truth.sigma[k][order[b]]).sqrt();
                    let z: f64 = rng.sample(StandardNormal);
                    s[[a, b]] += sd * z;
                    if a != b {
                        s[[b, a]] = s[[a, b]];
                    }
                }
            }
        }
        out.push(SiteMatrix::new(
            site,
            order.iter().map(|&i| truth.catalog.id(i).to_string()).collect(),
            SymmetricMatrix::from_exact(s)?,
            &truth.catalog,
        )?);
    }
    let s2 = out.pop().unwrap();
    let s1 = out.pop().unwrap();
    Ok((s1, s2))
}

fn block_index(layout_sizes: &[usize], pos: usize) -> usize {
    let mut acc = 0;
    for (b, &size) in layout_sizes.iter().enumerate() {
        acc += size;
        if pos < acc {
            return b;
        }
    }
    layout_sizes.len()
}

/// Positive pair labels with category, frequency, and transfer tags, matched
/// seeded negatives, and a 30/70 tune/eval split.
pub fn derive_pair_labels(truth: &GroundTruth, config: &SimConfig) -> Result<PairLabelSet> {
    let n = config.n;
    let catalog = &truth.catalog;
    let in_site2 = |i: usize| catalog.present(i, Site::Two);
    let trans = truth.transfer_set();
    // Category per positive pair with precedence: same-group, cross-group,
    // feature-effect, target-specific.
    let mut category: BTreeMap<(usize, usize), &'static str> = BTreeMap::new();
    let add = |map: &mut BTreeMap<(usize, usize), &'static str>,
                   i: usize,
                   j: usize,
                   tag: &'static str| {
        if i != j && in_site2(i) && in_site2(j) {
            let key = (i.min(j), i.max(j));
            map.entry(key).or_insert(tag);
        }
    };
    // Same-group pairs.
    for (_, members) in catalog.groups() {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                add(&mut category, i, j, "same-group");
            }
        }
    }
    // Cross-group pairs: the correlated AR1 triplets of group effects.
    let group_members: Vec<Vec<usize>> = {
        let mut v = vec![Vec::new(); config.groups];
        for (g, members) in catalog.groups() {
            let g_idx: usize = g[1..].parse().expect("generated group id");
            v[g_idx] = members.to_vec();
        }
        v
    };
    let mut g_start = 0;
    for &size in &cycle_layout(config.groups, &[3, 1, 1, 1, 1, 1, 1, 1]) {
        for a in g_start..g_start + size {
            for b in (a + 1)..g_start + size {
                for &i in &group_members[a] {
                    for &j in &group_members[b] {
                        add(&mut category, i, j, "cross-group");
                    }
                }
            }
        }
        g_start += size;
    }
    // Feature-effect pairs: same AR1 block of ζ, both effects nonzero.
    let zeta_layout = uniform_layout(n, 6);
    let mut zeta_blocks: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &truth.zeta_nonzero {
        zeta_blocks
            .entry(block_index(&zeta_layout, i))
            .or_default()
            .push(i);
    }
    for members in zeta_blocks.values() {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                add(&mut category, i, j, "feature-effect");
            }
        }
    }
    // Target-specific pairs: site-2 feature-site effects within one AR1 block.
    let delta_layout = uniform_layout(config.n_delta, 50);
    for (a, &i) in truth.delta_sets[1].iter().enumerate() {
        for (b, &j) in truth.delta_sets[1].iter().enumerate().skip(a + 1) {
            if block_index(&delta_layout, a) == block_index(&delta_layout, b) {
                add(&mut category, i, j, "target-specific");
            }
        }
    }
    let tags = |i: usize, j: usize| -> (String, String) {
        let freq = if truth.rare.contains(&i) || truth.rare.contains(&j) {
            "rare"
        } else {
            "freq"
        };
        let tr = if trans.contains(&i) || trans.contains(&j) {
            "Tr"
        } else {
            "NTr"
        };
        (freq.to_string(), tr.to_string())
    };
    let mut pairs: Vec<PairLabel> = Vec::new();
    for (&(i, j), &cat_tag) in &category {
        let (freq_tag, transfer_tag) = tags(i, j);
        pairs.push(PairLabel {
            id_a: catalog.id(i).to_string(),
            id_b: catalog.id(j).to_string(),
            positive: true,
            category: cat_tag.to_string(),
            freq_tag,
            transfer_tag,
            split: String::new(),
        });
    }
    // Negatives: the same number of uniformly drawn unlabeled site-2 pairs.
    let site2: Vec<usize> = catalog.site_order(Site::Two).to_vec();
    let max_pairs = site2.len() * (site2.len() - 1) / 2;
    if category.len() > max_pairs - category.len() {
        return Err(Error::Validation(
            "not enough unlabeled pairs to draw matched negatives".into(),
        ));
    }
    let mut rng = substream(config.seed, stream::NEGATIVES);
    let mut negs: BTreeSet<(usize, usize)> = BTreeSet::new();
    while negs.len() < category.len() {
        let a = site2[rng.gen_range(0..site2.len())];
        let b = site2[rng.gen_range(0..site2.len())];
        if a == b {
            continue;
        }
        let key = (a.min(b), a.max(b));
        if category.contains_key(&key) {
            continue;
        }
        negs.insert(key);
    }
    for (i, j) in negs {
        let (freq_tag, transfer_tag) = tags(i, j);
        pairs.push(PairLabel {
            id_a: catalog.id(i).to_string(),
            id_b: catalog.id(j).to_string(),
            positive: false,
            category: "none".to_string(),
            freq_tag,
            transfer_tag,
            split: String::new(),
        });
    }
    // 30% tune / 70% eval, stratified by (label, category).
    let mut split_rng = substream(config.seed, stream::SPLIT);
    let mut strata: BTreeMap<(bool, String), Vec<usize>> = BTreeMap::new();
    for (idx, p) in pairs.iter().enumerate() {
        strata
            .entry((p.positive, p.category.clone()))
            .or_default()
            .push(idx);
    }
    for indices in strata.values() {
        let take = (indices.len() as f64 * 0.3).ceil() as usize;
        let chosen = sample(&mut split_rng, indices.len(), take.min(indices.len()));
        let chosen: BTreeSet<usize> = chosen.into_iter().collect();
        for (pos, &idx) in indices.iter().enumerate() {
            pairs[idx].split = if chosen.contains(&pos) { "tune" } else { "eval" }.to_string();
        }
    }
    PairLabelSet::new(pairs)
}
