//! Command-line orchestration: `simulate`, `sppmi`, `fit`, and `evaluate`
//! subcommands with reproducible, digest-manifested file outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchmarks;
use crate::catalog::{CooccurrenceTable, FeatureCatalog, Site, SiteMatrix};
use crate::error::{Error, Result};
use crate::eval::{self, PairLabelSet};
use crate::numerics::SymmetricMatrix;
use crate::pipeline::{
    self, Diagnostics, EmbeddingSet, FeatureClassification, Frame, PipelineConfig, SiteWeights,
};
use crate::simgen::{self, GroundTruth, SimConfig};

#[derive(Parser, Debug)]
#[command(name = "transnest", version, about = "Cross-site embedding transfer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic two-site dataset with ground truth and labels.
    Simulate(CommonArgs),
    /// Build an SPPMI similarity matrix from co-occurrence counts.
    Sppmi(CommonArgs),
    /// Fit embeddings with the transfer estimator or a benchmark method.
    Fit(CommonArgs),
    /// Score fitted embeddings against labels (and truth when available).
    Evaluate(CommonArgs),
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    /// JSON configuration for the subcommand.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Fitting method: transnest | ssvd | ssg | dp | bonmi.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub rank: Option<usize>,
    /// Divergence threshold: a number, "inf", or "tune".
    #[arg(long)]
    pub lambda: Option<String>,
    /// Merge threshold: a number, "inf", or "tune".
    #[arg(long)]
    pub mu: Option<String>,
    /// "auto" or explicit "w1,w2".
    #[arg(long = "site-weights")]
    pub site_weights: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl CommonArgs {
    fn read_config_value(&self) -> Result<serde_json::Value> {
        let text =
            fs::read_to_string(&self.config).map_err(|e| Error::io(&self.config, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", self.config.display())))
    }
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Symmetric matrix CSV: header `id,<ids...>`, one labeled row per feature.
pub fn save_matrix_csv(m: &SiteMatrix) -> String {
    let mut out = String::from("id");
    for id in &m.feature_order {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    let a = m.matrix.as_array();
    for (row, id) in m.feature_order.iter().enumerate() {
        out.push_str(id);
        for col in 0..m.feature_order.len() {
            out.push(',');
            out.push_str(&fmt_f64(a[[row, col]]));
        }
        out.push('\n');
    }
    out
}

pub fn load_matrix_csv(path: &Path, site: Site, catalog: &FeatureCatalog) -> Result<SiteMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Validation(format!("{}: empty matrix file", path.display())))?;
    let ids: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
    let n = ids.len();
    let mut a = Array2::<f64>::zeros((n, n));
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let row_id = cols.next().unwrap_or("");
        if i >= n || row_id != ids[i] {
            return Err(Error::Validation(format!(
                "{}: row label `{row_id}` does not match header order",
                path.display()
            )));
        }
        for j in 0..n {
            let tok = cols.next().ok_or_else(|| {
                Error::Validation(format!("{}: short row {}", path.display(), i + 2))
            })?;
            a[[i, j]] = tok.parse::<f64>().map_err(|e| {
                Error::Validation(format!("{}: bad number `{tok}`: {e}", path.display()))
            })?;
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::Validation(format!(
            "{}: {rows} rows for {n} columns",
            path.display()
        )));
    }
    SiteMatrix::new(site, ids, SymmetricMatrix::new(a)?, catalog)
}

/// Embeddings CSV: header `id,site,d1..dr`; site 1 rows then site 2 rows.
pub fn save_embeddings_csv(emb: &EmbeddingSet) -> String {
    let mut out = String::from("id,site");
    for d in 1..=emb.rank {
        out.push_str(&format!(",d{d}"));
    }
    out.push('\n');
    for site in Site::BOTH {
        for (id, vec) in &emb.per_site[site.index()] {
            out.push_str(id);
            out.push_str(&format!(",{}", site.number()));
            for v in vec {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
    }
    out
}

pub fn load_embeddings_csv(path: &Path, frame: [Frame; 2]) -> Result<EmbeddingSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Validation(format!("{}: empty embeddings file", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "id" || cols[1] != "site" {
        return Err(Error::Validation(format!(
            "{}: embeddings header must be id,site,d1..dr",
            path.display()
        )));
    }
    let rank = cols.len() - 2;
    let mut emb = EmbeddingSet::new(rank, frame);
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != rank + 2 {
            return Err(Error::Validation(format!(
                "{}: line {} has {} columns, expected {}",
                path.display(),
                lineno + 2,
                parts.len(),
                rank + 2
            )));
        }
        let site = Site::from_number(parts[1].parse::<u8>().map_err(|e| {
            Error::Validation(format!("{}: bad site `{}`: {e}", path.display(), parts[1]))
        })?)?;
        let vec: Vec<f64> = parts[2..]
            .iter()
            .map(|tok| {
                tok.parse::<f64>().map_err(|e| {
                    Error::Validation(format!("{}: bad number `{tok}`: {e}", path.display()))
                })
            })
            .collect::<Result<_>>()?;
        emb.insert(site, parts[0], vec)?;
    }
    Ok(emb)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassificationDoc {
    pub consistent: Vec<String>,
    pub divergent: Vec<String>,
    pub merged: Vec<String>,
    pub anchored: Vec<String>,
    pub solo: Vec<String>,
    pub outliers: Vec<String>,
    pub partition: Vec<Vec<String>>,
}

fn ids_of(catalog: &FeatureCatalog, set: &BTreeSet<usize>) -> Vec<String> {
    set.iter().map(|&i| catalog.id(i).to_string()).collect()
}

impl ClassificationDoc {
    pub fn from_classification(
        cls: &FeatureClassification,
        catalog: &FeatureCatalog,
    ) -> ClassificationDoc {
        let merged: BTreeSet<usize> = cls
            .h_hat
            .iter()
            .filter(|(_, &v)| v)
            .map(|(&i, _)| i)
            .collect();
        ClassificationDoc {
            consistent: ids_of(catalog, &cls.consistent),
            divergent: ids_of(catalog, &cls.divergent),
            merged: ids_of(catalog, &merged),
            anchored: ids_of(catalog, &cls.anchored),
            solo: ids_of(catalog, &cls.solo),
            outliers: ids_of(catalog, &cls.outliers),
            partition: cls
                .partition
                .iter()
                .map(|block| block.iter().map(|&i| catalog.id(i).to_string()).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DiagnosticsDoc {
    pub method: String,
    pub rank: usize,
    pub lambda: f64,
    pub mu: f64,
    pub tuned: bool,
    pub site_weights: [f64; 2],
    pub frames: [String; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_hat_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub lambda_stats: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub mu_stats: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub set_sizes: BTreeMap<String, usize>,
    pub clipped_initial: [usize; 2],
    pub clipped_refine: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub demoted_solo: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Ground-truth file: true embeddings, noise tags, and oracle feature sets.
#[derive(Debug, Serialize, Deserialize)]
pub struct TruthDoc {
    pub rank: usize,
    pub rare: Vec<String>,
    pub consistent: Vec<String>,
    pub divergent: Vec<String>,
    pub merged: Vec<String>,
    pub anchored: Vec<String>,
    pub solo: Vec<String>,
    pub outliers: Vec<String>,
    pub partition: Vec<Vec<String>>,
    pub site1_embeddings: BTreeMap<String, Vec<f64>>,
    pub site2_embeddings: BTreeMap<String, Vec<f64>>,
}

impl TruthDoc {
    pub fn from_truth(truth: &GroundTruth) -> TruthDoc {
        let catalog = &truth.catalog;
        let merged: BTreeSet<usize> = truth
            .h
            .iter()
            .filter(|(_, &v)| v)
            .map(|(&i, _)| i)
            .collect();
        let emb_map = |k: usize, site: Site| -> BTreeMap<String, Vec<f64>> {
            catalog
                .site_order(site)
                .iter()
                .map(|&i| (catalog.id(i).to_string(), truth.x[k].row(i).to_vec()))
                .collect()
        };
        TruthDoc {
            rank: truth.x[0].ncols(),
            rare: ids_of(catalog, &truth.rare),
            consistent: ids_of(catalog, &truth.consistent),
            divergent: ids_of(catalog, &truth.divergent),
            merged: ids_of(catalog, &merged),
            anchored: ids_of(catalog, &truth.anchored),
            solo: ids_of(catalog, &truth.solo),
            outliers: ids_of(catalog, &truth.outliers),
            partition: truth
                .partition
                .iter()
                .map(|b| b.iter().map(|&i| catalog.id(i).to_string()).collect())
                .collect(),
            site1_embeddings: emb_map(0, Site::One),
            site2_embeddings: emb_map(1, Site::Two),
        }
    }

    /// The target-site signal matrix M₂ = X₂X₂ᵀ in canonical order, plus the
    /// rare feature index set, for Frobenius reports.
    pub fn target_signal(&self, catalog: &FeatureCatalog) -> Result<(Array2<f64>, BTreeSet<usize>)> {
        let order = catalog.site_order(Site::Two);
        let n2 = order.len();
        let mut x2 = Array2::<f64>::zeros((n2, self.rank));
        for (row, &idx) in order.iter().enumerate() {
            let id = catalog.id(idx);
            let v = self.site2_embeddings.get(id).ok_or_else(|| {
                Error::Validation(format!("truth file lacks an embedding for `{id}`"))
            })?;
            if v.len() != self.rank {
                return Err(Error::Dim(format!(
                    "truth embedding for `{id}` has length {}, expected {}",
                    v.len(),
                    self.rank
                )));
            }
            for (c, &val) in v.iter().enumerate() {
                x2[[row, c]] = val;
            }
        }
        let mut rare = BTreeSet::new();
        for id in &self.rare {
            let idx = catalog
                .lookup(id)
                .ok_or_else(|| Error::Validation(format!("rare id `{id}` not in catalog")))?;
            rare.insert(idx);
        }
        Ok((x2.dot(&x2.t()), rare))
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

/// Writes files into `out` and records their content digests in a manifest.
struct OutputWriter {
    out: PathBuf,
    digests: BTreeMap<String, String>,
}

impl OutputWriter {
    fn new(out: &Path) -> Result<OutputWriter> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(OutputWriter {
            out: out.to_path_buf(),
            digests: BTreeMap::new(),
        })
    }

    fn write(&mut self, name: &str, content: &str) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
        self.digests
            .insert(name.to_string(), sha256_hex(content.as_bytes()));
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| Error::Validation(format!("serializing {name}: {e}")))?;
        text.push('\n');
        self.write(name, &text)
    }

    fn finish(
        self,
        command: &str,
        config: serde_json::Value,
        seed: Option<u64>,
    ) -> Result<()> {
        let manifest = serde_json::json!({
            "command": command,
            "seed": seed,
            "config": config,
            "outputs": self.digests,
        });
        let name = format!("manifest-{command}.json");
        let mut text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Validation(format!("serializing manifest: {e}")))?;
        text.push('\n');
        let path = self.out.join(&name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_simulate(args: &CommonArgs) -> Result<()> {
    let raw = args.read_config_value()?;
    let mut config: SimConfig = match raw.get("preset").and_then(|p| p.as_str()) {
        Some(preset) => {
            let seed = raw.get("seed").and_then(|s| s.as_u64()).unwrap_or(0);
            match preset {
                "c1" => SimConfig::paper_c1(seed),
                "c2" => SimConfig::paper_c2(seed),
                "c3" => SimConfig::paper_c3(seed),
                "c4" => SimConfig::paper_c4(seed),
                "scaled" => SimConfig::scaled(seed),
                other => {
                    return Err(Error::Config(format!("unknown preset `{other}`")));
                }
            }
        }
        None => serde_json::from_value(raw.clone())
            .map_err(|e| Error::Config(format!("simulate config: {e}")))?,
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let truth = simgen::generate_ground_truth(&config)?;
    let (s1, s2) = simgen::generate_site_matrices(&truth, &config)?;
    let labels = simgen::derive_pair_labels(&truth, &config)?;
    let mut w = OutputWriter::new(&args.out)?;
    let catalog_text = serde_json::to_string_pretty(&truth.catalog.to_doc())
        .map_err(|e| Error::Validation(format!("serializing catalog: {e}")))?;
    w.write("catalog.json", &format!("{catalog_text}\n"))?;
    w.write("s1.csv", &save_matrix_csv(&s1))?;
    w.write("s2.csv", &save_matrix_csv(&s2))?;
    w.write_json("truth.json", &TruthDoc::from_truth(&truth))?;
    w.write("labels.csv", &labels_csv_text(&labels))?;
    let config_value = serde_json::to_value(&config)
        .map_err(|e| Error::Validation(format!("serializing config: {e}")))?;
    w.finish("simulate", config_value, Some(config.seed))
}

fn labels_csv_text(labels: &PairLabelSet) -> String {
    let mut out = String::from("id_a,id_b,label,category,freq_tag,transfer_tag,split\n");
    for p in &labels.pairs {
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
    out
}

#[derive(Debug, Deserialize, Serialize)]
struct SppmiConfig {
    cooccurrence: String,
    shift: u32,
}

fn cmd_sppmi(args: &CommonArgs) -> Result<()> {
    let raw = args.read_config_value()?;
    let config: SppmiConfig =
        serde_json::from_value(raw.clone()).map_err(|e| Error::Config(format!("sppmi config: {e}")))?;
    let cooc_path = PathBuf::from(&config.cooccurrence);
    if !cooc_path.exists() {
        return Err(Error::Config(format!(
            "co-occurrence file `{}` does not exist",
            cooc_path.display()
        )));
    }
    let table = CooccurrenceTable::load_csv(&cooc_path)?;
    let (ids, matrix) = crate::catalog::sppmi_from_cooccurrence(&table, config.shift)?;
    let mut out = String::from("id");
    for id in &ids {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    let a = matrix.as_array();
    for (row, id) in ids.iter().enumerate() {
        out.push_str(id);
        for col in 0..ids.len() {
            out.push(',');
            out.push_str(&fmt_f64(a[[row, col]]));
        }
        out.push('\n');
    }
    let mut w = OutputWriter::new(&args.out)?;
    w.write("sppmi.csv", &out)?;
    w.finish("sppmi", raw, args.seed)
}

#[derive(Debug, Deserialize, Serialize, Default)]
struct FitConfig {
    catalog: String,
    #[serde(default)]
    s1: Option<String>,
    s2: String,
    #[serde(default)]
    labels: Option<String>,
    #[serde(default)]
    method: Option<String>,
    #[serde(default)]
    rank: Option<usize>,
    #[serde(default)]
    lambda: Option<serde_json::Value>,
    #[serde(default)]
    mu: Option<serde_json::Value>,
    #[serde(default)]
    site_weights: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ThresholdSpec {
    Tune,
    Value(f64),
}

fn parse_threshold(name: &str, text: &str) -> Result<ThresholdSpec> {
    if text == "tune" {
        return Ok(ThresholdSpec::Tune);
    }
    let v: f64 = text
        .parse()
        .map_err(|e| Error::Config(format!("{name} `{text}`: {e}")))?;
    if v.is_nan() || v < 0.0 {
        return Err(Error::Config(format!("{name} must be ≥ 0, got {v}")));
    }
    Ok(ThresholdSpec::Value(v))
}

fn threshold_from_json(name: &str, v: &serde_json::Value) -> Result<ThresholdSpec> {
    match v {
        serde_json::Value::String(s) => parse_threshold(name, s),
        serde_json::Value::Number(n) => parse_threshold(name, &n.to_string()),
        other => Err(Error::Config(format!("{name}: unsupported value {other}"))),
    }
}

fn parse_site_weights(text: &str) -> Result<SiteWeights> {
    if text == "auto" {
        return Ok(SiteWeights::Auto);
    }
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::Config(format!(
            "site weights must be `auto` or `w1,w2`, got `{text}`"
        )));
    }
    let w1: f64 = parts[0]
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("site weight `{}`: {e}", parts[0])))?;
    let w2: f64 = parts[1]
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("site weight `{}`: {e}", parts[1])))?;
    Ok(SiteWeights::Explicit(w1, w2))
}

fn require_exists(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "referenced path `{}` does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn q_hat_digest(q: &crate::numerics::OrthogonalMatrix) -> String {
    let mut text = String::new();
    for v in q.as_array().iter() {
        text.push_str(&fmt_f64(*v));
        text.push(',');
    }
    sha256_hex(text.as_bytes())
}

fn cmd_fit(args: &CommonArgs) -> Result<()> {
    let raw = args.read_config_value()?;
    let config: FitConfig =
        serde_json::from_value(raw.clone()).map_err(|e| Error::Config(format!("fit config: {e}")))?;
    let method = args
        .method
        .clone()
        .or_else(|| config.method.clone())
        .unwrap_or_else(|| "transnest".to_string());
    if !["transnest", "ssvd", "ssg", "dp", "bonmi"].contains(&method.as_str()) {
        return Err(Error::Config(format!("unknown method `{method}`")));
    }
    let rank = args
        .rank
        .or(config.rank)
        .ok_or_else(|| Error::Config("rank is required (flag --rank or config)".into()))?;
    let catalog_path = PathBuf::from(&config.catalog);
    require_exists(&catalog_path)?;
    let catalog = FeatureCatalog::load(&catalog_path)?;
    let s2_path = PathBuf::from(&config.s2);
    require_exists(&s2_path)?;
    let s2 = load_matrix_csv(&s2_path, Site::Two, &catalog)?;
    let needs_s1 = method != "ssvd" && method != "ssg";
    let s1 = match &config.s1 {
        Some(p) => {
            let p = PathBuf::from(p);
            require_exists(&p)?;
            Some(load_matrix_csv(&p, Site::One, &catalog)?)
        }
        None if needs_s1 => {
            return Err(Error::Config(format!(
                "method `{method}` requires the source matrix s1"
            )))
        }
        None => None,
    };
    let site_weights = match args.site_weights.as_deref().or(config.site_weights.as_deref()) {
        Some(text) => parse_site_weights(text)?,
        None => SiteWeights::Auto,
    };
    let lambda_spec = match args.lambda.as_deref() {
        Some(text) => parse_threshold("lambda", text)?,
        None => match &config.lambda {
            Some(v) => threshold_from_json("lambda", v)?,
            None => ThresholdSpec::Value(f64::INFINITY),
        },
    };
    let mu_spec = match args.mu.as_deref() {
        Some(text) => parse_threshold("mu", text)?,
        None => match &config.mu {
            Some(v) => threshold_from_json("mu", v)?,
            None => ThresholdSpec::Value(f64::INFINITY),
        },
    };
    let mut w = OutputWriter::new(&args.out)?;
    let mut tuned = false;
    match method.as_str() {
        "transnest" => {
            let s1 = s1.as_ref().expect("checked above");
            let (lambda, mu) = match (lambda_spec, mu_spec) {
                (ThresholdSpec::Value(l), ThresholdSpec::Value(m)) => (l, m),
                _ => {
                    let labels_path = config.labels.as_ref().ok_or_else(|| {
                        Error::Config("threshold tuning requires a labels file".into())
                    })?;
                    let labels_path = PathBuf::from(labels_path);
                    require_exists(&labels_path)?;
                    let labels = PairLabelSet::load_csv(&labels_path)?;
                    tuned = true;
                    let (l_t, m_t) = eval::tune_thresholds(
                        s1,
                        &s2,
                        &catalog,
                        rank,
                        site_weights,
                        None,
                        &labels,
                    )?;
                    (
                        match lambda_spec {
                            ThresholdSpec::Tune => l_t,
                            ThresholdSpec::Value(l) => l,
                        },
                        match mu_spec {
                            ThresholdSpec::Tune => m_t,
                            ThresholdSpec::Value(m) => m,
                        },
                    )
                }
            };
            let pconfig = PipelineConfig {
                rank,
                lambda,
                mu,
                site_weights,
            };
            let (emb, cls, diag) = pipeline::run_pipeline(s1, &s2, &catalog, &pconfig)?;
            w.write("embeddings.csv", &save_embeddings_csv(&emb))?;
            w.write_json(
                "classification.json",
                &ClassificationDoc::from_classification(&cls, &catalog),
            )?;
            w.write_json("diagnostics.json", &diagnostics_doc(&method, rank, lambda, mu, tuned, &emb, Some(&diag)))?;
        }
        _ => {
            let emb = match method.as_str() {
                "ssvd" => benchmarks::ssvd(&s2, rank)?,
                "ssg" => benchmarks::ssg(&s2, &catalog, rank)?,
                "dp" | "bonmi" => {
                    let s1 = s1.as_ref().expect("checked above");
                    let weights = resolve_weights(s1, &s2, &catalog, rank, site_weights)?;
                    if method == "dp" {
                        benchmarks::dp(s1, &s2, &catalog, rank, weights)?
                    } else {
                        benchmarks::bonmi(s1, &s2, &catalog, rank, weights)?
                    }
                }
                _ => unreachable!(),
            };
            w.write("embeddings.csv", &save_embeddings_csv(&emb))?;
            w.write_json(
                "diagnostics.json",
                &diagnostics_doc(&method, rank, f64::NAN, f64::NAN, false, &emb, None),
            )?;
        }
    }
    w.finish("fit", raw, args.seed)
}

fn resolve_weights(
    s1: &SiteMatrix,
    s2: &SiteMatrix,
    catalog: &FeatureCatalog,
    rank: usize,
    site_weights: SiteWeights,
) -> Result<(f64, f64)> {
    match site_weights {
        SiteWeights::Explicit(w1, w2) => Ok((w1, w2)),
        SiteWeights::Auto => {
            let (emb, _) = pipeline::initial_embeddings(s1, s2, rank)?;
            let (w, _) = pipeline::compute_site_weights(s1, s2, &emb, catalog)?;
            Ok(w)
        }
    }
}

fn diagnostics_doc(
    method: &str,
    rank: usize,
    lambda: f64,
    mu: f64,
    tuned: bool,
    emb: &EmbeddingSet,
    diag: Option<&Diagnostics>,
) -> DiagnosticsDoc {
    let frames = [emb.frame[0].as_str().to_string(), emb.frame[1].as_str().to_string()];
    match diag {
        Some(d) => DiagnosticsDoc {
            method: benchmarks::method_label(method).to_string(),
            rank,
            lambda,
            mu,
            tuned,
            site_weights: [d.site_weights.0, d.site_weights.1],
            frames,
            q_hat_sha256: Some(q_hat_digest(&d.q_hat)),
            lambda_stats: d.lambda_stats.clone(),
            mu_stats: d.mu_stats.clone(),
            set_sizes: d.set_sizes.clone(),
            clipped_initial: d.clipped_initial,
            clipped_refine: d.clipped_refine,
            demoted_solo: d.demoted_solo.clone(),
            notes: d.notes.clone(),
        },
        None => DiagnosticsDoc {
            method: benchmarks::method_label(method).to_string(),
            rank,
            lambda,
            mu,
            tuned,
            site_weights: [f64::NAN, f64::NAN],
            frames,
            q_hat_sha256: None,
            lambda_stats: BTreeMap::new(),
            mu_stats: BTreeMap::new(),
            set_sizes: BTreeMap::new(),
            clipped_initial: [0, 0],
            clipped_refine: 0,
            demoted_solo: Vec::new(),
            notes: Vec::new(),
        },
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct EvaluateConfig {
    catalog: String,
    embeddings: String,
    labels: String,
    #[serde(default)]
    truth: Option<String>,
    #[serde(default)]
    split: Option<String>,
}

fn cmd_evaluate(args: &CommonArgs) -> Result<()> {
    let raw = args.read_config_value()?;
    let config: EvaluateConfig = serde_json::from_value(raw.clone())
        .map_err(|e| Error::Config(format!("evaluate config: {e}")))?;
    let catalog_path = PathBuf::from(&config.catalog);
    require_exists(&catalog_path)?;
    let catalog = FeatureCatalog::load(&catalog_path)?;
    let emb_path = PathBuf::from(&config.embeddings);
    require_exists(&emb_path)?;
    let emb = load_embeddings_csv(&emb_path, [Frame::Refined, Frame::Refined])?;
    let labels_path = PathBuf::from(&config.labels);
    require_exists(&labels_path)?;
    let labels = PairLabelSet::load_csv(&labels_path)?;
    let split = config.split.clone().unwrap_or_else(|| "eval".to_string());
    let truth_data = match &config.truth {
        Some(p) => {
            let p = PathBuf::from(p);
            require_exists(&p)?;
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let doc: TruthDoc = serde_json::from_str(&text)
                .map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?;
            Some(doc.target_signal(&catalog)?)
        }
        None => None,
    };
    let report = eval::evaluate_embeddings(
        &emb,
        &catalog,
        &labels,
        &split,
        truth_data.as_ref().map(|(m2, rare)| (m2, rare)),
    )?;
    let mut w = OutputWriter::new(&args.out)?;
    w.write_json("report.json", &report)?;
    w.finish("evaluate", raw, args.seed)
}

/// Dispatches a parsed command line.
pub fn execute(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Sppmi(args) => cmd_sppmi(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    }
}
