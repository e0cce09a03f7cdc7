//! End-to-end protocol: matrices, k sweeps, stability runs and single
//! clusterings driven by a [`RunConfig`].
//!
//! Every file written carries the config hash, master seed, `sigma_used` and
//! library version. CSV files start with a `#` comment line holding them;
//! JSON files have a `meta` object. Writes go through a temporary file and a
//! rename, so readers never see half a file.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{
    derive_seed, fuzzy_cmeans_dtw_precomputed, fuzzy_kmedoids, harden, hierarchical, kernel_kmeans,
    kmeans_dtw_precomputed, ClusterConfig, FuzzyPartition, HardPartition,
};
use crate::data::{EmaDataset, MissingPolicy};
use crate::distance::{distance_matrix, DistanceMatrix, DtwConfig, MetricTag};
use crate::error::{Error, Result};
use crate::kernel::{kernel_matrix, kernel_to_distance, GakConfig, KernelMatrix};
use crate::validity::{evaluate_fuzzy, silhouette, stability_suite, QualityReport, StabilityReport};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Silhouettes closer than this count as tied when choosing k.
pub const SILHOUETTE_TIE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// k-means under DTW with DBA barycenters.
    KmDtw,
    /// Kernel k-means on the normalized GAK Gram matrix.
    KmGak,
    HcDtw,
    /// Hierarchical clustering on kernel-induced distances.
    HcGak,
    FcmDtw,
    FkmDtw,
    /// Fuzzy k-medoids on kernel-induced distances.
    FkmGak,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::KmDtw,
        Method::KmGak,
        Method::HcDtw,
        Method::HcGak,
        Method::FcmDtw,
        Method::FkmDtw,
        Method::FkmGak,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::KmDtw => "km_dtw",
            Method::KmGak => "km_gak",
            Method::HcDtw => "hc_dtw",
            Method::HcGak => "hc_gak",
            Method::FcmDtw => "fcm_dtw",
            Method::FkmDtw => "fkm_dtw",
            Method::FkmGak => "fkm_gak",
        }
    }

    fn index(self) -> u64 {
        Method::ALL.iter().position(|&m| m == self).expect("listed") as u64
    }

    /// Hierarchical clustering does not depend on the seed.
    pub fn is_seed_sensitive(self) -> bool {
        !matches!(self, Method::HcDtw | Method::HcGak)
    }

    pub fn is_fuzzy(self) -> bool {
        matches!(self, Method::FcmDtw | Method::FkmDtw | Method::FkmGak)
    }

    pub fn uses_gak(self) -> bool {
        matches!(self, Method::KmGak | Method::HcGak | Method::FkmGak)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

fn default_normalize() -> bool {
    true
}
fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn default_k_range() -> [usize; 2] {
    [2, 6]
}
fn default_stability_runs() -> usize {
    50
}
fn default_sigma_multiplier() -> f64 {
    1.0
}
fn default_restarts() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: PathBuf,
    #[serde(default)]
    pub missing_policy: MissingPolicy,
    #[serde(default = "default_normalize")]
    pub normalize: bool,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Inclusive `[k_min, k_max]`.
    #[serde(default = "default_k_range")]
    pub k_range: [usize; 2],
    #[serde(default = "default_stability_runs")]
    pub n_stability_runs: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_sigma_multiplier")]
    pub sigma_multiplier: f64,
    /// Sakoe-Chiba radius shared by DTW and GAK; `None` is unconstrained.
    #[serde(default)]
    pub dtw_band: Option<usize>,
    pub output_dir: PathBuf,
    /// Runs per sweep cell; the lowest objective is kept.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    /// k used by the stability command; defaults to each method's chosen k.
    #[serde(default)]
    pub stability_k: Option<usize>,
}

impl RunConfig {
    /// Defaults for everything except the two paths.
    pub fn new(input: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            input: input.into(),
            missing_policy: MissingPolicy::default(),
            normalize: default_normalize(),
            methods: default_methods(),
            k_range: default_k_range(),
            n_stability_runs: default_stability_runs(),
            master_seed: 0,
            sigma_multiplier: default_sigma_multiplier(),
            dtw_band: None,
            output_dir: output_dir.into(),
            restarts: default_restarts(),
            stability_k: None,
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Checks everything that can be checked without the data, then `k`
    /// against the cohort size.
    pub fn validate(&self, n: usize) -> Result<()> {
        let [lo, hi] = self.k_range;
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if lo < 2 || lo > hi || hi > n {
            return Err(Error::Config(format!("k_range [{lo}, {hi}] must lie within [2, {n}]")));
        }
        if let Some(k) = self.stability_k {
            if k < 2 || k > n {
                return Err(Error::Config(format!("stability_k {k} must lie within [2, {n}]")));
            }
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        if self.n_stability_runs < 2 {
            return Err(Error::Config("n_stability_runs must be at least 2".into()));
        }
        if !(self.sigma_multiplier > 0.0 && self.sigma_multiplier.is_finite()) {
            return Err(Error::Config("sigma_multiplier must be positive".into()));
        }
        Ok(())
    }

    fn dtw_config(&self) -> DtwConfig {
        DtwConfig {
            band_radius: self.dtw_band,
            ..DtwConfig::default()
        }
    }

    fn gak_config(&self) -> GakConfig {
        GakConfig {
            sigma_multiplier: self.sigma_multiplier,
            band_radius: self.dtw_band,
            ..GakConfig::default()
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the fields in `keys` (or all fields except the paths when `keys`
/// is empty) together with the digest of the input bytes.
fn hash_config(cfg: &RunConfig, input_digest: &str, keys: &[&str]) -> String {
    let serde_json::Value::Object(mut map) = serde_json::to_value(cfg).expect("config serializes") else {
        unreachable!("config is a struct")
    };
    map.remove("input");
    map.remove("output_dir");
    if !keys.is_empty() {
        map.retain(|k, _| keys.contains(&k.as_str()));
    }
    let canonical = serde_json::to_string(&map).expect("map serializes");
    sha256_hex(format!("{canonical}\n{input_digest}").as_bytes())
}

/// Settings that determine the DTW matrix; the kernel also depends on
/// `sigma_multiplier`.
const DTW_KEYS: [&str; 3] = ["missing_policy", "normalize", "dtw_band"];
const GAK_KEYS: [&str; 4] = ["missing_policy", "normalize", "dtw_band", "sigma_multiplier"];

/// Provenance stamped on every output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub version: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub sigma_used: Option<f64>,
}

impl Meta {
    fn csv_comment(&self) -> String {
        let sigma = self.sigma_used.map_or("none".to_string(), |s| s.to_string());
        format!(
            "# mtscluster {} config_hash={} master_seed={} sigma_used={}\n",
            self.version, self.config_hash, self.master_seed, sigma
        )
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_csv_with_meta(path: &Path, meta: &Meta, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = meta.csv_comment().into_bytes();
    body(&mut buf)?;
    write_atomic(path, &buf)
}

fn parse_sigma_comment(text: &str) -> Option<f64> {
    let first = text.lines().next()?;
    first
        .strip_prefix('#')?
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix("sigma_used="))?
        .parse()
        .ok()
}

/// Loaded data and the matrices the configured methods need.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: RunConfig,
    pub dataset: EmaDataset,
    pub config_hash: String,
    pub dtw: Option<DistanceMatrix>,
    pub kernel: Option<KernelMatrix>,
    /// `√(2 − 2 k̃)` from the normalized kernel.
    pub kernel_distance: Option<DistanceMatrix>,
    /// Matrices read back from the cache rather than computed.
    pub cache_hits: Vec<String>,
}

impl Prepared {
    pub fn meta(&self) -> Meta {
        Meta {
            version: VERSION.to_string(),
            config_hash: self.config_hash.clone(),
            master_seed: self.config.master_seed,
            sigma_used: self.kernel.as_ref().map(KernelMatrix::sigma_used),
        }
    }

    /// The distance a method clusters on and is evaluated with.
    pub fn metric_for(&self, method: Method) -> Result<&DistanceMatrix> {
        let dm = if method.uses_gak() {
            self.kernel_distance.as_ref()
        } else {
            self.dtw.as_ref()
        };
        dm.ok_or_else(|| Error::Config(format!("no matrix prepared for {method}")))
    }

    fn kernel(&self) -> Result<&KernelMatrix> {
        self.kernel
            .as_ref()
            .ok_or_else(|| Error::Config("no kernel matrix prepared".into()))
    }
}

/// Loads, repairs and normalizes the input, then builds or reuses cached
/// matrices for every configured method.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let bytes = fs::read(&cfg.input).map_err(|e| Error::io(&cfg.input, e))?;
    let digest = sha256_hex(&bytes);
    let raw = EmaDataset::from_csv_reader(bytes.as_slice(), None)?;
    cfg.validate(raw.len())?;
    let mut dataset = raw.repair_missing(cfg.missing_policy)?;
    if cfg.normalize {
        dataset = dataset.znormalize()?;
    }
    let config_hash = hash_config(cfg, &digest, &[]);
    let cache = cfg.output_dir.join("cache");
    let mut cache_hits = Vec::new();

    // Only the matrices some configured method uses are built.
    let needs_dtw = cfg.methods.iter().any(|m| !m.uses_gak());
    let needs_gak = cfg.methods.iter().any(|m| m.uses_gak());

    let dtw = if needs_dtw {
        let matrix_hash = hash_config(cfg, &digest, &DTW_KEYS);
        let path = cache.join(format!("dtw-{}.csv", &matrix_hash[..16]));
        let dm = match fs::read(&path) {
            Ok(cached) => {
                cache_hits.push("dtw".to_string());
                DistanceMatrix::read_csv(cached.as_slice(), MetricTag::Dtw)?
            }
            Err(_) => {
                let dm = distance_matrix(&dataset, &cfg.dtw_config())?;
                let mut buf = format!("# mtscluster {VERSION} matrix_hash={matrix_hash} sigma_used=none\n").into_bytes();
                dm.write_csv(&mut buf)?;
                write_atomic(&path, &buf)?;
                dm
            }
        };
        check_ids(&dataset, dm.ids())?;
        Some(dm)
    } else {
        None
    };

    let kernel = if needs_gak {
        let matrix_hash = hash_config(cfg, &digest, &GAK_KEYS);
        let path = cache.join(format!("gak-{}.csv", &matrix_hash[..16]));
        let cached = fs::read_to_string(&path).ok().and_then(|text| {
            let sigma = parse_sigma_comment(&text)?;
            Some((text, sigma))
        });
        let km = match cached {
            Some((text, sigma)) => {
                cache_hits.push("gak".to_string());
                KernelMatrix::read_csv(text.as_bytes(), sigma, true)?
            }
            None => {
                let km = kernel_matrix(&dataset, &cfg.gak_config())?;
                let mut buf = format!(
                    "# mtscluster {VERSION} matrix_hash={matrix_hash} sigma_used={}\n",
                    km.sigma_used()
                )
                .into_bytes();
                km.write_csv(&mut buf)?;
                write_atomic(&path, &buf)?;
                km
            }
        };
        check_ids(&dataset, km.ids())?;
        Some(km)
    } else {
        None
    };
    let kernel_distance = kernel.as_ref().map(kernel_to_distance).transpose()?;

    Ok(Prepared {
        config: cfg.clone(),
        dataset,
        config_hash,
        dtw,
        kernel,
        kernel_distance,
        cache_hits,
    })
}

fn check_ids(ds: &EmaDataset, ids: &[String]) -> Result<()> {
    if ds.ids() != ids {
        return Err(Error::InvalidMatrix("cached matrix ids do not match the input".into()));
    }
    Ok(())
}

/// Result of one clustering run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Hard(HardPartition),
    Fuzzy(FuzzyPartition),
}

impl Outcome {
    pub fn objective(&self) -> f64 {
        match self {
            Outcome::Hard(hp) => hp.objective,
            Outcome::Fuzzy(fp) => fp.objective,
        }
    }

    /// The partition itself, or the argmax hardening of a fuzzy one.
    pub fn hardened(&self) -> HardPartition {
        match self {
            Outcome::Hard(hp) => hp.clone(),
            Outcome::Fuzzy(fp) => harden(fp),
        }
    }

    pub fn empty_clusters(&self) -> &[usize] {
        match self {
            Outcome::Hard(hp) => &hp.empty_clusters,
            Outcome::Fuzzy(fp) => &fp.empty_clusters,
        }
    }
}

/// One run of `method` with `k` clusters and the given seed.
pub fn run_method(prep: &Prepared, method: Method, k: usize, seed: u64) -> Result<Outcome> {
    let ccfg = ClusterConfig::new(k).with_seed(seed);
    let dcfg = prep.config.dtw_config();
    Ok(match method {
        Method::KmDtw => Outcome::Hard(kmeans_dtw_precomputed(
            &prep.dataset,
            prep.metric_for(method)?,
            &dcfg,
            &ccfg,
        )?),
        Method::KmGak => Outcome::Hard(kernel_kmeans(prep.kernel()?, &ccfg)?),
        Method::HcDtw | Method::HcGak => Outcome::Hard(hierarchical(prep.metric_for(method)?, &ccfg)?),
        Method::FcmDtw => Outcome::Fuzzy(fuzzy_cmeans_dtw_precomputed(
            &prep.dataset,
            prep.metric_for(method)?,
            &dcfg,
            &ccfg,
        )?),
        Method::FkmDtw | Method::FkmGak => Outcome::Fuzzy(fuzzy_kmedoids(prep.metric_for(method)?, &ccfg)?),
    })
}

/// Seed of the restarts for one (method, k) cell; restart `r` uses
/// `derive_seed(cell_seed(..), r)`.
pub fn cell_seed(master: u64, method: Method, k: usize) -> u64 {
    derive_seed(derive_seed(master, method.index()), k as u64)
}

/// Runs every restart and keeps the lowest objective (earliest on ties).
/// Seed-insensitive methods run once. Also returns all hardened runs.
pub fn best_of_restarts(
    prep: &Prepared,
    method: Method,
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<(Outcome, Vec<HardPartition>)> {
    let runs = if method.is_seed_sensitive() { restarts.max(1) } else { 1 };
    let outcomes: Vec<Outcome> = (0..runs as u64)
        .into_par_iter()
        .map(|r| run_method(prep, method, k, derive_seed(seed, r)))
        .collect::<Result<_>>()?;
    let hardened = outcomes.iter().map(Outcome::hardened).collect();
    let best = outcomes
        .into_iter()
        .reduce(|a, b| if b.objective() < a.objective() { b } else { a })
        .expect("at least one run");
    Ok((best, hardened))
}

/// Quality of an outcome against the method's own distance.
pub fn evaluate(prep: &Prepared, method: Method, outcome: &Outcome) -> Result<QualityReport> {
    let dm = prep.metric_for(method)?;
    match outcome {
        Outcome::Hard(hp) => silhouette(dm, hp),
        Outcome::Fuzzy(fp) => evaluate_fuzzy(dm, fp),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: Method,
    pub k: usize,
    /// `None` when the cell failed; see `error`.
    pub quality: Option<QualityReport>,
    pub error: Option<String>,
    pub objective: Option<f64>,
    pub empty_clusters: Vec<usize>,
    /// Disagreement across the cell's restarts; absent for deterministic
    /// methods.
    pub restart_instability: Option<f64>,
}

impl SweepCell {
    pub fn silhouette(&self) -> Option<f64> {
        self.quality.as_ref().map(|q| q.silhouette_mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChosenK {
    pub method: Method,
    pub k: Option<usize>,
    pub silhouette: Option<f64>,
    pub rationale: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub meta: Meta,
    pub cells: Vec<SweepCell>,
    pub chosen: Vec<ChosenK>,
}

impl SweepReport {
    pub fn chosen_k(&self, method: Method) -> Option<usize> {
        self.chosen.iter().find(|c| c.method == method).and_then(|c| c.k)
    }

    pub fn cell(&self, method: Method, k: usize) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.method == method && c.k == k)
    }

    /// `method,k,silhouette,pc,pe,xb,k_effective,empty_clusters,restart_instability,error`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "method",
            "k",
            "silhouette",
            "pc",
            "pe",
            "xb",
            "k_effective",
            "empty_clusters",
            "restart_instability",
            "error",
        ])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for c in &self.cells {
            let q = c.quality.as_ref();
            let empty: Vec<String> = c.empty_clusters.iter().map(usize::to_string).collect();
            w.write_record([
                c.method.to_string(),
                c.k.to_string(),
                opt(q.map(|q| q.silhouette_mean)),
                opt(q.and_then(|q| q.pc)),
                opt(q.and_then(|q| q.pe)),
                opt(q.and_then(|q| q.xb)),
                q.map_or(String::new(), |q| q.k_effective.to_string()),
                empty.join(";"),
                opt(c.restart_instability),
                c.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn sweep_cell(prep: &Prepared, method: Method, k: usize) -> SweepCell {
    let cfg = &prep.config;
    let run = || -> Result<(Outcome, Vec<HardPartition>, QualityReport)> {
        let (best, runs) = best_of_restarts(prep, method, k, cfg.restarts, cell_seed(cfg.master_seed, method, k))?;
        let quality = evaluate(prep, method, &best)?;
        Ok((best, runs, quality))
    };
    match run() {
        Ok((best, runs, quality)) => SweepCell {
            method,
            k,
            objective: Some(best.objective()),
            empty_clusters: best.empty_clusters().to_vec(),
            restart_instability: if runs.len() >= 2 {
                crate::validity::instability(&runs).ok().map(|r| r.instability)
            } else {
                None
            },
            quality: Some(quality),
            error: None,
        },
        Err(e) => SweepCell {
            method,
            k,
            quality: None,
            error: Some(e.to_string()),
            objective: None,
            empty_clusters: Vec::new(),
            restart_instability: None,
        },
    }
}

/// Picks the k with the highest silhouette, ties to the smaller k, and tags
/// whether the fuzzy indices point the same way.
fn choose_k(method: Method, cells: &[SweepCell]) -> ChosenK {
    let mine: Vec<&SweepCell> = cells.iter().filter(|c| c.method == method).collect();
    let scored: Vec<(usize, f64)> = mine.iter().filter_map(|c| Some((c.k, c.silhouette()?))).collect();
    let mut rationale = Vec::new();
    let Some(&(first_k, first_s)) = scored.first() else {
        return ChosenK {
            method,
            k: None,
            silhouette: None,
            rationale: vec!["no_valid_cell".into()],
        };
    };
    let (mut k, mut best) = (first_k, first_s);
    for &(ck, s) in &scored[1..] {
        if s > best + SILHOUETTE_TIE {
            k = ck;
            best = s;
        }
    }
    rationale.push("max_silhouette".into());
    if scored.iter().any(|&(ck, s)| ck != k && (s - best).abs() <= SILHOUETTE_TIE) {
        rationale.push("tie_to_smaller_k".into());
    }
    if scored.len() < mine.len() {
        rationale.push("failed_cells_skipped".into());
    }
    if method.is_fuzzy() {
        let pick = |f: fn(&QualityReport) -> Option<f64>, higher: bool| -> Option<usize> {
            let vals: Vec<(usize, f64)> = mine
                .iter()
                .filter_map(|c| Some((c.k, f(c.quality.as_ref()?)?)))
                .collect();
            let mut best: Option<(usize, f64)> = None;
            for (ck, v) in vals {
                let better = match best {
                    None => true,
                    Some((_, b)) => {
                        if higher {
                            v > b
                        } else {
                            v < b
                        }
                    }
                };
                if better {
                    best = Some((ck, v));
                }
            }
            best.map(|b| b.0)
        };
        for (name, f, higher) in [
            ("pc", (|q: &QualityReport| q.pc) as fn(&QualityReport) -> Option<f64>, true),
            ("pe", |q: &QualityReport| q.pe, false),
            ("xb", |q: &QualityReport| q.xb, false),
        ] {
            match pick(f, higher) {
                Some(pk) if pk == k => rationale.push(format!("{name}_agrees")),
                Some(_) => rationale.push(format!("{name}_disagrees")),
                None => {}
            }
        }
    }
    ChosenK {
        method,
        k: Some(k),
        silhouette: Some(best),
        rationale,
    }
}

/// Runs the k sweep on prepared inputs without writing files.
pub fn sweep(prep: &Prepared) -> SweepReport {
    let [lo, hi] = prep.config.k_range;
    let grid: Vec<(Method, usize)> = prep
        .config
        .methods
        .iter()
        .flat_map(|&m| (lo..=hi).map(move |k| (m, k)))
        .collect();
    let cells: Vec<SweepCell> = grid.par_iter().map(|&(m, k)| sweep_cell(prep, m, k)).collect();
    let chosen = prep.config.methods.iter().map(|&m| choose_k(m, &cells)).collect();
    SweepReport {
        meta: prep.meta(),
        cells,
        chosen,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistancesReport {
    pub meta: Meta,
    pub ids: Vec<String>,
    pub dtw_file: Option<String>,
    pub gak_file: Option<String>,
    pub gak_distance_file: Option<String>,
    pub min_eigenvalue: Option<f64>,
    pub max_eigenvalue: Option<f64>,
}

/// Builds (or reuses) the matrices and writes `dtw.csv`, `gak.csv`,
/// `gak_distance.csv` and `distances.json`.
pub fn cmd_distances(cfg: &RunConfig) -> Result<(Prepared, DistancesReport)> {
    let prep = prepare(cfg)?;
    let meta = prep.meta();
    let out = &cfg.output_dir;
    let mut report = DistancesReport {
        meta: meta.clone(),
        ids: prep.dataset.ids(),
        dtw_file: None,
        gak_file: None,
        gak_distance_file: None,
        min_eigenvalue: prep.kernel.as_ref().map(KernelMatrix::min_eigenvalue),
        max_eigenvalue: prep.kernel.as_ref().map(KernelMatrix::max_eigenvalue),
    };
    if let Some(dm) = &prep.dtw {
        write_csv_with_meta(&out.join("dtw.csv"), &meta, |b| dm.write_csv(b))?;
        report.dtw_file = Some("dtw.csv".into());
    }
    if let (Some(km), Some(kd)) = (&prep.kernel, &prep.kernel_distance) {
        write_csv_with_meta(&out.join("gak.csv"), &meta, |b| km.write_csv(b))?;
        write_csv_with_meta(&out.join("gak_distance.csv"), &meta, |b| kd.write_csv(b))?;
        report.gak_file = Some("gak.csv".into());
        report.gak_distance_file = Some("gak_distance.csv".into());
    }
    write_json(&out.join("distances.json"), &report)?;
    Ok((prep, report))
}

/// Sweeps every method over `k_range` and writes `sweep.csv` and
/// `sweep.json`.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepReport> {
    let prep = prepare(cfg)?;
    let report = sweep(&prep);
    write_sweep(&prep, &report)?;
    Ok(report)
}

fn write_sweep(prep: &Prepared, report: &SweepReport) -> Result<()> {
    let out = &prep.config.output_dir;
    write_csv_with_meta(&out.join("sweep.csv"), &report.meta, |b| report.write_csv(b))?;
    write_json(&out.join("sweep.json"), report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodStability {
    pub method: Method,
    pub k: usize,
    pub report: StabilityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityOutput {
    pub meta: Meta,
    pub methods: Vec<MethodStability>,
    /// Methods left out because they do not depend on the seed.
    pub skipped: Vec<Method>,
}

/// Single runs (no restarts) per derived seed for one method.
pub fn method_stability(prep: &Prepared, method: Method, k: usize) -> Result<StabilityReport> {
    let master = derive_seed(prep.config.master_seed, 1000 + method.index());
    stability_suite(prep.metric_for(method)?, prep.config.n_stability_runs, master, |seed| {
        Ok(run_method(prep, method, k, seed)?.hardened())
    })
}

/// Stability of each seed-sensitive method at `stability_k`, or at the k
/// chosen by a sweep (reusing `sweep.json` when its config hash matches).
/// Writes `stability_<method>.json`, `instability.csv` and
/// `stability_silhouettes.csv`.
pub fn cmd_stability(cfg: &RunConfig) -> Result<StabilityOutput> {
    let prep = prepare(cfg)?;
    let (kept, skipped): (Vec<Method>, Vec<Method>) = cfg.methods.iter().partition(|m| m.is_seed_sensitive());
    let sweep_report = match cfg.stability_k {
        Some(_) => None,
        None => Some(load_or_run_sweep(&prep)?),
    };
    let mut methods = Vec::new();
    for method in kept {
        let k = match (cfg.stability_k, &sweep_report) {
            (Some(k), _) => k,
            (None, Some(s)) => match s.chosen_k(method) {
                Some(k) => k,
                None => {
                    return Err(Error::Config(format!("no k could be chosen for {method}")));
                }
            },
            (None, None) => unreachable!("sweep runs whenever stability_k is unset"),
        };
        let report = method_stability(&prep, method, k)?;
        methods.push(MethodStability { method, k, report });
    }
    let output = StabilityOutput {
        meta: prep.meta(),
        methods,
        skipped,
    };
    write_stability(&prep, &output)?;
    Ok(output)
}

fn load_or_run_sweep(prep: &Prepared) -> Result<SweepReport> {
    let path = prep.config.output_dir.join("sweep.json");
    if let Ok(text) = fs::read_to_string(&path) {
        if let Ok(report) = serde_json::from_str::<SweepReport>(&text) {
            if report.meta == prep.meta() {
                return Ok(report);
            }
        }
    }
    let report = sweep(prep);
    write_sweep(prep, &report)?;
    Ok(report)
}

fn write_stability(prep: &Prepared, output: &StabilityOutput) -> Result<()> {
    let out = &prep.config.output_dir;
    let meta = &output.meta;
    for ms in &output.methods {
        #[derive(Serialize)]
        struct File<'a> {
            meta: &'a Meta,
            method: Method,
            k: usize,
            report: &'a StabilityReport,
        }
        write_json(
            &out.join(format!("stability_{}.json", ms.method)),
            &File {
                meta,
                method: ms.method,
                k: ms.k,
                report: &ms.report,
            },
        )?;
    }
    write_csv_with_meta(&out.join("instability.csv"), meta, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["method", "k", "instability", "n_runs", "outlier_runs"])?;
        for ms in &output.methods {
            let outliers: Vec<String> = ms.report.outlier_runs.iter().map(usize::to_string).collect();
            w.write_record([
                ms.method.to_string(),
                ms.k.to_string(),
                ms.report.instability.to_string(),
                ms.report.n_runs.to_string(),
                outliers.join(";"),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    })?;
    write_csv_with_meta(&out.join("stability_silhouettes.csv"), meta, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["method", "run_index", "seed", "silhouette"])?;
        for ms in &output.methods {
            for (r, s) in ms.report.silhouette_distribution.iter().enumerate() {
                w.write_record([
                    ms.method.to_string(),
                    r.to_string(),
                    ms.report.seeds[r].to_string(),
                    s.map_or(String::new(), |v| v.to_string()),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterOutput {
    pub meta: Meta,
    pub method: Method,
    pub k: usize,
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    /// Ids of the medoids, for medoid-based methods.
    pub medoid_ids: Option<Vec<String>>,
    pub quality: QualityReport,
    pub partition: Outcome,
}

/// Best-of-restarts clustering for one method and k. Writes
/// `cluster_<method>_k<k>.json` and `labels_<method>_k<k>.csv`.
/// `method` is added to the configured methods when missing, so its matrix
/// gets built.
pub fn cmd_cluster(cfg: &RunConfig, method: Method, k: usize) -> Result<ClusterOutput> {
    let mut cfg = cfg.clone();
    if !cfg.methods.contains(&method) {
        cfg.methods.push(method);
    }
    let cfg = &cfg;
    let prep = prepare(cfg)?;
    if k < 2 || k > prep.dataset.len() {
        return Err(Error::Config(format!("k = {k} must lie within [2, {}]", prep.dataset.len())));
    }
    let (best, _) = best_of_restarts(&prep, method, k, cfg.restarts, cell_seed(cfg.master_seed, method, k))?;
    let quality = evaluate(&prep, method, &best)?;
    let ids = prep.dataset.ids();
    let medoid_ids = match &best {
        Outcome::Hard(hp) => match &hp.representatives {
            Some(crate::cluster::Representatives::Medoids(m)) => Some(m.clone()),
            _ => None,
        },
        Outcome::Fuzzy(fp) => fp.medoids().map(<[usize]>::to_vec),
    }
    .map(|m| m.iter().map(|&i| ids[i].clone()).collect());
    let output = ClusterOutput {
        meta: prep.meta(),
        method,
        k,
        labels: best.hardened().labels,
        ids,
        medoid_ids,
        quality,
        partition: best,
    };
    let out = &cfg.output_dir;
    write_json(&out.join(format!("cluster_{method}_k{k}.json")), &output)?;
    write_csv_with_meta(&out.join(format!("labels_{method}_k{k}.csv")), &output.meta, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        let mut header = vec!["id".to_string(), "label".to_string()];
        if let Outcome::Fuzzy(_) = output.partition {
            header.extend((0..k).map(|c| format!("u{c}")));
        }
        w.write_record(&header)?;
        for (i, id) in output.ids.iter().enumerate() {
            let mut row = vec![id.clone(), output.labels[i].to_string()];
            if let Outcome::Fuzzy(fp) = &output.partition {
                row.extend(fp.row(i).iter().map(f64::to_string));
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    })?;
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("kmeans".parse::<Method>().is_err());
    }

    #[test]
    fn config_defaults_and_unknown_keys() {
        let cfg: RunConfig = serde_json::from_str(r#"{"input": "a.csv", "output_dir": "out"}"#).unwrap();
        assert_eq!(cfg, RunConfig::new("a.csv", "out"));
        assert_eq!(cfg.n_stability_runs, 50);
        assert_eq!(cfg.restarts, 10);
        assert!(serde_json::from_str::<RunConfig>(r#"{"input": "a", "output_dir": "o", "bogus": 1}"#).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = RunConfig::new("a", "o");
        assert!(cfg.validate(10).is_ok());
        cfg.k_range = [1, 3];
        assert!(cfg.validate(10).is_err());
        cfg.k_range = [2, 11];
        assert!(cfg.validate(10).is_err());
        cfg.k_range = [2, 3];
        cfg.methods.clear();
        assert!(cfg.validate(10).is_err());
    }

    #[test]
    fn hash_ignores_paths_but_not_settings() {
        let a = RunConfig::new("a.csv", "out1");
        let b = RunConfig::new("b.csv", "out2");
        assert_eq!(hash_config(&a, "d", &[]), hash_config(&b, "d", &[]));
        assert_ne!(hash_config(&a, "d", &[]), hash_config(&a, "e", &[]));
        let mut c = a.clone();
        c.k_range = [2, 3];
        assert_ne!(hash_config(&a, "d", &[]), hash_config(&c, "d", &[]));
        assert_eq!(hash_config(&a, "d", &GAK_KEYS), hash_config(&c, "d", &GAK_KEYS));
        c.sigma_multiplier = 2.0;
        assert_eq!(hash_config(&a, "d", &DTW_KEYS), hash_config(&c, "d", &DTW_KEYS));
        assert_ne!(hash_config(&a, "d", &GAK_KEYS), hash_config(&c, "d", &GAK_KEYS));
    }

    #[test]
    fn sigma_comment_parses() {
        let text = "# mtscluster 0.1.0 matrix_hash=ab sigma_used=1.25\na,b\n";
        assert_eq!(parse_sigma_comment(text), Some(1.25));
        assert_eq!(parse_sigma_comment("# x sigma_used=none\n"), None);
    }

    fn cell(method: Method, k: usize, s: Option<f64>) -> SweepCell {
        SweepCell {
            method,
            k,
            quality: s.map(|s| QualityReport {
                silhouette_mean: s,
                silhouette_per_individual: vec![s],
                pc: None,
                pe: None,
                xb: None,
                k_effective: k,
            }),
            error: s.is_none().then(|| "failed".to_string()),
            objective: None,
            empty_clusters: Vec::new(),
            restart_instability: None,
        }
    }

    #[test]
    fn chosen_k_prefers_smaller_on_ties() {
        let cells = vec![
            cell(Method::HcDtw, 2, Some(0.4)),
            cell(Method::HcDtw, 3, Some(0.6)),
            cell(Method::HcDtw, 4, Some(0.6)),
            cell(Method::HcDtw, 5, None),
        ];
        let c = choose_k(Method::HcDtw, &cells);
        assert_eq!(c.k, Some(3));
        assert!(c.rationale.contains(&"tie_to_smaller_k".to_string()));
        assert!(c.rationale.contains(&"failed_cells_skipped".to_string()));
        let none = choose_k(Method::HcDtw, &[cell(Method::HcDtw, 2, None)]);
        assert_eq!(none.k, None);
    }
}
