//! Run configuration: flat `key = value` lines, `#` starts a comment.
//!
//! Unknown keys and repeated keys are errors. `source.<name> = <dir>` adds a
//! dataset directory; relative paths resolve against the config file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::MatchCriterion;
use crate::graph::GraphConfig;
use crate::sampler::BatchConfig;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub database: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub criteria: Vec<MatchCriterion>,
    pub recall_n: Vec<usize>,
    pub pca_dims: Vec<usize>,
    pub whiten: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            database: None,
            queries: None,
            criteria: vec![MatchCriterion::RADIUS_25M],
            recall_n: vec![1, 5, 10],
            pca_dims: Vec::new(),
            whiten: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: u64,
    /// Reuse epoch 0's random substreams in every epoch.
    pub fixed_streams: bool,
    pub sources: BTreeMap<String, PathBuf>,
    /// Used when no source is configured; `master_seed` follows `seed`.
    pub synth: SynthConfig,
    pub graph: GraphConfig,
    pub batch: BatchConfig,
    /// Parameter file for SoftP/aggregation/InteractHead over patch stores.
    pub params: Option<PathBuf>,
    pub interact: bool,
    pub interact_batch: usize,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 1,
            fixed_streams: false,
            sources: BTreeMap::new(),
            synth: SynthConfig::default(),
            graph: GraphConfig::default(),
            batch: BatchConfig::default(),
            params: None,
            interact: false,
            interact_batch: 16,
            eval: EvalConfig::default(),
        }
    }
}

fn list<T>(v: &[T], f: impl Fn(&T) -> String) -> String {
    v.iter().map(f).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.interact_batch < 1 {
            return Err(Error::invalid("aggregate.interact_batch must be >= 1"));
        }
        if self.eval.recall_n.iter().any(|&n| n == 0) {
            return Err(Error::invalid("eval.recall_n entries must be >= 1"));
        }
        self.synth_config().validate()?;
        self.graph.validate()?;
        if self.batch.clique_size < 1 || self.batch.cliques_per_batch < 1 {
            return Err(Error::invalid("batch sizes must be >= 1"));
        }
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            master_seed: self.seed,
            ..self.synth
        }
    }

    /// Every effective setting, one sorted `key = value` line each.
    pub fn canonical(&self) -> String {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("epochs", self.epochs.to_string());
        put("fixed_streams", self.fixed_streams.to_string());
        let s = &self.synth;
        put("synth.cities", s.cities.to_string());
        put("synth.clusters_per_city", s.clusters_per_city.to_string());
        put("synth.images_per_cluster", s.images_per_cluster.to_string());
        put("synth.cluster_spacing", s.cluster_spacing.to_string());
        put("synth.descriptor_dim", s.descriptor_dim.to_string());
        put("synth.drift_rate", s.drift_rate.to_string());
        put("synth.noise_sigma", s.noise_sigma.to_string());
        let g = &self.graph;
        put("graph.tau_geo", g.tau_geo.to_string());
        put("graph.tau2_quantile", g.tau2_quantile.to_string());
        put("graph.similar_places", g.similar_places.to_string());
        put("graph.min_clique", g.min_clique.to_string());
        put("graph.temperature", g.temperature.to_string());
        put("graph.knn_cap", g.knn_cap.to_string());
        put("graph.graphs_per_epoch", g.graphs_per_epoch.to_string());
        put("graph.max_attempts", g.max_attempts.to_string());
        put("graph.rescale_distances", g.rescale_distances.to_string());
        put("batch.clique_size", self.batch.clique_size.to_string());
        put("batch.cliques_per_batch", self.batch.cliques_per_batch.to_string());
        put("batch.batches", self.batch.batches.to_string());
        put(
            "aggregate.params",
            self.params.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        put("aggregate.interact", self.interact.to_string());
        put("aggregate.interact_batch", self.interact_batch.to_string());
        let e = &self.eval;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        put("eval.database", path(&e.database));
        put("eval.queries", path(&e.queries));
        put("eval.criteria", list(&e.criteria, |c| c.to_string()));
        put("eval.recall_n", list(&e.recall_n, |n| n.to_string()));
        put("eval.pca_dims", list(&e.pca_dims, |n| n.to_string()));
        put("eval.whiten", e.whiten.to_string());
        for (name, dir) in &self.sources {
            put(&format!("source.{name}"), dir.display().to_string());
        }
        let mut out = String::new();
        for (k, v) in kv {
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }

    /// SHA-256 of [`RunConfig::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    parse_config(&text, &path.display().to_string(), base)
}

/// Parses config text; `base` anchors relative paths.
pub fn parse_config(text: &str, label: &str, base: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let err = |reason: String| Error::Config {
            path: label.to_string(),
            line: line_no,
            reason,
        };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(format!("expected `key = value`, got `{line}`")));
        };
        let (key, value) = (key.trim(), value.trim());
        if let Some(first) = seen.insert(key.to_string(), line_no) {
            return Err(err(format!("key `{key}` already set on line {first}")));
        }
        apply(&mut cfg, key, value, base).map_err(err)?;
    }
    cfg.validate().map_err(|e| Error::Config {
        path: label.to_string(),
        line: 0,
        reason: e.to_string(),
    })?;
    Ok(cfg)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{key}`: cannot parse `{v}`"))
}

fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("`{key}`: expected true or false, got `{v}`")),
    }
}

fn num_list(key: &str, v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| num(key, s)).collect()
}

fn resolve(base: &Path, v: &str) -> PathBuf {
    let p = PathBuf::from(v);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn apply(cfg: &mut RunConfig, key: &str, v: &str, base: &Path) -> std::result::Result<(), String> {
    if let Some(name) = key.strip_prefix("source.") {
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(format!("invalid source name `{name}`"));
        }
        cfg.sources.insert(name.to_string(), resolve(base, v));
        return Ok(());
    }
    match key {
        "seed" => cfg.seed = num(key, v)?,
        "epochs" => cfg.epochs = num(key, v)?,
        "fixed_streams" => cfg.fixed_streams = flag(key, v)?,
        "synth.cities" => cfg.synth.cities = num(key, v)?,
        "synth.clusters_per_city" => cfg.synth.clusters_per_city = num(key, v)?,
        "synth.images_per_cluster" => cfg.synth.images_per_cluster = num(key, v)?,
        "synth.cluster_spacing" => cfg.synth.cluster_spacing = num(key, v)?,
        "synth.descriptor_dim" => cfg.synth.descriptor_dim = num(key, v)?,
        "synth.drift_rate" => cfg.synth.drift_rate = num(key, v)?,
        "synth.noise_sigma" => cfg.synth.noise_sigma = num(key, v)?,
        "graph.tau_geo" => cfg.graph.tau_geo = num(key, v)?,
        "graph.tau2_quantile" => cfg.graph.tau2_quantile = num(key, v)?,
        "graph.similar_places" => cfg.graph.similar_places = num(key, v)?,
        "graph.min_clique" => cfg.graph.min_clique = num(key, v)?,
        "graph.temperature" => cfg.graph.temperature = num(key, v)?,
        "graph.knn_cap" => cfg.graph.knn_cap = num(key, v)?,
        "graph.graphs_per_epoch" => cfg.graph.graphs_per_epoch = num(key, v)?,
        "graph.max_attempts" => cfg.graph.max_attempts = num(key, v)?,
        "graph.rescale_distances" => cfg.graph.rescale_distances = flag(key, v)?,
        "batch.clique_size" => cfg.batch.clique_size = num(key, v)?,
        "batch.cliques_per_batch" => cfg.batch.cliques_per_batch = num(key, v)?,
        "batch.batches" => cfg.batch.batches = num(key, v)?,
        "aggregate.params" => cfg.params = (!v.is_empty()).then(|| resolve(base, v)),
        "aggregate.interact" => cfg.interact = flag(key, v)?,
        "aggregate.interact_batch" => cfg.interact_batch = num(key, v)?,
        "eval.database" => cfg.eval.database = (!v.is_empty()).then(|| resolve(base, v)),
        "eval.queries" => cfg.eval.queries = (!v.is_empty()).then(|| resolve(base, v)),
        "eval.criteria" => {
            cfg.eval.criteria = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| MatchCriterion::parse(s).map_err(|e| e.to_string()))
                .collect::<std::result::Result<_, _>>()?
        }
        "eval.recall_n" => cfg.eval.recall_n = num_list(key, v)?,
        "eval.pca_dims" => cfg.eval.pca_dims = num_list(key, v)?,
        "eval.whiten" => cfg.eval.whiten = flag(key, v)?,
        _ => return Err(format!("unknown key `{key}`")),
    }
    Ok(())
}
