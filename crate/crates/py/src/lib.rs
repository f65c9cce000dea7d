//! Python bindings for the placemine core.
//!
//! Matrices cross the boundary as lists of rows; the extension stays free of
//! numpy so it imports anywhere.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use placemine::config::parse_config;
use placemine::eval::{aid_metric, recall_at_n, ItemMeta, MatchCriterion, Query, RetrievalIndex};
use placemine::geo::{GeoPoint, Location};
use placemine::pipeline::run_epoch_pipeline;
use placemine::sampler;
use placemine::store::{self, EmbeddingStore, F32Matrix};
use placemine::synth::{write_synth_dataset, SynthConfig};

fn py_err(e: placemine::Error) -> PyErr {
    match e {
        placemine::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

type Rows = Vec<Vec<f64>>;

/// Reads an embedding store; returns `(vectors, {section: rows})`.
#[pyfunction]
fn read_store(path: PathBuf) -> PyResult<(Rows, HashMap<String, Rows>)> {
    let s = store::read_store(&path).map_err(py_err)?;
    let sections = s.sections.iter().map(|(k, m)| (k.clone(), m.to_f64_rows())).collect();
    Ok((s.vectors.to_f64_rows(), sections))
}

#[pyfunction]
#[pyo3(signature = (path, vectors, sections=None))]
fn write_store(path: PathBuf, vectors: Rows, sections: Option<HashMap<String, Rows>>) -> PyResult<()> {
    let mut s = EmbeddingStore::new(F32Matrix::from_f64_rows(&vectors).map_err(py_err)?);
    let mut sections: Vec<(String, Rows)> = sections.unwrap_or_default().into_iter().collect();
    sections.sort_by(|a, b| a.0.cmp(&b.0));
    for (name, rows) in sections {
        s = s.with_section(name, F32Matrix::from_f64_rows(&rows).map_err(py_err)?);
    }
    store::write_store(&s, &path).map_err(py_err)
}

/// Writes a synthetic dataset and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, epochs=1, seed=0, drift=0.0, cities=None, clusters_per_city=None, images_per_cluster=None))]
fn synth(
    out_dir: PathBuf,
    epochs: u64,
    seed: u64,
    drift: f64,
    cities: Option<usize>,
    clusters_per_city: Option<usize>,
    images_per_cluster: Option<usize>,
) -> PyResult<PathBuf> {
    let mut cfg = SynthConfig {
        master_seed: seed,
        drift_rate: drift,
        ..SynthConfig::default()
    };
    if let Some(v) = cities {
        cfg.cities = v;
    }
    if let Some(v) = clusters_per_city {
        cfg.clusters_per_city = v;
    }
    if let Some(v) = images_per_cluster {
        cfg.images_per_cluster = v;
    }
    Ok(write_synth_dataset(&cfg, epochs, &out_dir).map_err(py_err)?.manifest)
}

#[pyfunction]
fn seed_scores(w: Rows) -> PyResult<Vec<f64>> {
    sampler::seed_scores(&w).map_err(py_err)
}

#[pyfunction]
fn select_seed(scores: Vec<f64>) -> PyResult<usize> {
    sampler::select_seed(&scores).map_err(py_err)
}

#[pyfunction]
fn greedy_expand(w: Rows, seed: usize, k: usize) -> PyResult<Vec<usize>> {
    sampler::greedy_expand(&w, seed, k).map_err(py_err)
}

#[pyfunction]
fn mean_internal_affinity(w: Rows, members: Vec<usize>) -> f64 {
    sampler::mean_internal_affinity(&w, &members)
}

fn unit_rows(rows: Rows) -> PyResult<Rows> {
    rows.into_iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(PyValueError::new_err("descriptor has zero or non-finite norm"));
            }
            Ok(r.into_iter().map(|v| v / n).collect())
        })
        .collect()
}

fn geo_meta(prefix: &str, points: &[(f64, f64)]) -> PyResult<Vec<ItemMeta>> {
    points
        .iter()
        .enumerate()
        .map(|(i, &(lat, lon))| {
            let p = GeoPoint::new(lat, lon).map_err(py_err)?;
            Ok(ItemMeta::at(format!("{prefix}{i}"), Location::Geo(p)))
        })
        .collect()
}

/// Recall@N under a location criterion such as `radius_25m` or `radius:10`.
/// Positions are `(lat, lon)` pairs; descriptors need not be normalized.
#[pyfunction]
#[pyo3(signature = (database, db_positions, queries, query_positions, ns, criterion="radius_25m"))]
fn recall(
    database: Rows,
    db_positions: Vec<(f64, f64)>,
    queries: Rows,
    query_positions: Vec<(f64, f64)>,
    ns: Vec<usize>,
    criterion: &str,
) -> PyResult<Vec<f64>> {
    let criterion = MatchCriterion::parse(criterion).map_err(py_err)?;
    let index = RetrievalIndex::new(unit_rows(database)?, geo_meta("d", &db_positions)?).map_err(py_err)?;
    if queries.len() != query_positions.len() {
        return Err(PyValueError::new_err("queries and query_positions differ in length"));
    }
    let qs: Vec<Query> = unit_rows(queries)?
        .into_iter()
        .zip(geo_meta("q", &query_positions)?)
        .map(|(descriptor, meta)| Query { descriptor, meta })
        .collect();
    recall_at_n(&qs, &index, &criterion, &ns).map_err(py_err)
}

/// Mean distance to the class centroid, per class and averaged.
#[pyfunction]
fn aid(classes: Vec<Rows>) -> PyResult<(Vec<f64>, f64)> {
    aid_metric(&classes).map_err(py_err)
}

/// Runs the epoch pipeline from config text and returns the report.
/// Relative source paths resolve against `base_dir` (default: cwd).
#[pyfunction]
#[pyo3(signature = (config, out_dir, base_dir=None))]
fn run_pipeline(py: Python<'_>, config: &str, out_dir: PathBuf, base_dir: Option<PathBuf>) -> PyResult<String> {
    let base = base_dir.unwrap_or_else(|| PathBuf::from("."));
    let cfg = parse_config(config, "<python>", Path::new(&base)).map_err(py_err)?;
    let report = py.detach(|| run_epoch_pipeline(cfg, &out_dir)).map_err(py_err)?;
    Ok(report.render())
}

#[pymodule]
#[pyo3(name = "placemine")]
fn placemine_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(read_store, m)?)?;
    m.add_function(wrap_pyfunction!(write_store, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(seed_scores, m)?)?;
    m.add_function(wrap_pyfunction!(select_seed, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_expand, m)?)?;
    m.add_function(wrap_pyfunction!(mean_internal_affinity, m)?)?;
    m.add_function(wrap_pyfunction!(recall, m)?)?;
    m.add_function(wrap_pyfunction!(aid, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
