//! Dataset manifest CSV and batch manifest text output.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::sampler::BatchPlan;

pub const DATASET_HEADER: [&str; 8] = ["id", "city", "cluster", "lat", "lon", "azimuth_deg", "frame_idx", "pair_id"];
pub const BATCH_HEADER: &str = "epoch,batch,clique,rank,place_id,image_id,source";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub city: String,
    pub cluster: i64,
    pub lat: f64,
    pub lon: f64,
    pub azimuth_deg: Option<f64>,
    pub frame_idx: Option<i64>,
    pub pair_id: Option<String>,
}

impl ManifestRow {
    pub fn simple(id: &str, city: &str, cluster: i64, lat: f64, lon: f64) -> Self {
        Self {
            id: id.to_string(),
            city: city.to_string(),
            cluster,
            lat,
            lon,
            azimuth_deg: None,
            frame_idx: None,
            pair_id: None,
        }
    }

    pub fn location(&self) -> GeoPoint {
        GeoPoint {
            lat: self.lat,
            lon: self.lon,
        }
    }
}

fn manifest_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn validate_rows(rows: &[ManifestRow], path: &Path) -> Result<()> {
    let mut seen = HashSet::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        if !seen.insert(r.id.as_str()) {
            return Err(manifest_err(path, format!("duplicate id `{}` at row {}", r.id, i + 1)));
        }
        r.location()
            .validate()
            .map_err(|e| manifest_err(path, format!("row {} (`{}`): {e}", i + 1, r.id)))?;
    }
    Ok(())
}

pub fn read_dataset_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset_manifest(file, path)
}

pub fn parse_dataset_manifest<R: std::io::Read>(reader: R, path: &Path) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(|e| manifest_err(path, e.to_string()))?.clone();
    if headers.iter().ne(DATASET_HEADER.iter().copied()) {
        return Err(manifest_err(
            path,
            format!("header must be `{}`, found `{}`", DATASET_HEADER.join(","), headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        let row: ManifestRow = rec.map_err(|e| manifest_err(path, e.to_string()))?;
        rows.push(row);
    }
    validate_rows(&rows, path)?;
    Ok(rows)
}

pub fn write_dataset_manifest(rows: &[ManifestRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    validate_rows(rows, path)?;
    let mut wtr = csv::Writer::from_path(path).map_err(|e| manifest_err(path, e.to_string()))?;
    for r in rows {
        wtr.serialize(r).map_err(|e| manifest_err(path, e.to_string()))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

/// Batch manifest text; identical plans render to identical bytes.
pub fn render_batch_manifest(plan: &BatchPlan) -> String {
    let mut out = String::new();
    out.push_str(BATCH_HEADER);
    out.push('\n');
    for (b, batch) in plan.batches.iter().enumerate() {
        for (c, clique) in batch.cliques.iter().enumerate() {
            for (rank, (place, image)) in clique.place_ids.iter().zip(&clique.image_ids).enumerate() {
                writeln!(out, "{},{b},{c},{rank},{place},{image},{}", plan.epoch, clique.source).expect("string write");
            }
        }
    }
    out
}

pub fn write_batch_manifest(plan: &BatchPlan, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_batch_manifest(plan)).map_err(|e| Error::io(path, e))
}
