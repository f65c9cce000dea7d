//! Synthetic geo-visual datasets with controllable per-epoch embedding drift.
//!
//! Cities sit at least 100 km apart; clusters of each city lie on a square
//! grid. Every cluster owns a unit prototype and every image a fixed noise
//! vector, so an epoch differs from the previous one only through the
//! rotation of `epoch * drift_rate` applied to prototypes in one seeded
//! 2-plane.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::manifest::{write_dataset_manifest, ManifestRow};
use crate::rng::Streams;
use crate::store::{write_store, EmbeddingStore, F32Matrix};

const CITY_ROWS: usize = 40;
const CITY_LAT_STEP: f64 = 2.0;
const CITY_LON_STEP: f64 = 10.0;
const MAX_CITIES: usize = 1200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub cities: usize,
    pub clusters_per_city: usize,
    pub images_per_cluster: usize,
    /// Grid step between neighbouring clusters, meters.
    pub cluster_spacing: f64,
    pub descriptor_dim: usize,
    /// Rotation angle per epoch, radians.
    pub drift_rate: f64,
    pub noise_sigma: f64,
    pub master_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            cities: 4,
            clusters_per_city: 30,
            images_per_cluster: 6,
            cluster_spacing: 12.0,
            descriptor_dim: 16,
            drift_rate: 0.0,
            noise_sigma: 0.25,
            master_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cities < 1 || self.clusters_per_city < 1 || self.images_per_cluster < 1 {
            return Err(Error::invalid("synthetic counts must all be >= 1"));
        }
        if self.cities > MAX_CITIES {
            return Err(Error::invalid(format!("at most {MAX_CITIES} synthetic cities are supported")));
        }
        if self.descriptor_dim < 2 {
            return Err(Error::invalid("synthetic descriptor_dim must be >= 2 (drift needs a 2-plane)"));
        }
        if !(self.cluster_spacing.is_finite() && self.cluster_spacing > 0.0) {
            return Err(Error::invalid("cluster_spacing must be > 0"));
        }
        if !(self.drift_rate.is_finite() && self.drift_rate >= 0.0) {
            return Err(Error::invalid("drift_rate must be >= 0"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be >= 0"));
        }
        Ok(())
    }

    pub fn image_count(&self) -> usize {
        self.cities * self.clusters_per_city * self.images_per_cluster
    }

    pub fn grid_columns(&self) -> usize {
        (self.clusters_per_city as f64).sqrt().ceil() as usize
    }

    pub fn city_center(&self, city: usize) -> GeoPoint {
        GeoPoint {
            lat: -40.0 + CITY_LAT_STEP * (city % CITY_ROWS) as f64,
            lon: -150.0 + CITY_LON_STEP * (city / CITY_ROWS) as f64,
        }
    }

    /// Grid offset (east, north) of a cluster within its city, meters.
    pub fn cluster_offset(&self, cluster: usize) -> (f64, f64) {
        let cols = self.grid_columns();
        (
            (cluster % cols) as f64 * self.cluster_spacing,
            (cluster / cols) as f64 * self.cluster_spacing,
        )
    }
}

pub fn city_name(city: usize) -> String {
    format!("city{city:03}")
}

pub fn image_name(city: usize, cluster: usize, image: usize) -> String {
    format!("c{city:03}-k{cluster:03}-i{image:02}")
}

/// Manifest rows in store order: city, then cluster, then image.
pub fn synth_manifest(config: &SynthConfig) -> Result<Vec<ManifestRow>> {
    config.validate()?;
    let mut rows = Vec::with_capacity(config.image_count());
    for c in 0..config.cities {
        let center = config.city_center(c);
        for k in 0..config.clusters_per_city {
            let (east, north) = config.cluster_offset(k);
            let p = center.offset_m(east, north);
            for i in 0..config.images_per_cluster {
                rows.push(ManifestRow::simple(&image_name(c, k, i), &city_name(c), k as i64, p.lat, p.lon));
            }
        }
    }
    Ok(rows)
}

fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let n = dot(v, v).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::invalid("synthetic vector has zero norm"));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// Orthonormal basis `(u, v)` of the drift plane.
pub fn drift_plane(config: &SynthConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let streams = Streams::new(config.master_seed);
    let mut rng = streams.stream("synth-plane", 0, 0);
    let d = config.descriptor_dim;
    loop {
        let mut u = gaussian(&mut rng, d);
        let mut v = gaussian(&mut rng, d);
        normalize(&mut u)?;
        let p = dot(&u, &v);
        v.iter_mut().zip(&u).for_each(|(a, b)| *a -= p * b);
        if dot(&v, &v).sqrt() > 1e-6 {
            normalize(&mut v)?;
            return Ok((u, v));
        }
    }
}

/// Rotates `x` by `angle` inside span(u, v).
pub fn rotate_in_plane(x: &mut [f64], u: &[f64], v: &[f64], angle: f64) {
    if angle == 0.0 {
        return;
    }
    let (a, b) = (dot(x, u), dot(x, v));
    let (s, c) = angle.sin_cos();
    let (na, nb) = (a * c - b * s, a * s + b * c);
    for ((xi, ui), vi) in x.iter_mut().zip(u).zip(v) {
        *xi += (na - a) * ui + (nb - b) * vi;
    }
}

/// Descriptor store for one epoch, rows aligned with [`synth_manifest`].
pub fn synth_epoch(config: &SynthConfig, epoch: u64) -> Result<F32Matrix> {
    config.validate()?;
    let streams = Streams::new(config.master_seed);
    let d = config.descriptor_dim;
    let (u, v) = drift_plane(config)?;
    let angle = epoch as f64 * config.drift_rate;
    let mut rows = Vec::with_capacity(config.image_count());
    let clusters = config.cities * config.clusters_per_city;
    for g in 0..clusters {
        let mut proto = gaussian(&mut streams.stream("synth-prototype", 0, g as u64), d);
        normalize(&mut proto)?;
        rotate_in_plane(&mut proto, &u, &v, angle);
        for i in 0..config.images_per_cluster {
            let image = (g * config.images_per_cluster + i) as u64;
            let mut x = proto.clone();
            if config.noise_sigma > 0.0 {
                let noise = gaussian(&mut streams.stream("synth-noise", 0, image), d);
                x.iter_mut().zip(&noise).for_each(|(a, n)| *a += config.noise_sigma * n);
            }
            normalize(&mut x)?;
            rows.push(x);
        }
    }
    F32Matrix::from_f64_rows(&rows)
}

pub fn epoch_store_name(epoch: u64) -> String {
    format!("epoch_{epoch:03}.bin")
}

pub const MANIFEST_NAME: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub stores: Vec<PathBuf>,
}

/// Writes `manifest.csv` and one `epoch_XXX.bin` per epoch into `dir`.
pub fn write_synth_dataset(config: &SynthConfig, epochs: u64, dir: impl AsRef<Path>) -> Result<SynthOutput> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join(MANIFEST_NAME);
    write_dataset_manifest(&synth_manifest(config)?, &manifest)?;
    let mut stores = Vec::new();
    for e in 0..epochs.max(1) {
        let path = dir.join(epoch_store_name(e));
        write_store(&EmbeddingStore::new(synth_epoch(config, e)?), &path)?;
        stores.push(path);
    }
    Ok(SynthOutput { manifest, stores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{geo_distance, Location};
    use crate::graph::{build_geo_adjacency, geo_distance_matrix};

    fn small() -> SynthConfig {
        SynthConfig {
            cities: 2,
            clusters_per_city: 9,
            images_per_cluster: 3,
            descriptor_dim: 8,
            drift_rate: 0.2,
            master_seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_drift_epochs_identical() {
        let cfg = SynthConfig { drift_rate: 0.0, ..small() };
        let a = synth_epoch(&cfg, 0).unwrap();
        let b = synth_epoch(&cfg, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn drift_changes_later_epochs_only() {
        let cfg = small();
        assert_ne!(synth_epoch(&cfg, 0).unwrap(), synth_epoch(&cfg, 1).unwrap());
        assert_eq!(synth_epoch(&cfg, 2).unwrap(), synth_epoch(&cfg, 2).unwrap());
    }

    #[test]
    fn zero_noise_shares_cluster_descriptor() {
        let cfg = SynthConfig { noise_sigma: 0.0, ..small() };
        let m = synth_epoch(&cfg, 1).unwrap();
        for g in 0..cfg.cities * cfg.clusters_per_city {
            let base = g * cfg.images_per_cluster;
            for i in 1..cfg.images_per_cluster {
                assert_eq!(m.row(base), m.row(base + i));
            }
        }
    }

    #[test]
    fn rows_are_unit() {
        let m = synth_epoch(&small(), 2).unwrap();
        for r in 0..m.rows() {
            let n: f64 = m.row_f64(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rotation_preserves_norm_and_moves_plane_only() {
        let cfg = small();
        let (u, v) = drift_plane(&cfg).unwrap();
        assert!(dot(&u, &v).abs() < 1e-12);
        let mut x: Vec<f64> = (0..8).map(|i| i as f64 - 3.0).collect();
        let before = x.clone();
        rotate_in_plane(&mut x, &u, &v, 0.7);
        assert!((dot(&x, &x) - dot(&before, &before)).abs() < 1e-9);
        // component orthogonal to the plane is untouched
        let perp = |y: &[f64]| -> Vec<f64> {
            let (a, b) = (dot(y, &u), dot(y, &v));
            y.iter().zip(&u).zip(&v).map(|((yi, ui), vi)| yi - a * ui - b * vi).collect()
        };
        for (p, q) in perp(&x).iter().zip(perp(&before)) {
            assert!((p - q).abs() < 1e-9);
        }
        let (a0, b0) = (dot(&before, &u), dot(&before, &v));
        let (a1, b1) = (dot(&x, &u), dot(&x, &v));
        let angle = (a0 * b1 - b0 * a1).atan2(a0 * a1 + b0 * b1);
        assert!((angle - 0.7).abs() < 1e-9);
    }

    #[test]
    fn cities_far_apart() {
        let cfg = SynthConfig { cities: 90, ..small() };
        for a in 0..cfg.cities {
            for b in a + 1..cfg.cities {
                let d = geo_distance(cfg.city_center(a), cfg.city_center(b)).unwrap();
                assert!(d >= 100_000.0, "{a} {b} {d}");
            }
        }
    }

    #[test]
    fn grid_distances_match_closed_form() {
        let cfg = SynthConfig {
            cities: 3,
            clusters_per_city: 25,
            cluster_spacing: 50.0,
            ..small()
        };
        let rows = synth_manifest(&cfg).unwrap();
        let step = cfg.images_per_cluster;
        for c in 0..cfg.cities {
            let pts: Vec<_> = (0..cfg.clusters_per_city)
                .map(|k| rows[(c * cfg.clusters_per_city + k) * step].location())
                .collect();
            for a in 0..pts.len() {
                for b in a + 1..pts.len() {
                    let (ea, na) = cfg.cluster_offset(a);
                    let (eb, nb) = cfg.cluster_offset(b);
                    let expect = Location::Planar { x: ea, y: na }
                        .distance(&Location::Planar { x: eb, y: nb })
                        .unwrap();
                    let got = geo_distance(pts[a], pts[b]).unwrap();
                    assert!((got - expect).abs() <= 1e-3 * expect, "{got} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn grid_adjacency_at_tau_100() {
        // spacing 50: side neighbours (50 m) and diagonals (70.7 m) connect, 100 m does not
        let cfg = SynthConfig {
            cities: 1,
            clusters_per_city: 9,
            cluster_spacing: 50.0,
            ..small()
        };
        let rows = synth_manifest(&cfg).unwrap();
        let pts: Vec<_> = (0..9).map(|k| rows[k * cfg.images_per_cluster].location()).collect();
        let adj = build_geo_adjacency(&geo_distance_matrix(&pts).unwrap(), 100.0).unwrap();
        assert!(adj.has_edge(0, 1));
        assert!(adj.has_edge(0, 4));
        assert!(!adj.has_edge(0, 2));
        assert!(!adj.has_edge(0, 8));
        assert_eq!(adj.degree(4), 8);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(SynthConfig { cities: 0, ..small() }.validate().is_err());
        assert!(SynthConfig { drift_rate: -0.1, ..small() }.validate().is_err());
        assert!(SynthConfig { noise_sigma: f64::NAN, ..small() }.validate().is_err());
    }

    #[test]
    fn writes_dataset_dir() {
        let dir = tempfile::tempdir().unwrap();
        let out = write_synth_dataset(&small(), 2, dir.path()).unwrap();
        assert_eq!(out.stores.len(), 2);
        let rows = crate::manifest::read_dataset_manifest(&out.manifest).unwrap();
        let s = crate::store::read_store(&out.stores[1]).unwrap();
        assert_eq!(rows.len(), s.vectors.rows());
    }
}
