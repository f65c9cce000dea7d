//! Positions and ground distances.

use crate::error::{Error, Result};

/// Mean Earth radius used by the equirectangular approximation.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        let p = Self { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lat.is_finite() && (-90.0..=90.0).contains(&self.lat)) {
            return Err(Error::invalid(format!("latitude {} outside [-90, 90]", self.lat)));
        }
        if !(self.lon.is_finite() && (-180.0..=180.0).contains(&self.lon)) {
            return Err(Error::invalid(format!("longitude {} outside [-180, 180]", self.lon)));
        }
        Ok(())
    }

    /// Point displaced by `east_m` / `north_m` meters under the same projection
    /// that [`geo_distance`] inverts.
    pub fn offset_m(&self, east_m: f64, north_m: f64) -> GeoPoint {
        let lat = self.lat + (north_m / EARTH_RADIUS_M).to_degrees();
        let mean_lat = 0.5 * (self.lat + lat);
        let lon = self.lon + (east_m / (EARTH_RADIUS_M * mean_lat.to_radians().cos())).to_degrees();
        GeoPoint { lat, lon }
    }
}

/// Equirectangular ground distance in meters.
///
/// Longitude differences are wrapped into [-180, 180] before projection.
pub fn geo_distance(a: GeoPoint, b: GeoPoint) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(geo_distance_unchecked(a, b))
}

pub(crate) fn geo_distance_unchecked(a: GeoPoint, b: GeoPoint) -> f64 {
    let mut dlon = b.lon - a.lon;
    if dlon > 180.0 {
        dlon -= 360.0;
    } else if dlon < -180.0 {
        dlon += 360.0;
    }
    let mean_lat = (0.5 * (a.lat + b.lat)).to_radians();
    let dx = EARTH_RADIUS_M * dlon.to_radians() * mean_lat.cos();
    let dy = EARTH_RADIUS_M * (b.lat - a.lat).to_radians();
    (dx * dx + dy * dy).sqrt()
}

/// A position that is either geographic or on a local metric plane.
///
/// Planar positions exist for fixtures where exact metric distances matter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Location {
    Geo(GeoPoint),
    Planar { x: f64, y: f64 },
}

impl Location {
    pub fn distance(&self, other: &Location) -> Result<f64> {
        match (self, other) {
            (Location::Geo(a), Location::Geo(b)) => geo_distance(*a, *b),
            (Location::Planar { x: x1, y: y1 }, Location::Planar { x: x2, y: y2 }) => {
                Ok((x2 - x1).hypot(y2 - y1))
            }
            _ => Err(Error::invalid("cannot measure distance between geographic and planar positions")),
        }
    }
}

/// Dense symmetric matrix of pairwise distances.
pub fn distance_matrix(locations: &[Location]) -> Result<Vec<Vec<f64>>> {
    let n = locations.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = locations[i].distance(&locations[j])?;
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(d)
}
