//! Retrieval evaluation under place-recognition match protocols.

mod pca;

pub use pca::{PcaModel, PCA_DIMENSION_LADDER};

use std::fmt::{self, Write as _};

use rayon::prelude::*;

use crate::descriptor::GlobalDescriptor;
use crate::error::{Error, Result};
use crate::geo::Location;
use crate::manifest::ManifestRow;

/// When a retrieved database item counts as a correct match. All thresholds
/// are inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatchCriterion {
    Radius { meters: f64 },
    RadiusAzimuth { meters: f64, degrees: f64 },
    FrameOffset { max_frames: u64 },
    UniquePair,
}

impl MatchCriterion {
    /// Pitts30k / Pitts250k / Tokyo24/7 / SPED
    pub const RADIUS_25M: Self = MatchCriterion::Radius { meters: 25.0 };
    /// MSLS
    pub const RADIUS_AZIMUTH: Self = MatchCriterion::RadiusAzimuth { meters: 25.0, degrees: 40.0 };
    /// Nordland
    pub const FRAME_OFFSET: Self = MatchCriterion::FrameOffset { max_frames: 10 };
    /// AmsterTime
    pub const UNIQUE_PAIR: Self = MatchCriterion::UniquePair;
    /// Eynsham
    pub const RADIUS_5M: Self = MatchCriterion::Radius { meters: 5.0 };

    pub fn validate(&self) -> Result<()> {
        match *self {
            MatchCriterion::Radius { meters } if !(meters > 0.0) => Err(Error::invalid("match radius must be > 0")),
            MatchCriterion::RadiusAzimuth { meters, degrees } if !(meters > 0.0 && degrees > 0.0 && degrees <= 180.0) => {
                Err(Error::invalid("radius must be > 0 and azimuth tolerance in (0, 180]"))
            }
            _ => Ok(()),
        }
    }

    /// Parses `radius:<m>`, `radius_azimuth:<m>:<deg>`, `frame_offset:<n>`,
    /// `unique_pair`, or one of the named presets `radius_25m`, `msls`,
    /// `nordland`, `radius_5m`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown match criterion `{s}`"));
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad());
        let parts: Vec<&str> = s.trim().split(':').collect();
        let c = match parts.as_slice() {
            ["radius_25m"] => Self::RADIUS_25M,
            ["msls"] => Self::RADIUS_AZIMUTH,
            ["nordland"] => Self::FRAME_OFFSET,
            ["radius_5m"] => Self::RADIUS_5M,
            ["unique_pair"] => Self::UNIQUE_PAIR,
            ["radius", m] => MatchCriterion::Radius { meters: num(m)? },
            ["radius_azimuth", m, d] => MatchCriterion::RadiusAzimuth {
                meters: num(m)?,
                degrees: num(d)?,
            },
            ["frame_offset", n] => MatchCriterion::FrameOffset {
                max_frames: n.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for MatchCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatchCriterion::Radius { meters } => write!(f, "radius:{meters}"),
            MatchCriterion::RadiusAzimuth { meters, degrees } => write!(f, "radius_azimuth:{meters}:{degrees}"),
            MatchCriterion::FrameOffset { max_frames } => write!(f, "frame_offset:{max_frames}"),
            MatchCriterion::UniquePair => write!(f, "unique_pair"),
        }
    }
}

/// Per-image metadata consulted by the match criteria.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemMeta {
    pub id: String,
    pub location: Option<Location>,
    pub azimuth_deg: Option<f64>,
    pub frame_idx: Option<i64>,
    pub pair_id: Option<String>,
}

impl ItemMeta {
    pub fn at(id: impl Into<String>, location: Location) -> Self {
        Self {
            id: id.into(),
            location: Some(location),
            azimuth_deg: None,
            frame_idx: None,
            pair_id: None,
        }
    }
}

impl From<&ManifestRow> for ItemMeta {
    fn from(r: &ManifestRow) -> Self {
        Self {
            id: r.id.clone(),
            location: Some(Location::Geo(r.location())),
            azimuth_deg: r.azimuth_deg,
            frame_idx: r.frame_idx,
            pair_id: r.pair_id.clone(),
        }
    }
}

fn require<'a, T>(v: &'a Option<T>, field: &'static str, item: &ItemMeta) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::MissingMetadata {
        field,
        item: item.id.clone(),
    })
}

/// Absolute angular difference folded into [0, 180].
pub fn azimuth_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    if d > 180.0 {
        360.0 - d
    } else {
        d
    }
}

pub fn is_match(query: &ItemMeta, db: &ItemMeta, criterion: &MatchCriterion) -> Result<bool> {
    match *criterion {
        MatchCriterion::Radius { meters } => {
            let d = require(&query.location, "location", query)?.distance(require(&db.location, "location", db)?)?;
            Ok(d <= meters)
        }
        MatchCriterion::RadiusAzimuth { meters, degrees } => {
            let d = require(&query.location, "location", query)?.distance(require(&db.location, "location", db)?)?;
            let qa = *require(&query.azimuth_deg, "azimuth_deg", query)?;
            let da = *require(&db.azimuth_deg, "azimuth_deg", db)?;
            Ok(d <= meters && azimuth_difference(qa, da) <= degrees)
        }
        MatchCriterion::FrameOffset { max_frames } => {
            let q = *require(&query.frame_idx, "frame_idx", query)?;
            let d = *require(&db.frame_idx, "frame_idx", db)?;
            Ok(q.abs_diff(d) <= max_frames)
        }
        MatchCriterion::UniquePair => Ok(*require(&query.pair_id, "pair_id", query)? == db.id),
    }
}

/// Normalized database descriptors with their metadata.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    descriptors: Vec<Vec<f64>>,
    meta: Vec<ItemMeta>,
}

const UNIT_TOLERANCE: f64 = 1e-6;

fn check_unit(v: &[f64], id: &str) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::invalid(format!("descriptor `{id}` is not unit length (norm {norm})")));
    }
    Ok(())
}

impl RetrievalIndex {
    pub fn new(descriptors: Vec<Vec<f64>>, meta: Vec<ItemMeta>) -> Result<Self> {
        if descriptors.len() != meta.len() {
            return Err(Error::DimensionMismatch {
                what: "index metadata".into(),
                expected: descriptors.len(),
                actual: meta.len(),
            });
        }
        let dim = descriptors.first().map_or(0, Vec::len);
        for (d, m) in descriptors.iter().zip(&meta) {
            if d.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: format!("database descriptor `{}`", m.id),
                    expected: dim,
                    actual: d.len(),
                });
            }
            check_unit(d, &m.id)?;
        }
        Ok(Self { descriptors, meta })
    }

    pub fn from_descriptors(descriptors: &[GlobalDescriptor], meta: Vec<ItemMeta>) -> Result<Self> {
        Self::new(descriptors.iter().map(|d| d.vector.clone()).collect(), meta)
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.descriptors.first().map_or(0, Vec::len)
    }

    pub fn descriptors(&self) -> &[Vec<f64>] {
        &self.descriptors
    }

    pub fn meta(&self) -> &[ItemMeta] {
        &self.meta
    }
}

/// Database indices sorted by ascending Euclidean distance (ties by index),
/// truncated to `n`.
pub fn retrieve_top_n(query: &[f64], index: &RetrievalIndex, n: usize) -> Result<Vec<usize>> {
    if index.is_empty() {
        return Err(Error::invalid("retrieval index is empty"));
    }
    if n == 0 {
        return Err(Error::invalid("N must be >= 1"));
    }
    if query.len() != index.dim() {
        return Err(Error::DimensionMismatch {
            what: "query descriptor".into(),
            expected: index.dim(),
            actual: query.len(),
        });
    }
    let mut scored: Vec<(f64, usize)> = index
        .descriptors
        .iter()
        .enumerate()
        .map(|(i, d)| (d.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(n);
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

/// A query: unit descriptor plus metadata.
#[derive(Debug, Clone)]
pub struct Query {
    pub descriptor: Vec<f64>,
    pub meta: ItemMeta,
}

/// Fraction of queries with a match among their top `N`, for each `N`.
pub fn recall_at_n(queries: &[Query], index: &RetrievalIndex, criterion: &MatchCriterion, ns: &[usize]) -> Result<Vec<f64>> {
    if queries.is_empty() {
        return Err(Error::invalid("no queries"));
    }
    criterion.validate()?;
    let depth = ns.iter().copied().max().ok_or_else(|| Error::invalid("no N values given"))?;
    for q in queries {
        check_unit(&q.descriptor, &q.meta.id)?;
    }
    let first_hits: Vec<Option<usize>> = queries
        .par_iter()
        .map(|q| {
            for (rank, db) in retrieve_top_n(&q.descriptor, index, depth)?.into_iter().enumerate() {
                if is_match(&q.meta, &index.meta[db], criterion)? {
                    return Ok(Some(rank));
                }
            }
            Ok(None)
        })
        .collect::<Result<_>>()?;
    Ok(ns
        .iter()
        .map(|&n| first_hits.iter().filter(|h| h.is_some_and(|r| r < n)).count() as f64 / queries.len() as f64)
        .collect())
}

/// Intra-class distance of each class and their mean.
pub fn aid_metric<V: AsRef<[f64]>>(classes: &[Vec<V>]) -> Result<(Vec<f64>, f64)> {
    if classes.is_empty() {
        return Err(Error::invalid("no classes"));
    }
    let mut ids = Vec::with_capacity(classes.len());
    for (ci, class) in classes.iter().enumerate() {
        let Some(first) = class.first() else {
            return Err(Error::invalid(format!("class {ci} is empty")));
        };
        let dim = first.as_ref().len();
        let mut centroid = vec![0.0; dim];
        for x in class {
            let x = x.as_ref();
            if x.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: format!("feature in class {ci}"),
                    expected: dim,
                    actual: x.len(),
                });
            }
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v;
            }
        }
        let n = class.len() as f64;
        centroid.iter_mut().for_each(|c| *c /= n);
        let id = class
            .iter()
            .map(|x| x.as_ref().iter().zip(&centroid).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .sum::<f64>()
            / n;
        ids.push(id);
    }
    let aid = ids.iter().sum::<f64>() / ids.len() as f64;
    Ok((ids, aid))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallLine {
    pub dataset: String,
    pub criterion: String,
    pub n: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AidSection {
    pub dataset: String,
    pub classes: Vec<(String, f64)>,
    pub aid: f64,
}

/// Results file text: a recall table, then AID summaries, then per-class IDs.
pub fn render_results(recalls: &[RecallLine], aids: &[AidSection]) -> String {
    let mut out = String::from("dataset,criterion,n,recall\n");
    for r in recalls {
        writeln!(out, "{},{},{},{:.6}", r.dataset, r.criterion, r.n, r.recall).expect("string write");
    }
    out.push_str("# aid\ndataset,classes,aid\n");
    for a in aids {
        writeln!(out, "{},{},{:.6}", a.dataset, a.classes.len(), a.aid).expect("string write");
    }
    out.push_str("# intra_class_distance\ndataset,class,id\n");
    for a in aids {
        for (c, id) in &a.classes {
            writeln!(out, "{},{c},{id:.6}", a.dataset).expect("string write");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn planar(id: &str, x: f64, y: f64) -> ItemMeta {
        ItemMeta::at(id, Location::Planar { x, y })
    }

    #[test]
    fn radius_boundaries() {
        let q = planar("q", 0.0, 0.0);
        assert!(is_match(&q, &planar("a", 24.0, 0.0), &MatchCriterion::RADIUS_25M).unwrap());
        assert!(is_match(&q, &planar("b", 25.0, 0.0), &MatchCriterion::RADIUS_25M).unwrap());
        assert!(!is_match(&q, &planar("c", 26.0, 0.0), &MatchCriterion::RADIUS_25M).unwrap());
        assert!(is_match(&q, &planar("d", 3.0, 4.0), &MatchCriterion::RADIUS_5M).unwrap());
        assert!(!is_match(&q, &planar("e", 3.0, 4.1), &MatchCriterion::RADIUS_5M).unwrap());
    }

    #[test]
    fn azimuth_wraps() {
        assert_eq!(azimuth_difference(355.0, 5.0), 10.0);
        assert_eq!(azimuth_difference(0.0, 350.0), 10.0);
        let mut q = planar("q", 0.0, 0.0);
        let mut d = planar("d", 10.0, 0.0);
        q.azimuth_deg = Some(0.0);
        d.azimuth_deg = Some(350.0);
        assert!(is_match(&q, &d, &MatchCriterion::RADIUS_AZIMUTH).unwrap());
        d.azimuth_deg = Some(300.0);
        assert!(!is_match(&q, &d, &MatchCriterion::RADIUS_AZIMUTH).unwrap());
        d.azimuth_deg = None;
        assert!(matches!(
            is_match(&q, &d, &MatchCriterion::RADIUS_AZIMUTH),
            Err(Error::MissingMetadata { field: "azimuth_deg", .. })
        ));
    }

    #[test]
    fn frames_and_pairs() {
        let mut q = planar("q", 0.0, 0.0);
        let mut d = planar("d", 0.0, 0.0);
        q.frame_idx = Some(100);
        d.frame_idx = Some(110);
        assert!(is_match(&q, &d, &MatchCriterion::FRAME_OFFSET).unwrap());
        d.frame_idx = Some(111);
        assert!(!is_match(&q, &d, &MatchCriterion::FRAME_OFFSET).unwrap());
        d.frame_idx = Some(90);
        assert!(is_match(&q, &d, &MatchCriterion::FRAME_OFFSET).unwrap());

        q.pair_id = Some("d".into());
        assert!(is_match(&q, &d, &MatchCriterion::UNIQUE_PAIR).unwrap());
        assert!(!is_match(&q, &planar("x", 0.0, 0.0), &MatchCriterion::UNIQUE_PAIR).unwrap());
        q.pair_id = None;
        assert!(is_match(&q, &d, &MatchCriterion::UNIQUE_PAIR).is_err());
    }

    #[test]
    fn criterion_parse_round_trip() {
        for s in ["radius:25", "radius_azimuth:25:40", "frame_offset:10", "unique_pair"] {
            assert_eq!(MatchCriterion::parse(s).unwrap().to_string(), s);
        }
        assert_eq!(MatchCriterion::parse("radius_5m").unwrap(), MatchCriterion::RADIUS_5M);
        assert_eq!(MatchCriterion::parse("msls").unwrap(), MatchCriterion::RADIUS_AZIMUTH);
        assert!(MatchCriterion::parse("radius:-1").is_err());
        assert!(MatchCriterion::parse("radius_azimuth:25:200").is_err());
        assert!(MatchCriterion::parse("bogus").is_err());
    }

    #[test]
    fn top_n_basics() {
        let idx = RetrievalIndex::new(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![planar("a", 0.0, 0.0), planar("b", 0.0, 0.0)],
        )
        .unwrap();
        assert_eq!(retrieve_top_n(&[1.0, 0.0], &idx, 1).unwrap(), vec![0]);
        assert_eq!(retrieve_top_n(&[0.0, 1.0], &idx, 10).unwrap(), vec![1, 0]);
        // exact tie breaks by index
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(retrieve_top_n(&[s, s], &idx, 2).unwrap(), vec![0, 1]);
        let empty = RetrievalIndex::new(Vec::new(), Vec::new()).unwrap();
        assert!(retrieve_top_n(&[1.0], &empty, 1).is_err());
        assert!(RetrievalIndex::new(vec![vec![2.0, 0.0]], vec![planar("x", 0.0, 0.0)]).is_err());
    }

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn euclidean_and_cosine_rankings_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let db: Vec<Vec<f64>> = (0..30).map(|_| unit(&mut rng, 6)).collect();
            let meta = (0..30).map(|i| planar(&i.to_string(), 0.0, 0.0)).collect();
            let idx = RetrievalIndex::new(db.clone(), meta).unwrap();
            let q = unit(&mut rng, 6);
            let euclid = retrieve_top_n(&q, &idx, 30).unwrap();
            let mut cos: Vec<usize> = (0..30).collect();
            let dot = |i: usize| db[i].iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
            cos.sort_by(|&a, &b| dot(b).total_cmp(&dot(a)).then(a.cmp(&b)));
            assert_eq!(euclid, cos);
        }
    }

    #[test]
    fn perfect_retrieval_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let db: Vec<Vec<f64>> = (0..10).map(|_| unit(&mut rng, 8)).collect();
        let meta: Vec<ItemMeta> = (0..10).map(|i| planar(&format!("d{i}"), 100.0 * i as f64, 0.0)).collect();
        let idx = RetrievalIndex::new(db.clone(), meta).unwrap();
        let queries: Vec<Query> = (0..10)
            .map(|i| Query {
                descriptor: db[i].clone(),
                meta: planar(&format!("q{i}"), 100.0 * i as f64 + 3.0, 0.0),
            })
            .collect();
        assert_eq!(recall_at_n(&queries, &idx, &MatchCriterion::RADIUS_25M, &[1]).unwrap(), vec![1.0]);

        for _ in 0..20 {
            let queries: Vec<Query> = (0..10)
                .map(|i| Query {
                    descriptor: unit(&mut rng, 8),
                    meta: planar(&format!("q{i}"), 100.0 * i as f64, 0.0),
                })
                .collect();
            let r = recall_at_n(&queries, &idx, &MatchCriterion::RADIUS_25M, &[1, 5, 10]).unwrap();
            assert!(r[0] <= r[1] && r[1] <= r[2]);
            assert_eq!(r[2], 1.0);
        }
        assert!(recall_at_n(&[], &idx, &MatchCriterion::RADIUS_25M, &[1]).is_err());
    }

    #[test]
    fn aid_examples() {
        let (ids, aid) = aid_metric(&[vec![vec![0.0, 0.0], vec![2.0, 0.0]]]).unwrap();
        assert_eq!(ids, vec![1.0]);
        assert_eq!(aid, 1.0);
        let (_, aid) = aid_metric(&[vec![vec![1.0, 1.0]; 3], vec![vec![-2.0, 5.0]; 2]]).unwrap();
        assert_eq!(aid, 0.0);
        // IDs 1 and 3
        let (ids, aid) = aid_metric(&[vec![vec![0.0], vec![2.0]], vec![vec![0.0], vec![6.0]]]).unwrap();
        assert_eq!(ids, vec![1.0, 3.0]);
        assert_eq!(aid, 2.0);
        assert!(aid_metric::<Vec<f64>>(&[vec![]]).is_err());
    }

    #[test]
    fn aid_translation_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let class: Vec<Vec<f64>> = (0..7).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let shifted: Vec<Vec<f64>> = class.iter().map(|v| v.iter().map(|x| x + 3.5).collect()).collect();
        let scaled: Vec<Vec<f64>> = class.iter().map(|v| v.iter().map(|x| x * 2.5).collect()).collect();
        let (a, _) = aid_metric(&[class]).unwrap();
        let (b, _) = aid_metric(&[shifted]).unwrap();
        let (c, _) = aid_metric(&[scaled]).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-12);
        assert!((c[0] - 2.5 * a[0]).abs() < 1e-12);
    }

    #[test]
    fn results_layout() {
        let text = render_results(
            &[RecallLine {
                dataset: "fix".into(),
                criterion: "radius:25".into(),
                n: 1,
                recall: 0.7,
            }],
            &[AidSection {
                dataset: "fix".into(),
                classes: vec![("a".into(), 1.0), ("b".into(), 3.0)],
                aid: 2.0,
            }],
        );
        assert_eq!(
            text,
            "dataset,criterion,n,recall\nfix,radius:25,1,0.700000\n# aid\ndataset,classes,aid\nfix,2,2.000000\n\
             # intra_class_distance\ndataset,class,id\nfix,a,1.000000\nfix,b,3.000000\n"
        );
    }
}
