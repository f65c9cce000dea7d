//! Binary embedding store.
//!
//! Layout (little-endian):
//! - block header: magic `SAGE`, version `u32` (= 1), count `u32`, dim `u32`
//! - payload: `count * dim` `f32` values, row-major
//! - zero or more named sections, each a block header followed by
//!   name length `u32`, UTF-8 name bytes, and the section payload
//!
//! Parameter files use an empty (0 x 0) main block and one section per layer.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SAGE";
pub const VERSION: u32 = 1;

/// Row-major `f32` matrix as stored on disk.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct F32Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl F32Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                what: "matrix payload".into(),
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    what: format!("row {i}"),
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn from_f64_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let converted: Vec<Vec<f32>> = rows
            .iter()
            .map(|r| r.as_ref().iter().map(|&v| v as f32).collect())
            .collect();
        Self::from_rows(&converted)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn to_f64_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row_f64(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingStore {
    pub vectors: F32Matrix,
    pub sections: Vec<(String, F32Matrix)>,
}

impl EmbeddingStore {
    pub fn new(vectors: F32Matrix) -> Self {
        Self {
            vectors,
            sections: Vec::new(),
        }
    }

    pub fn with_section(mut self, name: impl Into<String>, m: F32Matrix) -> Self {
        self.sections.push((name.into(), m));
        self
    }

    pub fn section(&self, name: &str) -> Option<&F32Matrix> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}

fn check_finite(m: &F32Matrix, label: &str) -> Result<()> {
    if let Some(pos) = m.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::StoreNonFinite {
            path: label.to_string(),
            row: pos / m.cols.max(1),
            col: pos % m.cols.max(1),
        });
    }
    Ok(())
}

fn push_header(out: &mut Vec<u8>, m: &F32Matrix, label: &str) -> Result<()> {
    let count = u32::try_from(m.rows).map_err(|_| Error::StoreFormat {
        path: label.into(),
        reason: format!("row count {} exceeds u32", m.rows),
    })?;
    let dim = u32::try_from(m.cols).map_err(|_| Error::StoreFormat {
        path: label.into(),
        reason: format!("dimension {} exceeds u32", m.cols),
    })?;
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    Ok(())
}

pub fn encode_store(store: &EmbeddingStore) -> Result<Vec<u8>> {
    let label = "<memory>";
    let mut out = Vec::with_capacity(16 + store.vectors.data.len() * 4);
    check_finite(&store.vectors, label)?;
    push_header(&mut out, &store.vectors, label)?;
    for v in &store.vectors.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (i, (name, m)) in store.sections.iter().enumerate() {
        if store.sections[..i].iter().any(|(n, _)| n == name) {
            return Err(Error::StoreFormat {
                path: label.into(),
                reason: format!("duplicate section `{name}`"),
            });
        }
        check_finite(m, label)?;
        push_header(&mut out, m, label)?;
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for v in &m.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    label: &'a str,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::StoreTruncated {
                path: self.label.into(),
                what: what.into(),
                expected: n,
                found: self.remaining(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn header(&mut self) -> Result<(usize, usize)> {
        let magic = self.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::StoreFormat {
                path: self.label.into(),
                reason: format!("bad magic {:?}", String::from_utf8_lossy(magic)),
            });
        }
        let version = self.u32("version")?;
        if version != VERSION {
            return Err(Error::StoreVersion {
                path: self.label.into(),
                version,
            });
        }
        let count = self.u32("header")? as usize;
        let dim = self.u32("header")? as usize;
        Ok((count, dim))
    }

    fn payload(&mut self, rows: usize, cols: usize, what: &str) -> Result<F32Matrix> {
        let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::StoreFormat {
            path: self.label.into(),
            reason: format!("{what} size overflows"),
        })?;
        let bytes = self.take(n, what)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let m = F32Matrix { rows, cols, data };
        check_finite(&m, self.label)?;
        Ok(m)
    }
}

pub fn decode_store(bytes: &[u8], label: &str) -> Result<EmbeddingStore> {
    let mut cur = Cursor { bytes, pos: 0, label };
    let (count, dim) = cur.header()?;
    let vectors = cur.payload(count, dim, "payload")?;
    let mut sections: Vec<(String, F32Matrix)> = Vec::new();
    while cur.remaining() > 0 {
        let (rows, cols) = cur.header()?;
        let name_len = cur.u32("section name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "section name")?)
            .map_err(|_| Error::StoreFormat {
                path: label.into(),
                reason: "section name is not UTF-8".into(),
            })?
            .to_string();
        if sections.iter().any(|(n, _)| *n == name) {
            return Err(Error::StoreFormat {
                path: label.into(),
                reason: format!("duplicate section `{name}`"),
            });
        }
        let m = cur.payload(rows, cols, &format!("section `{name}`"))?;
        sections.push((name, m));
    }
    Ok(EmbeddingStore { vectors, sections })
}

pub fn write_store(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_store(store).map_err(|e| relabel(e, path))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_store(&bytes, &path.display().to_string())
}

fn relabel(e: Error, path: &Path) -> Error {
    let p = path.display().to_string();
    match e {
        Error::StoreNonFinite { row, col, .. } => Error::StoreNonFinite { path: p, row, col },
        Error::StoreFormat { reason, .. } => Error::StoreFormat { path: p, reason },
        e => e,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_store(rows: usize, cols: usize, seed: u64) -> EmbeddingStore {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-10.0f32..10.0)).collect();
        EmbeddingStore::new(F32Matrix::new(rows, cols, data).unwrap())
    }

    #[test]
    fn round_trip_10x8() {
        let store = random_store(10, 8, 1);
        let bytes = encode_store(&store).unwrap();
        assert_eq!(bytes.len(), 16 + 10 * 8 * 4);
        let back = decode_store(&bytes, "t").unwrap();
        let a: Vec<u32> = store.vectors.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.vectors.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back, store);
    }

    #[test]
    fn round_trip_with_sections_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let store = EmbeddingStore::new(F32Matrix::default())
            .with_section("layer.w", random_store(3, 2, 2).vectors)
            .with_section("layer.b", random_store(1, 2, 3).vectors);
        write_store(&store, &path).unwrap();
        assert_eq!(read_store(&path).unwrap(), store);
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"SAGE");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 20]);
        match decode_store(&bytes, "t") {
            Err(Error::StoreTruncated { expected: 24, found: 20, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_store(&random_store(1, 1, 0)).unwrap();
        bytes[..4].copy_from_slice(b"SAGF");
        assert!(matches!(decode_store(&bytes, "t"), Err(Error::StoreFormat { .. })));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode_store(&random_store(1, 1, 0)).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode_store(&bytes, "t"), Err(Error::StoreVersion { version: 2, .. })));
    }

    #[test]
    fn non_finite_rejected() {
        let mut bytes = encode_store(&random_store(2, 2, 0)).unwrap();
        bytes[16 + 3 * 4..16 + 4 * 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_store(&bytes, "t"),
            Err(Error::StoreNonFinite { row: 1, col: 1, .. })
        ));
        let bad = EmbeddingStore::new(F32Matrix::new(1, 1, vec![f32::INFINITY]).unwrap());
        assert!(encode_store(&bad).is_err());
    }

    #[test]
    fn trailing_garbage_rejected() {
        let mut bytes = encode_store(&random_store(1, 2, 0)).unwrap();
        bytes.extend_from_slice(b"xy");
        assert!(decode_store(&bytes, "t").is_err());
    }

    proptest::proptest! {
        #[test]
        fn prop_round_trip(rows in 0usize..6, cols in 0usize..6, seed in 0u64..1000) {
            let store = random_store(rows, cols, seed)
                .with_section("s", random_store(cols, 2, seed + 1).vectors);
            let back = decode_store(&encode_store(&store).unwrap(), "p").unwrap();
            proptest::prop_assert_eq!(back, store);
        }
    }
}
