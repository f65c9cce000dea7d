//! PCA compaction of global descriptors.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Compact output dimensions; 8448 is the uncompressed descriptor.
pub const PCA_DIMENSION_LADDER: [usize; 7] = [128, 256, 512, 1024, 2048, 3072, 4096];

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Orthonormal rows, ordered by descending eigenvalue.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Fraction of total variance carried by each kept component.
    pub explained_variance_ratio: Vec<f64>,
    pub whiten: bool,
}

const WHITEN_EPS: f64 = 1e-12;

impl PcaModel {
    /// Fits on row vectors. Uses the d x d covariance when there are at least
    /// as many samples as dimensions, the n x n Gram matrix otherwise.
    pub fn fit<V: AsRef<[f64]>>(training: &[V], output_dim: usize, whiten: bool) -> Result<Self> {
        let n = training.len();
        let d = training.first().map_or(0, |v| v.as_ref().len());
        if output_dim == 0 {
            return Err(Error::invalid("PCA output dimension must be >= 1"));
        }
        if output_dim > d {
            return Err(Error::invalid(format!("PCA output dimension {output_dim} exceeds input dimension {d}")));
        }
        if output_dim > n {
            return Err(Error::invalid(format!("PCA output dimension {output_dim} exceeds sample count {n}")));
        }
        let mut mean = vec![0.0; d];
        for v in training {
            let v = v.as_ref();
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    what: "PCA training vector".into(),
                    expected: d,
                    actual: v.len(),
                });
            }
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, d, |r, c| training[r].as_ref()[c] - mean[c]);
        let denom = (n.max(2) - 1) as f64;

        let (mut values, mut vectors): (Vec<f64>, Vec<Vec<f64>>) = if n >= d {
            let cov = centered.transpose() * &centered / denom;
            let eig = SymmetricEigen::new(cov);
            let order = descending(eig.eigenvalues.as_slice());
            let vals = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
            let vecs = order.iter().map(|&i| eig.eigenvectors.column(i).iter().copied().collect()).collect();
            (vals, vecs)
        } else {
            let gram = &centered * centered.transpose() / denom;
            let eig = SymmetricEigen::new(gram);
            let order = descending(eig.eigenvalues.as_slice());
            let mut vals = Vec::new();
            let mut vecs = Vec::new();
            for &i in &order {
                let lambda = eig.eigenvalues[i];
                let v = centered.transpose() * eig.eigenvectors.column(i);
                let norm = v.norm();
                if lambda <= 0.0 || norm <= 1e-10 * (1.0 + lambda.sqrt()) {
                    continue;
                }
                vals.push(lambda);
                vecs.push(v.iter().map(|x| x / norm).collect());
            }
            (vals, vecs)
        };
        let total: f64 = values.iter().sum();
        complete_basis(&mut vectors, &mut values, d, output_dim);
        values.truncate(output_dim);
        vectors.truncate(output_dim);
        let explained_variance_ratio = values
            .iter()
            .map(|v| if total > 0.0 { v / total } else { 0.0 })
            .collect();
        Ok(Self {
            mean,
            components: vectors,
            eigenvalues: values,
            explained_variance_ratio,
            whiten,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }

    /// `(x - mean) . components^T`, optionally whitened, without re-normalizing.
    pub fn project_raw(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "PCA input".into(),
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(self
            .components
            .iter()
            .zip(&self.eigenvalues)
            .map(|(c, &lambda)| {
                let p: f64 = c.iter().zip(x.iter().zip(&self.mean)).map(|(ci, (xi, mi))| ci * (xi - mi)).sum();
                if self.whiten {
                    p / (lambda + WHITEN_EPS).sqrt()
                } else {
                    p
                }
            })
            .collect())
    }

    /// Projection re-normalized to unit length.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        let p = self.project_raw(x)?;
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid("projected vector is zero; cannot re-normalize"));
        }
        Ok(p.into_iter().map(|v| v / norm).collect())
    }

    pub fn project_all<V: AsRef<[f64]>>(&self, xs: &[V]) -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|x| self.project(x.as_ref())).collect()
    }

    /// Largest deviation of `C C^T` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, a) in self.components.iter().enumerate() {
            for (j, b) in self.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Extends `vectors` to `want` orthonormal rows with zero-variance directions
/// taken from Gram-Schmidt over the standard basis.
fn complete_basis(vectors: &mut Vec<Vec<f64>>, values: &mut Vec<f64>, d: usize, want: usize) {
    let mut axis = 0;
    while vectors.len() < want && axis < d {
        let mut v = vec![0.0; d];
        v[axis] = 1.0;
        axis += 1;
        for _ in 0..2 {
            for u in vectors.iter() {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            vectors.push(v.into_iter().map(|x| x / norm).collect());
            values.push(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn line_data_first_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dir = [0.6, 0.8];
        let data: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let t: f64 = rng.random_range(-5.0..5.0);
                vec![1.0 + t * dir[0], -2.0 + t * dir[1]]
            })
            .collect();
        let pca = PcaModel::fit(&data, 1, false).unwrap();
        let c = &pca.components[0];
        assert!((c[0].abs() - 0.6).abs() < 1e-9 && (c[1].abs() - 0.8).abs() < 1e-9);
        assert!(c[0] * c[1] > 0.0);
        assert!((pca.explained_variance_ratio[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn full_rank_raw_projection_is_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<Vec<f64>> = (0..40).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let pca = PcaModel::fit(&data, 6, false).unwrap();
        assert!(pca.orthonormality_error() < 1e-10);
        let a = pca.project_raw(&data[0]).unwrap();
        let b = pca.project_raw(&data[1]).unwrap();
        let d0: f64 = data[0].iter().zip(&data[1]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let d1: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!((d0 - d1).abs() < 1e-10);
    }

    #[test]
    fn gram_route_matches_covariance_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // 8 samples in 20 dims: covariance has rank 7
        let data: Vec<Vec<f64>> = (0..8).map(|_| (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let pca = PcaModel::fit(&data, 5, false).unwrap();
        assert!(pca.orthonormality_error() < 1e-9);
        // eigenvalues equal those of the explicit covariance
        let n = data.len();
        let centered = DMatrix::from_fn(n, 20, |r, c| data[r][c] - pca.mean[c]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in pca.eigenvalues.iter().zip(&ev) {
            assert!((a - b).abs() < 1e-9);
        }
        // full-size basis request is completed with zero-variance directions
        let full = PcaModel::fit(&data, 8, false).unwrap();
        assert_eq!(full.output_dim(), 8);
        assert!(full.orthonormality_error() < 1e-9);
    }

    #[test]
    fn rejects_bad_dims() {
        let data = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 7.0]];
        assert!(PcaModel::fit(&data, 3, false).is_err());
        assert!(PcaModel::fit(&data[..1], 2, false).is_err());
        assert!(PcaModel::fit(&data, 0, false).is_err());
    }

    #[test]
    fn projection_is_unit_and_whitening_equalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![rng.random_range(-10.0..10.0), rng.random_range(-1.0..1.0), rng.random_range(-0.1..0.1)])
            .collect();
        let plain = PcaModel::fit(&data, 2, false).unwrap();
        let p = plain.project(&data[3]).unwrap();
        assert!((p.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);

        let white = PcaModel::fit(&data, 3, true).unwrap();
        let proj: Vec<Vec<f64>> = data.iter().map(|x| white.project_raw(x).unwrap()).collect();
        for k in 0..3 {
            let var = proj.iter().map(|p| p[k] * p[k]).sum::<f64>() / 199.0;
            assert!((var - 1.0).abs() < 1e-6, "{var}");
        }
    }

    #[test]
    fn ladder_presets() {
        assert_eq!(PCA_DIMENSION_LADDER, [128, 256, 512, 1024, 2048, 3072, 4096]);
    }
}
