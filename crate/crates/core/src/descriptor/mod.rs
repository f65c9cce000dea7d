//! Patch-descriptor modulation and bilinear aggregation.
//!
//! A patch set `X` (L rows, M columns) is reweighted row-wise by a bounded
//! coefficient `beta_i = alpha * sigmoid(phi(|X_i| + eps))` and then pooled into
//! a D x K second-order matrix `compress(X)^T probe(X) / L`, optionally followed
//! by a projection of the class token.

mod mlp;

pub use mlp::{gelu, Activation, Linear, Mlp};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::store::{EmbeddingStore, F32Matrix};

/// The L x M matrix of local descriptors for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDescriptorSet {
    image_id: String,
    descriptors: DMatrix<f64>,
}

impl PatchDescriptorSet {
    pub fn new(image_id: impl Into<String>, descriptors: DMatrix<f64>) -> Result<Self> {
        let image_id = image_id.into();
        if descriptors.nrows() == 0 || descriptors.ncols() == 0 {
            return Err(Error::invalid(format!(
                "patch set `{image_id}` must have at least one row and one column"
            )));
        }
        if let Some(row) = first_non_finite_row(&descriptors) {
            return Err(Error::NonFinite {
                what: format!("patch set `{image_id}`"),
                row,
            });
        }
        Ok(Self { image_id, descriptors })
    }

    pub fn from_rows<R: AsRef<[f64]>>(image_id: impl Into<String>, rows: &[R]) -> Result<Self> {
        let image_id = image_id.into();
        let m = rows.first().map_or(0, |r| r.as_ref().len());
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.as_ref().len() != m) {
            return Err(Error::DimensionMismatch {
                what: format!("patch set `{image_id}` row {i}"),
                expected: m,
                actual: r.as_ref().len(),
            });
        }
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(image_id, DMatrix::from_row_slice(rows.len(), m, &flat))
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn descriptors(&self) -> &DMatrix<f64> {
        &self.descriptors
    }

    pub fn patch_count(&self) -> usize {
        self.descriptors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.descriptors.ncols()
    }
}

fn first_non_finite_row(m: &DMatrix<f64>) -> Option<usize> {
    (0..m.nrows()).find(|&r| m.row(r).iter().any(|v| !v.is_finite()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftPParams {
    pub alpha: f64,
    pub epsilon: f64,
    /// Scalar response predictor, 1 -> H -> 1.
    pub phi: Mlp,
}

impl SoftPParams {
    pub const DEFAULT_ALPHA: f64 = 1.0;
    pub const DEFAULT_EPSILON: f64 = 1e-6;
    pub const DEFAULT_HIDDEN: usize = 16;

    pub fn new(alpha: f64, epsilon: f64, phi: Mlp) -> Result<Self> {
        let p = Self { alpha, epsilon, phi };
        p.validate()?;
        Ok(p)
    }

    pub fn seeded<R: Rng + ?Sized>(alpha: f64, epsilon: f64, hidden: usize, rng: &mut R) -> Result<Self> {
        Self::new(alpha, epsilon, Mlp::seeded(1, hidden, 1, Activation::Relu, rng))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::invalid(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::invalid(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.phi.input_dim() != 1 || self.phi.output_dim() != 1 || self.phi.hidden_dim() < 1 {
            return Err(Error::invalid("phi must map 1 -> H -> 1 with H >= 1"));
        }
        Ok(())
    }

    /// Residual coefficient for a single descriptor norm.
    pub fn coefficient(&self, norm: f64) -> f64 {
        self.alpha * sigmoid(self.phi.forward_scalar(norm + self.epsilon))
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Reweights each patch row by `1 + beta_i`; returns the modulated set and `beta`.
pub fn softp_modulate(x: &PatchDescriptorSet, params: &SoftPParams) -> Result<(PatchDescriptorSet, Vec<f64>)> {
    params.validate()?;
    if let Some(row) = first_non_finite_row(&x.descriptors) {
        return Err(Error::NonFinite {
            what: format!("patch set `{}`", x.image_id),
            row,
        });
    }
    let beta: Vec<f64> = x
        .descriptors
        .row_iter()
        .map(|r| params.coefficient(r.norm()))
        .collect();
    let modulated = apply_residual(&x.descriptors, &beta);
    Ok((
        PatchDescriptorSet {
            image_id: x.image_id.clone(),
            descriptors: modulated,
        },
        beta,
    ))
}

/// Scales row `i` by `1 + beta[i]`.
pub fn apply_residual(x: &DMatrix<f64>, beta: &[f64]) -> DMatrix<f64> {
    let mut out = x.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= 1.0 + beta[i];
    }
    out
}

/// Returns `(exact, estimate)`: the total variance of the modulated rows about
/// their own mean, and the first-order estimate
/// `(1/L) sum (1 + 2 beta_i) |X_i - mean(X)|^2`.
pub fn variance_shift_estimate(x: &PatchDescriptorSet, beta: &[f64]) -> Result<(f64, f64)> {
    let l = x.patch_count();
    if l < 2 {
        return Err(Error::invalid("variance needs at least two patches"));
    }
    if beta.len() != l {
        return Err(Error::DimensionMismatch {
            what: "beta".into(),
            expected: l,
            actual: beta.len(),
        });
    }
    let modulated = apply_residual(&x.descriptors, beta);
    let exact = total_variance(&modulated);

    let mean = x.descriptors.row_mean();
    let estimate = x
        .descriptors
        .row_iter()
        .zip(beta)
        .map(|(r, &b)| (1.0 + 2.0 * b) * (r - &mean).norm_squared())
        .sum::<f64>()
        / l as f64;
    Ok((exact, estimate))
}

fn total_variance(m: &DMatrix<f64>) -> f64 {
    let mean = m.row_mean();
    m.row_iter().map(|r| (r - &mean).norm_squared()).sum::<f64>() / m.nrows() as f64
}

/// Branch networks of the bilinear aggregator.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationParams {
    /// M -> D
    pub compress: Mlp,
    /// M -> K
    pub probe: Mlp,
    /// M -> T, applied to the class token
    pub token_proj: Option<Mlp>,
}

/// Shape of a seeded aggregator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggregationShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub compress_dim: usize,
    pub probe_dim: usize,
    pub token_dim: Option<usize>,
}

impl AggregationShape {
    /// D = 128, K = 64 and a 256-d token projection: 8448 outputs.
    pub fn standard(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: input_dim,
            compress_dim: 128,
            probe_dim: 64,
            token_dim: Some(256),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.compress_dim * self.probe_dim + self.token_dim.unwrap_or(0)
    }
}

impl AggregationParams {
    pub fn new(compress: Mlp, probe: Mlp, token_proj: Option<Mlp>) -> Result<Self> {
        let m = compress.input_dim();
        if probe.input_dim() != m {
            return Err(Error::DimensionMismatch {
                what: "probe input".into(),
                expected: m,
                actual: probe.input_dim(),
            });
        }
        if let Some(t) = &token_proj {
            if t.input_dim() != m {
                return Err(Error::DimensionMismatch {
                    what: "token projection input".into(),
                    expected: m,
                    actual: t.input_dim(),
                });
            }
        }
        if compress.output_dim() == 0 || probe.output_dim() == 0 {
            return Err(Error::invalid("compress and probe widths must be >= 1"));
        }
        Ok(Self {
            compress,
            probe,
            token_proj,
        })
    }

    pub fn seeded<R: Rng + ?Sized>(shape: AggregationShape, rng: &mut R) -> Result<Self> {
        let AggregationShape {
            input_dim: m,
            hidden_dim: h,
            ..
        } = shape;
        let compress = Mlp::seeded(m, h, shape.compress_dim, Activation::Gelu, rng);
        let probe = Mlp::seeded(m, h, shape.probe_dim, Activation::Gelu, rng);
        let token_proj = shape.token_dim.map(|t| Mlp::seeded(m, h, t, Activation::Gelu, rng));
        Self::new(compress, probe, token_proj)
    }

    pub fn input_dim(&self) -> usize {
        self.compress.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.compress.output_dim() * self.probe.output_dim() + self.token_proj.as_ref().map_or(0, Mlp::output_dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    pub image_id: String,
    pub vector: Vec<f64>,
    pub normalized: bool,
}

impl GlobalDescriptor {
    pub fn new(image_id: impl Into<String>, vector: Vec<f64>) -> Result<Self> {
        let image_id = image_id.into();
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("descriptor `{image_id}`"),
                row: 0,
            });
        }
        Ok(Self {
            image_id,
            vector,
            normalized: false,
        })
    }

    /// Wraps a vector that is already unit length.
    pub fn unit(image_id: impl Into<String>, vector: Vec<f64>) -> Result<Self> {
        Self::new(image_id, vector)?.l2_normalize()
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn l2_normalize(&self) -> Result<GlobalDescriptor> {
        l2_normalize(self)
    }
}

pub fn l2_normalize(f: &GlobalDescriptor) -> Result<GlobalDescriptor> {
    let norm = f.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::invalid(format!("descriptor `{}` has zero norm", f.image_id)));
    }
    Ok(GlobalDescriptor {
        image_id: f.image_id.clone(),
        vector: f.vector.iter().map(|v| v / norm).collect(),
        normalized: true,
    })
}

/// Bilinear pooling `compress(X)^T probe(X) / L`, flattened row-major, with the
/// class-token projection appended when the aggregator has one.
pub fn cfp_aggregate(
    x_mod: &PatchDescriptorSet,
    class_token: Option<&[f64]>,
    params: &AggregationParams,
) -> Result<GlobalDescriptor> {
    let m = params.input_dim();
    if x_mod.dim() != m {
        return Err(Error::DimensionMismatch {
            what: format!("patch set `{}`", x_mod.image_id),
            expected: m,
            actual: x_mod.dim(),
        });
    }
    let compressed = params.compress.forward_rows(&x_mod.descriptors);
    let probed = params.probe.forward_rows(&x_mod.descriptors);
    let gram = compressed.transpose() * probed / x_mod.patch_count() as f64;

    let (d, k) = gram.shape();
    let mut vector = Vec::with_capacity(params.output_dim());
    for r in 0..d {
        for c in 0..k {
            vector.push(gram[(r, c)]);
        }
    }
    match (&params.token_proj, class_token) {
        (Some(proj), Some(token)) => {
            if token.len() != m {
                return Err(Error::DimensionMismatch {
                    what: format!("class token of `{}`", x_mod.image_id),
                    expected: m,
                    actual: token.len(),
                });
            }
            vector.extend(proj.forward(&DVector::from_column_slice(token)).iter());
        }
        (Some(_), None) => {
            return Err(Error::invalid(format!(
                "aggregator projects a class token but `{}` has none",
                x_mod.image_id
            )))
        }
        (None, Some(_)) => {
            return Err(Error::invalid("class token given but the aggregator has no token projection"))
        }
        (None, None) => {}
    }
    GlobalDescriptor::new(x_mod.image_id.clone(), vector)
}

/// SoftP, aggregation and normalization for one image.
pub fn describe(
    x: &PatchDescriptorSet,
    class_token: Option<&[f64]>,
    softp: &SoftPParams,
    agg: &AggregationParams,
) -> Result<GlobalDescriptor> {
    let (x_mod, _) = softp_modulate(x, softp)?;
    cfp_aggregate(&x_mod, class_token, agg)?.l2_normalize()
}

/// Parallel [`describe`] over a batch; output order follows input order.
pub fn describe_batch(
    items: &[(PatchDescriptorSet, Option<Vec<f64>>)],
    softp: &SoftPParams,
    agg: &AggregationParams,
) -> Result<Vec<GlobalDescriptor>> {
    items
        .par_iter()
        .map(|(x, token)| describe(x, token.as_deref(), softp, agg))
        .collect()
}

impl SoftPParams {
    pub(crate) fn push_sections(&self, out: &mut Vec<(String, F32Matrix)>) -> Result<()> {
        out.push((
            "softp.config".into(),
            F32Matrix::new(1, 2, vec![self.alpha as f32, self.epsilon as f32])?,
        ));
        self.phi.push_sections("softp.phi", out)
    }

    pub(crate) fn from_store(store: &EmbeddingStore) -> Result<Self> {
        let cfg = mlp::section(store, "softp.config")?;
        if cfg.data().len() != 2 {
            return Err(Error::invalid("section `softp.config` must hold [alpha, epsilon]"));
        }
        Self::new(cfg.data()[0] as f64, cfg.data()[1] as f64, Mlp::from_store(store, "softp.phi")?)
    }
}

impl AggregationParams {
    pub(crate) fn push_sections(&self, out: &mut Vec<(String, F32Matrix)>) -> Result<()> {
        self.compress.push_sections("agg.compress", out)?;
        self.probe.push_sections("agg.probe", out)?;
        if let Some(t) = &self.token_proj {
            t.push_sections("agg.token", out)?;
        }
        Ok(())
    }

    pub(crate) fn from_store(store: &EmbeddingStore) -> Result<Self> {
        let token_proj = if store.section("agg.token.act").is_some() {
            Some(Mlp::from_store(store, "agg.token")?)
        } else {
            None
        };
        Self::new(
            Mlp::from_store(store, "agg.compress")?,
            Mlp::from_store(store, "agg.probe")?,
            token_proj,
        )
    }
}
