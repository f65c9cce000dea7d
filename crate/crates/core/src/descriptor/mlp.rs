//! Dense layers and the two-layer networks used by the descriptor heads.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::store::{EmbeddingStore, F32Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    /// tanh approximation of GELU
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Gelu => gelu(x),
        }
    }

    fn code(self) -> f32 {
        match self {
            Activation::Identity => 0.0,
            Activation::Relu => 1.0,
            Activation::Gelu => 2.0,
        }
    }

    fn from_code(c: f32) -> Option<Self> {
        match c as i32 {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Gelu),
            _ => None,
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Affine map `y = W x + b` with `W` stored out x in.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Linear {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::DimensionMismatch {
                what: "linear bias".into(),
                expected: weight.nrows(),
                actual: bias.len(),
            });
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("linear layer has non-finite weights"));
        }
        Ok(Self { weight, bias })
    }

    /// Gaussian init with std `1/sqrt(fan_in)`, zero bias. Values are rounded
    /// through `f32` so that a saved parameter file reloads bit-identically.
    pub fn seeded<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let std = 1.0 / (input.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let weight = DMatrix::from_fn(output, input, |_, _| normal.sample(rng) as f32 as f64);
        Self {
            weight,
            bias: DVector::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.weight * x + &self.bias
    }

    /// Applies the layer to every row of `x` (rows are samples).
    pub fn forward_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        // W * x^T keeps the large weight matrix in its native column-major order
        let mut yt = &self.weight * x.transpose();
        for mut col in yt.column_iter_mut() {
            col += &self.bias;
        }
        yt.transpose()
    }

    pub(crate) fn push_sections(&self, prefix: &str, out: &mut Vec<(String, F32Matrix)>) -> Result<()> {
        out.push((format!("{prefix}.weight"), to_f32(&self.weight)?));
        let b = DMatrix::from_row_slice(1, self.bias.len(), self.bias.as_slice());
        out.push((format!("{prefix}.bias"), to_f32(&b)?));
        Ok(())
    }

    pub(crate) fn from_store(store: &EmbeddingStore, prefix: &str) -> Result<Self> {
        let w = section(store, &format!("{prefix}.weight"))?;
        let b = section(store, &format!("{prefix}.bias"))?;
        if b.rows() != 1 {
            return Err(Error::invalid(format!("section `{prefix}.bias` must be a single row")));
        }
        let weight = DMatrix::from_row_slice(w.rows(), w.cols(), &w.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
        let bias = DVector::from_iterator(b.cols(), b.data().iter().map(|&v| v as f64));
        Linear::new(weight, bias)
    }
}

/// Two-layer perceptron: `second(act(first(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub first: Linear,
    pub activation: Activation,
    pub second: Linear,
}

impl Mlp {
    pub fn new(first: Linear, activation: Activation, second: Linear) -> Result<Self> {
        if first.output_dim() != second.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "mlp hidden width".into(),
                expected: first.output_dim(),
                actual: second.input_dim(),
            });
        }
        Ok(Self {
            first,
            activation,
            second,
        })
    }

    pub fn seeded<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let first = Linear::seeded(input, hidden, rng);
        let second = Linear::seeded(hidden, output, rng);
        Self {
            first,
            activation,
            second,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.first.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.first.output_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.second.output_dim()
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let h = self.first.forward(x).map(|v| self.activation.apply(v));
        self.second.forward(&h)
    }

    pub fn forward_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let h = self.first.forward_rows(x).map(|v| self.activation.apply(v));
        self.second.forward_rows(&h)
    }

    /// Scalar-to-scalar evaluation for 1 -> H -> 1 networks.
    pub fn forward_scalar(&self, x: f64) -> f64 {
        debug_assert_eq!(self.input_dim(), 1);
        let mut out = self.second.bias[0];
        for h in 0..self.hidden_dim() {
            let pre = self.first.weight[(h, 0)] * x + self.first.bias[h];
            out += self.second.weight[(0, h)] * self.activation.apply(pre);
        }
        out
    }

    pub(crate) fn push_sections(&self, prefix: &str, out: &mut Vec<(String, F32Matrix)>) -> Result<()> {
        self.first.push_sections(&format!("{prefix}.0"), out)?;
        self.second.push_sections(&format!("{prefix}.1"), out)?;
        out.push((format!("{prefix}.act"), F32Matrix::new(1, 1, vec![self.activation.code()])?));
        Ok(())
    }

    pub(crate) fn from_store(store: &EmbeddingStore, prefix: &str) -> Result<Self> {
        let act = section(store, &format!("{prefix}.act"))?;
        let activation = act
            .data()
            .first()
            .copied()
            .and_then(Activation::from_code)
            .ok_or_else(|| Error::invalid(format!("section `{prefix}.act` holds an unknown activation")))?;
        Mlp::new(
            Linear::from_store(store, &format!("{prefix}.0"))?,
            activation,
            Linear::from_store(store, &format!("{prefix}.1"))?,
        )
    }
}

pub(crate) fn section<'a>(store: &'a EmbeddingStore, name: &str) -> Result<&'a F32Matrix> {
    store
        .section(name)
        .ok_or_else(|| Error::invalid(format!("parameter file has no section `{name}`")))
}

pub(crate) fn to_f32(m: &DMatrix<f64>) -> Result<F32Matrix> {
    let mut data = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            data.push(m[(r, c)] as f32);
        }
    }
    F32Matrix::new(m.nrows(), m.ncols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
        assert!((gelu(-1.0) + 0.158_808).abs() < 1e-5);
    }

    #[test]
    fn rows_match_vector_forward() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::seeded(4, 5, 3, Activation::Gelu, &mut rng);
        let x = DMatrix::from_fn(6, 4, |r, c| (r as f64 - c as f64) * 0.3);
        let y = mlp.forward_rows(&x);
        for r in 0..6 {
            let v = mlp.forward(&x.row(r).transpose());
            for c in 0..3 {
                assert!((y[(r, c)] - v[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scalar_path_matches_vector_path() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::seeded(1, 16, 1, Activation::Relu, &mut rng);
        for x in [-2.0, 0.0, 0.7, 3.5] {
            let v = mlp.forward(&DVector::from_element(1, x))[0];
            assert!((mlp.forward_scalar(x) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn store_round_trip_is_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mlp = Mlp::seeded(3, 4, 2, Activation::Relu, &mut rng);
        let mut sections = Vec::new();
        mlp.push_sections("m", &mut sections).unwrap();
        let store = EmbeddingStore {
            vectors: F32Matrix::default(),
            sections,
        };
        assert_eq!(Mlp::from_store(&store, "m").unwrap(), mlp);
        assert!(Mlp::from_store(&store, "other").is_err());
    }
}
