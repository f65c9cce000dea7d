//! Cross-image attention over descriptor segments.
//!
//! Each of B global descriptors is cut into S contiguous segments. Segment `s`
//! of every image forms sequence `s` (B tokens), a pre-norm Transformer
//! encoder runs over every sequence independently, and the refined segments
//! are stitched back into per-image vectors. There is no positional encoding
//! along the batch axis, so the head is equivariant to reordering the images.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::descriptor::{gelu, GlobalDescriptor, Linear};
use crate::error::{Error, Result};
use crate::store::{EmbeddingStore, F32Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentLayout {
    segment_count: usize,
    segment_length: usize,
}

impl SegmentLayout {
    pub fn new(total_length: usize, segment_length: usize) -> Result<Self> {
        if segment_length == 0 || total_length == 0 {
            return Err(Error::invalid("segment and total length must be positive"));
        }
        if total_length % segment_length != 0 {
            return Err(Error::invalid(format!(
                "descriptor length {total_length} is not a multiple of segment length {segment_length}"
            )));
        }
        Ok(Self {
            segment_count: total_length / segment_length,
            segment_length,
        })
    }

    pub fn segment_count(&self) -> usize {
        self.segment_count
    }

    pub fn segment_length(&self) -> usize {
        self.segment_length
    }

    pub fn total_length(&self) -> usize {
        self.segment_count * self.segment_length
    }
}

/// S sequences of B tokens each, plus the bookkeeping needed to restore them.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSequences {
    pub image_ids: Vec<String>,
    pub normalized: Vec<bool>,
    /// `sequences[s]` is B x segment_length; row `b` is segment `s` of image `b`.
    pub sequences: Vec<DMatrix<f64>>,
}

impl SegmentSequences {
    pub fn batch_size(&self) -> usize {
        self.image_ids.len()
    }
}

pub fn segment_and_rearrange(descriptors: &[GlobalDescriptor], layout: SegmentLayout) -> Result<SegmentSequences> {
    if descriptors.is_empty() {
        return Err(Error::invalid("need at least one descriptor to segment"));
    }
    if let Some(bad) = descriptors.iter().find(|d| d.dim() != layout.total_length()) {
        return Err(Error::DimensionMismatch {
            what: format!("descriptor `{}`", bad.image_id),
            expected: layout.total_length(),
            actual: bad.dim(),
        });
    }
    let b = descriptors.len();
    let len = layout.segment_length;
    let sequences = (0..layout.segment_count)
        .map(|s| DMatrix::from_fn(b, len, |row, col| descriptors[row].vector[s * len + col]))
        .collect();
    Ok(SegmentSequences {
        image_ids: descriptors.iter().map(|d| d.image_id.clone()).collect(),
        normalized: descriptors.iter().map(|d| d.normalized).collect(),
        sequences,
    })
}

pub fn restore_layout(seqs: &SegmentSequences, layout: SegmentLayout) -> Result<Vec<GlobalDescriptor>> {
    if seqs.sequences.len() != layout.segment_count {
        return Err(Error::DimensionMismatch {
            what: "segment count".into(),
            expected: layout.segment_count,
            actual: seqs.sequences.len(),
        });
    }
    let b = seqs.batch_size();
    for (s, m) in seqs.sequences.iter().enumerate() {
        if m.nrows() != b || m.ncols() != layout.segment_length {
            return Err(Error::invalid(format!(
                "sequence {s} is {}x{}, expected {b}x{}",
                m.nrows(),
                m.ncols(),
                layout.segment_length
            )));
        }
    }
    Ok((0..b)
        .map(|row| {
            let mut vector = Vec::with_capacity(layout.total_length());
            for m in &seqs.sequences {
                vector.extend(m.row(row).iter());
            }
            GlobalDescriptor {
                image_id: seqs.image_ids[row].clone(),
                vector,
                normalized: seqs.normalized[row],
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: DVector<f64>,
    pub beta: DVector<f64>,
}

impl LayerNorm {
    const EPS: f64 = 1e-5;

    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: DVector::from_element(dim, 1.0),
            beta: DVector::zeros(dim),
        }
    }

    fn forward_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x.clone();
        let n = x.ncols() as f64;
        for mut row in y.row_iter_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + Self::EPS).sqrt();
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * self.gamma[c] + self.beta[c];
            }
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ff_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub model_dim: usize,
    pub head_count: usize,
    pub ff_dim: usize,
    pub layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            model_dim: 768,
            head_count: 16,
            ff_dim: 1024,
            layers: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.head_count == 0 || self.ff_dim == 0 || self.layers == 0 {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        if self.model_dim % self.head_count != 0 {
            return Err(Error::invalid(format!(
                "model dim {} not divisible by {} heads",
                self.model_dim, self.head_count
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub layers: Vec<EncoderLayer>,
}

/// Attention weights of one head in one layer for one sequence (B x B).
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub sequence: usize,
    pub layer: usize,
    pub head: usize,
    pub weights: DMatrix<f64>,
}

impl EncoderParams {
    pub fn seeded<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let layers = (0..config.layers)
            .map(|_| EncoderLayer {
                attn_norm: LayerNorm::identity(d),
                query: Linear::seeded(d, d, rng),
                key: Linear::seeded(d, d, rng),
                value: Linear::seeded(d, d, rng),
                output: Linear::seeded(d, d, rng),
                ff_norm: LayerNorm::identity(d),
                ff_in: Linear::seeded(d, config.ff_dim, rng),
                ff_out: Linear::seeded(config.ff_dim, d, rng),
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.layers {
            return Err(Error::invalid("encoder layer count disagrees with its config"));
        }
        let d = self.config.model_dim;
        for (i, l) in self.layers.iter().enumerate() {
            let square = [&l.query, &l.key, &l.value, &l.output];
            let ok = square.iter().all(|p| p.input_dim() == d && p.output_dim() == d)
                && l.ff_in.input_dim() == d
                && l.ff_in.output_dim() == self.config.ff_dim
                && l.ff_out.input_dim() == self.config.ff_dim
                && l.ff_out.output_dim() == d
                && l.attn_norm.gamma.len() == d
                && l.ff_norm.gamma.len() == d;
            if !ok {
                return Err(Error::invalid(format!("encoder layer {i} has inconsistent shapes")));
            }
        }
        Ok(())
    }

    fn forward_sequence(&self, x: &DMatrix<f64>, seq_index: usize, trace: Option<&mut Vec<AttentionTrace>>) -> Result<DMatrix<f64>> {
        let heads = self.config.head_count;
        let dh = self.config.model_dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut trace = trace;
        let mut h = x.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let normed = layer.attn_norm.forward_rows(&h);
            let q = layer.query.forward_rows(&normed);
            let k = layer.key.forward_rows(&normed);
            let v = layer.value.forward_rows(&normed);
            let b = h.nrows();
            let mut context = DMatrix::zeros(b, self.config.model_dim);
            for head in 0..heads {
                let cols = head * dh..(head + 1) * dh;
                let qh = q.columns(cols.start, dh);
                let kh = k.columns(cols.start, dh);
                let vh = v.columns(cols.start, dh);
                let mut scores = qh * kh.transpose() * scale;
                softmax_rows(&mut scores);
                context.columns_mut(cols.start, dh).copy_from(&(&scores * vh));
                if let Some(t) = trace.as_deref_mut() {
                    t.push(AttentionTrace {
                        sequence: seq_index,
                        layer: li,
                        head,
                        weights: scores,
                    });
                }
            }
            h += layer.output.forward_rows(&context);
            check_finite(&h, li, "attention")?;

            let normed = layer.ff_norm.forward_rows(&h);
            let inner = layer.ff_in.forward_rows(&normed).map(gelu);
            h += layer.ff_out.forward_rows(&inner);
            check_finite(&h, li, "feed-forward")?;
        }
        Ok(h)
    }

    pub(crate) fn push_sections(&self, out: &mut Vec<(String, F32Matrix)>) -> Result<()> {
        let c = self.config;
        out.push((
            "encoder.config".into(),
            F32Matrix::new(1, 4, vec![c.model_dim as f32, c.head_count as f32, c.ff_dim as f32, c.layers as f32])?,
        ));
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("encoder.{i}");
            push_norm(&l.attn_norm, &format!("{p}.attn_norm"), out)?;
            l.query.push_sections(&format!("{p}.query"), out)?;
            l.key.push_sections(&format!("{p}.key"), out)?;
            l.value.push_sections(&format!("{p}.value"), out)?;
            l.output.push_sections(&format!("{p}.output"), out)?;
            push_norm(&l.ff_norm, &format!("{p}.ff_norm"), out)?;
            l.ff_in.push_sections(&format!("{p}.ff_in"), out)?;
            l.ff_out.push_sections(&format!("{p}.ff_out"), out)?;
        }
        Ok(())
    }

    pub(crate) fn from_store(store: &EmbeddingStore) -> Result<Option<Self>> {
        let Some(cfg) = store.section("encoder.config") else {
            return Ok(None);
        };
        if cfg.data().len() != 4 {
            return Err(Error::invalid("section `encoder.config` must hold 4 values"));
        }
        let v: Vec<usize> = cfg.data().iter().map(|&x| x as usize).collect();
        let config = EncoderConfig {
            model_dim: v[0],
            head_count: v[1],
            ff_dim: v[2],
            layers: v[3],
        };
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("encoder.{i}");
            layers.push(EncoderLayer {
                attn_norm: read_norm(store, &format!("{p}.attn_norm"))?,
                query: Linear::from_store(store, &format!("{p}.query"))?,
                key: Linear::from_store(store, &format!("{p}.key"))?,
                value: Linear::from_store(store, &format!("{p}.value"))?,
                output: Linear::from_store(store, &format!("{p}.output"))?,
                ff_norm: read_norm(store, &format!("{p}.ff_norm"))?,
                ff_in: Linear::from_store(store, &format!("{p}.ff_in"))?,
                ff_out: Linear::from_store(store, &format!("{p}.ff_out"))?,
            });
        }
        let params = EncoderParams { config, layers };
        params.validate()?;
        Ok(Some(params))
    }
}

fn push_norm(n: &LayerNorm, prefix: &str, out: &mut Vec<(String, F32Matrix)>) -> Result<()> {
    let d = n.gamma.len();
    let data: Vec<f32> = n.gamma.iter().chain(n.beta.iter()).map(|&v| v as f32).collect();
    out.push((prefix.to_string(), F32Matrix::new(2, d, data)?));
    Ok(())
}

fn read_norm(store: &EmbeddingStore, name: &str) -> Result<LayerNorm> {
    let m = store
        .section(name)
        .ok_or_else(|| Error::invalid(format!("parameter file has no section `{name}`")))?;
    if m.rows() != 2 {
        return Err(Error::invalid(format!("section `{name}` must have 2 rows")));
    }
    Ok(LayerNorm {
        gamma: DVector::from_iterator(m.cols(), m.row(0).iter().map(|&v| v as f64)),
        beta: DVector::from_iterator(m.cols(), m.row(1).iter().map(|&v| v as f64)),
    })
}

fn softmax_rows(m: &mut DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn check_finite(m: &DMatrix<f64>, layer: usize, stage: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::EncoderNonFinite { layer, stage })
    }
}

fn check_tokens(seqs: &SegmentSequences, params: &EncoderParams) -> Result<()> {
    params.validate()?;
    for m in &seqs.sequences {
        if m.ncols() != params.config.model_dim {
            return Err(Error::DimensionMismatch {
                what: "encoder token length".into(),
                expected: params.config.model_dim,
                actual: m.ncols(),
            });
        }
    }
    Ok(())
}

/// Runs the encoder over every sequence. Refined tokens are no longer unit length.
pub fn encoder_forward(seqs: &SegmentSequences, params: &EncoderParams) -> Result<SegmentSequences> {
    check_tokens(seqs, params)?;
    let sequences = seqs
        .sequences
        .par_iter()
        .enumerate()
        .map(|(s, x)| params.forward_sequence(x, s, None))
        .collect::<Result<Vec<_>>>()?;
    Ok(SegmentSequences {
        image_ids: seqs.image_ids.clone(),
        normalized: vec![false; seqs.batch_size()],
        sequences,
    })
}

/// Sequential forward pass that also returns every attention matrix.
pub fn encoder_forward_traced(seqs: &SegmentSequences, params: &EncoderParams) -> Result<(SegmentSequences, Vec<AttentionTrace>)> {
    check_tokens(seqs, params)?;
    let mut trace = Vec::new();
    let mut sequences = Vec::with_capacity(seqs.sequences.len());
    for (s, x) in seqs.sequences.iter().enumerate() {
        sequences.push(params.forward_sequence(x, s, Some(&mut trace))?);
    }
    Ok((
        SegmentSequences {
            image_ids: seqs.image_ids.clone(),
            normalized: vec![false; seqs.batch_size()],
            sequences,
        },
        trace,
    ))
}

/// Segment, encode, restore and re-normalize a batch of descriptors.
pub fn interact_head(descriptors: &[GlobalDescriptor], params: &EncoderParams) -> Result<Vec<GlobalDescriptor>> {
    let total = descriptors.first().map_or(0, GlobalDescriptor::dim);
    let layout = SegmentLayout::new(total, params.config.model_dim)?;
    let seqs = segment_and_rearrange(descriptors, layout)?;
    let refined = encoder_forward(&seqs, params)?;
    restore_layout(&refined, layout)?
        .iter()
        .map(GlobalDescriptor::l2_normalize)
        .collect()
}

/// [`interact_head`] over consecutive chunks of `batch` images.
pub fn interact_head_batched(descriptors: &[GlobalDescriptor], params: &EncoderParams, batch: usize) -> Result<Vec<GlobalDescriptor>> {
    if batch == 0 {
        return Err(Error::invalid("evaluation batch size must be >= 1"));
    }
    let mut out = Vec::with_capacity(descriptors.len());
    for chunk in descriptors.chunks(batch) {
        out.extend(interact_head(chunk, params)?);
    }
    Ok(out)
}
