//! Embedding, extraction, and weight-density analysis.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::chaos::{generate_chaotic_sequence, ChaoticParams, ParamError};
use crate::store::{write_text_atomic, ModelWeights, StoreError, WatermarkManifest, ROW_MAJOR};

#[derive(Debug, Error)]
pub enum WatermarkError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("key length {key} does not match the {layer} elements of the target layer")]
    LengthMismatch { key: usize, layer: usize },
    #[error("layer {layer:?}: shape {suspect:?} does not match reference shape {reference:?}")]
    ShapeMismatch { layer: String, suspect: Vec<usize>, reference: Vec<usize> },
    #[error("layer values span a zero range; cannot bin")]
    ZeroRange,
    #[error("need at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("density tables have different bin counts")]
    BinCountMismatch,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Extracted signal for one layer, in weight units.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSequence {
    pub values: Vec<f64>,
    pub layer: String,
    pub suspect_len: usize,
    pub reference_len: usize,
}

impl DeltaSequence {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Adds `epsilon * c_i` to each row-major element of `layer`.
///
/// A `params.length` of zero means "use the layer size".
pub fn embed(
    reference: &ModelWeights,
    layer: &str,
    params: &ChaoticParams,
    model_id: &str,
    created_at: u64,
) -> Result<(ModelWeights, WatermarkManifest), WatermarkError> {
    let tensor = reference.get(layer)?;
    let params = if params.length == 0 { params.with_length(tensor.len()) } else { *params };
    if params.length != tensor.len() {
        return Err(WatermarkError::LengthMismatch { key: params.length, layer: tensor.len() });
    }
    let c = generate_chaotic_sequence(&params)?;
    let marked: Vec<f64> = tensor
        .values()
        .iter()
        .zip(c.values())
        .map(|(&w, &ci)| w + params.epsilon * ci)
        .collect();
    let out = reference.replace(tensor.with_values_f64(marked)?)?;
    let manifest = WatermarkManifest {
        model_id: model_id.to_string(),
        layer: layer.to_string(),
        params,
        flatten_order: ROW_MAJOR.to_string(),
        reference_digest: reference.digest()?,
        created_at,
    };
    Ok((out, manifest))
}

/// Element-wise `suspect - reference` over the flattened layer.
pub fn extract(
    suspect: &ModelWeights,
    reference: &ModelWeights,
    layer: &str,
) -> Result<DeltaSequence, WatermarkError> {
    let s = suspect.get(layer)?;
    let r = reference.get(layer)?;
    if s.shape() != r.shape() {
        return Err(WatermarkError::ShapeMismatch {
            layer: layer.to_string(),
            suspect: s.shape().to_vec(),
            reference: r.shape().to_vec(),
        });
    }
    let values = s.values().iter().zip(r.values()).map(|(a, b)| a - b).collect();
    Ok(DeltaSequence {
        values,
        layer: layer.to_string(),
        suspect_len: s.len(),
        reference_len: r.len(),
    })
}

/// Diagnostic difference `suspect - watermarked`. Against the released
/// watermarked model this isolates post-release drift only; the key is not
/// recoverable from it. Use [`extract`] against the pre-watermark reference
/// for verification.
pub fn extract_drift(
    suspect: &ModelWeights,
    watermarked: &ModelWeights,
    layer: &str,
) -> Result<DeltaSequence, WatermarkError> {
    extract(suspect, watermarked, layer)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityData {
    pub label: String,
    /// `bins + 1` strictly increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub densities: Vec<f64>,
}

impl DensityData {
    pub fn bin_width(&self) -> f64 {
        self.edges[1] - self.edges[0]
    }

    /// `sum(density * width)`, equal to 1 up to rounding.
    pub fn integral(&self) -> f64 {
        self.densities
            .iter()
            .zip(self.edges.windows(2))
            .map(|(d, e)| d * (e[1] - e[0]))
            .sum()
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "bin_left,bin_right,count,density")?;
        for (i, (&c, &d)) in self.counts.iter().zip(&self.densities).enumerate() {
            writeln!(w, "{:e},{:e},{},{:e}", self.edges[i], self.edges[i + 1], c, d)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> std::io::Result<()> {
        write_text_atomic(path, |w| self.write_csv(w))
    }
}

pub const DEFAULT_BINS: usize = 100;

/// Equal-width histogram over `[min, max]`; bins are half-open except the
/// last, which is closed.
pub fn density_histogram(
    weights: &ModelWeights,
    layer: &str,
    bin_count: usize,
    label: &str,
) -> Result<DensityData, WatermarkError> {
    let values = weights.get(layer)?.values();
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    histogram_on_range(values, lo, hi, bin_count, label)
}

/// Histogram over a caller-chosen range. Values outside `[lo, hi]` are
/// clamped into the edge bins, which lets several models share one grid.
pub fn histogram_on_range(
    values: &[f64],
    lo: f64,
    hi: f64,
    bin_count: usize,
    label: &str,
) -> Result<DensityData, WatermarkError> {
    if bin_count < 2 {
        return Err(WatermarkError::TooFewBins(bin_count));
    }
    if !(hi > lo) {
        return Err(WatermarkError::ZeroRange);
    }
    let width = (hi - lo) / bin_count as f64;
    let edges: Vec<f64> = (0..=bin_count)
        .map(|i| if i == bin_count { hi } else { lo + width * i as f64 })
        .collect();
    let mut counts = vec![0u64; bin_count];
    for &v in values {
        let idx = ((v - lo) / width).floor();
        let idx = if idx.is_nan() || idx < 0.0 { 0 } else { (idx as usize).min(bin_count - 1) };
        counts[idx] += 1;
    }
    let n = values.len() as f64;
    let densities = counts
        .iter()
        .zip(edges.windows(2))
        .map(|(&c, e)| c as f64 / (n * (e[1] - e[0])))
        .collect();
    Ok(DensityData { label: label.to_string(), edges, counts, densities })
}

/// L1 distance `sum |p - q| * width` between two densities on the same grid.
pub fn density_l1(a: &DensityData, b: &DensityData) -> Result<f64, WatermarkError> {
    if a.counts.len() != b.counts.len() {
        return Err(WatermarkError::BinCountMismatch);
    }
    Ok(a.densities
        .iter()
        .zip(&b.densities)
        .zip(a.edges.windows(2))
        .map(|((p, q), e)| (p - q).abs() * (e[1] - e[0]))
        .sum())
}

/// Densities for several layers on one shared grid spanning all values.
pub fn shared_histograms(
    layers: &[(&str, &[f64])],
    bin_count: usize,
) -> Result<Vec<DensityData>, WatermarkError> {
    let (lo, hi) = layers
        .iter()
        .flat_map(|(_, v)| v.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    layers
        .iter()
        .map(|(label, v)| histogram_on_range(v, lo, hi, bin_count, label))
        .collect()
}
