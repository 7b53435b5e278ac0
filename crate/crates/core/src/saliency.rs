//! Saliency maps and attention-based refinement.
//!
//! [`pir`] diffuses a normalized map through self-attention aggregated over a
//! selection of layers: each aggregated row keeps only weights at or above
//! `threshold * row_max`, is rescaled to sum to one (an all-zero row becomes
//! uniform), and the resulting row-stochastic matrix is applied to the
//! flattened map. [`refine_text_alignment`] combines that with a bounding-box
//! prior taken from the thresholded input.

use std::fmt;
use std::str::FromStr;

use crate::bundle_io::{TensorBlob, TensorData};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SaliencyError {
    #[error("dimension mismatch: map has {map} cells, attention has {tokens} tokens")]
    DimMismatch { map: usize, tokens: usize },
    #[error("empty layer selection")]
    EmptyLayerSelection,
    #[error("layer {index} selected but the stack has {layers} layers")]
    LayerOutOfRange { index: usize, layers: usize },
    #[error("input map is not min-max normalized")]
    NotNormalized,
    #[error("attention tensor must be L x N x N or L x H x N x N, got {0:?}")]
    BadAttentionShape(Vec<usize>),
    #[error("map values must be finite and non-negative")]
    InvalidMap,
}

/// A per-patch relevance map over an `height x width` grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl SaliencyMap {
    /// A raw (unnormalized) map. Returns `None` on a length mismatch.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Option<Self> {
        (values.len() == height * width).then_some(Self {
            height,
            width,
            values,
            normalized: false,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
            normalized: true,
        }
    }

    pub fn from_tensor(t: &TensorBlob) -> Option<Self> {
        match t.shape() {
            [h, w] => Self::new(*h, *w, t.to_f64()),
            _ => None,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

/// `(v - min) / (max - min)`; constant maps become all zeros.
pub fn minmax_normalize(map: &SaliencyMap) -> SaliencyMap {
    let (lo, hi) = map
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    let values = if !span.is_finite() || span <= 0.0 {
        vec![0.0; map.values.len()]
    } else {
        map.values
            .iter()
            .map(|&v| ((v - lo) / span).clamp(0.0, 1.0))
            .collect()
    };
    SaliencyMap {
        values,
        normalized: true,
        ..*map
    }
}

/// Which layers of an attention stack take part in aggregation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSelection {
    All,
    /// The last `k` layers.
    Last(usize),
    Indices(Vec<usize>),
}

impl LayerSelection {
    pub fn resolve(&self, layers: usize) -> Result<Vec<usize>, SaliencyError> {
        let picked: Vec<usize> = match self {
            LayerSelection::All => (0..layers).collect(),
            LayerSelection::Last(k) => {
                if *k > layers {
                    return Err(SaliencyError::LayerOutOfRange {
                        index: layers.wrapping_sub(*k),
                        layers,
                    });
                }
                (layers - k..layers).collect()
            }
            LayerSelection::Indices(idx) => {
                if let Some(&index) = idx.iter().find(|&&i| i >= layers) {
                    return Err(SaliencyError::LayerOutOfRange { index, layers });
                }
                idx.clone()
            }
        };
        if picked.is_empty() {
            return Err(SaliencyError::EmptyLayerSelection);
        }
        Ok(picked)
    }
}

impl fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSelection::All => write!(f, "all"),
            LayerSelection::Last(k) => write!(f, "last:{k}"),
            LayerSelection::Indices(idx) => {
                let parts: Vec<String> = idx.iter().map(usize::to_string).collect();
                write!(f, "{}", parts.join(","))
            }
        }
    }
}

impl FromStr for LayerSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "all" {
            return Ok(LayerSelection::All);
        }
        if let Some(k) = s.strip_prefix("last:") {
            return k
                .parse()
                .map(LayerSelection::Last)
                .map_err(|_| format!("bad layer count in {s:?}"));
        }
        s.split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map(LayerSelection::Indices)
            .map_err(|_| format!("expected `all`, `last:K` or a comma list, got {s:?}"))
    }
}

/// A stack of self-attention maps, `layers x heads x tokens x tokens`.
#[derive(Debug, Clone)]
pub struct AttentionStack {
    layers: usize,
    heads: usize,
    tokens: usize,
    weights: Vec<f32>,
    selection: Vec<usize>,
}

impl AttentionStack {
    /// Wraps an `L x N x N` or `L x H x N x N` tensor, selecting every layer.
    pub fn from_tensor(t: &TensorBlob) -> Result<Self, SaliencyError> {
        let (layers, heads, tokens) = match *t.shape() {
            [l, n, m] if n == m => (l, 1, n),
            [l, h, n, m] if n == m => (l, h, n),
            _ => return Err(SaliencyError::BadAttentionShape(t.shape().to_vec())),
        };
        let weights = match t.data() {
            TensorData::F32(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| x as f32).collect(),
        };
        Ok(Self {
            layers,
            heads,
            tokens,
            weights,
            selection: (0..layers).collect(),
        })
    }

    /// `layers` copies of the same `tokens x tokens` row-major matrix.
    pub fn repeated(layers: usize, tokens: usize, matrix: &[f32]) -> Self {
        assert_eq!(matrix.len(), tokens * tokens);
        Self {
            layers,
            heads: 1,
            tokens,
            weights: matrix.repeat(layers),
            selection: (0..layers).collect(),
        }
    }

    pub fn identity(layers: usize, tokens: usize) -> Self {
        let mut m = vec![0.0f32; tokens * tokens];
        for i in 0..tokens {
            m[i * tokens + i] = 1.0;
        }
        Self::repeated(layers, tokens, &m)
    }

    pub fn with_selection(mut self, selection: &LayerSelection) -> Result<Self, SaliencyError> {
        self.selection = selection.resolve(self.layers)?;
        Ok(self)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn selection(&self) -> &[usize] {
        &self.selection
    }

    /// Mean over selected layers and all heads, `tokens x tokens` row-major.
    pub fn aggregate(&self) -> Result<Vec<f64>, SaliencyError> {
        if self.selection.is_empty() {
            return Err(SaliencyError::EmptyLayerSelection);
        }
        if let Some(&index) = self.selection.iter().find(|&&i| i >= self.layers) {
            return Err(SaliencyError::LayerOutOfRange {
                index,
                layers: self.layers,
            });
        }
        let nn = self.tokens * self.tokens;
        let mut acc = vec![0.0f64; nn];
        for &layer in &self.selection {
            for head in 0..self.heads {
                let base = (layer * self.heads + head) * nn;
                for (a, &w) in acc.iter_mut().zip(&self.weights[base..base + nn]) {
                    *a += w as f64;
                }
            }
        }
        let scale = 1.0 / (self.selection.len() * self.heads) as f64;
        acc.iter_mut().for_each(|a| *a *= scale);
        Ok(acc)
    }
}

/// Row-stochastic propagation matrix from aggregated attention.
fn propagation_matrix(attn: &AttentionStack, threshold: f64) -> Result<Vec<f64>, SaliencyError> {
    let n = attn.tokens;
    let mut m = attn.aggregate()?;
    for row in m.chunks_exact_mut(n) {
        let max = row.iter().cloned().fold(0.0f64, f64::max);
        let cut = threshold * max;
        for v in row.iter_mut() {
            if *v < cut {
                *v = 0.0;
            }
        }
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            row.iter_mut().for_each(|v| *v /= sum);
        } else {
            row.iter_mut().for_each(|v| *v = 1.0 / n as f64);
        }
    }
    Ok(m)
}

/// Prior-information refinement of a normalized map through self-attention.
pub fn pir(
    map: &SaliencyMap,
    attn: &AttentionStack,
    threshold: f64,
) -> Result<SaliencyMap, SaliencyError> {
    if map.len() != attn.tokens {
        return Err(SaliencyError::DimMismatch {
            map: map.len(),
            tokens: attn.tokens,
        });
    }
    if !map.normalized {
        return Err(SaliencyError::NotNormalized);
    }
    let n = attn.tokens;
    let p = propagation_matrix(attn, threshold)?;
    let values = p
        .chunks_exact(n)
        .map(|row| row.iter().zip(&map.values).map(|(a, b)| a * b).sum())
        .collect();
    Ok(minmax_normalize(&SaliencyMap {
        values,
        normalized: false,
        ..*map
    }))
}

/// Tight bounding box of cells at or above `threshold`, as a 0/1 map.
pub fn box_mask(map: &SaliencyMap, threshold: f64) -> Vec<bool> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for r in 0..map.height {
        for c in 0..map.width {
            if map.get(r, c) >= threshold {
                bounds = Some(match bounds {
                    None => (r, c, r, c),
                    Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                });
            }
        }
    }
    let mut out = vec![false; map.len()];
    if let Some((r0, c0, r1, c1)) = bounds {
        for r in r0..=r1 {
            for c in c0..=c1 {
                out[r * map.width + c] = true;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RtaParams {
    /// Cut on the normalized input that defines the box prior.
    pub box_threshold: f64,
    pub pir_threshold: f64,
}

impl Default for RtaParams {
    fn default() -> Self {
        Self {
            box_threshold: 0.4,
            pir_threshold: 0.4,
        }
    }
}

/// Refined text alignment: `normalize(B ⊙ pir(normalize(ta_raw)))`.
///
/// `attn` must already carry its layer selection.
pub fn refine_text_alignment(
    ta_raw: &SaliencyMap,
    attn: &AttentionStack,
    params: RtaParams,
) -> Result<SaliencyMap, SaliencyError> {
    if ta_raw.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(SaliencyError::InvalidMap);
    }
    let ta = minmax_normalize(ta_raw);
    let boxed = box_mask(&ta, params.box_threshold);
    let diffused = pir(&ta, attn, params.pir_threshold)?;
    let values = diffused
        .values
        .iter()
        .zip(&boxed)
        .map(|(&v, &b)| if b { v } else { 0.0 })
        .collect();
    Ok(minmax_normalize(&SaliencyMap {
        values,
        normalized: false,
        ..diffused
    }))
}
