//! Support/query patch similarity, refined visual alignment and transport cost.

use rayon::prelude::*;

use crate::bundle_io::{FeatureBundle, TensorBlob};
use crate::mask::Mask;
use crate::saliency::{self, AttentionStack, SaliencyError, SaliencyMap};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VisualError {
    #[error("no foreground patch in any support shot")]
    EmptyForeground,
    #[error("patch {patch} of {source_name} has zero norm")]
    ZeroNormPatch { source_name: String, patch: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
}

/// Patch features on an `height x width` grid, L2-normalized per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatures {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    data: Vec<f64>,
}

impl PatchFeatures {
    /// Normalizes each patch vector. `name` labels a zero-norm error.
    pub fn normalized(
        height: usize,
        width: usize,
        dim: usize,
        raw: &[f64],
        name: &str,
    ) -> Result<Self, VisualError> {
        if raw.len() != height * width * dim {
            return Err(VisualError::DimMismatch(format!(
                "{name}: {} values for {height}x{width}x{dim}",
                raw.len()
            )));
        }
        let mut data = raw.to_vec();
        for (patch, v) in data.chunks_exact_mut(dim).enumerate() {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm.is_nan() || norm <= 0.0 {
                return Err(VisualError::ZeroNormPatch {
                    source_name: name.to_string(),
                    patch,
                });
            }
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn from_tensor(t: &TensorBlob, name: &str) -> Result<Self, VisualError> {
        let [h, w, d] = *t.shape() else {
            return Err(VisualError::DimMismatch(format!(
                "{name}: expected h x w x d, got {:?}",
                t.shape()
            )));
        };
        Self::normalized(h, w, d, &t.to_f64(), name)
    }

    pub fn patches(&self) -> usize {
        self.height * self.width
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Cosine similarities of support patches (rows) against query patches
/// (columns), split by the pooled support masks.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilaritySplit {
    query_grid: (usize, usize),
    s_fg: Vec<f64>,
    s_bg: Vec<f64>,
    fg_row_origin: Vec<(usize, usize)>,
    bg_row_origin: Vec<(usize, usize)>,
}

impl SimilaritySplit {
    pub fn query_grid(&self) -> (usize, usize) {
        self.query_grid
    }

    pub fn columns(&self) -> usize {
        self.query_grid.0 * self.query_grid.1
    }

    pub fn n_fg(&self) -> usize {
        self.fg_row_origin.len()
    }

    pub fn n_bg(&self) -> usize {
        self.bg_row_origin.len()
    }

    pub fn fg_row(&self, i: usize) -> &[f64] {
        let n = self.columns();
        &self.s_fg[i * n..(i + 1) * n]
    }

    pub fn bg_row(&self, i: usize) -> &[f64] {
        let n = self.columns();
        &self.s_bg[i * n..(i + 1) * n]
    }

    /// `(shot, patch)` of each foreground row, in stacking order.
    pub fn fg_row_origin(&self) -> &[(usize, usize)] {
        &self.fg_row_origin
    }

    pub fn bg_row_origin(&self) -> &[(usize, usize)] {
        &self.bg_row_origin
    }
}

fn similarity_rows(rows: &[&[f64]], query: &PatchFeatures) -> Vec<f64> {
    let n = query.patches();
    let mut out = vec![0.0; rows.len() * n];
    out.par_chunks_mut(n.max(1))
        .zip(rows.par_iter())
        .for_each(|(dst, row)| {
            for (j, d) in dst.iter_mut().enumerate() {
                let dot: f64 = row.iter().zip(query.patch(j)).map(|(a, b)| a * b).sum();
                *d = dot.clamp(-1.0, 1.0);
            }
        });
    out
}

/// Stacks every shot's patches and routes each row by its shot's mask.
pub fn split_similarity(
    query: &PatchFeatures,
    shots: &[(PatchFeatures, Mask)],
) -> Result<SimilaritySplit, VisualError> {
    let mut fg_rows = Vec::new();
    let mut bg_rows = Vec::new();
    let mut fg_row_origin = Vec::new();
    let mut bg_row_origin = Vec::new();
    for (shot, (features, mask)) in shots.iter().enumerate() {
        if features.dim != query.dim {
            return Err(VisualError::DimMismatch(format!(
                "shot {shot} feature dim {} vs query {}",
                features.dim, query.dim
            )));
        }
        if mask.shape() != (features.height, features.width) {
            return Err(VisualError::DimMismatch(format!(
                "shot {shot} mask {:?} vs features {}x{}",
                mask.shape(),
                features.height,
                features.width
            )));
        }
        for (patch, &fg) in mask.bits().iter().enumerate() {
            if fg {
                fg_rows.push(features.patch(patch));
                fg_row_origin.push((shot, patch));
            } else {
                bg_rows.push(features.patch(patch));
                bg_row_origin.push((shot, patch));
            }
        }
    }
    if fg_rows.is_empty() {
        return Err(VisualError::EmptyForeground);
    }
    Ok(SimilaritySplit {
        query_grid: (query.height, query.width),
        s_fg: similarity_rows(&fg_rows, query),
        s_bg: similarity_rows(&bg_rows, query),
        fg_row_origin,
        bg_row_origin,
    })
}

pub fn build_similarity(bundle: &FeatureBundle) -> Result<SimilaritySplit, VisualError> {
    let query = PatchFeatures::from_tensor(&bundle.query_patch_features, "query_patch_features")?;
    let masks = bundle.support_masks();
    let shots = bundle
        .support_patch_features
        .iter()
        .zip(masks)
        .enumerate()
        .map(|(k, (t, m))| {
            PatchFeatures::from_tensor(t, &format!("support_patch_features.{k}")).map(|f| (f, m))
        })
        .collect::<Result<Vec<_>, _>>()?;
    split_similarity(&query, &shots)
}

/// Column-wise `max ⊙ mean` over `rows` rows of width `n`; zeros when `rows == 0`.
pub fn mixed_map(s: &[f64], rows: usize, n: usize) -> Vec<f64> {
    if rows == 0 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|j| {
            let mut max = f64::NEG_INFINITY;
            let mut sum = 0.0;
            for i in 0..rows {
                let v = s[i * n + j];
                max = max.max(v);
                sum += v;
            }
            max * (sum / rows as f64)
        })
        .collect()
}

/// Background-suppressed alignment before normalization: `mix_fg - mix_bg`.
pub fn raw_visual_alignment(split: &SimilaritySplit) -> SaliencyMap {
    let n = split.columns();
    let fg = mixed_map(&split.s_fg, split.n_fg(), n);
    let bg = mixed_map(&split.s_bg, split.n_bg(), n);
    let values = fg.iter().zip(&bg).map(|(f, b)| f - b).collect();
    let (h, w) = split.query_grid;
    SaliencyMap::new(h, w, values).expect("one value per query patch")
}

/// Refined visual alignment: normalize, diffuse through `attn`, normalize.
///
/// `attn` must already carry its layer selection.
pub fn build_rva(
    split: &SimilaritySplit,
    attn: &AttentionStack,
    pir_threshold: f64,
) -> Result<SaliencyMap, VisualError> {
    if attn.tokens() != split.columns() {
        return Err(VisualError::DimMismatch(format!(
            "attention has {} tokens, query grid has {}",
            attn.tokens(),
            split.columns()
        )));
    }
    let prior = saliency::minmax_normalize(&raw_visual_alignment(split));
    Ok(saliency::pir(&prior, attn, pir_threshold)?)
}

/// `(1 - s_fg) / 2`, foreground rows by query columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    c: Vec<f64>,
}

impl CostMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.c[row * self.cols + col]
    }

    /// Dense `rows x cols.len()` submatrix over the given columns.
    pub fn select_columns(&self, cols: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows * cols.len());
        for r in 0..self.rows {
            let row = &self.c[r * self.cols..(r + 1) * self.cols];
            out.extend(cols.iter().map(|&j| row[j]));
        }
        out
    }
}

pub fn build_cost(split: &SimilaritySplit) -> CostMatrix {
    CostMatrix {
        rows: split.n_fg(),
        cols: split.columns(),
        c: split
            .s_fg
            .iter()
            .map(|s| ((1.0 - s) / 2.0).clamp(0.0, 1.0))
            .collect(),
    }
}
