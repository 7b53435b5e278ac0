//! On-disk formats: feature bundles, mask proposals and predictions.
//!
//! A bundle is a directory holding `manifest.txt` plus one `.mten` tensor file
//! per field. The manifest is flat `key=value` UTF-8; indexed fields use a
//! `.k` suffix (`support_patch_features.0`, `mask_image_embeddings.3`, ...).
//! Blank lines and lines starting with `#` are ignored.

pub mod rle;
pub mod tensor;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::mask::Mask;
pub use tensor::{DType, TensorBlob, TensorData, TensorError};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("tensor `{field}` missing: {}", path.display())]
    MissingTensor { field: String, path: PathBuf },
    #[error("tensor `{field}` in {}: shape mismatch: {detail}", path.display())]
    ShapeMismatch {
        field: String,
        path: PathBuf,
        detail: String,
    },
    #[error("tensor `{field}` in {}: non-finite value at flat index {index}", path.display())]
    NonFiniteValue {
        field: String,
        path: PathBuf,
        index: usize,
    },
    #[error("tensor `{field}` in {}: bad magic", path.display())]
    MagicMismatch { field: String, path: PathBuf },
    #[error("tensor `{field}` in {}: unknown dtype code {code}", path.display())]
    UnknownDType {
        field: String,
        path: PathBuf,
        code: u8,
    },
    #[error("tensor `{field}` in {}: {detail}", path.display())]
    InvalidValue {
        field: String,
        path: PathBuf,
        detail: String,
    },
    #[error("support mask `{field}` in {} has no foreground patch", path.display())]
    EmptySupportMask { field: String, path: PathBuf },
    #[error("{}:{line}: {detail}", path.display())]
    BadManifest {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("{}:{line}: {source}", path.display())]
    Rle {
        path: PathBuf,
        line: usize,
        #[source]
        source: rle::RleError,
    },
    #[error("{}: proposal {id}: {detail}", path.display())]
    BadProposal {
        path: PathBuf,
        id: usize,
        detail: String,
    },
}

impl BundleError {
    /// Stable short name of the error class, used in CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            BundleError::Io { .. } => "IoFailure",
            BundleError::MissingTensor { .. } => "MissingTensor",
            BundleError::ShapeMismatch { .. } => "ShapeMismatch",
            BundleError::NonFiniteValue { .. } => "NonFiniteValue",
            BundleError::MagicMismatch { .. } => "MagicMismatch",
            BundleError::UnknownDType { .. } => "UnknownDType",
            BundleError::InvalidValue { .. } => "InvalidValue",
            BundleError::EmptySupportMask { .. } => "EmptySupportMask",
            BundleError::BadManifest { .. } => "BadManifest",
            BundleError::Rle { source, .. } => match source {
                rle::RleError::BadHeader(_) => "BadHeader",
                rle::RleError::BadRun(_) => "BadHeader",
                rle::RleError::RleOverrun { .. } => "RleOverrun",
                rle::RleError::RleUnderrun { .. } => "RleUnderrun",
            },
            BundleError::BadProposal { .. } => "BadProposal",
        }
    }

    fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BundleError::Io {
            path: path.into(),
            source,
        }
    }

    fn tensor(field: &str, path: &Path, err: TensorError) -> Self {
        let field = field.to_string();
        let path = path.to_path_buf();
        match err {
            TensorError::MagicMismatch => BundleError::MagicMismatch { field, path },
            TensorError::UnknownDType(code) => BundleError::UnknownDType { field, path, code },
            TensorError::ShapeMismatch(detail) => BundleError::ShapeMismatch {
                field,
                path,
                detail,
            },
            TensorError::NonFiniteValue(index) => {
                BundleError::NonFiniteValue { field, path, index }
            }
            TensorError::Io(detail) => BundleError::Io {
                path,
                source: std::io::Error::other(detail),
            },
        }
    }
}

/// All model-derived inputs for one query episode.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    /// `h x w x d` query patch features.
    pub query_patch_features: TensorBlob,
    /// One `h_s x w_s x d` tensor per support shot.
    pub support_patch_features: Vec<TensorBlob>,
    /// One binary `h_s x w_s` patch-grid mask per shot.
    pub support_masks_patch: Vec<TensorBlob>,
    /// `L x N x N` or `L x heads x N x N`, `N = h * w` of the query grid.
    pub dino_attention: TensorBlob,
    /// Raw non-negative `h_c x w_c` text alignment map.
    pub clip_text_alignment: TensorBlob,
    /// `L x N x N` or `L x heads x N x N`, `N = h_c * w_c`.
    pub clip_attention: TensorBlob,
    pub text_embedding: TensorBlob,
    /// One embedding per proposal, in proposal order.
    pub mask_image_embeddings: Vec<TensorBlob>,
    pub class_name: String,
    pub class_description: String,
}

/// Extents derived from a validated bundle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleDims {
    pub query_grid: (usize, usize),
    pub feature_dim: usize,
    pub shot_grids: Vec<(usize, usize)>,
    pub clip_grid: (usize, usize),
    pub dino_layers: usize,
    pub clip_layers: usize,
    pub embedding_dim: usize,
    pub proposals: usize,
}

/// File name a field is written under.
pub fn tensor_file_name(field: &str) -> String {
    format!("{}.mten", field.replace('.', "_"))
}

impl FeatureBundle {
    fn tensors(&self) -> Vec<(String, &TensorBlob)> {
        let mut out = vec![(
            "query_patch_features".to_string(),
            &self.query_patch_features,
        )];
        for (k, t) in self.support_patch_features.iter().enumerate() {
            out.push((format!("support_patch_features.{k}"), t));
        }
        for (k, t) in self.support_masks_patch.iter().enumerate() {
            out.push((format!("support_masks_patch.{k}"), t));
        }
        out.push(("dino_attention".into(), &self.dino_attention));
        out.push(("clip_text_alignment".into(), &self.clip_text_alignment));
        out.push(("clip_attention".into(), &self.clip_attention));
        out.push(("text_embedding".into(), &self.text_embedding));
        for (k, t) in self.mask_image_embeddings.iter().enumerate() {
            out.push((format!("mask_image_embeddings.{k}"), t));
        }
        out
    }

    /// Support mask for `shot` as a patch-grid [`Mask`].
    pub fn support_mask(&self, shot: usize) -> Mask {
        let t = &self.support_masks_patch[shot];
        let bits = t.to_f64().into_iter().map(|v| v != 0.0).collect();
        Mask::from_bits(t.shape()[0], t.shape()[1], bits).expect("validated 2-D mask")
    }

    pub fn support_masks(&self) -> Vec<Mask> {
        (0..self.support_masks_patch.len())
            .map(|k| self.support_mask(k))
            .collect()
    }

    /// Checks every structural invariant. `dir` only labels errors.
    pub fn validate_in(&self, dir: &Path) -> Result<BundleDims, BundleError> {
        let file = |field: &str| dir.join(tensor_file_name(field));
        let shape_err = |field: &str, detail: String| BundleError::ShapeMismatch {
            field: field.to_string(),
            path: file(field),
            detail,
        };
        let invalid = |field: &str, detail: String| BundleError::InvalidValue {
            field: field.to_string(),
            path: file(field),
            detail,
        };

        for (field, t) in self.tensors() {
            if let Some(index) = t.first_non_finite() {
                return Err(BundleError::NonFiniteValue {
                    path: file(&field),
                    field,
                    index,
                });
            }
        }

        let q = &self.query_patch_features;
        if q.ndim() != 3 || q.shape().contains(&0) {
            return Err(shape_err(
                "query_patch_features",
                format!("expected non-empty h x w x d, got {:?}", q.shape()),
            ));
        }
        let (qh, qw, dim) = (q.shape()[0], q.shape()[1], q.shape()[2]);

        if self.support_patch_features.is_empty() {
            return Err(BundleError::MissingTensor {
                field: "support_patch_features.0".into(),
                path: file("support_patch_features.0"),
            });
        }
        if self.support_masks_patch.len() != self.support_patch_features.len() {
            let k = self.support_masks_patch.len();
            let field = format!("support_masks_patch.{k}");
            return Err(BundleError::MissingTensor {
                path: file(&field),
                field,
            });
        }
        let mut shot_grids = Vec::new();
        for (k, (f, m)) in self
            .support_patch_features
            .iter()
            .zip(&self.support_masks_patch)
            .enumerate()
        {
            let ff = format!("support_patch_features.{k}");
            let mf = format!("support_masks_patch.{k}");
            if f.ndim() != 3 || f.shape()[2] != dim || f.shape()[0] == 0 || f.shape()[1] == 0 {
                return Err(shape_err(
                    &ff,
                    format!("expected h x w x {dim}, got {:?}", f.shape()),
                ));
            }
            if m.shape() != &f.shape()[..2] {
                return Err(shape_err(
                    &mf,
                    format!("expected {:?}, got {:?}", &f.shape()[..2], m.shape()),
                ));
            }
            let values = m.to_f64();
            if values.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(invalid(&mf, "mask values must be 0 or 1".into()));
            }
            if !values.contains(&1.0) {
                return Err(BundleError::EmptySupportMask {
                    path: file(&mf),
                    field: mf,
                });
            }
            shot_grids.push((f.shape()[0], f.shape()[1]));
        }

        let dino_layers = check_attention(&self.dino_attention, qh * qw)
            .map_err(|d| shape_err("dino_attention", d))?;
        if self.dino_attention.to_f64().iter().any(|&v| v < 0.0) {
            return Err(invalid(
                "dino_attention",
                "negative attention weight".into(),
            ));
        }

        let ta = &self.clip_text_alignment;
        if ta.ndim() != 2 || ta.shape().contains(&0) {
            return Err(shape_err(
                "clip_text_alignment",
                format!("expected non-empty h x w, got {:?}", ta.shape()),
            ));
        }
        if ta.to_f64().iter().any(|&v| v < 0.0) {
            return Err(invalid(
                "clip_text_alignment",
                "text alignment must be non-negative".into(),
            ));
        }
        let clip_grid = (ta.shape()[0], ta.shape()[1]);
        let clip_layers = check_attention(&self.clip_attention, clip_grid.0 * clip_grid.1)
            .map_err(|d| shape_err("clip_attention", d))?;
        if self.clip_attention.to_f64().iter().any(|&v| v < 0.0) {
            return Err(invalid(
                "clip_attention",
                "negative attention weight".into(),
            ));
        }

        let e = &self.text_embedding;
        if e.ndim() != 1 || e.shape()[0] == 0 {
            return Err(shape_err(
                "text_embedding",
                format!("expected a non-empty vector, got {:?}", e.shape()),
            ));
        }
        let embedding_dim = e.shape()[0];
        for (k, m) in self.mask_image_embeddings.iter().enumerate() {
            if m.shape() != [embedding_dim] {
                return Err(shape_err(
                    &format!("mask_image_embeddings.{k}"),
                    format!("expected [{embedding_dim}], got {:?}", m.shape()),
                ));
            }
        }

        for (key, value) in [
            ("class_name", &self.class_name),
            ("class_description", &self.class_description),
        ] {
            if value.contains(['\n', '\r']) {
                return Err(BundleError::BadManifest {
                    path: dir.join(MANIFEST),
                    line: 0,
                    detail: format!("{key} must be a single line"),
                });
            }
        }

        Ok(BundleDims {
            query_grid: (qh, qw),
            feature_dim: dim,
            shot_grids,
            clip_grid,
            dino_layers,
            clip_layers,
            embedding_dim,
            proposals: self.mask_image_embeddings.len(),
        })
    }

    pub fn validate(&self) -> Result<BundleDims, BundleError> {
        self.validate_in(Path::new(""))
    }
}

fn check_attention(t: &TensorBlob, tokens: usize) -> Result<usize, String> {
    let s = t.shape();
    let ok = match s.len() {
        3 => s[1] == tokens && s[2] == tokens,
        4 => s[1] > 0 && s[2] == tokens && s[3] == tokens,
        _ => false,
    };
    if !ok || s[0] == 0 {
        return Err(format!(
            "expected L x {tokens} x {tokens} (optionally with a head axis), got {s:?}"
        ));
    }
    Ok(s[0])
}

fn split_indexed(key: &str) -> (&str, Option<&str>) {
    match key.split_once('.') {
        Some((base, idx)) => (base, Some(idx)),
        None => (key, None),
    }
}

/// Reads and fully validates a bundle directory.
pub fn read_bundle(dir: impl AsRef<Path>) -> Result<FeatureBundle, BundleError> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let text =
        fs::read_to_string(&manifest_path).map_err(|e| BundleError::io(&manifest_path, e))?;

    let mut single: BTreeMap<&str, String> = BTreeMap::new();
    let mut indexed: BTreeMap<&str, BTreeMap<usize, String>> = BTreeMap::new();
    let mut seen = std::collections::HashSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let bad = |detail: String| BundleError::BadManifest {
            path: manifest_path.clone(),
            line: line_no,
            detail,
        };
        if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
            continue;
        }
        let (key, value) = raw
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, found {raw:?}")))?;
        let key = key.trim();
        if !seen.insert(key.to_string()) {
            return Err(bad(format!("duplicate key `{key}`")));
        }
        let (base, idx) = split_indexed(key);
        let value = match base {
            "class_name" | "class_description" => value.to_string(),
            _ => value.trim().to_string(),
        };
        match (base, idx) {
            (
                "query_patch_features"
                | "dino_attention"
                | "clip_text_alignment"
                | "clip_attention"
                | "text_embedding"
                | "class_name"
                | "class_description",
                None,
            ) => {
                single.insert(base_static(base), value);
            }
            (
                "support_patch_features" | "support_masks_patch" | "mask_image_embeddings",
                Some(idx),
            ) => {
                let idx: usize = idx
                    .parse()
                    .map_err(|_| bad(format!("bad index in `{key}`")))?;
                indexed
                    .entry(base_static(base))
                    .or_default()
                    .insert(idx, value);
            }
            _ => return Err(bad(format!("unknown key `{key}`"))),
        }
    }

    let load = |field: &str, file: Option<&String>| -> Result<TensorBlob, BundleError> {
        let Some(file) = file else {
            return Err(BundleError::MissingTensor {
                field: field.to_string(),
                path: manifest_path.clone(),
            });
        };
        let path = dir.join(file);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(BundleError::MissingTensor {
                    field: field.to_string(),
                    path,
                })
            }
            Err(e) => return Err(BundleError::io(path, e)),
        };
        TensorBlob::from_bytes(&bytes).map_err(|e| BundleError::tensor(field, &path, e))
    };
    let load_seq = |base: &str| -> Result<Vec<TensorBlob>, BundleError> {
        let entries = indexed.get(base).cloned().unwrap_or_default();
        let mut out = Vec::with_capacity(entries.len());
        for (expected, (idx, file)) in entries.iter().enumerate() {
            if *idx != expected {
                let field = format!("{base}.{expected}");
                return Err(BundleError::MissingTensor {
                    field,
                    path: manifest_path.clone(),
                });
            }
            out.push(load(&format!("{base}.{idx}"), Some(file))?);
        }
        Ok(out)
    };

    let bundle = FeatureBundle {
        query_patch_features: load("query_patch_features", single.get("query_patch_features"))?,
        support_patch_features: load_seq("support_patch_features")?,
        support_masks_patch: load_seq("support_masks_patch")?,
        dino_attention: load("dino_attention", single.get("dino_attention"))?,
        clip_text_alignment: load("clip_text_alignment", single.get("clip_text_alignment"))?,
        clip_attention: load("clip_attention", single.get("clip_attention"))?,
        text_embedding: load("text_embedding", single.get("text_embedding"))?,
        mask_image_embeddings: load_seq("mask_image_embeddings")?,
        class_name: single.get("class_name").cloned().unwrap_or_default(),
        class_description: single.get("class_description").cloned().unwrap_or_default(),
    };
    bundle.validate_in(dir)?;
    Ok(bundle)
}

fn base_static(base: &str) -> &'static str {
    const KEYS: [&str; 10] = [
        "query_patch_features",
        "support_patch_features",
        "support_masks_patch",
        "dino_attention",
        "clip_text_alignment",
        "clip_attention",
        "text_embedding",
        "mask_image_embeddings",
        "class_name",
        "class_description",
    ];
    KEYS.into_iter().find(|k| *k == base).expect("known key")
}

/// Writes `bundle` under `dir`, creating it if needed. Output is deterministic.
pub fn write_bundle(bundle: &FeatureBundle, dir: impl AsRef<Path>) -> Result<(), BundleError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| BundleError::io(dir, e))?;
    let mut manifest = String::new();
    for (field, tensor) in bundle.tensors() {
        let name = tensor_file_name(&field);
        let path = dir.join(&name);
        fs::write(&path, tensor.to_bytes()).map_err(|e| BundleError::io(&path, e))?;
        manifest.push_str(&format!("{field}={name}\n"));
    }
    for (key, value) in [
        ("class_name", &bundle.class_name),
        ("class_description", &bundle.class_description),
    ] {
        if value.contains(['\n', '\r']) {
            return Err(BundleError::BadManifest {
                path: dir.join(MANIFEST),
                line: 0,
                detail: format!("{key} must be a single line"),
            });
        }
        manifest.push_str(&format!("{key}={value}\n"));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| BundleError::io(&path, e))
}

/// A candidate mask at query resolution, optionally with its patch-grid pooling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskProposal {
    pub id: usize,
    pub mask_full: Mask,
    pub mask_patch: Option<Mask>,
}

impl MaskProposal {
    pub fn new(id: usize, mask_full: Mask) -> Self {
        Self {
            id,
            mask_full,
            mask_patch: None,
        }
    }

    /// The mask on an `h x w` patch grid: the supplied patch mask when its grid
    /// matches, otherwise a max-pool of the full mask.
    pub fn on_grid(&self, h: usize, w: usize) -> Mask {
        match &self.mask_patch {
            Some(p) if p.shape() == (h, w) => p.clone(),
            _ => self.mask_full.max_pool(h, w),
        }
    }
}

/// Writes proposals in the block format read by [`read_proposals`].
pub fn format_proposals(proposals: &[MaskProposal]) -> String {
    let mut out = String::new();
    for p in proposals {
        out.push_str(&format!("proposal {}\n", p.id));
        out.push_str(&rle::to_text(&p.mask_full));
        if let Some(patch) = &p.mask_patch {
            out.push_str("patch\n");
            out.push_str(&rle::to_text(patch));
        }
    }
    out
}

pub fn write_proposals(
    proposals: &[MaskProposal],
    path: impl AsRef<Path>,
) -> Result<(), BundleError> {
    let path = path.as_ref();
    fs::write(path, format_proposals(proposals)).map_err(|e| BundleError::io(path, e))
}

/// Reads a proposals file.
///
/// ```text
/// proposal 0
/// 4 4
/// 5 2 2 2 5
/// patch          (optional)
/// 2 2
/// 0 1 3
/// ```
///
/// Ids must be `0, 1, 2, ...` in file order; all full masks share one shape;
/// a supplied patch mask must equal the max-pool of its full mask.
pub fn read_proposals(path: impl AsRef<Path>) -> Result<Vec<MaskProposal>, BundleError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| BundleError::io(path, e))?;
    parse_proposals(&text, path)
}

pub fn parse_proposals(text: &str, path: &Path) -> Result<Vec<MaskProposal>, BundleError> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect();
    let rle_err = |line: usize, source: rle::RleError| BundleError::Rle {
        path: path.to_path_buf(),
        line,
        source,
    };
    let header_err = |line: usize, detail: String| rle_err(line, rle::RleError::BadHeader(detail));
    let read_mask = |at: usize| -> Result<Mask, BundleError> {
        let Some(&(hl, header)) = lines.get(at) else {
            let last = lines.last().map_or(0, |l| l.0);
            return Err(header_err(last, "truncated mask record".into()));
        };
        let (h, w) = rle::parse_header(header).map_err(|e| rle_err(hl, e))?;
        let (rl, runs) = lines.get(at + 1).copied().unwrap_or((hl + 1, ""));
        let runs = rle::parse_runs(runs).map_err(|e| rle_err(rl, e))?;
        rle::decode_runs(h, w, &runs).map_err(|e| rle_err(rl, e))
    };

    let mut proposals: Vec<MaskProposal> = Vec::new();
    let mut at = 0;
    while at < lines.len() {
        let (ln, line) = lines[at];
        let id = line
            .strip_prefix("proposal")
            .map(str::trim)
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| header_err(ln, format!("expected `proposal <id>`, found {line:?}")))?;
        if id != proposals.len() {
            return Err(BundleError::BadProposal {
                path: path.to_path_buf(),
                id,
                detail: format!("expected id {}", proposals.len()),
            });
        }
        let mask_full = read_mask(at + 1)?;
        at += 3;
        let mut mask_patch = None;
        if lines.get(at).is_some_and(|(_, l)| *l == "patch") {
            let patch = read_mask(at + 1)?;
            if mask_full.max_pool(patch.height(), patch.width()) != patch {
                return Err(BundleError::BadProposal {
                    path: path.to_path_buf(),
                    id,
                    detail: "patch mask is not the max-pool of the full mask".into(),
                });
            }
            mask_patch = Some(patch);
            at += 3;
        }
        if let Some(first) = proposals.first() {
            if first.mask_full.shape() != mask_full.shape() {
                return Err(BundleError::BadProposal {
                    path: path.to_path_buf(),
                    id,
                    detail: format!(
                        "shape {:?} differs from proposal 0 shape {:?}",
                        mask_full.shape(),
                        first.mask_full.shape()
                    ),
                });
            }
        }
        proposals.push(MaskProposal {
            id,
            mask_full,
            mask_patch,
        });
    }
    Ok(proposals)
}

pub fn write_prediction(mask: &Mask, path: impl AsRef<Path>) -> Result<(), BundleError> {
    let path = path.as_ref();
    fs::write(path, rle::to_text(mask)).map_err(|e| BundleError::io(path, e))
}

/// Reads a single-mask RLE file (predictions and ground truth).
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask, BundleError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| BundleError::io(path, e))?;
    rle::from_text(&text).map_err(|source| BundleError::Rle {
        path: path.to_path_buf(),
        line: match source {
            rle::RleError::BadHeader(_) => 1,
            _ => 2,
        },
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bundle() -> FeatureBundle {
        let f = |shape: Vec<usize>, seed: f32| {
            let n: usize = shape.iter().product();
            TensorBlob::from_f32(
                shape,
                (0..n).map(|i| (i as f32 * 0.37 + seed).sin()).collect(),
            )
            .unwrap()
        };
        let eye = |l: usize, n: usize| {
            let mut v = vec![0.0f32; l * n * n];
            for k in 0..l {
                for i in 0..n {
                    v[k * n * n + i * n + i] = 1.0;
                }
            }
            TensorBlob::from_f32(vec![l, n, n], v).unwrap()
        };
        FeatureBundle {
            query_patch_features: f(vec![2, 2, 3], 0.0),
            support_patch_features: vec![f(vec![2, 2, 3], 1.0)],
            support_masks_patch: vec![TensorBlob::from_u8(vec![2, 2], vec![1, 0, 0, 1]).unwrap()],
            dino_attention: eye(2, 4),
            clip_text_alignment: TensorBlob::from_f32(vec![2, 2], vec![0.0, 0.5, 1.0, 0.25])
                .unwrap(),
            clip_attention: eye(3, 4),
            text_embedding: f(vec![5], 2.0),
            mask_image_embeddings: vec![f(vec![5], 3.0), f(vec![5], 4.0)],
            class_name: "cat".into(),
            class_description: "feline mammal = pet".into(),
        }
    }

    #[test]
    fn validate_reports_dims() {
        let dims = tiny_bundle().validate().unwrap();
        assert_eq!(dims.query_grid, (2, 2));
        assert_eq!(dims.feature_dim, 3);
        assert_eq!(dims.clip_layers, 3);
        assert_eq!(dims.dino_layers, 2);
        assert_eq!(dims.proposals, 2);
    }

    #[test]
    fn empty_support_mask_rejected() {
        let mut b = tiny_bundle();
        b.support_masks_patch[0] = TensorBlob::from_u8(vec![2, 2], vec![0; 4]).unwrap();
        assert!(matches!(
            b.validate(),
            Err(BundleError::EmptySupportMask { .. })
        ));
    }

    #[test]
    fn non_binary_support_mask_rejected() {
        let mut b = tiny_bundle();
        b.support_masks_patch[0] = TensorBlob::from_u8(vec![2, 2], vec![2, 0, 0, 1]).unwrap();
        assert_eq!(b.validate().unwrap_err().kind(), "InvalidValue");
    }

    #[test]
    fn negative_attention_rejected() {
        let mut b = tiny_bundle();
        let mut v = b.dino_attention.to_f64();
        v[1] = -0.1;
        b.dino_attention =
            TensorBlob::from_f32(vec![2, 4, 4], v.iter().map(|&x| x as f32).collect()).unwrap();
        assert_eq!(b.validate().unwrap_err().kind(), "InvalidValue");
    }

    #[test]
    fn attention_token_count_checked() {
        let mut b = tiny_bundle();
        b.clip_attention = TensorBlob::from_f32(vec![1, 3, 3], vec![0.0; 9]).unwrap();
        let err = b.validate().unwrap_err();
        assert_eq!(err.kind(), "ShapeMismatch");
        assert!(err.to_string().contains("clip_attention"));
    }

    #[test]
    fn head_axis_accepted() {
        let mut b = tiny_bundle();
        b.dino_attention = TensorBlob::from_f32(vec![2, 3, 4, 4], vec![0.1; 96]).unwrap();
        assert_eq!(b.validate().unwrap().dino_layers, 2);
    }

    #[test]
    fn manifest_rejects_unknown_and_duplicate_keys() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&tiny_bundle(), dir.path()).unwrap();
        let manifest = dir.path().join(MANIFEST);
        let original = fs::read_to_string(&manifest).unwrap();

        fs::write(&manifest, format!("{original}bogus=x.mten\n")).unwrap();
        assert_eq!(read_bundle(dir.path()).unwrap_err().kind(), "BadManifest");

        fs::write(
            &manifest,
            format!("{original}text_embedding=text_embedding.mten\n"),
        )
        .unwrap();
        assert_eq!(read_bundle(dir.path()).unwrap_err().kind(), "BadManifest");
    }

    #[test]
    fn manifest_gap_in_index_is_missing_tensor() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&tiny_bundle(), dir.path()).unwrap();
        let manifest = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&manifest)
            .unwrap()
            .replace("mask_image_embeddings.0=", "mask_image_embeddings.5=");
        fs::write(&manifest, text).unwrap();
        let err = read_bundle(dir.path()).unwrap_err();
        assert_eq!(err.kind(), "MissingTensor");
        assert!(err.to_string().contains("mask_image_embeddings.0"));
    }

    #[test]
    fn proposals_roundtrip_with_patch() {
        let full = Mask::rect(4, 4, 0, 0, 2, 3);
        let mut a = MaskProposal::new(0, full.clone());
        a.mask_patch = Some(full.max_pool(2, 2));
        let b = MaskProposal::new(1, Mask::zeros(4, 4));
        let text = format_proposals(&[a.clone(), b.clone()]);
        let back = parse_proposals(&text, Path::new("p.txt")).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn proposals_reject_inconsistent_patch() {
        let text = "proposal 0\n2 2\n0 1 3\npatch\n1 1\n0 1\n";
        assert!(parse_proposals(text, Path::new("p")).is_ok());
        let text = "proposal 0\n2 2\n4\npatch\n1 1\n0 1\n";
        let err = parse_proposals(text, Path::new("p")).unwrap_err();
        assert_eq!(err.kind(), "BadProposal");
    }

    #[test]
    fn proposals_reject_overrun_and_bad_ids() {
        let err = parse_proposals("proposal 0\n4 4\n10 7\n", Path::new("p")).unwrap_err();
        assert_eq!(err.kind(), "RleOverrun");
        let err = parse_proposals("proposal 1\n1 1\n1\n", Path::new("p")).unwrap_err();
        assert_eq!(err.kind(), "BadProposal");
        let err = parse_proposals("proposal 0\n1 1\n1\nproposal 1\n2 1\n2\n", Path::new("p"))
            .unwrap_err();
        assert_eq!(err.kind(), "BadProposal");
        let err = parse_proposals("mask 0\n1 1\n1\n", Path::new("p")).unwrap_err();
        assert_eq!(err.kind(), "BadHeader");
    }

    #[test]
    fn on_grid_prefers_matching_patch() {
        let mut p = MaskProposal::new(0, Mask::rect(4, 4, 0, 0, 1, 1));
        assert_eq!(p.on_grid(2, 2).area(), 1);
        p.mask_patch = Some(Mask::rect(2, 2, 0, 0, 1, 1));
        assert_eq!(p.on_grid(2, 2), Mask::rect(2, 2, 0, 0, 1, 1));
        assert_eq!(p.on_grid(4, 4), p.mask_full);
    }
}
