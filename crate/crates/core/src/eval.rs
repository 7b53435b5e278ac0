//! IoU and per-class mIoU over evaluation episodes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::bundle_io::{self, BundleError};
use crate::mask::Mask;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("mask shapes differ: {pred:?} vs {gt:?}")]
    ShapeMismatch {
        pred: (usize, usize),
        gt: (usize, usize),
    },
    #[error("no episodes")]
    EmptyInput,
    #[error("{}:{line}: {detail}", path.display())]
    BadFolds {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

impl EvalError {
    pub fn kind(&self) -> &'static str {
        match self {
            EvalError::ShapeMismatch { .. } => "ShapeMismatch",
            EvalError::EmptyInput => "EmptyInput",
            EvalError::BadFolds { .. } => "BadFolds",
            EvalError::Bundle(e) => e.kind(),
        }
    }
}

/// Pixel counts for one evaluated query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeResult {
    pub intersection: u64,
    pub union: u64,
    pub class_id: String,
    pub fold: String,
}

impl EpisodeResult {
    pub fn from_masks(
        pred: &Mask,
        gt: &Mask,
        class_id: impl Into<String>,
        fold: impl Into<String>,
    ) -> Result<Self, EvalError> {
        let (intersection, union) = counts(pred, gt)?;
        Ok(Self {
            intersection,
            union,
            class_id: class_id.into(),
            fold: fold.into(),
        })
    }
}

fn counts(pred: &Mask, gt: &Mask) -> Result<(u64, u64), EvalError> {
    if pred.shape() != gt.shape() {
        return Err(EvalError::ShapeMismatch {
            pred: pred.shape(),
            gt: gt.shape(),
        });
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok((inter, union))
}

/// `|pred ∧ gt| / |pred ∨ gt|`; two empty masks score 1.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64, EvalError> {
    let (inter, union) = counts(pred, gt)?;
    Ok(ratio(inter, union))
}

fn ratio(inter: u64, union: u64) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MiouMode {
    /// Sum intersections and unions per class, divide, then average classes.
    #[default]
    PerClassThenMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassIou {
    pub class_id: String,
    pub iou: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<ClassIou>,
    /// `(fold, mIoU over the classes seen in that fold)`.
    pub per_fold: Vec<(String, f64)>,
    pub miou: f64,
    pub episodes: usize,
}

fn class_table<'a>(
    episodes: impl Iterator<Item = &'a EpisodeResult>,
) -> BTreeMap<&'a str, (u64, u64, usize)> {
    let mut table: BTreeMap<&str, (u64, u64, usize)> = BTreeMap::new();
    for e in episodes {
        let entry = table.entry(e.class_id.as_str()).or_default();
        entry.0 += e.intersection;
        entry.1 += e.union;
        entry.2 += 1;
    }
    table
}

fn mean_of(table: &BTreeMap<&str, (u64, u64, usize)>) -> f64 {
    table.values().map(|&(i, u, _)| ratio(i, u)).sum::<f64>() / table.len() as f64
}

pub fn miou(episodes: &[EpisodeResult], mode: MiouMode) -> Result<f64, EvalError> {
    Ok(miou_report(episodes, mode)?.miou)
}

pub fn miou_report(episodes: &[EpisodeResult], mode: MiouMode) -> Result<MiouReport, EvalError> {
    let MiouMode::PerClassThenMean = mode;
    if episodes.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let table = class_table(episodes.iter());
    let per_class = table
        .iter()
        .map(|(c, &(i, u, n))| ClassIou {
            class_id: c.to_string(),
            iou: ratio(i, u),
            episodes: n,
        })
        .collect();
    let mut folds: Vec<&str> = episodes.iter().map(|e| e.fold.as_str()).collect();
    folds.sort();
    folds.dedup();
    let per_fold = folds
        .into_iter()
        .map(|f| {
            let t = class_table(episodes.iter().filter(|e| e.fold == f));
            (f.to_string(), mean_of(&t))
        })
        .collect();
    Ok(MiouReport {
        per_class,
        per_fold,
        miou: mean_of(&table),
        episodes: episodes.len(),
    })
}

impl MiouReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.per_class {
            let _ = writeln!(
                out,
                "class {:<16} iou {:.6} episodes {}",
                c.class_id, c.iou, c.episodes
            );
        }
        for (f, v) in &self.per_fold {
            let _ = writeln!(out, "fold  {f:<16} miou {v:.6}");
        }
        let _ = writeln!(out, "miou {:.6}", self.miou);
        out
    }

    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "miou={}", self.miou);
        let _ = writeln!(out, "classes={}", self.per_class.len());
        let _ = writeln!(out, "episodes={}", self.episodes);
        for c in &self.per_class {
            let _ = writeln!(out, "class.{}={}", c.class_id, c.iou);
        }
        for (f, v) in &self.per_fold {
            let _ = writeln!(out, "fold.{f}={v}");
        }
        out
    }
}

/// One line per episode: `<name> <class_id> <fold>`; `#` comments allowed.
pub fn read_folds(path: &Path) -> Result<Vec<(String, String, String)>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| {
        EvalError::Bundle(BundleError::Io {
            path: path.to_path_buf(),
            source,
        })
    })?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, class_id, fold] = fields.as_slice() else {
            return Err(EvalError::BadFolds {
                path: path.to_path_buf(),
                line: n + 1,
                detail: format!("expected `<episode> <class> <fold>`, found {line:?}"),
            });
        };
        out.push((name.to_string(), class_id.to_string(), fold.to_string()));
    }
    Ok(out)
}

/// Evaluates `<pred_dir>/<episode>.rle` against `<gt_dir>/<episode>.rle` for
/// every episode listed in the folds file.
pub fn evaluate_dirs(
    pred_dir: &Path,
    gt_dir: &Path,
    folds: &Path,
) -> Result<MiouReport, EvalError> {
    let mut episodes = Vec::new();
    for (name, class_id, fold) in read_folds(folds)? {
        let file = format!("{name}.rle");
        let pred = bundle_io::read_mask(pred_dir.join(&file))?;
        let gt = bundle_io::read_mask(gt_dir.join(&file))?;
        episodes.push(EpisodeResult::from_masks(&pred, &gt, class_id, fold)?);
    }
    miou_report(&episodes, MiouMode::PerClassThenMean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ep(i: u64, u: u64, class: &str, fold: &str) -> EpisodeResult {
        EpisodeResult {
            intersection: i,
            union: u,
            class_id: class.into(),
            fold: fold.into(),
        }
    }

    #[test]
    fn iou_examples() {
        let gt = Mask::rect(4, 4, 0, 0, 2, 4);
        assert_eq!(iou(&gt, &gt).unwrap(), 1.0);
        assert_eq!(iou(&gt, &gt.complement()).unwrap(), 0.0);
        let half = Mask::rect(4, 4, 0, 0, 1, 4);
        assert_eq!(iou(&half, &gt).unwrap(), 0.5);
        assert_eq!(iou(&Mask::zeros(2, 2), &Mask::zeros(2, 2)).unwrap(), 1.0);
        assert_eq!(iou(&Mask::zeros(2, 2), &Mask::ones(2, 2)).unwrap(), 0.0);
        assert!(matches!(
            iou(&Mask::zeros(2, 2), &Mask::zeros(2, 3)),
            Err(EvalError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn miou_examples() {
        let m = MiouMode::PerClassThenMean;
        assert_eq!(miou(&[ep(5, 5, "a", "0")], m).unwrap(), 1.0);
        assert_eq!(
            miou(&[ep(1, 5, "a", "0"), ep(4, 5, "b", "0")], m).unwrap(),
            0.5
        );
        let agg = miou(&[ep(1, 2, "a", "0"), ep(3, 4, "a", "0")], m).unwrap();
        assert_eq!(agg, 4.0 / 6.0);
        // mean of per-episode IoUs would be 0.625
        assert_ne!(agg, 0.625);
        assert!(matches!(miou(&[], m), Err(EvalError::EmptyInput)));
    }

    #[test]
    fn report_has_folds() {
        let eps = [ep(1, 2, "a", "0"), ep(1, 1, "b", "1"), ep(0, 1, "c", "1")];
        let r = miou_report(&eps, MiouMode::PerClassThenMean).unwrap();
        assert_eq!(r.per_fold, vec![("0".into(), 0.5), ("1".into(), 0.5)]);
        assert!((r.miou - 0.5).abs() < 1e-15);
        let kv = r.to_key_values();
        assert!(kv.contains("class.a=0.5\n"));
        assert!(r.to_text().ends_with("miou 0.500000\n"));
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(x in any::<u16>(), y in any::<u16>(), rot in 0usize..16) {
            let a = Mask::from_bits(4, 4, (0..16).map(|i| x >> i & 1 == 1).collect()).unwrap();
            let b = Mask::from_bits(4, 4, (0..16).map(|i| y >> i & 1 == 1).collect()).unwrap();
            let v = iou(&a, &b).unwrap();
            prop_assert_eq!(v, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&v));
            let perm = |m: &Mask| Mask::from_bits(4, 4, (0..16).map(|i| m.bits()[(i + rot) % 16]).collect()).unwrap();
            prop_assert_eq!(v, iou(&perm(&a), &perm(&b)).unwrap());
        }

        #[test]
        fn miou_order_invariant(
            raw in proptest::collection::vec((0u64..10, 0u64..10, 0usize..3), 1..12),
            rot in 0usize..12,
        ) {
            let eps: Vec<EpisodeResult> = raw
                .iter()
                .map(|&(i, extra, c)| ep(i, i + extra, &c.to_string(), "0"))
                .collect();
            let n = eps.len();
            let rotated: Vec<EpisodeResult> = (0..n).map(|k| eps[(k + rot) % n].clone()).collect();
            let a = miou(&eps, MiouMode::PerClassThenMean).unwrap();
            let b = miou(&rotated, MiouMode::PerClassThenMean).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
