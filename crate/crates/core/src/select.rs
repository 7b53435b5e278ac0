//! Threshold filtering of scored proposals and OR-merging of the survivors.

use crate::mask::Mask;

pub const DEFAULT_TH_STATIC: f64 = 0.55;
pub const DEFAULT_TH_DYNAMIC: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SelectError {
    #[error("no proposals to filter")]
    EmptyInput,
    #[error("no proposals to merge")]
    NothingToMerge,
    #[error("mask shape {got:?} differs from {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("threshold {0} outside (0, 1]")]
    BadThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub th_static: f64,
    pub th_dynamic: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            th_static: DEFAULT_TH_STATIC,
            th_dynamic: DEFAULT_TH_DYNAMIC,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), SelectError> {
        for th in [self.th_static, self.th_dynamic] {
            if !(th > 0.0 && th <= 1.0) {
                return Err(SelectError::BadThreshold(th));
            }
        }
        Ok(())
    }
}

/// Which stage produced a selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Static,
    Dynamic,
}

/// Indices (into `scores`) kept by the two-stage rule, in ascending order.
///
/// Everything at or above `th_static` is kept; if nothing is, everything at or
/// above `th_dynamic * max` is kept instead, which always includes the maximum.
pub fn filter(scores: &[f64], cfg: &FilterConfig) -> Result<(Vec<usize>, Stage), SelectError> {
    if scores.is_empty() {
        return Err(SelectError::EmptyInput);
    }
    cfg.validate()?;
    let keep = |cut: f64| -> Vec<usize> {
        scores
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| (s >= cut).then_some(i))
            .collect()
    };
    let selected = keep(cfg.th_static);
    if !selected.is_empty() {
        return Ok((selected, Stage::Static));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut selected = keep(max * cfg.th_dynamic);
    if selected.is_empty() {
        // max * th_dynamic > max only for negative scores
        selected = keep(max);
    }
    Ok((selected, Stage::Dynamic))
}

/// Pixelwise OR of the given masks.
pub fn merge<'a>(masks: impl IntoIterator<Item = &'a Mask>) -> Result<Mask, SelectError> {
    let mut iter = masks.into_iter();
    let first = iter.next().ok_or(SelectError::NothingToMerge)?;
    iter.try_fold(first.clone(), |acc, m| {
        acc.or(m).ok_or(SelectError::ShapeMismatch {
            expected: acc.shape(),
            got: m.shape(),
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn static_stage() {
        let (sel, stage) = filter(&[0.6, 0.4], &FilterConfig::default()).unwrap();
        assert_eq!((sel, stage), (vec![0], Stage::Static));
    }

    #[test]
    fn dynamic_fallback() {
        // 0.95 * 0.50 = 0.475 <= 0.49
        let (sel, stage) = filter(&[0.50, 0.49], &FilterConfig::default()).unwrap();
        assert_eq!((sel, stage), (vec![0, 1], Stage::Dynamic));
        let (sel, _) = filter(&[0.50, 0.47], &FilterConfig::default()).unwrap();
        assert_eq!(sel, vec![0]);
    }

    #[test]
    fn ties_at_threshold_are_kept() {
        let (sel, stage) = filter(&[0.55, 0.2], &FilterConfig::default()).unwrap();
        assert_eq!((sel, stage), (vec![0], Stage::Static));
    }

    #[test]
    fn single_and_empty() {
        assert_eq!(
            filter(&[0.01], &FilterConfig::default()).unwrap().0,
            vec![0]
        );
        assert_eq!(filter(&[0.0], &FilterConfig::default()).unwrap().0, vec![0]);
        assert_eq!(
            filter(&[], &FilterConfig::default()),
            Err(SelectError::EmptyInput)
        );
    }

    #[test]
    fn bad_thresholds() {
        let cfg = FilterConfig {
            th_static: 0.0,
            th_dynamic: 0.95,
        };
        assert_eq!(filter(&[0.5], &cfg), Err(SelectError::BadThreshold(0.0)));
        let cfg = FilterConfig {
            th_static: 0.5,
            th_dynamic: 1.5,
        };
        assert!(filter(&[0.5], &cfg).is_err());
    }

    #[test]
    fn merge_examples() {
        let a = Mask::rect(4, 4, 0, 0, 2, 2);
        assert_eq!(merge([&a]).unwrap(), a);
        assert_eq!(merge([&a, &a.complement()]).unwrap(), Mask::ones(4, 4));
        let b = Mask::rect(4, 4, 2, 2, 4, 4);
        let u = merge([&a, &b]).unwrap();
        assert_eq!(u.area(), a.area() + b.area());
        assert!(matches!(
            merge([&a, &Mask::zeros(2, 2)]),
            Err(SelectError::ShapeMismatch { .. })
        ));
        assert_eq!(merge(std::iter::empty()), Err(SelectError::NothingToMerge));
    }

    fn mask_from(bits: u16) -> Mask {
        Mask::from_bits(4, 4, (0..16).map(|i| bits >> i & 1 == 1).collect()).unwrap()
    }

    proptest! {
        #[test]
        fn filter_keeps_argmax(scores in proptest::collection::vec(0.0f64..=1.0, 1..20)) {
            let (sel, _) = filter(&scores, &FilterConfig::default()).unwrap();
            prop_assert!(!sel.is_empty());
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            let argmax = scores.iter().position(|&s| s == max).unwrap();
            prop_assert!(sel.contains(&argmax));
        }

        #[test]
        fn dynamic_stage_scale_consistent(
            scores in proptest::collection::vec(0.0f64..0.5, 1..20),
            k in 0.01f64..=1.0,
        ) {
            // All below th_static both before and after scaling: the dynamic
            // stage decides, and it depends only on ratios.
            let cfg = FilterConfig::default();
            let scaled: Vec<f64> = scores.iter().map(|s| s * k).collect();
            let (a, sa) = filter(&scores, &cfg).unwrap();
            let (b, sb) = filter(&scaled, &cfg).unwrap();
            prop_assert_eq!(sa, Stage::Dynamic);
            prop_assert_eq!(sb, Stage::Dynamic);
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            // Exclude scores sitting within rounding of the cut.
            let near_cut = scores.iter().any(|&s| (s - max * cfg.th_dynamic).abs() < 1e-9);
            if !near_cut {
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn filter_order_independent(scores in proptest::collection::vec(0.0f64..=1.0, 1..12), rot in 0usize..12) {
            let n = scores.len();
            let rotated: Vec<f64> = (0..n).map(|i| scores[(i + rot) % n]).collect();
            let (a, _) = filter(&scores, &FilterConfig::default()).unwrap();
            let (b, _) = filter(&rotated, &FilterConfig::default()).unwrap();
            let mut back: Vec<usize> = b.iter().map(|&i| (i + rot) % n).collect();
            back.sort();
            prop_assert_eq!(a, back);
        }

        #[test]
        fn merge_laws(x in any::<u16>(), y in any::<u16>(), z in any::<u16>()) {
            let (a, b, c) = (mask_from(x), mask_from(y), mask_from(z));
            prop_assert_eq!(merge([&a, &a]).unwrap(), a.clone());
            prop_assert_eq!(merge([&a, &b]).unwrap(), merge([&b, &a]).unwrap());
            let ab_c = merge([&merge([&a, &b]).unwrap(), &c]).unwrap();
            let a_bc = merge([&a, &merge([&b, &c]).unwrap()]).unwrap();
            prop_assert_eq!(&ab_c, &a_bc);
            prop_assert!(ab_c.area() >= a.area().max(b.area()).max(c.area()));
        }
    }
}
