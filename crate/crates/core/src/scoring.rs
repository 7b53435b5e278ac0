//! Per-proposal scores and their fusion.
//!
//! Four scores rank each proposal: local conceptual (LC) and local visual (LV)
//! average a saliency map over the proposal plus a coverage bonus; global
//! conceptual (GC) compares region and text embeddings; global visual (GV) is
//! one minus the transport cost from support foreground to the proposal.

use std::fmt;
use std::str::FromStr;

use crate::mask::Mask;
use crate::saliency::SaliencyMap;
use crate::transport::{self, TransportError};
use crate::visual::CostMatrix;

pub const DEFAULT_ALPHA: f64 = 0.85;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoringError {
    #[error("union of proposals is empty")]
    EmptyUnion,
    #[error("proposal has no foreground patch")]
    EmptyPatchMask,
    #[error("mask grid {mask:?} does not match map grid {map:?}")]
    DimMismatch {
        mask: (usize, usize),
        map: (usize, usize),
    },
    #[error("embedding has zero norm")]
    ZeroEmbedding,
    #[error("embedding lengths differ: {0} vs {1}")]
    EmbeddingMismatch(usize, usize),
    #[error("no score component enabled")]
    NoComponents,
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// One of the four ranking scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Lc,
    Gc,
    Lv,
    Gv,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Lc, Component::Gc, Component::Lv, Component::Gv];

    fn bit(self) -> u8 {
        match self {
            Component::Lc => 1,
            Component::Gc => 2,
            Component::Lv => 4,
            Component::Gv => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Lc => "lc",
            Component::Gc => "gc",
            Component::Lv => "lv",
            Component::Gv => "gv",
        }
    }
}

/// A set of enabled components.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Components(u8);

impl Components {
    pub const NONE: Components = Components(0);
    pub const ALL: Components = Components(0b1111);

    pub fn of(list: &[Component]) -> Self {
        Components(list.iter().fold(0, |acc, c| acc | c.bit()))
    }

    pub fn contains(self, c: Component) -> bool {
        self.0 & c.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Component> {
        Component::ALL
            .into_iter()
            .filter(move |&c| self.contains(c))
    }
}

impl fmt::Debug for Components {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Components({self})")
    }
}

impl fmt::Display for Components {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(Component::name).collect();
        write!(f, "{}", names.join(","))
    }
}

impl FromStr for Components {
    type Err = String;

    /// Comma list of `lc,gc,lv,gv`, or a named group: `mars`/`all`, `global`,
    /// `local`, `conceptual`, `visual`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        use Component::*;
        let set = match s.trim() {
            "mars" | "all" => Components::ALL,
            "global" => Components::of(&[Gv, Gc]),
            "local" => Components::of(&[Lv, Lc]),
            "conceptual" => Components::of(&[Gc, Lc]),
            "visual" => Components::of(&[Gv, Lv]),
            list => {
                let mut set = Components::NONE;
                for part in list.split(',') {
                    let c = match part.trim().to_ascii_lowercase().as_str() {
                        "lc" => Lc,
                        "gc" => Gc,
                        "lv" => Lv,
                        "gv" => Gv,
                        other => return Err(format!("unknown score component {other:?}")),
                    };
                    set = Components(set.0 | c.bit());
                }
                set
            }
        };
        if set.is_empty() {
            return Err("no score component given".into());
        }
        Ok(set)
    }
}

/// The four raw scores of one proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawScores {
    pub lc: f64,
    pub gc: f64,
    pub lv: f64,
    pub gv: f64,
}

impl RawScores {
    pub fn get(&self, c: Component) -> f64 {
        match c {
            Component::Lc => self.lc,
            Component::Gc => self.gc,
            Component::Lv => self.lv,
            Component::Gv => self.gv,
        }
    }
}

/// All four scores plus the fused value over the enabled subset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreCard {
    pub lc: f64,
    pub gc: f64,
    pub lv: f64,
    pub gv: f64,
    pub mars: f64,
    pub components_enabled: Components,
}

impl ScoreCard {
    pub fn raw(&self) -> RawScores {
        RawScores {
            lc: self.lc,
            gc: self.gc,
            lv: self.lv,
            gv: self.gv,
        }
    }

    /// Every enabled score and the fused score lie in `[0, 1]`.
    pub fn in_range(&self) -> bool {
        let raw = self.raw();
        self.components_enabled
            .iter()
            .map(|c| raw.get(c))
            .chain([self.mars])
            .all(|v| (0.0..=1.0).contains(&v))
    }
}

/// Arithmetic mean of the enabled scores.
pub fn fuse(scores: RawScores, enabled: Components) -> Result<ScoreCard, ScoringError> {
    if enabled.is_empty() {
        return Err(ScoringError::NoComponents);
    }
    let sum: f64 = enabled.iter().map(|c| scores.get(c)).sum();
    Ok(ScoreCard {
        lc: scores.lc,
        gc: scores.gc,
        lv: scores.lv,
        gv: scores.gv,
        mars: sum / enabled.len() as f64,
        components_enabled: enabled,
    })
}

/// Area of the union of all proposals on one patch grid, with the local-score weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageContext {
    pub union_area_patch: usize,
    pub alpha: f64,
}

impl CoverageContext {
    pub fn from_masks<'a>(
        masks: impl IntoIterator<Item = &'a Mask>,
        alpha: f64,
    ) -> Result<Self, ScoringError> {
        let mut union: Option<Mask> = None;
        for m in masks {
            union = Some(match union {
                None => m.clone(),
                Some(u) => u.or(m).ok_or(ScoringError::DimMismatch {
                    mask: m.shape(),
                    map: u.shape(),
                })?,
            });
        }
        let union_area_patch = union.map_or(0, |u| u.area());
        if union_area_patch == 0 {
            return Err(ScoringError::EmptyUnion);
        }
        Ok(Self {
            union_area_patch,
            alpha,
        })
    }
}

pub fn coverage(mask: &Mask, ctx: &CoverageContext) -> Result<f64, ScoringError> {
    if ctx.union_area_patch == 0 {
        return Err(ScoringError::EmptyUnion);
    }
    Ok((mask.area() as f64 / ctx.union_area_patch as f64).min(1.0))
}

/// `alpha * mean(map over mask cells) + (1 - alpha) * coverage`.
pub fn local_score(
    mask: &Mask,
    map: &SaliencyMap,
    ctx: &CoverageContext,
) -> Result<f64, ScoringError> {
    if mask.shape() != map.shape() {
        return Err(ScoringError::DimMismatch {
            mask: mask.shape(),
            map: map.shape(),
        });
    }
    let area = mask.area();
    if area == 0 {
        return Err(ScoringError::EmptyPatchMask);
    }
    let sum: f64 = mask.foreground().map(|i| map.values()[i]).sum();
    let mean = sum / area as f64;
    let score = ctx.alpha * mean + (1.0 - ctx.alpha) * coverage(mask, ctx)?;
    Ok(score.clamp(0.0, 1.0))
}

/// Cosine of the two embeddings, mapped from `[-1, 1]` to `[0, 1]`.
pub fn global_conceptual(e_img: &[f64], e_txt: &[f64]) -> Result<f64, ScoringError> {
    if e_img.len() != e_txt.len() {
        return Err(ScoringError::EmbeddingMismatch(e_img.len(), e_txt.len()));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (ni, nt) = (norm(e_img), norm(e_txt));
    if ni.is_nan() || nt.is_nan() || ni <= 0.0 || nt <= 0.0 {
        return Err(ScoringError::ZeroEmbedding);
    }
    let cos: f64 = e_img
        .iter()
        .zip(e_txt)
        .map(|(a, b)| (a / ni) * (b / nt))
        .sum();
    Ok(((cos.clamp(-1.0, 1.0) + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// `1 - EMD` between the support foreground and the proposal's patches.
pub fn global_visual(
    cost: &CostMatrix,
    support_masks: &[Mask],
    mask: &Mask,
) -> Result<f64, ScoringError> {
    let problem = transport::masked_distributions(cost, support_masks, mask)?;
    let solution = transport::solve_emd(&problem)?;
    Ok((1.0 - solution.value).clamp(0.0, 1.0))
}
