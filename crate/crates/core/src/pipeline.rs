//! End-to-end ranking of one episode: saliency maps, scores, filter, merge.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::bundle_io::{BundleError, FeatureBundle, MaskProposal};
use crate::eval::EvalError;
use crate::mask::Mask;
use crate::saliency::{
    self, AttentionStack, LayerSelection, RtaParams, SaliencyError, SaliencyMap,
};
use crate::scoring::{self, Components, CoverageContext, RawScores, ScoreCard, ScoringError};
use crate::select::{self, FilterConfig, SelectError, Stage};
use crate::transport::TransportError;
use crate::visual::{self, VisualError};

pub const DEFAULT_CLIP_PIR_THRESHOLD: f64 = 0.4;
pub const DEFAULT_BOX_THRESHOLD: f64 = 0.4;
pub const DEFAULT_DINO_PIR_THRESHOLD: f64 = 0.85;
pub const DEFAULT_CLIP_LAST_LAYERS: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
    #[error(transparent)]
    Visual(#[from] VisualError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{proposals} proposals but {embeddings} mask embeddings")]
    ProposalCountMismatch { proposals: usize, embeddings: usize },
    #[error("no proposals")]
    NoProposals,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("internal invariant violated: {0}")]
    InvariantBreach(String),
}

impl EngineError {
    /// Stable short name of the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            EngineError::Bundle(e) => e.kind(),
            EngineError::Saliency(e) => saliency_kind(e),
            EngineError::Visual(e) => match e {
                VisualError::EmptyForeground => "EmptyForeground",
                VisualError::ZeroNormPatch { .. } => "ZeroNormPatch",
                VisualError::DimMismatch(_) => "DimMismatch",
                VisualError::Saliency(e) => saliency_kind(e),
            },
            EngineError::Scoring(e) => match e {
                ScoringError::EmptyUnion => "EmptyUnion",
                ScoringError::EmptyPatchMask => "EmptyPatchMask",
                ScoringError::DimMismatch { .. } => "DimMismatch",
                ScoringError::ZeroEmbedding => "ZeroEmbedding",
                ScoringError::EmbeddingMismatch(..) => "DimMismatch",
                ScoringError::NoComponents => "NoComponents",
                ScoringError::Transport(e) => transport_kind(e),
            },
            EngineError::Select(e) => match e {
                SelectError::EmptyInput | SelectError::NothingToMerge => "EmptyInput",
                SelectError::ShapeMismatch { .. } => "ShapeMismatch",
                SelectError::BadThreshold(_) => "InvalidConfig",
            },
            EngineError::Eval(e) => e.kind(),
            EngineError::ProposalCountMismatch { .. } => "ShapeMismatch",
            EngineError::NoProposals => "EmptyInput",
            EngineError::InvalidConfig(_) => "InvalidConfig",
            EngineError::InvariantBreach(_) => "InvariantBreach",
        }
    }

    /// Process exit status: 2 for broken internal invariants, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            EngineError::InvariantBreach(_) => 2,
            _ => 1,
        }
    }
}

fn saliency_kind(e: &SaliencyError) -> &'static str {
    match e {
        SaliencyError::DimMismatch { .. } => "DimMismatch",
        SaliencyError::EmptyLayerSelection => "EmptyLayerSelection",
        SaliencyError::LayerOutOfRange { .. } => "LayerOutOfRange",
        SaliencyError::NotNormalized => "NotNormalized",
        SaliencyError::BadAttentionShape(_) => "ShapeMismatch",
        SaliencyError::InvalidMap => "InvalidValue",
    }
}

fn transport_kind(e: &TransportError) -> &'static str {
    match e {
        TransportError::UnbalancedProblem { .. } => "UnbalancedProblem",
        TransportError::InfeasibleZeroMass => "InfeasibleZeroMass",
        TransportError::InvalidWeight => "InvalidWeight",
        TransportError::DimMismatch { .. } => "DimMismatch",
        TransportError::NonFiniteCost(_) => "NonFiniteValue",
        TransportError::EmptyProposalMask => "EmptyPatchMask",
        TransportError::SupportMismatch { .. } => "DimMismatch",
        TransportError::TooLarge { .. } => "TooLarge",
        TransportError::IterationLimit(_) => "IterationLimit",
    }
}

/// Every tunable of the engine. `Default` gives the reference settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub alpha: f64,
    pub th_static: f64,
    pub th_dynamic: f64,
    pub clip_pir_threshold: f64,
    pub box_threshold: f64,
    pub dino_pir_threshold: f64,
    pub clip_layers: LayerSelection,
    pub dino_layers: LayerSelection,
    pub components: Components,
    /// Worker threads for per-proposal scoring; 0 lets rayon decide.
    pub jobs: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            alpha: scoring::DEFAULT_ALPHA,
            th_static: select::DEFAULT_TH_STATIC,
            th_dynamic: select::DEFAULT_TH_DYNAMIC,
            clip_pir_threshold: DEFAULT_CLIP_PIR_THRESHOLD,
            box_threshold: DEFAULT_BOX_THRESHOLD,
            dino_pir_threshold: DEFAULT_DINO_PIR_THRESHOLD,
            clip_layers: LayerSelection::Last(DEFAULT_CLIP_LAST_LAYERS),
            dino_layers: LayerSelection::All,
            components: Components::ALL,
            jobs: 0,
        }
    }
}

impl EngineConfig {
    pub fn filter(&self) -> FilterConfig {
        FilterConfig {
            th_static: self.th_static,
            th_dynamic: self.th_dynamic,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(EngineError::InvalidConfig(format!(
                    "{name}={v} outside [0, 1]"
                )))
            }
        };
        unit("alpha", self.alpha)?;
        unit("clip_pir_threshold", self.clip_pir_threshold)?;
        unit("box_threshold", self.box_threshold)?;
        unit("dino_pir_threshold", self.dino_pir_threshold)?;
        self.filter().validate()?;
        if self.components.is_empty() {
            return Err(ScoringError::NoComponents.into());
        }
        Ok(())
    }

    /// Settings that affect results, one `key=value` per line. `jobs` is left
    /// out because it never changes the output.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "alpha={}", self.alpha);
        let _ = writeln!(out, "th_static={}", self.th_static);
        let _ = writeln!(out, "th_dynamic={}", self.th_dynamic);
        let _ = writeln!(out, "clip_pir_threshold={}", self.clip_pir_threshold);
        let _ = writeln!(out, "box_threshold={}", self.box_threshold);
        let _ = writeln!(out, "dino_pir_threshold={}", self.dino_pir_threshold);
        let _ = writeln!(out, "clip_layers={}", self.clip_layers);
        let _ = writeln!(out, "dino_layers={}", self.dino_layers);
        let _ = writeln!(out, "components={}", self.components);
        out
    }
}

/// Raw per-proposal scores of one episode, before fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredEpisode {
    /// `None` for proposals dropped because their patch mask is empty.
    pub raw: Vec<Option<RawScores>>,
    pub rta: SaliencyMap,
    pub rva: SaliencyMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankRow {
    pub id: usize,
    pub card: Option<ScoreCard>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankOutcome {
    pub rows: Vec<RankRow>,
    /// `None` when every proposal was dropped.
    pub stage: Option<Stage>,
    pub prediction: Mask,
}

impl RankOutcome {
    pub fn selected_ids(&self) -> Vec<usize> {
        self.rows
            .iter()
            .filter(|r| r.selected)
            .map(|r| r.id)
            .collect()
    }

    /// Fixed-width table: `id lc gc lv gv mars selected`; dropped rows show `-`.
    pub fn score_table(&self) -> String {
        let mut out = format!(
            "{:>4} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "id", "lc", "gc", "lv", "gv", "mars", "selected"
        );
        for row in &self.rows {
            let _ = match &row.card {
                Some(c) => writeln!(
                    out,
                    "{:>4} {:>8.6} {:>8.6} {:>8.6} {:>8.6} {:>8.6} {:>8}",
                    row.id, c.lc, c.gc, c.lv, c.gv, c.mars, row.selected as u8
                ),
                None => writeln!(
                    out,
                    "{:>4} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
                    row.id, "-", "-", "-", "-", "-", 0
                ),
            };
        }
        out
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, EngineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| EngineError::InvalidConfig(format!("thread pool: {e}")))
}

/// Computes RTA, RVA and all four raw scores of every non-empty proposal.
pub fn score_episode(
    bundle: &FeatureBundle,
    proposals: &[MaskProposal],
    cfg: &EngineConfig,
) -> Result<ScoredEpisode, EngineError> {
    cfg.validate()?;
    let dims = bundle.validate()?;
    if proposals.is_empty() {
        return Err(EngineError::NoProposals);
    }
    if proposals.len() != dims.proposals {
        return Err(EngineError::ProposalCountMismatch {
            proposals: proposals.len(),
            embeddings: dims.proposals,
        });
    }
    let shape = proposals[0].mask_full.shape();
    if let Some(p) = proposals.iter().find(|p| p.mask_full.shape() != shape) {
        return Err(SelectError::ShapeMismatch {
            expected: shape,
            got: p.mask_full.shape(),
        }
        .into());
    }

    let clip_attn =
        AttentionStack::from_tensor(&bundle.clip_attention)?.with_selection(&cfg.clip_layers)?;
    let dino_attn =
        AttentionStack::from_tensor(&bundle.dino_attention)?.with_selection(&cfg.dino_layers)?;
    let ta_raw =
        SaliencyMap::from_tensor(&bundle.clip_text_alignment).ok_or(SaliencyError::InvalidMap)?;
    let rta = saliency::refine_text_alignment(
        &ta_raw,
        &clip_attn,
        RtaParams {
            box_threshold: cfg.box_threshold,
            pir_threshold: cfg.clip_pir_threshold,
        },
    )?;
    let split = visual::build_similarity(bundle)?;
    let rva = visual::build_rva(&split, &dino_attn, cfg.dino_pir_threshold)?;
    let cost = visual::build_cost(&split);
    let support_masks = bundle.support_masks();
    let text = bundle.text_embedding.to_f64();

    let (ch, cw) = dims.clip_grid;
    let (dh, dw) = dims.query_grid;
    let grids: Vec<Option<(Mask, Mask)>> = proposals
        .iter()
        .map(|p| {
            let clip = p.on_grid(ch, cw);
            let dino = p.on_grid(dh, dw);
            (clip.area() > 0 && dino.area() > 0).then_some((clip, dino))
        })
        .collect();
    let dropped = grids.iter().filter(|g| g.is_none()).count();
    if dropped > 0 {
        log::warn!("dropping {dropped} proposal(s) with an empty patch mask");
    }
    if dropped == proposals.len() {
        return Ok(ScoredEpisode {
            raw: vec![None; proposals.len()],
            rta,
            rva,
        });
    }
    let kept = || grids.iter().flatten();
    let clip_ctx = CoverageContext::from_masks(kept().map(|g| &g.0), cfg.alpha)?;
    let dino_ctx = CoverageContext::from_masks(kept().map(|g| &g.1), cfg.alpha)?;

    let score_one =
        |k: usize, grid: &Option<(Mask, Mask)>| -> Result<Option<RawScores>, EngineError> {
            let Some((clip, dino)) = grid else {
                return Ok(None);
            };
            let embedding = bundle.mask_image_embeddings[k].to_f64();
            Ok(Some(RawScores {
                lc: scoring::local_score(clip, &rta, &clip_ctx)?,
                gc: scoring::global_conceptual(&embedding, &text)?,
                lv: scoring::local_score(dino, &rva, &dino_ctx)?,
                gv: scoring::global_visual(&cost, &support_masks, dino)?,
            }))
        };
    let raw = pool(cfg.jobs)?.install(|| {
        grids
            .par_iter()
            .enumerate()
            .map(|(k, g)| score_one(k, g))
            .collect::<Result<Vec<_>, _>>()
    })?;
    log::debug!("scored {} proposals", raw.len());
    Ok(ScoredEpisode { raw, rta, rva })
}

/// Fuses the enabled components, filters and merges.
pub fn select_episode(
    scored: &ScoredEpisode,
    proposals: &[MaskProposal],
    components: Components,
    filter: &FilterConfig,
) -> Result<RankOutcome, EngineError> {
    let first = proposals.first().ok_or(EngineError::NoProposals)?;
    let (h, w) = first.mask_full.shape();
    let cards = scored
        .raw
        .iter()
        .map(|r| r.map(|r| scoring::fuse(r, components)).transpose())
        .collect::<Result<Vec<_>, _>>()?;
    if let Some((k, c)) = cards
        .iter()
        .enumerate()
        .find_map(|(k, c)| c.filter(|c| !c.in_range()).map(|c| (k, c)))
    {
        return Err(EngineError::InvariantBreach(format!(
            "proposal {k} scores outside [0, 1]: {c:?}"
        )));
    }
    let live: Vec<usize> = (0..cards.len()).filter(|&k| cards[k].is_some()).collect();
    let mut rows: Vec<RankRow> = proposals
        .iter()
        .zip(&cards)
        .map(|(p, c)| RankRow {
            id: p.id,
            card: *c,
            selected: false,
        })
        .collect();
    if live.is_empty() {
        return Ok(RankOutcome {
            rows,
            stage: None,
            prediction: Mask::zeros(h, w),
        });
    }
    let scores: Vec<f64> = live.iter().map(|&k| cards[k].expect("live").mars).collect();
    let (picked, stage) = select::filter(&scores, filter)?;
    for &i in &picked {
        rows[live[i]].selected = true;
    }
    let prediction = select::merge(picked.iter().map(|&i| &proposals[live[i]].mask_full))?;
    Ok(RankOutcome {
        rows,
        stage: Some(stage),
        prediction,
    })
}

/// Scores, filters and merges the proposals of one episode.
pub fn rank(
    bundle: &FeatureBundle,
    proposals: &[MaskProposal],
    cfg: &EngineConfig,
) -> Result<RankOutcome, EngineError> {
    let scored = score_episode(bundle, proposals, cfg)?;
    select_episode(&scored, proposals, cfg.components, &cfg.filter())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, SynthConfig};

    #[test]
    fn defaults() {
        let cfg = EngineConfig::default();
        assert_eq!(cfg.alpha, 0.85);
        assert_eq!(cfg.th_static, 0.55);
        assert_eq!(cfg.th_dynamic, 0.95);
        assert_eq!(cfg.clip_pir_threshold, 0.4);
        assert_eq!(cfg.dino_pir_threshold, 0.85);
        assert_eq!(cfg.clip_layers, LayerSelection::Last(8));
        assert_eq!(cfg.dino_layers, LayerSelection::All);
        let kv = cfg.to_key_values();
        assert!(kv.contains("alpha=0.85\n"));
        assert!(kv.contains("components=lc,gc,lv,gv\n"));
        assert!(!kv.contains("jobs"));
    }

    #[test]
    fn planted_is_selected() {
        let ep = synth::generate(&SynthConfig::planted(3));
        let out = rank(&ep.bundle, &ep.proposals, &EngineConfig::default()).unwrap();
        assert_eq!(out.selected_ids(), vec![ep.planted_id.unwrap()]);
        assert_eq!(out.prediction, ep.gt);
        assert_eq!(out.stage, Some(Stage::Static));
    }

    #[test]
    fn subset_fusion_in_table() {
        let ep = synth::generate(&SynthConfig::planted(5));
        let cfg = EngineConfig {
            components: "lv,gv".parse().unwrap(),
            ..EngineConfig::default()
        };
        let out = rank(&ep.bundle, &ep.proposals, &cfg).unwrap();
        for row in &out.rows {
            let c = row.card.unwrap();
            assert!((c.mars - (c.lv + c.gv) / 2.0).abs() < 1e-15);
        }
        let table = out.score_table();
        assert!(table.starts_with("  id       lc       gc       lv       gv     mars selected\n"));
        assert_eq!(table.lines().count(), ep.proposals.len() + 1);
    }

    #[test]
    fn empty_proposals_are_dropped() {
        let mut ep = synth::generate(&SynthConfig::planted(7));
        let (h, w) = ep.gt.shape();
        ep.proposals[0] = MaskProposal::new(0, Mask::zeros(h, w));
        let out = rank(&ep.bundle, &ep.proposals, &EngineConfig::default()).unwrap();
        assert_eq!(out.rows[0].card, None);
        assert!(!out.rows[0].selected);
        assert!(out.score_table().lines().nth(1).unwrap().contains(" - "));

        for (k, p) in ep.proposals.iter_mut().enumerate() {
            *p = MaskProposal::new(k, Mask::zeros(h, w));
        }
        let out = rank(&ep.bundle, &ep.proposals, &EngineConfig::default()).unwrap();
        assert_eq!(out.stage, None);
        assert_eq!(out.prediction.area(), 0);
    }

    #[test]
    fn jobs_do_not_change_scores() {
        let ep = synth::generate(&SynthConfig::random(11));
        let serial = EngineConfig {
            jobs: 1,
            ..EngineConfig::default()
        };
        let parallel = EngineConfig {
            jobs: 4,
            ..EngineConfig::default()
        };
        let a = rank(&ep.bundle, &ep.proposals, &serial).unwrap();
        let b = rank(&ep.bundle, &ep.proposals, &parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn count_mismatch_and_bad_config() {
        let ep = synth::generate(&SynthConfig::planted(1));
        let err = rank(&ep.bundle, &ep.proposals[1..], &EngineConfig::default()).unwrap_err();
        assert!(matches!(err, EngineError::ProposalCountMismatch { .. }));
        let cfg = EngineConfig {
            alpha: 1.5,
            ..EngineConfig::default()
        };
        let err = rank(&ep.bundle, &ep.proposals, &cfg).unwrap_err();
        assert_eq!((err.kind(), err.exit_code()), ("InvalidConfig", 1));
        let cfg = EngineConfig {
            clip_layers: LayerSelection::Last(20),
            ..EngineConfig::default()
        };
        let err = rank(&ep.bundle, &ep.proposals, &cfg).unwrap_err();
        assert_eq!(err.kind(), "LayerOutOfRange");
        assert_eq!(EngineError::InvariantBreach("x".into()).exit_code(), 2);
    }

    #[test]
    fn random_bundles_score_in_range() {
        for seed in 0..30 {
            let ep = synth::generate(&SynthConfig::random(seed));
            let scored =
                score_episode(&ep.bundle, &ep.proposals, &EngineConfig::default()).unwrap();
            for raw in scored.raw.iter().flatten() {
                for c in crate::scoring::Component::ALL {
                    assert!((0.0..=1.0).contains(&raw.get(c)), "seed {seed}: {raw:?}");
                }
            }
        }
    }
}
