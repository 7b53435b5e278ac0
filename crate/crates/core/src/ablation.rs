//! The nine component subsets of the ablation matrix, run over an episode corpus.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::bundle_io::{self, BundleError, FeatureBundle, MaskProposal};
use crate::eval::{self, EpisodeResult, MiouMode};
use crate::mask::Mask;
use crate::pipeline::{self, EngineConfig, EngineError, RankOutcome};
use crate::scoring::{Component, Components};

/// `(name, components)` for each configuration, singles first.
pub fn configurations() -> [(&'static str, Components); 9] {
    use Component::*;
    [
        ("gv", Components::of(&[Gv])),
        ("gc", Components::of(&[Gc])),
        ("lv", Components::of(&[Lv])),
        ("lc", Components::of(&[Lc])),
        ("global", Components::of(&[Gv, Gc])),
        ("local", Components::of(&[Lv, Lc])),
        ("conceptual", Components::of(&[Gc, Lc])),
        ("visual", Components::of(&[Gv, Lv])),
        ("mars", Components::ALL),
    ]
}

/// One episode on disk: `bundle/`, `proposals.txt`, `gt.rle`, `episode.txt`.
#[derive(Debug, Clone)]
pub struct CorpusEpisode {
    pub dir: PathBuf,
    pub class_id: String,
    pub fold: String,
}

/// Subdirectories of `corpus` holding an `episode.txt`, in name order.
pub fn list_corpus(corpus: &Path) -> Result<Vec<CorpusEpisode>, BundleError> {
    let io = |path: &Path, source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut dirs: Vec<PathBuf> = fs::read_dir(corpus)
        .map_err(|e| io(corpus, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("episode.txt").is_file())
        .collect();
    dirs.sort();
    dirs.into_iter()
        .map(|dir| {
            let meta = dir.join("episode.txt");
            let text = fs::read_to_string(&meta).map_err(|e| io(&meta, e))?;
            let get = |key: &str| {
                text.lines()
                    .find_map(|l| l.strip_prefix(key)?.strip_prefix('='))
                    .map(str::to_string)
                    .ok_or_else(|| BundleError::BadManifest {
                        path: meta.clone(),
                        line: 0,
                        detail: format!("missing `{key}`"),
                    })
            };
            Ok(CorpusEpisode {
                class_id: get("class_id")?,
                fold: get("fold")?,
                dir,
            })
        })
        .collect()
}

/// An episode loaded into memory.
#[derive(Debug, Clone)]
pub struct LoadedEpisode {
    pub bundle: FeatureBundle,
    pub proposals: Vec<MaskProposal>,
    pub gt: Mask,
    pub class_id: String,
    pub fold: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    pub components: Components,
    pub miou: f64,
    /// Per-episode outcomes, in corpus order.
    pub outcomes: Vec<RankOutcome>,
}

/// Scores each episode once, then fuses, filters and merges under every
/// configuration and reports mIoU against the ground truth.
pub fn run(
    episodes: &[LoadedEpisode],
    base: &EngineConfig,
) -> Result<Vec<AblationRow>, EngineError> {
    let scored = episodes
        .iter()
        .map(|ep| pipeline::score_episode(&ep.bundle, &ep.proposals, base))
        .collect::<Result<Vec<_>, _>>()?;
    configurations()
        .into_iter()
        .map(|(name, components)| {
            let mut outcomes = Vec::new();
            let mut results = Vec::new();
            for (ep, s) in episodes.iter().zip(&scored) {
                let out = pipeline::select_episode(s, &ep.proposals, components, &base.filter())?;
                let r = EpisodeResult::from_masks(&out.prediction, &ep.gt, &ep.class_id, &ep.fold)?;
                results.push(r);
                outcomes.push(out);
            }
            let miou = eval::miou(&results, MiouMode::PerClassThenMean)?;
            Ok(AblationRow {
                name,
                components,
                miou,
                outcomes,
            })
        })
        .collect()
}

pub fn load_corpus(corpus: &Path) -> Result<Vec<LoadedEpisode>, BundleError> {
    list_corpus(corpus)?
        .into_iter()
        .map(|ep| {
            Ok(LoadedEpisode {
                bundle: bundle_io::read_bundle(ep.dir.join("bundle"))?,
                proposals: bundle_io::read_proposals(ep.dir.join("proposals.txt"))?,
                gt: bundle_io::read_mask(ep.dir.join("gt.rle"))?,
                class_id: ep.class_id,
                fold: ep.fold,
            })
        })
        .collect()
}

pub fn format_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<12} {:<12} {:>8}\n", "config", "components", "miou");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<12} {:<12} {:>8.4}",
            r.name,
            r.components.to_string(),
            r.miou
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, SynthConfig};

    #[test]
    fn nine_distinct_configurations() {
        let configs = configurations();
        for (i, a) in configs.iter().enumerate() {
            for b in &configs[i + 1..] {
                assert_ne!(a.1, b.1);
            }
            assert_eq!(a.0.parse::<Components>().unwrap_or(a.1), a.1);
        }
        assert_eq!(configs[8].1, Components::ALL);
    }

    #[test]
    fn planted_corpus() {
        let episodes: Vec<_> = (0..4)
            .map(|seed| {
                let ep = synth::generate(&SynthConfig::planted(seed));
                LoadedEpisode {
                    bundle: ep.bundle,
                    proposals: ep.proposals,
                    gt: ep.gt,
                    class_id: ep.class_id,
                    fold: ep.fold,
                }
            })
            .collect();
        let rows = run(&episodes, &EngineConfig::default()).unwrap();
        assert_eq!(rows.len(), 9);
        let mars = rows.iter().find(|r| r.name == "mars").unwrap();
        assert_eq!(mars.miou, 1.0);
        assert!(format_table(&rows).lines().count() == 10);
    }
}
