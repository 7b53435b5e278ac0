//! Command-line interface of the `mars` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablation;
use crate::bundle_io::{self, BundleError};
use crate::eval;
use crate::pipeline::{self, EngineConfig, EngineError};
use crate::saliency::LayerSelection;
use crate::scoring::{self, Components};
use crate::select;
use crate::synth::{self, SynthConfig, SynthKind};

#[derive(Debug, Parser)]
#[command(
    name = "mars",
    version,
    about = "Rank, filter and merge segmentation mask proposals"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score proposals of one episode and write the merged prediction.
    Rank {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        proposals: PathBuf,
        /// Output directory for prediction.rle, scores.txt and config.txt.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// Compute per-class IoU and mIoU of a prediction directory.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        /// Lines of `<episode> <class> <fold>`; masks are `<episode>.rle`.
        #[arg(long)]
        folds: PathBuf,
        /// Also write a key=value summary here.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Write synthetic episodes (bundle/, proposals.txt, gt.rle, episode.txt).
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SynthKind::Planted)]
        kind: SynthKind,
        #[arg(long, default_value_t = 1)]
        shots: usize,
        #[arg(long, default_value_t = 5)]
        distractors: usize,
        /// Number of episodes; more than one writes `<out>/<seed>/` per episode.
        #[arg(long, default_value_t = 1)]
        count: u64,
    },
    /// Run every component subset over a corpus written by `synth --count`.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// Print the effective engine settings.
    Config {
        #[command(flatten)]
        engine: EngineArgs,
    },
}

#[derive(Debug, Clone, Args)]
pub struct EngineArgs {
    /// Score components to average: a list of lc,gc,lv,gv or one of
    /// mars, global, local, conceptual, visual.
    #[arg(long, default_value = "mars")]
    pub components: Components,
    #[arg(long, default_value_t = scoring::DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = select::DEFAULT_TH_STATIC)]
    pub th_static: f64,
    #[arg(long, default_value_t = select::DEFAULT_TH_DYNAMIC)]
    pub th_dynamic: f64,
    #[arg(long, default_value_t = pipeline::DEFAULT_CLIP_PIR_THRESHOLD)]
    pub clip_pir_threshold: f64,
    #[arg(long, default_value_t = pipeline::DEFAULT_BOX_THRESHOLD)]
    pub box_threshold: f64,
    #[arg(long, default_value_t = pipeline::DEFAULT_DINO_PIR_THRESHOLD)]
    pub dino_pir_threshold: f64,
    /// `all`, `last:K` or a comma list of layer indices.
    #[arg(long, default_value_t = LayerSelection::Last(pipeline::DEFAULT_CLIP_LAST_LAYERS))]
    pub clip_layers: LayerSelection,
    #[arg(long, default_value_t = LayerSelection::All)]
    pub dino_layers: LayerSelection,
    /// Scoring threads; 0 uses all cores, 1 is serial.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

impl EngineArgs {
    pub fn config(&self) -> EngineConfig {
        EngineConfig {
            alpha: self.alpha,
            th_static: self.th_static,
            th_dynamic: self.th_dynamic,
            clip_pir_threshold: self.clip_pir_threshold,
            box_threshold: self.box_threshold,
            dino_pir_threshold: self.dino_pir_threshold,
            clip_layers: self.clip_layers.clone(),
            dino_layers: self.dino_layers.clone(),
            components: self.components,
            jobs: self.jobs,
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), EngineError> {
    fs::write(path, text).map_err(|source| {
        BundleError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn create_dir(path: &Path) -> Result<(), EngineError> {
    fs::create_dir_all(path).map_err(|source| {
        BundleError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

pub fn cmd_rank(
    bundle: &Path,
    proposals: &Path,
    out: &Path,
    cfg: &EngineConfig,
) -> Result<(), EngineError> {
    cfg.validate()?;
    let b = bundle_io::read_bundle(bundle)?;
    let props = bundle_io::read_proposals(proposals)?;
    let outcome = pipeline::rank(&b, &props, cfg)?;
    log::info!(
        "selected {:?} ({:?} stage)",
        outcome.selected_ids(),
        outcome.stage
    );
    create_dir(out)?;
    bundle_io::write_prediction(&outcome.prediction, out.join("prediction.rle"))?;
    write_file(&out.join("scores.txt"), &outcome.score_table())?;
    write_file(&out.join("config.txt"), &cfg.to_key_values())
}

fn cmd_eval(
    pred: &Path,
    gt: &Path,
    folds: &Path,
    summary: Option<&Path>,
) -> Result<(), EngineError> {
    let report = eval::evaluate_dirs(pred, gt, folds)?;
    print!("{}", report.to_text());
    if let Some(path) = summary {
        write_file(path, &report.to_key_values())?;
    }
    Ok(())
}

fn cmd_synth(cfg: &SynthConfig, out: &Path, count: u64) -> Result<(), EngineError> {
    for i in 0..count {
        let seed = cfg.seed + i;
        let episode = synth::generate(&SynthConfig {
            seed,
            ..cfg.clone()
        });
        let dir = if count == 1 {
            out.to_path_buf()
        } else {
            out.join(format!("{seed:06}"))
        };
        episode.write(&dir)?;
        log::info!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_ablate(corpus: &Path, cfg: &EngineConfig) -> Result<(), EngineError> {
    cfg.validate()?;
    let episodes = ablation::load_corpus(corpus)?;
    if episodes.is_empty() {
        return Err(EngineError::InvalidConfig(format!(
            "no episodes under {}",
            corpus.display()
        )));
    }
    let rows = ablation::run(&episodes, cfg)?;
    print!("{}", ablation::format_table(&rows));
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<(), EngineError> {
    match &cli.command {
        Command::Rank {
            bundle,
            proposals,
            out,
            engine,
        } => cmd_rank(bundle, proposals, out, &engine.config()),
        Command::Eval {
            pred_dir,
            gt_dir,
            folds,
            summary,
        } => cmd_eval(pred_dir, gt_dir, folds, summary.as_deref()),
        Command::Synth {
            seed,
            out,
            kind,
            shots,
            distractors,
            count,
        } => {
            let cfg = SynthConfig {
                kind: *kind,
                shots: *shots,
                distractors: *distractors,
                ..SynthConfig::planted(*seed)
            };
            if cfg.shots == 0 {
                return Err(EngineError::InvalidConfig(
                    "--shots must be at least 1".into(),
                ));
            }
            cmd_synth(&cfg, out, *count)
        }
        Command::Ablate { corpus, engine } => cmd_ablate(corpus, &engine.config()),
        Command::Config { engine } => {
            let cfg = engine.config();
            cfg.validate()?;
            print!("{}", cfg.to_key_values());
            Ok(())
        }
    }
}

/// Runs the parsed command and returns the process exit status.
pub fn run(cli: &Cli) -> i32 {
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_engine() {
        let cli = Cli::parse_from(["mars", "config"]);
        let Command::Config { engine } = cli.command else {
            panic!("config subcommand");
        };
        assert_eq!(engine.config(), EngineConfig::default());
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::parse_from([
            "mars",
            "rank",
            "--bundle",
            "b",
            "--proposals",
            "p",
            "--out",
            "o",
            "--components",
            "lv,gv",
            "--alpha",
            "0.5",
            "--clip-layers",
            "0,3",
            "--jobs",
            "1",
        ]);
        let Command::Rank { engine, .. } = cli.command else {
            panic!("rank subcommand");
        };
        let cfg = engine.config();
        assert_eq!(cfg.components.to_string(), "lv,gv");
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.clip_layers, LayerSelection::Indices(vec![0, 3]));
        assert_eq!(cfg.jobs, 1);
    }

    #[test]
    fn rejects_unknown_component() {
        assert!(Cli::try_parse_from(["mars", "config", "--components", "xx"]).is_err());
    }
}
