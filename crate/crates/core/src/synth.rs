//! Seeded synthetic episodes for tests and demos.
//!
//! `Planted` episodes hide one target proposal among antipodal distractors:
//! the target's query patches equal the support foreground prototype, its
//! region is the only hot spot of the text alignment map and its region
//! embedding equals the text embedding. Distractor patches and embeddings are
//! the negations. `Random` episodes draw every input independently and vary
//! the grid sizes; they exist to exercise the engine over arbitrary inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bundle_io::{self, BundleError, FeatureBundle, MaskProposal, TensorBlob};
use crate::mask::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Planted,
    Random,
}

impl std::str::FromStr for SynthKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "planted" => Ok(SynthKind::Planted),
            "random" => Ok(SynthKind::Random),
            other => Err(format!("unknown episode kind {other:?} (planted, random)")),
        }
    }
}

impl std::fmt::Display for SynthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SynthKind::Planted => "planted",
            SynthKind::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub kind: SynthKind,
    pub shots: usize,
    /// Planted episodes only; random episodes draw their proposal count.
    pub distractors: usize,
    /// Query and support patch grid side.
    pub grid: usize,
    pub clip_grid: usize,
    /// Pixels per patch side at full resolution.
    pub patch_size: usize,
    pub feature_dim: usize,
    pub embedding_dim: usize,
    pub dino_layers: usize,
    pub clip_layers: usize,
}

impl SynthConfig {
    pub fn planted(seed: u64) -> Self {
        Self {
            seed,
            kind: SynthKind::Planted,
            shots: 1,
            distractors: 5,
            grid: 8,
            clip_grid: 7,
            patch_size: 4,
            feature_dim: 16,
            embedding_dim: 8,
            dino_layers: 4,
            clip_layers: 12,
        }
    }

    pub fn random(seed: u64) -> Self {
        Self {
            kind: SynthKind::Random,
            ..Self::planted(seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthEpisode {
    pub seed: u64,
    pub kind: SynthKind,
    pub bundle: FeatureBundle,
    pub proposals: Vec<MaskProposal>,
    pub gt: Mask,
    pub planted_id: Option<usize>,
    pub class_id: String,
    pub fold: String,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        if norm(&v) > 1e-3 {
            return v;
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// A random unit vector orthogonal to the unit vector `u`.
fn orthogonal_to(rng: &mut ChaCha8Rng, u: &[f64]) -> Vec<f64> {
    loop {
        let v = gaussian(rng, u.len());
        let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        let w: Vec<f64> = v.iter().zip(u).map(|(a, b)| a - dot * b).collect();
        if norm(&w) > 1e-3 {
            return unit(w);
        }
    }
}

fn f32s(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn random_rect(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    max_side: usize,
) -> (usize, usize, usize, usize) {
    let rh = rng.random_range(1..=max_side.min(h));
    let rw = rng.random_range(1..=max_side.min(w));
    let r0 = rng.random_range(0..=h - rh);
    let c0 = rng.random_range(0..=w - rw);
    (r0, c0, r0 + rh, c0 + rw)
}

/// Row-stochastic local attention over an `h x w` grid: each token attends to
/// itself and its 8-neighborhood with jittered, distance-decaying weights.
fn local_attention(rng: &mut ChaCha8Rng, layers: usize, h: usize, w: usize) -> TensorBlob {
    let n = h * w;
    let mut data = vec![0f32; layers * n * n];
    for l in 0..layers {
        for i in 0..n {
            let (ri, ci) = (i / w, i % w);
            let row = &mut data[(l * n + i) * n..(l * n + i + 1) * n];
            for (j, v) in row.iter_mut().enumerate() {
                let (rj, cj) = (j / w, j % w);
                let (dr, dc) = (ri.abs_diff(rj), ci.abs_diff(cj));
                let base = match (dr, dc) {
                    (0, 0) => 1.0,
                    (0, 1) | (1, 0) => 0.9,
                    (1, 1) => 0.5,
                    _ => 0.0,
                };
                if base > 0.0 {
                    *v = base * rng.random_range(0.9f32..=1.0);
                }
            }
            let sum: f32 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
        }
    }
    TensorBlob::from_f32(vec![layers, n, n], data).expect("shape matches data")
}

fn features(h: usize, w: usize, rows: &[Vec<f64>]) -> TensorBlob {
    let d = rows[0].len();
    let data = rows.iter().flat_map(|r| f32s(r)).collect();
    TensorBlob::from_f32(vec![h, w, d], data).expect("shape matches data")
}

fn mask_tensor(m: &Mask) -> TensorBlob {
    let data = m.bits().iter().map(|&b| b as u8).collect();
    TensorBlob::from_u8(vec![m.height(), m.width()], data).expect("shape matches data")
}

fn support_shots(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    grid: (usize, usize),
    fg_feature: impl Fn(&mut ChaCha8Rng) -> Vec<f64>,
    bg_feature: impl Fn(&mut ChaCha8Rng) -> Vec<f64>,
) -> (Vec<TensorBlob>, Vec<TensorBlob>) {
    let (h, w) = grid;
    let mut feats = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..cfg.shots {
        let (r0, c0, r1, c1) = random_rect(rng, h, w, h.max(w) / 2 + 1);
        let m = Mask::rect(h, w, r0, c0, r1, c1);
        let rows: Vec<Vec<f64>> = m
            .bits()
            .iter()
            .map(|&fg| if fg { fg_feature(rng) } else { bg_feature(rng) })
            .collect();
        feats.push(features(h, w, &rows));
        masks.push(mask_tensor(&m));
    }
    (feats, masks)
}

fn labels(seed: u64) -> (String, String) {
    let class = seed % 4;
    (class.to_string(), (class / 2).to_string())
}

pub fn generate(cfg: &SynthConfig) -> SynthEpisode {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match cfg.kind {
        SynthKind::Planted => planted(cfg, &mut rng),
        SynthKind::Random => random(cfg, &mut rng),
    }
}

fn planted(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> SynthEpisode {
    let g = cfg.grid;
    let (hf, wf) = (g * cfg.patch_size, g * cfg.patch_size);
    let u = unit(gaussian(rng, cfg.feature_dim));
    let neg_u: Vec<f64> = u.iter().map(|x| -x).collect();

    let (r0, c0, r1, c1) = random_rect(rng, g, g, g / 2);
    let target_patch = Mask::rect(g, g, r0, c0, r1, c1);
    let p = cfg.patch_size;
    let gt = Mask::rect(hf, wf, r0 * p, c0 * p, r1 * p, c1 * p);

    // Distractors avoid the target's patches so their pooled masks never touch it.
    let mut distractor_masks = Vec::new();
    while distractor_masks.len() < cfg.distractors {
        let (a0, b0, a1, b1) = random_rect(rng, hf, wf, hf / 2);
        let m = Mask::from_fn(hf, wf, |r, c| {
            (a0..a1).contains(&r) && (b0..b1).contains(&c) && !target_patch.get(r / p, c / p)
        });
        if m.area() > 0 {
            distractor_masks.push(m);
        }
    }
    let distractor_patches = distractor_masks.iter().fold(Mask::zeros(g, g), |acc, m| {
        acc.or(&m.max_pool(g, g)).expect("same grid")
    });

    let query_rows: Vec<Vec<f64>> = (0..g * g)
        .map(|i| {
            if target_patch.bits()[i] {
                u.clone()
            } else if distractor_patches.bits()[i] {
                neg_u.clone()
            } else {
                unit(gaussian(rng, cfg.feature_dim))
            }
        })
        .collect();
    let (support_feats, support_masks) = support_shots(
        rng,
        cfg,
        (g, g),
        |_| u.clone(),
        |rng| orthogonal_to(rng, &u),
    );

    let cg = cfg.clip_grid;
    let hot = gt.max_pool(cg, cg);
    let ta: Vec<f32> = hot
        .bits()
        .iter()
        .map(|&b| {
            if b {
                1.0
            } else {
                rng.random_range(0.0f32..0.2)
            }
        })
        .collect();

    let text = gaussian(rng, cfg.embedding_dim);
    let neg_text: Vec<f64> = text.iter().map(|x| -x).collect();
    let planted_id = rng.random_range(0..=cfg.distractors);
    let mut masks = distractor_masks;
    masks.insert(planted_id, gt.clone());
    let embeddings = (0..masks.len())
        .map(|k| {
            let e = if k == planted_id { &text } else { &neg_text };
            TensorBlob::from_f32(vec![cfg.embedding_dim], f32s(e)).expect("vector")
        })
        .collect();

    let bundle = FeatureBundle {
        query_patch_features: features(g, g, &query_rows),
        support_patch_features: support_feats,
        support_masks_patch: support_masks,
        dino_attention: local_attention(rng, cfg.dino_layers, g, g),
        clip_text_alignment: TensorBlob::from_f32(vec![cg, cg], ta).expect("map"),
        clip_attention: local_attention(rng, cfg.clip_layers, cg, cg),
        text_embedding: TensorBlob::from_f32(vec![cfg.embedding_dim], f32s(&text)).expect("vector"),
        mask_image_embeddings: embeddings,
        class_name: "target".into(),
        class_description: "synthetic planted object".into(),
    };
    let proposals = masks
        .into_iter()
        .enumerate()
        .map(|(k, m)| {
            let mut prop = MaskProposal::new(k, m);
            prop.mask_patch = Some(prop.mask_full.max_pool(g, g));
            prop
        })
        .collect();
    let (class_id, fold) = labels(cfg.seed);
    SynthEpisode {
        seed: cfg.seed,
        kind: SynthKind::Planted,
        bundle,
        proposals,
        gt,
        planted_id: Some(planted_id),
        class_id,
        fold,
    }
}

fn random(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> SynthEpisode {
    let d = rng.random_range(2..=cfg.feature_dim.max(2));
    let (qh, qw) = (
        rng.random_range(2..=cfg.grid),
        rng.random_range(2..=cfg.grid),
    );
    let (sh, sw) = (
        rng.random_range(2..=cfg.grid),
        rng.random_range(2..=cfg.grid),
    );
    let (ch, cw) = (
        rng.random_range(2..=cfg.clip_grid),
        rng.random_range(2..=cfg.clip_grid),
    );
    let (hf, wf) = (qh * cfg.patch_size, qw * cfg.patch_size);
    let e = rng.random_range(2..=cfg.embedding_dim.max(2));

    let query_rows: Vec<Vec<f64>> = (0..qh * qw).map(|_| gaussian(rng, d)).collect();
    let (support_feats, support_masks) = support_shots(
        rng,
        cfg,
        (sh, sw),
        |rng| gaussian(rng, d),
        |rng| gaussian(rng, d),
    );
    let ta: Vec<f32> = (0..ch * cw)
        .map(|_| {
            // Some cells hit exactly zero to exercise flat regions.
            if rng.random_bool(0.2) {
                0.0
            } else {
                rng.random_range(0.0f32..3.0)
            }
        })
        .collect();

    let k = rng.random_range(1..=8);
    let masks: Vec<Mask> = (0..k)
        .map(|_| {
            let (r0, c0, r1, c1) = random_rect(rng, hf, wf, hf.max(wf));
            Mask::rect(hf, wf, r0, c0, r1, c1)
        })
        .collect();
    let (r0, c0, r1, c1) = random_rect(rng, hf, wf, hf.max(wf));
    let gt = Mask::rect(hf, wf, r0, c0, r1, c1);

    let bundle = FeatureBundle {
        query_patch_features: features(qh, qw, &query_rows),
        support_patch_features: support_feats,
        support_masks_patch: support_masks,
        dino_attention: random_attention(rng, cfg.dino_layers, qh * qw),
        clip_text_alignment: TensorBlob::from_f32(vec![ch, cw], ta).expect("map"),
        clip_attention: random_attention(rng, cfg.clip_layers, ch * cw),
        text_embedding: TensorBlob::from_f32(vec![e], f32s(&gaussian(rng, e))).expect("vector"),
        mask_image_embeddings: (0..k)
            .map(|_| TensorBlob::from_f32(vec![e], f32s(&gaussian(rng, e))).expect("vector"))
            .collect(),
        class_name: "random".into(),
        class_description: String::new(),
    };
    let proposals = masks
        .into_iter()
        .enumerate()
        .map(|(k, m)| MaskProposal::new(k, m))
        .collect();
    let (class_id, fold) = labels(cfg.seed);
    SynthEpisode {
        seed: cfg.seed,
        kind: SynthKind::Random,
        bundle,
        proposals,
        gt,
        planted_id: None,
        class_id,
        fold,
    }
}

/// Non-negative attention with some exact zeros and all-zero rows.
fn random_attention(rng: &mut ChaCha8Rng, layers: usize, n: usize) -> TensorBlob {
    let data = (0..layers * n * n)
        .map(|_| {
            if rng.random_bool(0.3) {
                0.0
            } else {
                rng.random_range(0.0f32..1.0)
            }
        })
        .collect();
    TensorBlob::from_f32(vec![layers, n, n], data).expect("shape matches data")
}

impl SynthEpisode {
    pub fn metadata(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "kind={}", self.kind);
        if let Some(id) = self.planted_id {
            let _ = writeln!(out, "planted_id={id}");
        }
        let _ = writeln!(out, "class_id={}", self.class_id);
        let _ = writeln!(out, "fold={}", self.fold);
        out
    }

    /// Writes `bundle/`, `proposals.txt`, `gt.rle` and `episode.txt` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), BundleError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|source| BundleError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        bundle_io::write_bundle(&self.bundle, dir.join("bundle"))?;
        bundle_io::write_proposals(&self.proposals, dir.join("proposals.txt"))?;
        bundle_io::write_prediction(&self.gt, dir.join("gt.rle"))?;
        let meta = dir.join("episode.txt");
        fs::write(&meta, self.metadata()).map_err(|source| BundleError::Io { path: meta, source })
    }
}
