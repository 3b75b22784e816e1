//! Synthetic source (image) and target (event) domains drawn from per-domain
//! scene pools, with their on-disk layout.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{
    read_events, render_scene, simulate_events, voxelize, write_events, SceneObject, SceneSpec,
    Shape,
};
use crate::formats::{read_image_pgm, read_label_pgm, write_image_pgm, write_label_pgm};
use crate::labeling::{degrade, FileRecon, ReconChannelConfig};
use crate::numeric::{LabelMap, Tensor};
use crate::seed;

/// Distribution scenes of one domain are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainPool {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Rectangle side or disc diameter range, in pixels.
    pub min_size: f64,
    pub max_size: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    pub disc_fraction: f64,
    pub texture: f64,
    pub brightness_ramp: f64,
}

impl Default for DomainPool {
    fn default() -> Self {
        Self {
            min_objects: 2,
            max_objects: 4,
            min_size: 8.0,
            max_size: 16.0,
            min_speed: 0.6,
            max_speed: 1.4,
            disc_fraction: 0.5,
            texture: 0.12,
            brightness_ramp: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub num_grids: usize,
    pub events_per_grid: usize,
    pub source_samples: usize,
    pub target_samples: usize,
    pub target_eval_samples: usize,
    /// Consecutive target clips cut from one scene.
    pub clips_per_scene: usize,
    pub frames_per_clip: u64,
    pub threshold: f64,
    pub source: DomainPool,
    pub target: DomainPool,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            num_classes: 4,
            num_grids: 8,
            events_per_grid: 500,
            source_samples: 64,
            target_samples: 128,
            target_eval_samples: 32,
            clips_per_scene: 2,
            frames_per_clip: 6,
            threshold: 0.1,
            source: DomainPool::default(),
            target: DomainPool::default(),
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad("canvas must be non-empty".into());
        }
        if !(2..=crate::events::MAX_CLASSES).contains(&self.num_classes) {
            return bad(format!("num_classes {} outside 2..=32", self.num_classes));
        }
        if self.num_grids == 0 || self.events_per_grid == 0 {
            return bad("num_grids and events_per_grid must be ≥ 1".into());
        }
        if self.clips_per_scene == 0 || self.frames_per_clip < 2 {
            return bad("clips_per_scene ≥ 1 and frames_per_clip ≥ 2 required".into());
        }
        if !(self.threshold > 0.0) {
            return bad(format!("threshold {} must be > 0", self.threshold));
        }
        for (name, p) in [("source", &self.source), ("target", &self.target)] {
            if p.min_objects > p.max_objects
                || !(p.min_size > 0.0 && p.min_size <= p.max_size)
                || !(p.min_speed >= 0.0 && p.min_speed <= p.max_speed)
                || !(0.0..=1.0).contains(&p.disc_fraction)
            {
                return bad(format!("{name} pool has inconsistent ranges"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceSample {
    pub id: String,
    pub image: Tensor<f64>,
    pub labels: LabelMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetSample {
    pub id: String,
    pub scene_id: usize,
    /// Scene at the clip start; `step` is the labeled frame within it.
    pub scene: SceneSpec,
    pub step: u64,
    pub voxel: Tensor<f64>,
    pub labels: LabelMap,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DataConfig,
    pub source: Vec<SourceSample>,
    pub target: Vec<TargetSample>,
    pub target_eval: Vec<TargetSample>,
}

/// Repeats an `H×W` image over `channels` so images and voxel grids share
/// the network input layout.
pub fn tile_image(image: &Tensor<f64>, channels: usize) -> Result<Tensor<f64>> {
    let &[h, w] = image.shape() else {
        return Err(Error::InvalidArgument(format!(
            "image must be H×W, got {:?}",
            image.shape()
        )));
    };
    let mut data = Vec::with_capacity(channels * h * w);
    for _ in 0..channels {
        data.extend_from_slice(image.data());
    }
    Tensor::from_vec(&[channels, h, w], data)
}

/// Rounds to the 8-bit grid so images survive a PGM round trip unchanged.
fn quantize(image: &Tensor<f64>) -> Tensor<f64> {
    image.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

fn sample_scene(cfg: &DataConfig, pool: &DomainPool, seed_value: u64) -> SceneSpec {
    let mut rng = seed::rng_for(seed_value, "scene");
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut spec = SceneSpec::empty(cfg.width, cfg.height, cfg.num_classes, seed_value);
    spec.texture = pool.texture;
    spec.brightness_ramp = pool.brightness_ramp;
    let count = rng.gen_range(pool.min_objects..=pool.max_objects);
    for _ in 0..count {
        let class = rng.gen_range(1..cfg.num_classes) as u8;
        let size = rng.gen_range(pool.min_size..=pool.max_size);
        let (cx, cy) = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
        // Head roughly towards the canvas centre so objects stay in view.
        let base = (h / 2.0 - cy).atan2(w / 2.0 - cx);
        let angle = base + rng.gen_range(-0.8..0.8);
        let speed = rng.gen_range(pool.min_speed..=pool.max_speed);
        let shape = if rng.gen::<f64>() < pool.disc_fraction {
            Shape::Disc {
                cx,
                cy,
                r: size / 2.0,
            }
        } else {
            let aspect: f64 = rng.gen_range(0.6..1.6);
            let (sw, sh) = (size * aspect.sqrt(), size / aspect.sqrt());
            Shape::Rect {
                x: cx - sw / 2.0,
                y: cy - sh / 2.0,
                w: sw,
                h: sh,
            }
        };
        spec.objects.push(SceneObject {
            class,
            shape,
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
        });
    }
    spec
}

/// The scene with every object moved to where it is after `steps` steps.
pub fn advance_scene(spec: &SceneSpec, steps: u64) -> SceneSpec {
    let t = steps as f64;
    let mut out = spec.clone();
    for o in &mut out.objects {
        let (dx, dy) = (o.vx * t, o.vy * t);
        o.shape = match o.shape {
            Shape::Rect { x, y, w, h } => Shape::Rect {
                x: x + dx,
                y: y + dy,
                w,
                h,
            },
            Shape::Disc { cx, cy, r } => Shape::Disc {
                cx: cx + dx,
                cy: cy + dy,
                r,
            },
        };
    }
    out
}

fn make_source(cfg: &DataConfig, idx: usize) -> Result<SourceSample> {
    let s = seed::derive_indexed(cfg.seed, "source-scene", idx as u64);
    let spec = sample_scene(cfg, &cfg.source, s);
    let (image, labels) = render_scene(&spec, 0)?;
    Ok(SourceSample {
        id: format!("src_{idx:04}"),
        image: quantize(&image),
        labels,
    })
}

/// Simulates the clip ending at `end`; when the clip is too quiet, earlier
/// frames are prepended (up to four times the nominal length).
fn make_clip(
    cfg: &DataConfig,
    id: String,
    scene_id: usize,
    scene: &SceneSpec,
    end: u64,
) -> Result<TargetSample> {
    let required = cfg.num_grids * cfg.events_per_grid;
    let mut last_count = 0;
    for mult in 1..=4u64 {
        let frames = cfg.frames_per_clip * mult;
        let start = (end + 1).saturating_sub(frames);
        let frames = end + 1 - start;
        let clip = advance_scene(scene, start);
        let stream = simulate_events(&clip, frames, cfg.threshold)?;
        last_count = stream.len();
        if stream.len() < required {
            if start == 0 {
                break;
            }
            continue;
        }
        let voxel = voxelize(&stream, cfg.events_per_grid, cfg.num_grids)?.into_tensor();
        let (_, labels) = render_scene(&clip, frames - 1)?;
        return Ok(TargetSample {
            id,
            scene_id,
            scene: clip,
            step: frames - 1,
            voxel,
            labels,
        });
    }
    Err(Error::InsufficientEvents {
        required,
        available: last_count,
    })
}

/// Scene draws tried before giving up on a scene too quiet for its clips.
const SCENE_ATTEMPTS: u64 = 16;

/// Target clips of `count` samples drawn from scenes of `clips` clips each.
/// A scene that cannot fill every clip's voxel grid is redrawn.
fn make_targets(
    cfg: &DataConfig,
    count: usize,
    clips: usize,
    purpose: &str,
    prefix: &str,
) -> Result<Vec<TargetSample>> {
    let base = cfg.frames_per_clip * 4;
    let scenes = count.div_ceil(clips);
    let per_scene = (0..scenes)
        .into_par_iter()
        .map(|scene_id| {
            let n = clips.min(count - scene_id * clips);
            let s = seed::derive_indexed(cfg.seed, purpose, scene_id as u64);
            let mut last = None;
            for attempt in 0..SCENE_ATTEMPTS {
                let s = if attempt == 0 { s } else { seed::derive_indexed(s, "redraw", attempt) };
                let scene = sample_scene(cfg, &cfg.target, s);
                // Leave room for prepended frames before the first clip.
                let made: Result<Vec<TargetSample>> = (0..n)
                    .map(|clip| {
                        let i = scene_id * clips + clip;
                        let end = base + (clip as u64 + 1) * cfg.frames_per_clip - 1;
                        make_clip(cfg, format!("{prefix}_{i:04}"), scene_id, &scene, end)
                    })
                    .collect();
                match made {
                    Err(e @ Error::InsufficientEvents { .. }) => last = Some(e),
                    other => return other,
                }
            }
            Err(last.expect("at least one attempt"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

impl Dataset {
    /// Deterministic in `cfg.seed`; samples are generated in parallel with
    /// independent per-sample seeds.
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        cfg.validate()?;
        let source = (0..cfg.source_samples)
            .into_par_iter()
            .map(|i| make_source(cfg, i))
            .collect::<Result<Vec<_>>>()?;
        let target = make_targets(cfg, cfg.target_samples, cfg.clips_per_scene, "target-scene", "tgt")?;
        let target_eval = make_targets(cfg, cfg.target_eval_samples, 1, "eval-scene", "evl")?;
        Ok(Self {
            config: cfg.clone(),
            source,
            target,
            target_eval,
        })
    }

    /// Indices of target samples cut from the same scene as `i`.
    pub fn scene_mates(&self, i: usize) -> Vec<usize> {
        let s = self.target[i].scene_id;
        (0..self.target.len())
            .filter(|&j| j != i && self.target[j].scene_id == s)
            .collect()
    }

    pub fn source_input(&self, i: usize) -> Result<Tensor<f64>> {
        tile_image(&self.source[i].image, self.config.num_grids)
    }

    /// Writes `manifest.json` plus per-sample files; oracle reconstructions
    /// are written for every target sample.
    pub fn save(&self, dir: &Path, recon: &ReconChannelConfig) -> Result<()> {
        for sub in ["source", "target", "target_eval", "recon"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for s in &self.source {
            write_image_pgm(dir.join("source").join(format!("{}.image.pgm", s.id)), &s.image)?;
            write_label_pgm(dir.join("source").join(format!("{}.labels.pgm", s.id)), &s.labels)?;
        }
        let recon_dir = dir.join("recon");
        for (sub, set) in [("target", &self.target), ("target_eval", &self.target_eval)] {
            for t in set.iter() {
                let stream = simulate_for(&self.config, t)?;
                write_events(&stream, dir.join(sub).join(format!("{}.evt", t.id)))?;
                write_label_pgm(dir.join(sub).join(format!("{}.labels.pgm", t.id)), &t.labels)?;
            }
        }
        for t in &self.target {
            let (clean, _) = render_scene(&t.scene, t.step)?;
            let img = degrade(&clean, recon, seed::derive_seed(recon.seed, &t.id))?;
            write_image_pgm(FileRecon::sidecar_path(&recon_dir, &t.id), &img)?;
        }
        let manifest = Manifest {
            config: self.config.clone(),
            source: self.source.iter().map(|s| s.id.clone()).collect(),
            target: self.target.iter().map(TargetEntry::from).collect(),
            target_eval: self.target_eval.iter().map(TargetEntry::from).collect(),
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        m.config.validate()?;
        let cfg = m.config;
        let source = m
            .source
            .iter()
            .map(|id| {
                Ok(SourceSample {
                    id: id.clone(),
                    image: read_image_pgm(dir.join("source").join(format!("{id}.image.pgm")))?,
                    labels: read_label_pgm(dir.join("source").join(format!("{id}.labels.pgm")))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let load_targets = |sub: &str, entries: &[TargetEntry]| -> Result<Vec<TargetSample>> {
            entries
                .iter()
                .map(|e| {
                    let stream = read_events(dir.join(sub).join(format!("{}.evt", e.id)))?;
                    Ok(TargetSample {
                        id: e.id.clone(),
                        scene_id: e.scene_id,
                        scene: e.scene.clone(),
                        step: e.step,
                        voxel: voxelize(&stream, cfg.events_per_grid, cfg.num_grids)?.into_tensor(),
                        labels: read_label_pgm(dir.join(sub).join(format!("{}.labels.pgm", e.id)))?,
                    })
                })
                .collect()
        };
        let target = load_targets("target", &m.target)?;
        let target_eval = load_targets("target_eval", &m.target_eval)?;
        Ok(Self {
            config: cfg,
            source,
            target,
            target_eval,
        })
    }
}

fn simulate_for(cfg: &DataConfig, t: &TargetSample) -> Result<crate::events::EventStream> {
    simulate_events(&t.scene, t.step + 1, cfg.threshold)
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TargetEntry {
    pub id: String,
    pub scene_id: usize,
    pub scene: SceneSpec,
    pub step: u64,
}

impl From<&TargetSample> for TargetEntry {
    fn from(t: &TargetSample) -> Self {
        Self {
            id: t.id.clone(),
            scene_id: t.scene_id,
            scene: t.scene.clone(),
            step: t.step,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DataConfig,
    pub source: Vec<String>,
    pub target: Vec<TargetEntry>,
    pub target_eval: Vec<TargetEntry>,
}

/// Every file the manifest refers to, relative to the dataset root.
pub fn manifest_files(m: &Manifest) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for id in &m.source {
        out.push(PathBuf::from(format!("source/{id}.image.pgm")));
        out.push(PathBuf::from(format!("source/{id}.labels.pgm")));
    }
    for e in &m.target {
        out.push(PathBuf::from(format!("target/{}.evt", e.id)));
        out.push(PathBuf::from(format!("target/{}.labels.pgm", e.id)));
        out.push(PathBuf::from(format!("recon/{}.recon.pgm", e.id)));
    }
    for e in &m.target_eval {
        out.push(PathBuf::from(format!("target_eval/{}.evt", e.id)));
        out.push(PathBuf::from(format!("target_eval/{}.labels.pgm", e.id)));
    }
    out
}
