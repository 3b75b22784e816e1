//! Hybrid pseudo-label machinery: the target split, the reconstruction
//! channel, refined (mixed) soft labels, the three cross-entropy losses and
//! the two augmentations.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{render_scene, SceneSpec};
use crate::formats::read_image_pgm;
use crate::numeric::{argmax_map, LabelMap, ProbMap, Tensor, PROB_EPS};
use crate::scalar::Scalar;
use crate::seed;

/// Partition of the target set into reconstructed (`labeled`) and plain
/// (`unlabeled`) samples.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub proportion_millis: u32,
}

impl TargetSplit {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Seeded uniform sample of `round(proportion·n)` indices without replacement.
/// Both index lists come back sorted.
pub fn split_target(n: usize, proportion: f64, seed_value: u64) -> Result<TargetSplit> {
    if !(0.0..=1.0).contains(&proportion) {
        return Err(Error::InvalidArgument(format!(
            "proportion {proportion} outside [0, 1]"
        )));
    }
    let a = (proportion * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng_for(seed_value, "target-split"));
    let mut labeled = idx[..a].to_vec();
    let mut unlabeled = idx[a..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok(TargetSplit {
        labeled,
        unlabeled,
        proportion_millis: (proportion * 1000.0).round() as u32,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconMode {
    /// Degraded clean rendering of the sample's synthetic scene.
    Oracle,
    /// `<sample_id>.recon.pgm` sidecar files.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconChannelConfig {
    pub mode: ReconMode,
    /// Gaussian blur standard deviation in pixels; 0 disables.
    pub blur_radius: f64,
    pub noise_sigma: f64,
    /// Fraction of blocks replaced by their mean.
    pub dropout_rate: f64,
    pub block_size: usize,
    pub seed: u64,
    /// Sidecar directory for file mode.
    pub dir: Option<PathBuf>,
}

impl Default for ReconChannelConfig {
    fn default() -> Self {
        Self {
            mode: ReconMode::Oracle,
            blur_radius: 1.0,
            noise_sigma: 0.05,
            dropout_rate: 0.25,
            block_size: 4,
            seed: 0,
            dir: None,
        }
    }
}

impl ReconChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.blur_radius >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("blur radius and noise must be ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1]",
                self.dropout_rate
            )));
        }
        if self.block_size == 0 {
            return Err(Error::Config("block size must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// What a reconstruction channel may know about a target sample.
#[derive(Clone, Copy, Debug)]
pub struct ReconRequest<'a> {
    pub id: &'a str,
    /// Generating scene and the step the labels refer to (oracle mode).
    pub scene: Option<(&'a SceneSpec, u64)>,
}

/// Source of reconstructed intensity images (`H×W`, values in `[0, 1]`).
pub trait ReconstructionChannel: Send + Sync {
    fn reconstruct(&self, request: ReconRequest<'_>) -> Result<Tensor<f64>>;
}

pub struct OracleRecon {
    pub config: ReconChannelConfig,
}

impl ReconstructionChannel for OracleRecon {
    fn reconstruct(&self, request: ReconRequest<'_>) -> Result<Tensor<f64>> {
        let (spec, step) = request.scene.ok_or_else(|| {
            Error::Config(format!(
                "oracle reconstruction needs the scene of sample {}",
                request.id
            ))
        })?;
        let (clean, _) = render_scene(spec, step)?;
        let s = seed::derive_seed(self.config.seed, request.id);
        degrade(&clean, &self.config, s)
    }
}

pub struct FileRecon {
    pub dir: PathBuf,
}

impl FileRecon {
    pub fn sidecar_path(dir: &Path, id: &str) -> PathBuf {
        dir.join(format!("{id}.recon.pgm"))
    }
}

impl ReconstructionChannel for FileRecon {
    fn reconstruct(&self, request: ReconRequest<'_>) -> Result<Tensor<f64>> {
        let path = Self::sidecar_path(&self.dir, request.id);
        if let Err(source) = std::fs::metadata(&path) {
            return Err(Error::MissingReconstruction {
                sample: request.id.to_string(),
                path,
                source,
            });
        }
        read_image_pgm(path)
    }
}

pub fn make_channel(cfg: &ReconChannelConfig) -> Result<Box<dyn ReconstructionChannel>> {
    cfg.validate()?;
    Ok(match cfg.mode {
        ReconMode::Oracle => Box::new(OracleRecon {
            config: cfg.clone(),
        }),
        ReconMode::File => Box::new(FileRecon {
            dir: cfg
                .dir
                .clone()
                .ok_or_else(|| Error::Config("file reconstruction needs `dir`".into()))?,
        }),
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of one `h×w` plane with clamp-to-edge borders.
pub fn blur_plane(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, &kv)| {
                    let sx = (x as i64 + i as i64 - r).clamp(0, w as i64 - 1) as usize;
                    kv * plane[y * w + sx]
                })
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, &kv)| {
                    let sy = (y as i64 + i as i64 - r).clamp(0, h as i64 - 1) as usize;
                    kv * tmp[sy * w + x]
                })
                .sum();
        }
    }
    out
}

/// Blur, additive Gaussian noise, then block dropout (a dropped block takes
/// its own mean value).
pub fn degrade(image: &Tensor<f64>, cfg: &ReconChannelConfig, seed_value: u64) -> Result<Tensor<f64>> {
    cfg.validate()?;
    let &[h, w] = image.shape() else {
        return Err(Error::InvalidArgument(format!(
            "image must be H×W, got {:?}",
            image.shape()
        )));
    };
    let mut rng = seed::rng_for(seed_value, "recon-degrade");
    let mut px = blur_plane(image.data(), h, w, cfg.blur_radius);
    if cfg.noise_sigma > 0.0 {
        for v in &mut px {
            let z: f64 = rng.sample(StandardNormal);
            *v = (*v + cfg.noise_sigma * z).clamp(0.0, 1.0);
        }
    }
    if cfg.dropout_rate > 0.0 {
        let b = cfg.block_size;
        for by in (0..h).step_by(b) {
            for bx in (0..w).step_by(b) {
                if rng.gen::<f64>() >= cfg.dropout_rate {
                    continue;
                }
                let (y1, x1) = ((by + b).min(h), (bx + b).min(w));
                let mut sum = 0.0;
                for y in by..y1 {
                    sum += px[y * w + bx..y * w + x1].iter().sum::<f64>();
                }
                let mean = sum / ((y1 - by) * (x1 - bx)) as f64;
                for y in by..y1 {
                    px[y * w + bx..y * w + x1].iter_mut().for_each(|v| *v = mean);
                }
            }
        }
    }
    Tensor::from_vec(&[h, w], px)
}

/// The mixed soft label `(1−α)·recon + α·event`.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinedLabel<T> {
    pub prob: ProbMap<T>,
}

pub fn refine_label<T: Scalar>(
    psi_on_recon: &ProbMap<T>,
    phi_on_event: &ProbMap<T>,
    alpha: T,
) -> Result<RefinedLabel<T>> {
    psi_on_recon
        .tensor()
        .expect_shape(phi_on_event.tensor().shape())?;
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let keep = T::one() - alpha;
    let data = psi_on_recon
        .data()
        .iter()
        .zip(phi_on_event.data())
        .map(|(&r, &e)| keep * r + alpha * e)
        .collect();
    let t = Tensor::from_vec(psi_on_recon.tensor().shape(), data)?;
    Ok(RefinedLabel {
        prob: ProbMap::from_tensor_unchecked(t),
    })
}

/// Loss value and its gradient with respect to the logits that produced the
/// prediction.
#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub loss: T,
    pub dlogits: Tensor<T>,
    /// Pixels that contributed.
    pub count: usize,
}

/// Masked mean hard-label cross entropy; gradient `(p − onehot)/count` on
/// unmasked pixels.
pub fn hard_ce<T: Scalar>(
    pred: &ProbMap<T>,
    labels: &LabelMap,
    mask: Option<&[bool]>,
) -> Result<LossGrad<T>> {
    let (k, n) = (pred.classes(), pred.num_pixels());
    if labels.height() != pred.height() || labels.width() != pred.width() {
        return Err(Error::shape(
            &[pred.height(), pred.width()],
            &[labels.height(), labels.width()],
        ));
    }
    labels.validate(k)?;
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::shape(&[n], &[m.len()]));
        }
    }
    let active = |p: usize| mask.is_none_or(|m| m[p]);
    let count = (0..n).filter(|&p| active(p)).count();
    let mut dlogits = Tensor::zeros(pred.tensor().shape());
    if count == 0 {
        return Ok(LossGrad {
            loss: T::zero(),
            dlogits,
            count,
        });
    }
    let inv = T::one() / T::lit(count as f64);
    let eps = T::lit(PROB_EPS);
    let d = pred.data();
    let g = dlogits.data_mut();
    let mut total = T::zero();
    for p in 0..n {
        if !active(p) {
            continue;
        }
        let y = labels.data()[p] as usize;
        total -= d[y * n + p].max(eps).ln();
        for c in 0..k {
            let target = if c == y { T::one() } else { T::zero() };
            g[c * n + p] = (d[c * n + p] - target) * inv;
        }
    }
    Ok(LossGrad {
        loss: total * inv,
        dlogits,
        count,
    })
}

/// Masked mean soft cross entropy `−Σ_k t_k ln p_k`; gradient `(p − t)/count`.
pub fn soft_ce<T: Scalar>(
    pred: &ProbMap<T>,
    target: &ProbMap<T>,
    mask: Option<&[bool]>,
) -> Result<LossGrad<T>> {
    pred.tensor().expect_shape(target.tensor().shape())?;
    let (k, n) = (pred.classes(), pred.num_pixels());
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::shape(&[n], &[m.len()]));
        }
    }
    let active = |p: usize| mask.is_none_or(|m| m[p]);
    let count = (0..n).filter(|&p| active(p)).count();
    let mut dlogits = Tensor::zeros(pred.tensor().shape());
    if count == 0 {
        return Ok(LossGrad {
            loss: T::zero(),
            dlogits,
            count,
        });
    }
    let inv = T::one() / T::lit(count as f64);
    let eps = T::lit(PROB_EPS);
    let (d, t) = (pred.data(), target.data());
    let g = dlogits.data_mut();
    let mut total = T::zero();
    for p in 0..n {
        if !active(p) {
            continue;
        }
        for c in 0..k {
            let i = c * n + p;
            if t[i] != T::zero() {
                total -= t[i] * d[i].max(eps).ln();
            }
            g[i] = (d[i] - t[i]) * inv;
        }
    }
    Ok(LossGrad {
        loss: total * inv,
        dlogits,
        count,
    })
}

/// Supervised source loss against ground-truth labels.
pub fn loss_s<T: Scalar>(student: &ProbMap<T>, labels: &LabelMap) -> Result<LossGrad<T>> {
    hard_ce(student, labels, None)
}

/// Teacher pixels whose top probability reaches `threshold`; `None` when the
/// threshold is absent or ≤ 0.
pub fn confidence_mask<T: Scalar>(teacher: &ProbMap<T>, threshold: Option<f64>) -> Option<Vec<bool>> {
    let th = threshold.filter(|&t| t > 0.0)?;
    let (k, n) = (teacher.classes(), teacher.num_pixels());
    let th = T::lit(th);
    Some(
        (0..n)
            .map(|p| {
                let mut best = T::zero();
                for c in 0..k {
                    best = best.max(teacher.data()[c * n + p]);
                }
                best >= th
            })
            .collect(),
    )
}

/// Self-training loss on teacher hard pseudo labels with an optional
/// confidence mask.
pub fn loss_u<T: Scalar>(
    student: &ProbMap<T>,
    teacher: &ProbMap<T>,
    threshold: Option<f64>,
) -> Result<LossGrad<T>> {
    student.tensor().expect_shape(teacher.tensor().shape())?;
    let labels = argmax_map(teacher);
    let mask = confidence_mask(teacher, threshold);
    hard_ce(student, &labels, mask.as_deref())
}

/// Loss on reconstructed samples against the refined soft label.
pub fn loss_l<T: Scalar>(student: &ProbMap<T>, refined: &RefinedLabel<T>) -> Result<LossGrad<T>> {
    soft_ce(student, &refined.prob, None)
}

/// Result of pasting classes of `a` onto `b`.
#[derive(Clone, Debug)]
pub struct Mixed<T> {
    pub input: Tensor<T>,
    pub labels: LabelMap,
    /// Pixels taken from `a`.
    pub pasted: Vec<bool>,
    pub classes: Vec<u8>,
}

/// Copies the pixels of ⌈n/2⌉ randomly chosen classes present in `a` (input
/// channels and labels) onto `b`.
pub fn classmix<T: Scalar>(
    input_a: &Tensor<T>,
    labels_a: &LabelMap,
    input_b: &Tensor<T>,
    labels_b: &LabelMap,
    seed_value: u64,
) -> Result<Mixed<T>> {
    input_a.expect_shape(input_b.shape())?;
    let &[c, h, w] = input_a.shape() else {
        return Err(Error::InvalidArgument("classmix inputs must be C×H×W".into()));
    };
    for l in [labels_a, labels_b] {
        if l.height() != h || l.width() != w {
            return Err(Error::shape(&[h, w], &[l.height(), l.width()]));
        }
    }
    let mut present = labels_a.present_classes();
    present.shuffle(&mut seed::rng_for(seed_value, "classmix"));
    let take = present.len().div_ceil(2);
    let mut chosen = [false; 256];
    let mut classes: Vec<u8> = present[..take].to_vec();
    classes.sort_unstable();
    for &cl in &classes {
        chosen[cl as usize] = true;
    }
    let n = h * w;
    let pasted: Vec<bool> = labels_a.data().iter().map(|&l| chosen[l as usize]).collect();
    let mut input = input_b.clone();
    let mut labels = labels_b.clone();
    for p in (0..n).filter(|&p| pasted[p]) {
        labels.data_mut()[p] = labels_a.data()[p];
        for ch in 0..c {
            input.data_mut()[ch * n + p] = input_a.data()[ch * n + p];
        }
    }
    Ok(Mixed {
        input,
        labels,
        pasted,
        classes,
    })
}

/// Seeded per-channel gain/offset perturbation followed by an optional
/// Gaussian blur (`blur_sigma > 0`).
pub fn jitter(input: &Tensor<f64>, strength: f64, blur_sigma: f64, seed_value: u64) -> Result<Tensor<f64>> {
    if !(strength >= 0.0) {
        return Err(Error::InvalidArgument(format!("jitter strength {strength} < 0")));
    }
    let &[c, h, w] = input.shape() else {
        return Err(Error::InvalidArgument("jitter input must be C×H×W".into()));
    };
    if strength == 0.0 && blur_sigma <= 0.0 {
        return Ok(input.clone());
    }
    let mut rng = seed::rng_for(seed_value, "jitter");
    let n = h * w;
    let mut out = Vec::with_capacity(c * n);
    for ch in 0..c {
        let plane = &input.data()[ch * n..(ch + 1) * n];
        let (gain, offset) = if strength > 0.0 {
            (
                1.0 + rng.gen_range(-strength..=strength),
                rng.gen_range(-strength..=strength),
            )
        } else {
            (1.0, 0.0)
        };
        let affine: Vec<f64> = plane.iter().map(|&v| gain * v + offset).collect();
        out.extend(blur_plane(&affine, h, w, blur_sigma));
    }
    Tensor::from_vec(&[c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{SceneObject, Shape};
    use proptest::prelude::*;

    fn pm(k: usize, h: usize, w: usize, v: Vec<f64>) -> ProbMap<f64> {
        ProbMap::new(Tensor::from_vec(&[k, h, w], v).unwrap()).unwrap()
    }

    #[test]
    fn split_endpoints_and_counts() {
        let s = split_target(100, 0.0, 1).unwrap();
        assert!(s.labeled.is_empty() && s.unlabeled.len() == 100);
        let s = split_target(100, 1.0, 1).unwrap();
        assert!(s.unlabeled.is_empty() && s.labeled.len() == 100);
        let s = split_target(100, 0.05, 1).unwrap();
        assert_eq!(s.labeled.len(), 5);
        assert_eq!(s.len(), 100);
        let mut all: Vec<usize> = s.labeled.iter().chain(&s.unlabeled).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(s, split_target(100, 0.05, 1).unwrap());
        assert_ne!(s.labeled, split_target(100, 0.05, 2).unwrap().labeled);
        assert!(split_target(10, 1.5, 0).is_err());
    }

    fn scene() -> SceneSpec {
        let mut s = SceneSpec::empty(16, 12, 3, 4);
        s.objects.push(SceneObject {
            class: 2,
            shape: Shape::Rect {
                x: 3.0,
                y: 2.0,
                w: 7.0,
                h: 6.0,
            },
            vx: 1.0,
            vy: 0.0,
        });
        s
    }

    #[test]
    fn oracle_without_degradation_is_clean() {
        let cfg = ReconChannelConfig {
            blur_radius: 0.0,
            noise_sigma: 0.0,
            dropout_rate: 0.0,
            ..ReconChannelConfig::default()
        };
        let spec = scene();
        let ch = OracleRecon { config: cfg };
        let img = ch
            .reconstruct(ReconRequest {
                id: "t0",
                scene: Some((&spec, 3)),
            })
            .unwrap();
        assert_eq!(img, render_scene(&spec, 3).unwrap().0);
    }

    #[test]
    fn noisy_reconstruction_is_deterministic() {
        let cfg = ReconChannelConfig {
            noise_sigma: 0.1,
            ..ReconChannelConfig::default()
        };
        let spec = scene();
        let ch = OracleRecon { config: cfg };
        let req = ReconRequest {
            id: "t1",
            scene: Some((&spec, 0)),
        };
        assert_eq!(ch.reconstruct(req).unwrap(), ch.reconstruct(req).unwrap());
        let other = ch
            .reconstruct(ReconRequest {
                id: "t2",
                scene: Some((&spec, 0)),
            })
            .unwrap();
        assert_ne!(ch.reconstruct(req).unwrap(), other);
    }

    #[test]
    fn full_dropout_is_blockwise_constant() {
        let cfg = ReconChannelConfig {
            blur_radius: 0.0,
            noise_sigma: 0.0,
            dropout_rate: 1.0,
            block_size: 4,
            ..ReconChannelConfig::default()
        };
        let (clean, _) = render_scene(&scene(), 0).unwrap();
        let out = degrade(&clean, &cfg, 3).unwrap();
        let (h, w) = (12, 16);
        for y in 0..h {
            for x in 0..w {
                let (by, bx) = (y / 4 * 4, x / 4 * 4);
                assert_eq!(out.data()[y * w + x], out.data()[by * w + bx]);
            }
        }
    }

    #[test]
    fn file_channel_reports_missing_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let ch = FileRecon {
            dir: dir.path().to_path_buf(),
        };
        match ch.reconstruct(ReconRequest { id: "tgt_7", scene: None }) {
            Err(Error::MissingReconstruction { sample, .. }) => assert_eq!(sample, "tgt_7"),
            other => panic!("unexpected {other:?}"),
        }
        let img = Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap();
        crate::formats::write_image_pgm(FileRecon::sidecar_path(dir.path(), "tgt_7"), &img).unwrap();
        let back = ch.reconstruct(ReconRequest { id: "tgt_7", scene: None }).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn refine_label_cases() {
        let a = pm(2, 1, 1, vec![0.8, 0.2]);
        let b = pm(2, 1, 1, vec![0.4, 0.6]);
        let r = refine_label(&a, &b, 0.5).unwrap();
        assert!((r.prob.data()[0] - 0.6).abs() < 1e-15);
        assert!((r.prob.data()[1] - 0.4).abs() < 1e-15);
        assert_eq!(refine_label(&a, &b, 0.0).unwrap().prob, a);
        assert_eq!(refine_label(&a, &b, 1.0).unwrap().prob, b);
        let c = ProbMap::<f64>::uniform(2, 2, 1);
        assert!(refine_label(&a, &c, 0.5).is_err());
    }

    #[test]
    fn loss_closed_forms() {
        let u = ProbMap::<f64>::uniform(4, 2, 2);
        let y = LabelMap::filled(2, 2, 3);
        assert!((loss_s(&u, &y).unwrap().loss - 4f64.ln()).abs() < 1e-12);

        let y = LabelMap::from_vec(1, 2, vec![0, 1]).unwrap();
        let perfect = ProbMap::<f64>::one_hot(&y, 3).unwrap();
        let lg = loss_s(&perfect, &y).unwrap();
        assert!(lg.loss <= 3.0 * PROB_EPS);
        assert!(lg.dlogits.data().iter().all(|&g| g == 0.0));

        // Teacher uniform ties to class 0; student uniform, K=2.
        let t = ProbMap::<f64>::uniform(2, 3, 3);
        assert!((loss_u(&t, &t, None).unwrap().loss - 2f64.ln()).abs() < 1e-12);
        let oh = ProbMap::<f64>::one_hot(&LabelMap::filled(2, 2, 1), 2).unwrap();
        assert!(loss_u(&oh, &oh, None).unwrap().loss <= PROB_EPS);

        let s = pm(2, 1, 1, vec![0.3, 0.7]);
        let lg = loss_l(&s, &RefinedLabel { prob: s.clone() }).unwrap();
        let h = -(0.3f64 * 0.3f64.ln() + 0.7 * 0.7f64.ln());
        assert!((lg.loss - h).abs() < 1e-15);
        assert!(lg.dlogits.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn threshold_zero_matches_unmasked_and_full_mask_is_zero() {
        let s = pm(2, 1, 2, vec![0.3, 0.9, 0.7, 0.1]);
        let t = pm(2, 1, 2, vec![0.55, 0.2, 0.45, 0.8]);
        let a = loss_u(&s, &t, None).unwrap();
        let b = loss_u(&s, &t, Some(0.0)).unwrap();
        assert_eq!(a.loss, b.loss);
        let c = loss_u(&s, &t, Some(0.99)).unwrap();
        assert_eq!((c.loss, c.count), (0.0, 0));
        assert!(c.dlogits.data().iter().all(|&g| g == 0.0));
        let d = loss_u(&s, &t, Some(0.7)).unwrap();
        assert_eq!(d.count, 1);
        assert!((d.loss + 0.1f64.ln()).abs() < 1e-15);
    }

    fn logits_fd_check(k: usize, target: &ProbMap<f64>, logits: Vec<f64>) {
        let t = Tensor::from_vec(&[k, 2, 2], logits).unwrap();
        let p = ProbMap::from_logits(&t).unwrap();
        let lg = soft_ce(&p, target, None).unwrap();
        let h = 1e-6;
        for i in 0..t.len() {
            let mut up = t.clone();
            up.data_mut()[i] += h;
            let mut dn = t.clone();
            dn.data_mut()[i] -= h;
            let f = |x: &Tensor<f64>| soft_ce(&ProbMap::from_logits(x).unwrap(), target, None).unwrap().loss;
            let num = (f(&up) - f(&dn)) / (2.0 * h);
            let a = lg.dlogits.data()[i];
            assert!((num - a).abs() / num.abs().max(a.abs()).max(1e-4) <= 1e-5, "{a} vs {num}");
        }
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let y = LabelMap::from_vec(2, 2, vec![0, 2, 1, 2]).unwrap();
        let oh = ProbMap::one_hot(&y, 3).unwrap();
        logits_fd_check(3, &oh, vec![0.1, -0.3, 0.8, 0.2, 1.1, 0.0, -0.5, 0.4, 0.3, 0.7, -1.0, 0.9]);
        let soft = ProbMap::from_logits(
            &Tensor::from_vec(&[3, 2, 2], vec![0.5, 0.1, -0.2, 0.3, 0.0, 0.4, 1.0, -0.6, 0.2, 0.2, 0.9, 0.1])
                .unwrap(),
        )
        .unwrap();
        logits_fd_check(3, &soft, vec![0.3, 0.2, -0.1, 0.0, 0.6, -0.7, 0.2, 0.5, 1.2, -0.4, 0.1, 0.8]);
    }

    #[test]
    fn loss_u_hard_label_optimality() {
        // Against any other hard label map, the student's own argmax gives
        // the smallest loss.
        let s = pm(3, 1, 2, vec![0.2, 0.5, 0.7, 0.1, 0.1, 0.4]);
        let own = argmax_map(&s);
        let best = hard_ce(&s, &own, None).unwrap().loss;
        for a in 0..3u8 {
            for b in 0..3u8 {
                let l = LabelMap::from_vec(1, 2, vec![a, b]).unwrap();
                assert!(hard_ce(&s, &l, None).unwrap().loss >= best);
            }
        }
    }

    #[test]
    fn classmix_cases() {
        let la = LabelMap::from_vec(2, 3, vec![0, 0, 1, 1, 2, 2]).unwrap();
        let lb = LabelMap::from_vec(2, 3, vec![3, 3, 3, 0, 0, 0]).unwrap();
        let ia = Tensor::from_vec(&[2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        let ib = Tensor::from_vec(&[2, 2, 3], (0..12).map(|v| -f64::from(v) - 1.0).collect()).unwrap();

        let same = classmix(&ia, &la, &ia, &la, 1).unwrap();
        assert_eq!((same.input, same.labels), (ia.clone(), la.clone()));

        let m = classmix(&ia, &la, &ib, &lb, 5).unwrap();
        assert_eq!(m.classes.len(), 2);
        // Brute-force recount of the label histogram.
        let mut expect = [0usize; 4];
        for p in 0..6 {
            let from_a = m.classes.contains(&la.data()[p]);
            assert_eq!(m.pasted[p], from_a);
            let l = if from_a { la.data()[p] } else { lb.data()[p] };
            expect[l as usize] += 1;
            for ch in 0..2 {
                let src = if from_a { &ia } else { &ib };
                assert_eq!(m.input.data()[ch * 6 + p], src.data()[ch * 6 + p]);
            }
        }
        assert_eq!(m.labels.histogram(4), expect.to_vec());

        let single = LabelMap::filled(2, 3, 1);
        let m = classmix(&ia, &single, &ib, &lb, 0).unwrap();
        assert!(m.pasted.iter().all(|&p| p));
        assert_eq!(m.labels, single);
    }

    #[test]
    fn jitter_cases() {
        let x = Tensor::from_vec(&[2, 2, 2], (0..8).map(|v| f64::from(v) / 8.0).collect()).unwrap();
        assert_eq!(jitter(&x, 0.0, 0.0, 3).unwrap(), x);
        let a = jitter(&x, 0.2, 0.8, 3).unwrap();
        assert_eq!(a, jitter(&x, 0.2, 0.8, 3).unwrap());
        assert_ne!(a, x);
        assert!(jitter(&x, -0.1, 0.0, 3).is_err());
    }

    fn simplex_map() -> impl Strategy<Value = ProbMap<f64>> {
        proptest::collection::vec(-4.0f64..4.0, 3 * 2 * 2).prop_map(|v| {
            ProbMap::from_logits(&Tensor::from_vec(&[3, 2, 2], v).unwrap()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn refine_stays_on_simplex_and_is_linear(a in simplex_map(), b in simplex_map(), alpha in 0.0f64..=1.0) {
            let r = refine_label(&a, &b, alpha).unwrap();
            prop_assert!(ProbMap::new(r.prob.tensor().clone()).is_ok());
            for ((&x, &y), &z) in a.data().iter().zip(b.data()).zip(r.prob.data()) {
                let lo = x.min(y) - 1e-15;
                let hi = x.max(y) + 1e-15;
                prop_assert!(z >= lo && z <= hi);
                prop_assert!((z - ((1.0 - alpha) * x + alpha * y)).abs() <= 1e-15);
            }
        }

        #[test]
        fn soft_gradient_vanishes_at_target(a in simplex_map()) {
            let lg = soft_ce(&a, &a, None).unwrap();
            prop_assert!(lg.dlogits.data().iter().all(|&g| g == 0.0));
        }
    }
}
