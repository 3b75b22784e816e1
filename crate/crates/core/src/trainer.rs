//! Warm-up followed by teacher/student self-training on hybrid pseudo labels.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{tile_image, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metrics};
use crate::labeling::{
    classmix, confidence_mask, hard_ce, jitter, loss_l, loss_s, refine_label, soft_ce, split_target,
    LossGrad, ReconRequest, ReconstructionChannel, RefinedLabel, TargetSplit,
};
use crate::numeric::{argmax_map, LabelMap, ProbMap, Tensor};
use crate::segnet::{
    accumulate_backward, ema_update, forward, init_params, optimizer_step, AdamState, AdamWConfig,
    ForwardTrace, SegNetConfig, SegNetParams,
};
use crate::seed;
use crate::spa::{intra_target_loss, source_alignment_loss, FeatureLossGrad, PrototypeBank, PrototypeSpace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the teacher event prediction in the refined label.
    pub alpha: f64,
    /// Weight of the two alignment terms in the total loss.
    pub omega: f64,
    pub tau: f64,
    pub ema_decay: f64,
    /// Share of target samples that receive a reconstruction.
    pub proportion: f64,
    pub warmup_iters: usize,
    pub lr_warmup_iters: usize,
    pub total_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Teacher confidence below which pixels are masked out of `L_u`; 0 keeps all.
    pub threshold: f64,
    /// Re-predict reconstruction labels every step instead of freezing them
    /// after warm-up.
    pub online_recon_labels: bool,
    pub use_hybrid: bool,
    pub use_nll: bool,
    pub use_spa: bool,
    /// Teacher probabilities instead of argmax labels as the `L_u` target.
    pub soft_pseudo_labels: bool,
    /// Reconstruction predictions enter the refined label as probabilities
    /// instead of one-hot argmax maps.
    pub soft_recon_labels: bool,
    pub classmix: bool,
    pub jitter_strength: f64,
    /// Blur applied to half of the jittered source inputs; 0 disables.
    pub jitter_blur: f64,
    pub prototype_space: PrototypeSpace,
    pub prototype_momentum: f64,
    pub freeze_source_prototypes: bool,
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            omega: 0.5,
            tau: 1.0,
            ema_decay: 0.999,
            proportion: 0.05,
            warmup_iters: 300,
            lr_warmup_iters: 50,
            total_iters: 600,
            batch_size: 2,
            lr: 6e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            threshold: 0.0,
            online_recon_labels: true,
            use_hybrid: true,
            use_nll: true,
            use_spa: true,
            soft_pseudo_labels: false,
            soft_recon_labels: false,
            classmix: true,
            jitter_strength: 0.1,
            jitter_blur: 0.5,
            prototype_space: PrototypeSpace::Features,
            prototype_momentum: 0.9,
            freeze_source_prototypes: false,
            eval_interval: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("alpha", self.alpha)?;
        unit("omega", self.omega)?;
        unit("proportion", self.proportion)?;
        unit("ema_decay", self.ema_decay)?;
        unit("prototype_momentum", self.prototype_momentum)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.lr > 0.0) || !(self.tau > 0.0) {
            return Err(Error::Config("lr and tau must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.jitter_strength >= 0.0) || !(self.threshold >= 0.0) {
            return Err(Error::Config("weight_decay, jitter_strength and threshold must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamWConfig::default()
        }
    }

    /// Learning rate for the given optimizer step (0-based), ramping
    /// linearly up to `lr`.
    pub fn lr_at(&self, opt_step: u64) -> f64 {
        if self.lr_warmup_iters == 0 {
            return self.lr;
        }
        self.lr * ((opt_step + 1) as f64 / self.lr_warmup_iters as f64).min(1.0)
    }
}

/// Values of the individual terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Terms {
    pub loss_s: f64,
    pub loss_u: f64,
    pub loss_l: f64,
    pub loss_js_s: f64,
    pub loss_js_i: f64,
}

impl Terms {
    pub fn total(&self, omega: f64) -> f64 {
        self.loss_s + self.loss_u + self.loss_l + omega * (self.loss_js_s + self.loss_js_i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iter: usize,
    pub terms: Terms,
    pub total: f64,
    pub target_acc: f64,
    pub target_miou: f64,
}

pub const METRICS_HEADER: &str = "iter,loss_s,loss_u,loss_l,loss_js_s,loss_js_i,total,target_acc,target_miou";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let t = &r.terms;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.iter, t.loss_s, t.loss_u, t.loss_l, t.loss_js_s, t.loss_js_i, r.total, r.target_acc, r.target_miou
        );
    }
    s
}

pub struct TrainState {
    pub student: SegNetParams<f64>,
    pub adam: AdamState<f64>,
    pub teacher: SegNetParams<f64>,
    pub source_bank: PrototypeBank<f64>,
    pub recon_bank: PrototypeBank<f64>,
    /// Completed self-training steps.
    pub iter: usize,
    pub opt_steps: u64,
    pub history: Vec<MetricRow>,
    /// Frozen reconstruction predictions (offline mode), by position in the
    /// labeled split.
    pub offline_cache: Option<Vec<ProbMap<f64>>>,
}

/// Multipliers of the five terms in an objective evaluation. A zero weight
/// skips the term's gradient entirely.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Weights {
    pub s: f64,
    pub u: f64,
    pub l: f64,
    pub js_s: f64,
    pub js_i: f64,
}

impl Weights {
    pub fn total(omega: f64) -> Self {
        Self {
            s: 1.0,
            u: 1.0,
            l: 1.0,
            js_s: omega,
            js_i: omega,
        }
    }
}

/// Target of the self-training term for one sample.
#[derive(Clone, Debug)]
pub enum UTarget {
    Hard { labels: LabelMap, mask: Option<Vec<bool>> },
    Soft { prob: ProbMap<f64> },
}

/// Everything one step's objective needs besides the student parameters.
/// Targets and prototype banks are frozen.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub source_inputs: Vec<Tensor<f64>>,
    pub source_labels: Vec<LabelMap>,
    /// Student inputs for `L_u` (mixed when ClassMix is on).
    pub u_inputs: Vec<Tensor<f64>>,
    pub u_targets: Vec<UTarget>,
    /// Unmixed plain-set inputs for the intra-target term, when they differ
    /// from `u_inputs`.
    pub u_raw_inputs: Option<Vec<Tensor<f64>>>,
    pub l_inputs: Vec<Tensor<f64>>,
    pub l_targets: Vec<RefinedLabel<f64>>,
    /// Reconstructed images, tiled to the input layout.
    pub i_inputs: Vec<Tensor<f64>>,
    pub source_bank: PrototypeBank<f64>,
    pub recon_bank: PrototypeBank<f64>,
    pub use_js_s: bool,
    pub use_js_i: bool,
    pub tau: f64,
    pub space: PrototypeSpace,
}

/// Student forward passes over every input group of a [`Prepared`].
pub struct Traces {
    pub source: Vec<ForwardTrace<f64>>,
    pub u: Vec<ForwardTrace<f64>>,
    pub u_raw: Option<Vec<ForwardTrace<f64>>>,
    pub l: Vec<ForwardTrace<f64>>,
    pub i: Vec<ForwardTrace<f64>>,
}

fn forward_all(params: &SegNetParams<f64>, inputs: &[Tensor<f64>]) -> Result<Vec<ForwardTrace<f64>>> {
    inputs.par_iter().map(|x| forward(params, x)).collect()
}

/// Non-finite activations during training mean the run diverged.
fn diverged(e: Error, iter: usize) -> Error {
    match e {
        Error::NonFiniteInput(_) => Error::NonFiniteLoss { iter },
        other => other,
    }
}

fn probs(trace: &ForwardTrace<f64>) -> Result<ProbMap<f64>> {
    ProbMap::from_logits(&trace.logits)
}

impl Prepared {
    pub fn traces(&self, params: &SegNetParams<f64>) -> Result<Traces> {
        Ok(Traces {
            source: forward_all(params, &self.source_inputs)?,
            u: forward_all(params, &self.u_inputs)?,
            u_raw: match &self.u_raw_inputs {
                Some(x) => Some(forward_all(params, x)?),
                None => None,
            },
            l: forward_all(params, &self.l_inputs)?,
            i: forward_all(params, &self.i_inputs)?,
        })
    }
}

/// Maps a gradient on softmax outputs to a gradient on the logits.
fn softmax_backward(p: &ProbMap<f64>, dp: &Tensor<f64>) -> Tensor<f64> {
    let (k, n) = (p.classes(), p.num_pixels());
    let (pd, g) = (p.data(), dp.data());
    let mut out = vec![0.0; k * n];
    for px in 0..n {
        let dot: f64 = (0..k).map(|c| pd[c * n + px] * g[c * n + px]).sum();
        for c in 0..k {
            out[c * n + px] = pd[c * n + px] * (g[c * n + px] - dot);
        }
    }
    Tensor::from_vec(p.tensor().shape(), out).expect("shape preserved")
}

/// Per-trace gradient accumulators.
struct Grad {
    dlogits: Tensor<f64>,
    dfeatures: Option<Tensor<f64>>,
}

impl Grad {
    fn new(trace: &ForwardTrace<f64>) -> Self {
        Self {
            dlogits: Tensor::zeros(trace.logits.shape()),
            dfeatures: None,
        }
    }

    fn add_logits(&mut self, g: &Tensor<f64>, scale: f64) {
        for (a, &b) in self.dlogits.data_mut().iter_mut().zip(g.data()) {
            *a += scale * b;
        }
    }

    fn add_space(&mut self, space: PrototypeSpace, trace: &ForwardTrace<f64>, g: &Tensor<f64>, scale: f64) -> Result<()> {
        match space {
            PrototypeSpace::Features => {
                let df = self
                    .dfeatures
                    .get_or_insert_with(|| Tensor::zeros(trace.features.shape()));
                for (a, &b) in df.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
            PrototypeSpace::Probabilities => {
                let dl = softmax_backward(&probs(trace)?, g);
                self.add_logits(&dl, scale);
            }
        }
        Ok(())
    }
}

/// The representation prototypes are built from.
pub fn space_map(space: PrototypeSpace, trace: &ForwardTrace<f64>) -> Result<Tensor<f64>> {
    Ok(match space {
        PrototypeSpace::Features => trace.features.clone(),
        PrototypeSpace::Probabilities => probs(trace)?.into_tensor(),
    })
}

fn batch_mean(values: impl Iterator<Item = f64>, count: usize) -> f64 {
    values.sum::<f64>() / count as f64
}

/// Term values and, for every term with a non-zero weight, its weighted
/// gradient with respect to the student parameters.
pub fn objective_from_traces(
    params: &SegNetParams<f64>,
    prep: &Prepared,
    traces: &Traces,
    weights: Weights,
) -> Result<(Terms, SegNetParams<f64>)> {
    let mut terms = Terms::default();
    let mut gs: Vec<Grad> = traces.source.iter().map(Grad::new).collect();
    let mut gu: Vec<Grad> = traces.u.iter().map(Grad::new).collect();
    let mut gur: Vec<Grad> = traces.u_raw.iter().flatten().map(Grad::new).collect();
    let mut gl: Vec<Grad> = traces.l.iter().map(Grad::new).collect();
    let mut gi: Vec<Grad> = traces.i.iter().map(Grad::new).collect();

    let nb = traces.source.len();
    if nb > 0 {
        let r: Vec<LossGrad<f64>> = traces
            .source
            .iter()
            .zip(&prep.source_labels)
            .map(|(t, y)| loss_s(&probs(t)?, y))
            .collect::<Result<_>>()?;
        terms.loss_s = batch_mean(r.iter().map(|x| x.loss), nb);
        if weights.s != 0.0 {
            for (g, x) in gs.iter_mut().zip(&r) {
                g.add_logits(&x.dlogits, weights.s / nb as f64);
            }
        }
    }

    let nu = traces.u.len();
    if nu > 0 {
        let r: Vec<LossGrad<f64>> = traces
            .u
            .iter()
            .zip(&prep.u_targets)
            .map(|(t, target)| {
                let p = probs(t)?;
                match target {
                    UTarget::Hard { labels, mask } => hard_ce(&p, labels, mask.as_deref()),
                    UTarget::Soft { prob } => soft_ce(&p, prob, None),
                }
            })
            .collect::<Result<_>>()?;
        terms.loss_u = batch_mean(r.iter().map(|x| x.loss), nu);
        if weights.u != 0.0 {
            for (g, x) in gu.iter_mut().zip(&r) {
                g.add_logits(&x.dlogits, weights.u / nu as f64);
            }
        }
    }

    let nl = traces.l.len();
    if nl > 0 {
        let r: Vec<LossGrad<f64>> = traces
            .l
            .iter()
            .zip(&prep.l_targets)
            .map(|(t, v)| loss_l(&probs(t)?, v))
            .collect::<Result<_>>()?;
        terms.loss_l = batch_mean(r.iter().map(|x| x.loss), nl);
        if weights.l != 0.0 {
            for (g, x) in gl.iter_mut().zip(&r) {
                g.add_logits(&x.dlogits, weights.l / nl as f64);
            }
        }
    }

    let space = prep.space;
    if prep.use_js_s && nl > 0 && !prep.source_bank.is_empty() {
        let r: Vec<FeatureLossGrad<f64>> = traces
            .i
            .iter()
            .zip(&traces.l)
            .map(|(ti, tl)| {
                source_alignment_loss(&space_map(space, ti)?, &space_map(space, tl)?, &prep.source_bank, prep.tau)
            })
            .collect::<Result<_>>()?;
        terms.loss_js_s = batch_mean(r.iter().map(|x| x.loss), nl);
        if weights.js_s != 0.0 {
            let scale = weights.js_s / nl as f64;
            for (k, x) in r.iter().enumerate() {
                gi[k].add_space(space, &traces.i[k], &x.dfeat_a, scale)?;
                gl[k].add_space(space, &traces.l[k], &x.dfeat_b, scale)?;
            }
        }
    }

    if prep.use_js_i && nl > 0 && nu > 0 && !prep.recon_bank.is_empty() {
        let u_traces = traces.u_raw.as_ref().unwrap_or(&traces.u);
        let pairs = nl.min(u_traces.len());
        let r: Vec<FeatureLossGrad<f64>> = (0..pairs)
            .map(|k| {
                intra_target_loss(
                    &space_map(space, &traces.l[k])?,
                    &space_map(space, &u_traces[k])?,
                    &prep.recon_bank,
                    prep.tau,
                )
            })
            .collect::<Result<_>>()?;
        terms.loss_js_i = batch_mean(r.iter().map(|x| x.loss), pairs);
        if weights.js_i != 0.0 {
            let scale = weights.js_i / pairs as f64;
            for (k, x) in r.iter().enumerate() {
                gl[k].add_space(space, &traces.l[k], &x.dfeat_a, scale)?;
                let target = if traces.u_raw.is_some() { &mut gur[k] } else { &mut gu[k] };
                target.add_space(space, &u_traces[k], &x.dfeat_b, scale)?;
            }
        }
    }

    let mut grads = SegNetParams::zeros(&params.config);
    let groups: [(&Vec<ForwardTrace<f64>>, &Vec<Grad>); 4] =
        [(&traces.source, &gs), (&traces.u, &gu), (&traces.l, &gl), (&traces.i, &gi)];
    let raw = traces.u_raw.as_ref().map(|t| (t, &gur));
    for (ts, g) in groups.into_iter().chain(raw) {
        for (t, g) in ts.iter().zip(g.iter()) {
            if g.dfeatures.is_none() && g.dlogits.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            accumulate_backward(t, params, &g.dlogits, g.dfeatures.as_ref(), &mut grads)?;
        }
    }
    Ok((terms, grads))
}

/// Re-runs the student forwards; used by gradient checks.
pub fn objective(params: &SegNetParams<f64>, prep: &Prepared, weights: Weights) -> Result<(Terms, SegNetParams<f64>)> {
    let traces = prep.traces(params)?;
    objective_from_traces(params, prep, &traces, weights)
}

/// Scalar value of the weighted objective.
pub fn objective_value(params: &SegNetParams<f64>, prep: &Prepared, weights: Weights) -> Result<f64> {
    let (t, _) = objective(params, prep, weights)?;
    Ok(weights.s * t.loss_s
        + weights.u * t.loss_u
        + weights.l * t.loss_l
        + weights.js_s * t.loss_js_s
        + weights.js_i * t.loss_js_i)
}

/// Static inputs of a run: data, split, reconstructions.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub data: &'a Dataset,
    pub split: TargetSplit,
    /// Tiled reconstruction inputs by position in `split.labeled`.
    pub recon_inputs: Vec<Tensor<f64>>,
    source_inputs: Vec<Tensor<f64>>,
    eval_inputs: Vec<(Tensor<f64>, LabelMap)>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, data: &'a Dataset, recon: &dyn ReconstructionChannel) -> Result<Self> {
        cfg.validate()?;
        if data.source.is_empty() {
            return Err(Error::Config("source set is empty".into()));
        }
        let proportion = if cfg.use_hybrid { cfg.proportion } else { 0.0 };
        let split = split_target(data.target.len(), proportion, seed::derive_seed(cfg.seed, "split"))?;
        let g = data.config.num_grids;
        let recon_inputs = split
            .labeled
            .iter()
            .map(|&i| {
                let t = &data.target[i];
                let img = recon.reconstruct(ReconRequest {
                    id: &t.id,
                    scene: Some((&t.scene, t.step)),
                })?;
                tile_image(&img, g)
            })
            .collect::<Result<Vec<_>>>()?;
        let source_inputs = (0..data.source.len())
            .map(|i| data.source_input(i))
            .collect::<Result<Vec<_>>>()?;
        let eval_inputs = data
            .target_eval
            .iter()
            .map(|t| (t.voxel.clone(), t.labels.clone()))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            data,
            split,
            recon_inputs,
            source_inputs,
            eval_inputs,
        })
    }

    pub fn init_state(&self, model: &SegNetConfig) -> Result<TrainState> {
        let student = init_params::<f64>(model)?;
        let dim = match self.cfg.prototype_space {
            PrototypeSpace::Features => model.hidden_channels,
            PrototypeSpace::Probabilities => model.num_classes,
        };
        let bank = PrototypeBank::new(model.num_classes, dim, self.cfg.prototype_momentum)?;
        Ok(TrainState {
            adam: AdamState::new(model),
            teacher: student.clone(),
            student,
            source_bank: bank.clone(),
            recon_bank: bank,
            iter: 0,
            opt_steps: 0,
            history: Vec::new(),
            offline_cache: None,
        })
    }

    fn augmented_source(&self, idx: usize, seed_value: u64) -> Result<Tensor<f64>> {
        let mut rng = seed::rng_for(seed_value, "blur-coin");
        let blur = if self.cfg.jitter_blur > 0.0 && rng.gen::<bool>() {
            self.cfg.jitter_blur
        } else {
            0.0
        };
        jitter(&self.source_inputs[idx], self.cfg.jitter_strength, blur, seed_value)
    }

    fn step_optimizer(&self, state: &mut TrainState, grads: &SegNetParams<f64>) -> Result<()> {
        let lr = self.cfg.lr_at(state.opt_steps);
        optimizer_step(&mut state.student, grads, &mut state.adam, &self.cfg.adamw(), lr)?;
        state.opt_steps += 1;
        Ok(())
    }

    fn warmup_step(&self, state: &mut TrainState, it: usize, bank_from: usize) -> Result<()> {
        let b = self.cfg.batch_size;
        let mut rng = seed::rng_indexed(self.cfg.seed, "warmup-batch", it as u64);
        let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..self.source_inputs.len())).collect();
        let inputs = idx
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                self.augmented_source(i, seed::derive_indexed(self.cfg.seed, "warmup-aug", (it * b + k) as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        let traces = forward_all(&state.student, &inputs)?;
        let mut grads = SegNetParams::zeros(&state.student.config);
        let mut loss = 0.0;
        for (t, &i) in traces.iter().zip(&idx) {
            let r = loss_s(&probs(t)?, &self.data.source[i].labels)?;
            loss += r.loss / b as f64;
            accumulate_backward(t, &state.student, &r.dlogits.scale(1.0 / b as f64), None, &mut grads)?;
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iter: it });
        }
        if it >= bank_from {
            let maps = traces
                .iter()
                .map(|t| space_map(self.cfg.prototype_space, t))
                .collect::<Result<Vec<_>>>()?;
            let batch: Vec<(&Tensor<f64>, &LabelMap)> =
                maps.iter().zip(&idx).map(|(m, &i)| (m, &self.data.source[i].labels)).collect();
            state.source_bank.update(&batch)?;
        }
        self.step_optimizer(state, &grads)
    }

    /// Source-only training; the teacher becomes a copy of the student at the
    /// end and, in offline mode, reconstruction predictions are frozen.
    pub fn warmup(&self, state: &mut TrainState) -> Result<()> {
        let iters = self.cfg.warmup_iters;
        let bank_from = iters - iters.div_ceil(10);
        for it in 0..iters {
            self.warmup_step(state, it, bank_from).map_err(|e| diverged(e, it))?;
        }
        state.teacher = state.student.clone();
        if !self.cfg.online_recon_labels {
            state.offline_cache = Some(
                self.recon_inputs
                    .iter()
                    .map(|x| probs(&forward(&state.student, x)?))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(())
    }

    /// Assembles a step's inputs and frozen targets, updates the prototype
    /// banks, and returns the student traces computed along the way.
    pub fn prepare(&self, state: &mut TrainState) -> Result<(Prepared, Traces)> {
        let cfg = &self.cfg;
        let it = state.iter as u64;
        let b = cfg.batch_size;
        let mut rng = seed::rng_indexed(cfg.seed, "step-batch", it);
        let (labeled, unlabeled) = (&self.split.labeled, &self.split.unlabeled);

        let src_idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..self.source_inputs.len())).collect();
        let l_pos: Vec<usize> = if labeled.is_empty() {
            Vec::new()
        } else {
            (0..b).map(|_| rng.gen_range(0..labeled.len())).collect()
        };
        let u_idx: Vec<usize> = if unlabeled.is_empty() {
            Vec::new()
        } else {
            (0..b)
                .map(|k| {
                    // Pair with a clip of the same scene when one is unlabeled.
                    let mates: Vec<usize> = l_pos
                        .get(k)
                        .map(|&p| {
                            self.data
                                .scene_mates(labeled[p])
                                .into_iter()
                                .filter(|j| unlabeled.binary_search(j).is_ok())
                                .collect()
                        })
                        .unwrap_or_default();
                    match mates.choose(&mut rng) {
                        Some(&j) => j,
                        None => unlabeled[rng.gen_range(0..unlabeled.len())],
                    }
                })
                .collect()
        };

        let source_inputs = src_idx
            .iter()
            .enumerate()
            .map(|(k, &i)| self.augmented_source(i, seed::derive_indexed(cfg.seed, "step-aug", it * b as u64 + k as u64)))
            .collect::<Result<Vec<_>>>()?;
        let source_labels: Vec<LabelMap> = src_idx.iter().map(|&i| self.data.source[i].labels.clone()).collect();

        // Teacher predictions.
        let raw_u: Vec<Tensor<f64>> = u_idx.iter().map(|&i| self.data.target[i].voxel.clone()).collect();
        let teacher_u = forward_all(&state.teacher, &raw_u)?
            .iter()
            .map(probs)
            .collect::<Result<Vec<_>>>()?;
        let l_inputs: Vec<Tensor<f64>> = l_pos.iter().map(|&p| self.data.target[labeled[p]].voxel.clone()).collect();
        let teacher_l = if cfg.use_nll {
            forward_all(&state.teacher, &l_inputs)?
                .iter()
                .map(probs)
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };

        // Self-training targets, with source classes pasted onto target inputs.
        let th = (cfg.threshold > 0.0).then_some(cfg.threshold);
        let mut u_inputs = Vec::with_capacity(u_idx.len());
        let mut u_targets = Vec::with_capacity(u_idx.len());
        for (k, tp) in teacher_u.iter().enumerate() {
            let pseudo = argmax_map(tp);
            let conf = confidence_mask(tp, th);
            if cfg.classmix {
                let s = k % source_inputs.len();
                let m = classmix(
                    &source_inputs[s],
                    &source_labels[s],
                    &raw_u[k],
                    &pseudo,
                    seed::derive_indexed(cfg.seed, "step-mix", it * b as u64 + k as u64),
                )?;
                let target = if cfg.soft_pseudo_labels {
                    let n = m.pasted.len();
                    let kk = tp.classes();
                    let mut t = tp.tensor().clone();
                    for p in (0..n).filter(|&p| m.pasted[p]) {
                        for c in 0..kk {
                            t.data_mut()[c * n + p] = if c == m.labels.data()[p] as usize { 1.0 } else { 0.0 };
                        }
                    }
                    UTarget::Soft { prob: ProbMap::new(t)? }
                } else {
                    let mask = conf.map(|c| c.iter().zip(&m.pasted).map(|(&a, &b)| a || b).collect());
                    UTarget::Hard { labels: m.labels, mask }
                };
                u_inputs.push(m.input);
                u_targets.push(target);
            } else {
                u_inputs.push(raw_u[k].clone());
                u_targets.push(if cfg.soft_pseudo_labels {
                    UTarget::Soft { prob: tp.clone() }
                } else {
                    UTarget::Hard { labels: pseudo, mask: conf }
                });
            }
        }

        let use_js_s = cfg.use_spa && !l_pos.is_empty();
        let use_js_i = cfg.use_spa && !l_pos.is_empty() && !u_idx.is_empty();
        let u_raw_inputs = (use_js_i && cfg.classmix).then(|| raw_u.clone());
        let i_inputs: Vec<Tensor<f64>> = l_pos.iter().map(|&p| self.recon_inputs[p].clone()).collect();

        let mut prep = Prepared {
            source_inputs,
            source_labels,
            u_inputs,
            u_targets,
            u_raw_inputs,
            l_inputs,
            l_targets: Vec::new(),
            i_inputs,
            source_bank: state.source_bank.clone(),
            recon_bank: state.recon_bank.clone(),
            use_js_s,
            use_js_i,
            tau: cfg.tau,
            space: cfg.prototype_space,
        };
        let traces = prep.traces(&state.student)?;

        // Refined labels for the reconstructed set.
        for (k, &p) in l_pos.iter().enumerate() {
            let recon_prob = match &state.offline_cache {
                Some(cache) => cache[p].clone(),
                None => probs(&traces.i[k])?,
            };
            let recon_prob = if cfg.soft_recon_labels {
                recon_prob
            } else {
                ProbMap::one_hot(&argmax_map(&recon_prob), recon_prob.classes())?
            };
            let refined = if cfg.use_nll {
                refine_label(&recon_prob, &teacher_l[k], cfg.alpha)?
            } else {
                refine_label(&recon_prob, &recon_prob, 0.0)?
            };
            prep.l_targets.push(refined);
        }

        // Banks are updated first and then frozen for this step's objective.
        if cfg.use_spa {
            let space = cfg.prototype_space;
            if !(cfg.freeze_source_prototypes && !state.source_bank.is_empty()) {
                let maps = traces.source.iter().map(|t| space_map(space, t)).collect::<Result<Vec<_>>>()?;
                let batch: Vec<(&Tensor<f64>, &LabelMap)> = maps.iter().zip(&prep.source_labels).collect();
                state.source_bank.update(&batch)?;
            }
            if !l_pos.is_empty() {
                let maps = traces.i.iter().map(|t| space_map(space, t)).collect::<Result<Vec<_>>>()?;
                let labels: Vec<LabelMap> = prep.l_targets.iter().map(|v| argmax_map(&v.prob)).collect();
                let batch: Vec<(&Tensor<f64>, &LabelMap)> = maps.iter().zip(&labels).collect();
                state.recon_bank.update(&batch)?;
            }
            prep.source_bank = state.source_bank.clone();
            prep.recon_bank = state.recon_bank.clone();
        }
        Ok((prep, traces))
    }

    /// One self-training step: objective, optimizer update, EMA teacher.
    pub fn train_step(&self, state: &mut TrainState) -> Result<Terms> {
        let iter = state.iter;
        self.train_step_inner(state).map_err(|e| diverged(e, iter))
    }

    fn train_step_inner(&self, state: &mut TrainState) -> Result<Terms> {
        let (prep, traces) = self.prepare(state)?;
        let mut weights = Weights::total(self.cfg.omega);
        if !self.cfg.use_spa {
            weights.js_s = 0.0;
            weights.js_i = 0.0;
        }
        let (terms, grads) = objective_from_traces(&state.student, &prep, &traces, weights)?;
        if !terms.total(self.cfg.omega).is_finite() || !grads.all_finite() {
            return Err(Error::NonFiniteLoss { iter: state.iter });
        }
        self.step_optimizer(state, &grads)?;
        ema_update(&mut state.teacher, &state.student, self.cfg.ema_decay)?;
        state.iter += 1;
        Ok(terms)
    }

    pub fn evaluate(&self, params: &SegNetParams<f64>) -> Result<Metrics> {
        evaluate(params, self.eval_inputs.iter().map(|(x, y)| (x, y)))
    }

    fn record(&self, state: &mut TrainState, terms: Terms) -> Result<()> {
        let m = self.evaluate(&state.student)?;
        state.history.push(MetricRow {
            iter: state.iter,
            terms,
            total: terms.total(self.cfg.omega),
            target_acc: m.accuracy,
            target_miou: m.miou,
        });
        Ok(())
    }

    /// Warm-up, then `total_iters` steps with an evaluation after warm-up,
    /// every `eval_interval` steps and at the end.
    pub fn run(&self, model: &SegNetConfig) -> Result<TrainState> {
        let mut state = self.init_state(model)?;
        self.warmup(&mut state)?;
        self.record(&mut state, Terms::default())?;
        for _ in 0..self.cfg.total_iters {
            let terms = self.train_step(&mut state)?;
            let due = self.cfg.eval_interval > 0 && state.iter % self.cfg.eval_interval == 0;
            if due || state.iter == self.cfg.total_iters {
                self.record(&mut state, terms)?;
            }
        }
        Ok(state)
    }
}
