//! Central-difference check of the analytic gradients of every loss term on
//! a small random instance.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::labeling::{refine_label, RefinedLabel};
use crate::numeric::{LabelMap, ProbMap, Tensor};
use crate::segnet::{forward, init_params, SegNetConfig, SegNetParams};
use crate::seed;
use crate::spa::{PrototypeBank, PrototypeSpace};
use crate::trainer::{objective, objective_value, Prepared, UTarget, Weights};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
/// Gradient magnitude below which errors are measured absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub const TERMS: [&str; 6] = ["loss_s", "loss_u", "loss_l", "loss_js_s", "loss_js_i", "total"];

#[derive(Clone, Copy, Debug)]
pub struct Instance {
    pub classes: usize,
    pub size: usize,
    pub hidden: usize,
    pub in_channels: usize,
    pub batch: usize,
    pub omega: f64,
}

impl Default for Instance {
    fn default() -> Self {
        Self {
            classes: 3,
            size: 8,
            hidden: 4,
            in_channels: 2,
            batch: 2,
            omega: 0.5,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TermReport {
    pub term: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

pub fn weights_for(term: &str, omega: f64) -> Result<Weights> {
    let zero = Weights {
        s: 0.0,
        u: 0.0,
        l: 0.0,
        js_s: 0.0,
        js_i: 0.0,
    };
    Ok(match term {
        "loss_s" => Weights { s: 1.0, ..zero },
        "loss_u" => Weights { u: 1.0, ..zero },
        "loss_l" => Weights { l: 1.0, ..zero },
        "loss_js_s" => Weights { js_s: 1.0, ..zero },
        "loss_js_i" => Weights { js_i: 1.0, ..zero },
        "total" => Weights::total(omega),
        other => return Err(Error::InvalidArgument(format!("unknown loss term `{other}`"))),
    })
}

fn random_tensor(rng: &mut seed::Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape")
}

fn random_labels(rng: &mut seed::Rng, size: usize, k: usize) -> LabelMap {
    LabelMap::from_vec(size, size, (0..size * size).map(|_| rng.gen_range(0..k) as u8).collect()).expect("shape")
}

fn random_prob(rng: &mut seed::Rng, k: usize, size: usize) -> ProbMap<f64> {
    ProbMap::from_logits(&random_tensor(rng, &[k, size, size], 2.0)).expect("finite")
}

/// Random parameters plus a frozen micro-batch exercising all five terms.
pub fn build_instance(inst: &Instance, seed_value: u64) -> Result<(SegNetParams<f64>, Prepared)> {
    let mut rng = seed::rng_for(seed_value, "gradcheck");
    let (k, s, b, c) = (inst.classes, inst.size, inst.batch, inst.in_channels);
    let model = SegNetConfig::new(c, inst.hidden, k, seed::derive_seed(seed_value, "gradcheck-model"));
    let mut params = init_params::<f64>(&model)?;
    for t in [&mut params.conv1_b, &mut params.conv2_b, &mut params.head_b] {
        for v in t.data_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
    let inputs = |rng: &mut seed::Rng| -> Vec<Tensor<f64>> { (0..b).map(|_| random_tensor(rng, &[c, s, s], 1.0)).collect() };
    let source_inputs = inputs(&mut rng);
    let source_labels: Vec<LabelMap> = (0..b).map(|_| random_labels(&mut rng, s, k)).collect();
    let u_inputs = inputs(&mut rng);
    let u_targets: Vec<UTarget> = (0..b)
        .map(|i| {
            let labels = random_labels(&mut rng, s, k);
            // Mask a third of the pixels on the first sample only.
            let mask = (i == 0).then(|| (0..s * s).map(|p| p % 3 != 0).collect());
            UTarget::Hard { labels, mask }
        })
        .collect();
    let u_raw_inputs = Some(inputs(&mut rng));
    let l_inputs = inputs(&mut rng);
    let l_targets: Vec<RefinedLabel<f64>> = (0..b)
        .map(|_| {
            let a = random_prob(&mut rng, k, s);
            let e = random_prob(&mut rng, k, s);
            refine_label(&a, &e, 0.5)
        })
        .collect::<Result<_>>()?;
    let i_inputs = inputs(&mut rng);

    let mut source_bank = PrototypeBank::new(k, inst.hidden, 0.9)?;
    let feats: Vec<Tensor<f64>> = source_inputs
        .iter()
        .map(|x| Ok(forward(&params, x)?.features))
        .collect::<Result<_>>()?;
    source_bank.update(&feats.iter().zip(&source_labels).collect::<Vec<_>>())?;
    let mut recon_bank = PrototypeBank::new(k, inst.hidden, 0.9)?;
    let feats: Vec<Tensor<f64>> = i_inputs
        .iter()
        .map(|x| Ok(forward(&params, x)?.features))
        .collect::<Result<_>>()?;
    let labels: Vec<LabelMap> = (0..b).map(|_| random_labels(&mut rng, s, k)).collect();
    recon_bank.update(&feats.iter().zip(&labels).collect::<Vec<_>>())?;

    Ok((
        params,
        Prepared {
            source_inputs,
            source_labels,
            u_inputs,
            u_targets,
            u_raw_inputs,
            l_inputs,
            l_targets,
            i_inputs,
            source_bank,
            recon_bank,
            use_js_s: true,
            use_js_i: true,
            tau: 1.0,
            space: PrototypeSpace::Features,
        },
    ))
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks one term over every parameter. `flip_sign` negates the analytic
/// gradient (negative control).
pub fn check_term(params: &SegNetParams<f64>, prep: &Prepared, term: &str, omega: f64, flip_sign: bool) -> Result<TermReport> {
    let w = weights_for(term, omega)?;
    let (_, mut grads) = objective(params, prep, w)?;
    if flip_sign {
        grads = grads.scale(-1.0);
    }
    let mut worst = (0.0f64, 0usize, 0.0, 0.0);
    let mut p = params.clone();
    for i in 0..params.num_params() {
        let orig = params.get_flat(i);
        p.set_flat(i, orig + STEP);
        let up = objective_value(&p, prep, w)?;
        p.set_flat(i, orig - STEP);
        let down = objective_value(&p, prep, w)?;
        p.set_flat(i, orig);
        let numeric = (up - down) / (2.0 * STEP);
        let analytic = grads.get_flat(i);
        let e = relative_error(analytic, numeric);
        if e > worst.0 || i == 0 {
            worst = (e, i, analytic, numeric);
        }
    }
    Ok(TermReport {
        term: term.to_string(),
        max_rel_err: worst.0,
        worst_index: worst.1,
        worst_param: params.flat_name(worst.1),
        analytic: worst.2,
        numeric: worst.3,
        passed: worst.0 <= TOLERANCE,
    })
}

/// All six terms; `flip` names a term whose analytic gradient is negated.
pub fn run_suite(seed_value: u64, flip: Option<&str>) -> Result<Vec<TermReport>> {
    if let Some(f) = flip {
        weights_for(f, 0.0)?;
    }
    let inst = Instance::default();
    let (params, prep) = build_instance(&inst, seed_value)?;
    TERMS
        .iter()
        .map(|t| check_term(&params, &prep, t, inst.omega, flip == Some(*t)))
        .collect()
}
