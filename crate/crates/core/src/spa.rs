//! Soft prototypical alignment: per-class prototype banks, distance-based
//! soft assignments and the JS alignment losses with their feature
//! gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{LabelMap, Tensor, PROB_EPS};
use crate::scalar::Scalar;

/// Class prototypes `η` (`K×D`) with running-average state.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank<T> {
    prototypes: Tensor<T>,
    seen: Vec<bool>,
    pub momentum: T,
}

impl<T: Scalar> PrototypeBank<T> {
    pub fn new(num_classes: usize, dim: usize, momentum: T) -> Result<Self> {
        if !(momentum >= T::zero() && momentum <= T::one()) {
            return Err(Error::InvalidArgument(format!(
                "momentum {momentum} outside [0, 1]"
            )));
        }
        Ok(Self {
            prototypes: Tensor::zeros(&[num_classes, dim]),
            seen: vec![false; num_classes],
            momentum,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.seen.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn prototypes(&self) -> &Tensor<T> {
        &self.prototypes
    }

    pub fn row(&self, c: usize) -> &[T] {
        let d = self.dim();
        &self.prototypes.data()[c * d..(c + 1) * d]
    }

    pub fn seen(&self) -> &[bool] {
        &self.seen
    }

    pub fn seen_classes(&self) -> Vec<usize> {
        (0..self.seen.len()).filter(|&c| self.seen[c]).collect()
    }

    pub fn is_empty(&self) -> bool {
        !self.seen.iter().any(|&s| s)
    }

    /// Batch update: the per-class mean over every pixel of every sample is
    /// blended into the running prototype (or copied on first sight).
    pub fn update(&mut self, batch: &[(&Tensor<T>, &LabelMap)]) -> Result<()> {
        let (k, d) = (self.num_classes(), self.dim());
        let mut sums = vec![T::zero(); k * d];
        let mut counts = vec![0usize; k];
        for (features, labels) in batch {
            let &[fd, h, w] = features.shape() else {
                return Err(Error::InvalidArgument(format!(
                    "features must be D×H×W, got {:?}",
                    features.shape()
                )));
            };
            if fd != d {
                return Err(Error::shape(&[d, h, w], features.shape()));
            }
            if labels.height() != h || labels.width() != w {
                return Err(Error::shape(&[h, w], &[labels.height(), labels.width()]));
            }
            labels.validate(k)?;
            let n = h * w;
            let f = features.data();
            for (p, &l) in labels.data().iter().enumerate() {
                let c = l as usize;
                counts[c] += 1;
                for j in 0..d {
                    sums[c * d + j] += f[j * n + p];
                }
            }
        }
        let m = self.momentum;
        let rows = self.prototypes.data_mut();
        for c in (0..k).filter(|&c| counts[c] > 0) {
            let inv = T::one() / T::lit(counts[c] as f64);
            for j in 0..d {
                let mean = sums[c * d + j] * inv;
                let r = &mut rows[c * d + j];
                *r = if self.seen[c] {
                    m * *r + (T::one() - m) * mean
                } else {
                    mean
                };
            }
            self.seen[c] = true;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> PrototypeBank<U> {
        PrototypeBank {
            prototypes: self.prototypes.cast(),
            seen: self.seen.clone(),
            momentum: U::lit(self.momentum.to_f64_lossy()),
        }
    }
}

/// Per-pixel distribution over the seen prototypes (`K'×H×W`), with the
/// distances it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftAssignment<T> {
    pub classes: Vec<usize>,
    pub z: Tensor<T>,
    pub distances: Tensor<T>,
    pub tau: T,
}

/// `softmax(−d/τ)` of one distance vector.
pub fn assign_from_distances<T: Scalar>(distances: &[T], tau: T) -> Vec<T> {
    let s: Vec<T> = distances.iter().map(|&d| -d / tau).collect();
    let max = s.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = s.iter().map(|&v| (v - max).exp()).collect();
    let total: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / total).collect()
}

pub fn soft_assign<T: Scalar>(
    features: &Tensor<T>,
    bank: &PrototypeBank<T>,
    tau: T,
) -> Result<SoftAssignment<T>> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let &[d, h, w] = features.shape() else {
        return Err(Error::InvalidArgument(format!(
            "features must be D×H×W, got {:?}",
            features.shape()
        )));
    };
    if d != bank.dim() {
        return Err(Error::shape(&[bank.dim(), h, w], features.shape()));
    }
    let classes = bank.seen_classes();
    if classes.is_empty() {
        return Err(Error::EmptyBank);
    }
    let (kk, n) = (classes.len(), h * w);
    let f = features.data();
    let mut dist = vec![T::zero(); kk * n];
    let mut z = vec![T::zero(); kk * n];
    let mut dv = vec![T::zero(); kk];
    for p in 0..n {
        for (i, &c) in classes.iter().enumerate() {
            let eta = bank.row(c);
            let mut sq = T::zero();
            for j in 0..d {
                let diff = f[j * n + p] - eta[j];
                sq += diff * diff;
            }
            dv[i] = sq.sqrt();
            dist[i * n + p] = dv[i];
        }
        for (i, v) in assign_from_distances(&dv, tau).into_iter().enumerate() {
            z[i * n + p] = v;
        }
    }
    Ok(SoftAssignment {
        classes,
        z: Tensor::from_vec(&[kk, h, w], z)?,
        distances: Tensor::from_vec(&[kk, h, w], dist)?,
        tau,
    })
}

/// Pulls `dL/dz` back to `dL/dfeatures` through the softmax, the `−d/τ`
/// scaling and the Euclidean distances. A pixel sitting exactly on a
/// prototype contributes no gradient for that prototype.
pub fn assign_backward<T: Scalar>(
    features: &Tensor<T>,
    bank: &PrototypeBank<T>,
    sa: &SoftAssignment<T>,
    dz: &Tensor<T>,
) -> Result<Tensor<T>> {
    dz.expect_shape(sa.z.shape())?;
    let &[d, h, w] = features.shape() else {
        return Err(Error::InvalidArgument("features must be D×H×W".into()));
    };
    let (kk, n) = (sa.classes.len(), h * w);
    let f = features.data();
    let (z, dist, g) = (sa.z.data(), sa.distances.data(), dz.data());
    let mut out = vec![T::zero(); d * n];
    for p in 0..n {
        let mut zg = T::zero();
        for i in 0..kk {
            zg += z[i * n + p] * g[i * n + p];
        }
        for (i, &c) in sa.classes.iter().enumerate() {
            let ds = z[i * n + p] * (g[i * n + p] - zg);
            let dd = -ds / sa.tau;
            let di = dist[i * n + p];
            if di == T::zero() || dd == T::zero() {
                continue;
            }
            let eta = bank.row(c);
            let k = dd / di;
            for j in 0..d {
                out[j * n + p] += k * (f[j * n + p] - eta[j]);
            }
        }
    }
    Tensor::from_vec(&[d, h, w], out)
}

/// Mean-pixel JS divergence between two assignments with gradients w.r.t.
/// both.
#[derive(Clone, Debug)]
pub struct JsGrad<T> {
    pub loss: T,
    pub dz_a: Tensor<T>,
    pub dz_b: Tensor<T>,
}

pub fn js_alignment_loss<T: Scalar>(a: &SoftAssignment<T>, b: &SoftAssignment<T>) -> Result<JsGrad<T>> {
    if a.classes != b.classes {
        return Err(Error::InvalidArgument(
            "assignments use different prototype sets".into(),
        ));
    }
    a.z.expect_shape(b.z.shape())?;
    let (kk, n) = (a.z.shape()[0], a.z.shape()[1] * a.z.shape()[2]);
    let eps = T::lit(PROB_EPS);
    let half = T::lit(0.5);
    let (p, q) = (a.z.data(), b.z.data());
    let mut ga = vec![T::zero(); kk * n];
    let mut gb = vec![T::zero(); kk * n];
    let inv = T::one() / T::lit(n as f64);
    let mut total = T::zero();
    for px in 0..n {
        let mut js = T::zero();
        for c in 0..kk {
            let i = c * n + px;
            let (pc, qc) = (p[i].max(eps), q[i].max(eps));
            let m = half * (p[i] + q[i]);
            let lm = m.max(eps).ln();
            let (lp, lq) = (pc.ln() - lm, qc.ln() - lm);
            let tp = if p[i] > T::zero() { p[i] * lp } else { T::zero() };
            let tq = if q[i] > T::zero() { q[i] * lq } else { T::zero() };
            js += half * (tp + tq);
            ga[i] = half * lp * inv;
            gb[i] = half * lq * inv;
        }
        total += js;
    }
    let shape = a.z.shape();
    Ok(JsGrad {
        loss: total * inv,
        dz_a: Tensor::from_vec(shape, ga)?,
        dz_b: Tensor::from_vec(shape, gb)?,
    })
}

/// Loss with gradients w.r.t. the two feature maps that were aligned.
#[derive(Clone, Debug)]
pub struct FeatureLossGrad<T> {
    pub loss: T,
    pub dfeat_a: Tensor<T>,
    pub dfeat_b: Tensor<T>,
}

/// Assigns both feature maps against one bank and aligns them pixelwise.
pub fn aligned_feature_loss<T: Scalar>(
    feat_a: &Tensor<T>,
    feat_b: &Tensor<T>,
    bank: &PrototypeBank<T>,
    tau: T,
) -> Result<FeatureLossGrad<T>> {
    feat_a.expect_shape(feat_b.shape())?;
    let za = soft_assign(feat_a, bank, tau)?;
    let zb = soft_assign(feat_b, bank, tau)?;
    let js = js_alignment_loss(&za, &zb)?;
    Ok(FeatureLossGrad {
        loss: js.loss,
        dfeat_a: assign_backward(feat_a, bank, &za, &js.dz_a)?,
        dfeat_b: assign_backward(feat_b, bank, &zb, &js.dz_b)?,
    })
}

/// Source alignment: reconstructed-image features against their event
/// features, assigned over the source prototypes.
pub fn source_alignment_loss<T: Scalar>(
    feat_image: &Tensor<T>,
    feat_event: &Tensor<T>,
    source_bank: &PrototypeBank<T>,
    tau: T,
) -> Result<FeatureLossGrad<T>> {
    aligned_feature_loss(feat_image, feat_event, source_bank, tau)
}

/// Intra-target alignment of reconstructed-set and plain-set event
/// features over the reconstruction prototypes.
pub fn intra_target_loss<T: Scalar>(
    features_el: &Tensor<T>,
    features_eu: &Tensor<T>,
    recon_bank: &PrototypeBank<T>,
    tau: T,
) -> Result<FeatureLossGrad<T>> {
    aligned_feature_loss(features_el, features_eu, recon_bank, tau)
}

/// Space the prototypes and assignments live in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeSpace {
    /// Penultimate post-ReLU features.
    #[default]
    Features,
    /// Softmax class probabilities.
    Probabilities,
}
