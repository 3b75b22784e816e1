//! Dense-array kernels shared by every other module.
//!
//! All per-pixel quantities are stored channel-major (`C×H×W`, row-major
//! inside a channel). Probability maps keep the class axis first so a single
//! pixel's distribution is strided by `H·W`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower clamp applied to probabilities inside every logarithm.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor of shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_shape(other.shape())?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(shape, &self.shape));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::lit(v.to_f64_lossy()))
                .collect(),
        }
    }
}

/// Per-pixel hard class indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(&[height, width], &[data.len()]));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().position(|&c| c as usize >= num_classes) {
            Some(i) => Err(Error::Domain(format!(
                "label {} at pixel {i} is not below K={num_classes}",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0usize; num_classes.max(1)];
        for &c in &self.data {
            if (c as usize) < h.len() {
                h[c as usize] += 1;
            }
        }
        h
    }

    /// Sorted list of classes occurring at least once.
    pub fn present_classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &c in &self.data {
            seen[c as usize] = true;
        }
        (0..=255u8).filter(|&c| seen[c as usize]).collect()
    }
}

/// Per-pixel probability simplex over `K` classes, stored `K×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<T> {
    tensor: Tensor<T>,
}

fn simplex_tol<T: Scalar>() -> T {
    T::lit(1e-9).max(T::epsilon() * T::lit(1024.0))
}

impl<T: Scalar> ProbMap<T> {
    /// Validates non-negativity and per-pixel normalization.
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        if tensor.shape().len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "probability map must be K×H×W, got {:?}",
                tensor.shape()
            )));
        }
        let map = Self { tensor };
        let tol = simplex_tol::<T>();
        let k = map.classes();
        let n = map.num_pixels();
        let d = map.tensor.data();
        for p in 0..n {
            let mut s = T::zero();
            for c in 0..k {
                let v = d[c * n + p];
                if !(v >= T::zero()) {
                    return Err(Error::Domain(format!(
                        "negative or NaN probability at class {c}, pixel {p}"
                    )));
                }
                s += v;
            }
            if (s - T::one()).abs() > tol {
                return Err(Error::Domain(format!("pixel {p} sums to {s}")));
            }
        }
        Ok(map)
    }

    /// Per-pixel softmax over the class axis of a `K×H×W` logit tensor.
    pub fn from_logits(logits: &Tensor<T>) -> Result<Self> {
        Ok(Self {
            tensor: softmax(logits, 0)?,
        })
    }

    pub fn uniform(classes: usize, height: usize, width: usize) -> Self {
        let v = T::one() / T::lit(classes as f64);
        Self {
            tensor: Tensor::filled(&[classes, height, width], v),
        }
    }

    pub fn one_hot(labels: &LabelMap, classes: usize) -> Result<Self> {
        labels.validate(classes)?;
        let n = labels.num_pixels();
        let mut t = Tensor::zeros(&[classes, labels.height(), labels.width()]);
        for (p, &c) in labels.data().iter().enumerate() {
            t.data_mut()[c as usize * n + p] = T::one();
        }
        Ok(Self { tensor: t })
    }

    pub fn classes(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn num_pixels(&self) -> usize {
        self.height() * self.width()
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn data(&self) -> &[T] {
        self.tensor.data()
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    /// Distribution at one pixel, gathered from the strided layout.
    pub fn pixel(&self, p: usize) -> Vec<T> {
        let n = self.num_pixels();
        (0..self.classes()).map(|c| self.data()[c * n + p]).collect()
    }

    pub(crate) fn from_tensor_unchecked(tensor: Tensor<T>) -> Self {
        Self { tensor }
    }
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(logits: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = logits.shape();
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    if !logits.all_finite() {
        return Err(Error::NonFiniteInput("softmax logits"));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = logits.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..inner {
            let at = |k: usize| base + k * inner + i;
            let mut max = T::neg_infinity();
            for k in 0..n {
                max = max.max(src[at(k)]);
            }
            let mut sum = T::zero();
            for k in 0..n {
                let e = (src[at(k)] - max).exp();
                out[at(k)] = e;
                sum += e;
            }
            for k in 0..n {
                out[at(k)] /= sum;
            }
        }
    }
    Tensor::from_vec(shape, out)
}

/// Target of a cross-entropy evaluation.
#[derive(Clone, Copy, Debug)]
pub enum CeTarget<'a, T> {
    Hard(&'a LabelMap),
    Soft(&'a ProbMap<T>),
}

/// Mean over unmasked pixels of `−Σ_k target_k · ln pred_k`.
///
/// Returns zero when every pixel is masked out.
pub fn cross_entropy<T: Scalar>(
    pred: &ProbMap<T>,
    target: CeTarget<'_, T>,
    mask: Option<&[bool]>,
) -> Result<T> {
    let (k, n) = (pred.classes(), pred.num_pixels());
    let eps = T::lit(PROB_EPS);
    match target {
        CeTarget::Hard(l) => {
            if l.height() != pred.height() || l.width() != pred.width() {
                return Err(Error::shape(
                    &[pred.height(), pred.width()],
                    &[l.height(), l.width()],
                ));
            }
            l.validate(k)?;
        }
        CeTarget::Soft(t) => t.tensor().expect_shape(pred.tensor().shape())?,
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::shape(&[n], &[m.len()]));
        }
    }
    let d = pred.data();
    let mut total = T::zero();
    let mut count = 0usize;
    for p in 0..n {
        if mask.is_some_and(|m| !m[p]) {
            continue;
        }
        count += 1;
        match target {
            CeTarget::Hard(l) => {
                total -= d[l.data()[p] as usize * n + p].max(eps).ln();
            }
            CeTarget::Soft(t) => {
                let td = t.data();
                for c in 0..k {
                    let w = td[c * n + p];
                    if w != T::zero() {
                        total -= w * d[c * n + p].max(eps).ln();
                    }
                }
            }
        }
    }
    if count == 0 {
        return Ok(T::zero());
    }
    Ok(total / T::lit(count as f64))
}

fn check_simplex<T: Scalar>(v: &[T], name: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Domain(format!("{name} is empty")));
    }
    let tol = simplex_tol::<T>();
    let mut s = T::zero();
    for (i, &x) in v.iter().enumerate() {
        if !(x >= -tol) {
            return Err(Error::Domain(format!("{name}[{i}] = {x} is negative")));
        }
        s += x;
    }
    if (s - T::one()).abs() > tol {
        return Err(Error::Domain(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// `Σ p ln(p/q)` without validation; `q` is clamped below by [`PROB_EPS`].
#[inline]
pub(crate) fn kl_unchecked<T: Scalar>(p: &[T], q: &[T]) -> T {
    let eps = T::lit(PROB_EPS);
    let mut s = T::zero();
    for (&a, &b) in p.iter().zip(q) {
        if a > T::zero() {
            s += a * (a.max(eps).ln() - b.max(eps).ln());
        }
    }
    s
}

/// Jensen–Shannon divergence (natural log) without validation.
#[inline]
pub(crate) fn js_unchecked<T: Scalar>(p: &[T], q: &[T]) -> T {
    let half = T::lit(0.5);
    let m: Vec<T> = p.iter().zip(q).map(|(&a, &b)| (a + b) * half).collect();
    half * kl_unchecked(p, &m) + half * kl_unchecked(q, &m)
}

pub fn kl_div<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::shape(&[p.len()], &[q.len()]));
    }
    check_simplex(p, "p")?;
    check_simplex(q, "q")?;
    Ok(kl_unchecked(p, q))
}

pub fn js_div<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::shape(&[p.len()], &[q.len()]));
    }
    check_simplex(p, "p")?;
    check_simplex(q, "q")?;
    Ok(js_unchecked(p, q))
}

/// `decay·old + (1−decay)·new`, elementwise.
pub fn ema_blend<T: Scalar>(old: &Tensor<T>, new: &Tensor<T>, decay: T) -> Result<Tensor<T>> {
    old.expect_shape(new.shape())?;
    if !(decay >= T::zero() && decay <= T::one()) {
        return Err(Error::InvalidArgument(format!(
            "EMA decay {decay} outside [0, 1]"
        )));
    }
    let keep = T::one() - decay;
    let data = old
        .data()
        .iter()
        .zip(new.data())
        .map(|(&o, &n)| decay * o + keep * n)
        .collect();
    Tensor::from_vec(old.shape(), data)
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn argmax_map<T: Scalar>(p: &ProbMap<T>) -> LabelMap {
    let (k, n) = (p.classes(), p.num_pixels());
    let d = p.data();
    let labels = (0..n)
        .map(|px| {
            let mut best = 0usize;
            for c in 1..k {
                if d[c * n + px] > d[best * n + px] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap {
        height: p.height(),
        width: p.width(),
        data: labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_closed_forms() {
        let t = Tensor::from_vec(&[2], vec![0.0f64, 0.0]).unwrap();
        assert_eq!(softmax(&t, 0).unwrap().data(), &[0.5, 0.5]);

        let t = Tensor::from_vec(&[2], vec![1.0f64.ln(), 3.0f64.ln()]).unwrap();
        let s = softmax(&t, 0).unwrap();
        assert!(close(s.data()[0], 0.25, 1e-15));
        assert!(close(s.data()[1], 0.75, 1e-15));
    }

    #[test]
    fn softmax_along_inner_axis_leaves_other_rows_alone() {
        let t = Tensor::from_vec(&[2, 2], vec![0.0f64, 0.0, 1.0f64.ln(), 3.0f64.ln()]).unwrap();
        let s = softmax(&t, 1).unwrap();
        assert!(close(s.data()[0], 0.5, 1e-15));
        assert!(close(s.data()[3], 0.75, 1e-15));
    }

    #[test]
    fn softmax_rejects_bad_axis_and_nan() {
        let t = Tensor::from_vec(&[2], vec![0.0f64, f64::NAN]).unwrap();
        assert!(matches!(softmax(&t, 0), Err(Error::NonFiniteInput(_))));
        assert!(softmax(&t, 1).is_err());
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let pred = ProbMap::new(Tensor::from_vec(&[2, 1, 1], vec![0.9f64, 0.1]).unwrap()).unwrap();
        let y = LabelMap::filled(1, 1, 0);
        let ce = cross_entropy(&pred, CeTarget::Hard(&y), None).unwrap();
        assert!(close(ce, 0.1053605156578263, 1e-12));

        let u = ProbMap::<f64>::uniform(4, 3, 3);
        let y = LabelMap::filled(3, 3, 2);
        let ce = cross_entropy(&u, CeTarget::Hard(&y), None).unwrap();
        assert!(close(ce, 4f64.ln(), 1e-12));

        let ce = cross_entropy(&pred, CeTarget::Soft(&pred), None).unwrap();
        let h = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!(close(ce, h, 1e-15));
    }

    #[test]
    fn cross_entropy_mask_and_shape_errors() {
        let pred = ProbMap::<f64>::uniform(2, 1, 2);
        let y = LabelMap::filled(1, 2, 0);
        let ce = cross_entropy(&pred, CeTarget::Hard(&y), Some(&[false, false])).unwrap();
        assert_eq!(ce, 0.0);
        let bad = LabelMap::filled(2, 2, 0);
        assert!(matches!(
            cross_entropy(&pred, CeTarget::Hard(&bad), None),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn kl_and_js_closed_forms() {
        assert_eq!(kl_div(&[0.3f64, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!(close(kl_div(&[1.0f64, 0.0], &[0.5, 0.5]).unwrap(), 2f64.ln(), 1e-15));
        assert!(close(js_div(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 2f64.ln(), 1e-15));
        assert_eq!(js_div(&[0.2f64, 0.8], &[0.2, 0.8]).unwrap(), 0.0);

        // Direct evaluation: KL((.75,.25)||(.25,.75)) = .5 ln 3.
        let kl = kl_div(&[0.75f64, 0.25], &[0.25, 0.75]).unwrap();
        assert!(close(kl, 0.5 * 3f64.ln(), 1e-15));
        // m = (.5,.5): JS = .75 ln 1.5 + .25 ln .5.
        let js = js_div(&[0.75f64, 0.25], &[0.25, 0.75]).unwrap();
        assert!(close(js, 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln(), 1e-15));
    }

    #[test]
    fn divergences_reject_non_simplex() {
        assert!(matches!(kl_div(&[0.5f64, 0.6], &[0.5, 0.5]), Err(Error::Domain(_))));
        assert!(matches!(js_div(&[1.2f64, -0.2], &[0.5, 0.5]), Err(Error::Domain(_))));
    }

    #[test]
    fn ema_endpoints() {
        let old = Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap();
        let new = Tensor::from_vec(&[2], vec![0.0f64, 5.0]).unwrap();
        assert_eq!(ema_blend(&old, &new, 1.0).unwrap(), old);
        assert_eq!(ema_blend(&old, &new, 0.0).unwrap(), new);
        assert!(close(ema_blend(&old, &new, 0.999).unwrap().data()[0], 0.999, 1e-15));
        let wrong = Tensor::<f64>::zeros(&[3]);
        assert!(matches!(ema_blend(&old, &wrong, 0.5), Err(Error::Shape { .. })));
    }

    #[test]
    fn argmax_ties_and_fixed_points() {
        let p = ProbMap::new(Tensor::from_vec(&[2, 1, 2], vec![0.2f64, 0.5, 0.8, 0.5]).unwrap())
            .unwrap();
        assert_eq!(argmax_map(&p).data(), &[1, 0]);
        let y = LabelMap::from_vec(2, 2, vec![0, 2, 1, 2]).unwrap();
        let oh = ProbMap::<f64>::one_hot(&y, 3).unwrap();
        assert_eq!(argmax_map(&oh), y);
    }

    #[test]
    fn generic_over_f32() {
        let t = Tensor::from_vec(&[2], vec![1.0f32.ln(), 3.0f32.ln()]).unwrap();
        let s = softmax(&t, 0).unwrap();
        assert!((s.data()[1] - 0.75).abs() < 1e-6);
        let js = js_div(&[1.0f32, 0.0], &[0.0, 1.0]).unwrap();
        assert!((js - 2f32.ln()).abs() < 1e-6);
    }

    fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, k).prop_map(|v| {
            let s: f64 = v.iter().sum::<f64>() + 1e-300;
            if s < 1e-12 {
                let mut u = vec![0.0; v.len()];
                u[0] = 1.0;
                u
            } else {
                v.iter().map(|x| x / s).collect()
            }
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_normalized_and_shift_invariant(
            v in proptest::collection::vec(-30.0f64..30.0, 2..9),
            shift in -50.0f64..50.0,
        ) {
            let t = Tensor::from_vec(&[v.len()], v.clone()).unwrap();
            let s = softmax(&t, 0).unwrap();
            let sum: f64 = s.data().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(s.data().iter().all(|&x| x > 0.0));
            let shifted = t.map(|x| x + shift);
            let s2 = softmax(&shifted, 0).unwrap();
            for (a, b) in s.data().iter().zip(s2.data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn js_symmetric_and_bounded((p, q) in (2usize..9).prop_flat_map(|k| (simplex(k), simplex(k)))) {
            let a = js_div(&p, &q).unwrap();
            let b = js_div(&q, &p).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!(a >= 0.0 && a <= 2f64.ln() + 1e-12);
            prop_assert!(kl_div(&p, &q).unwrap() >= -1e-12);
        }

        #[test]
        fn self_entropy_bounded(logits in proptest::collection::vec(-5.0f64..5.0, 12)) {
            let t = Tensor::from_vec(&[3, 2, 2], logits).unwrap();
            let p = ProbMap::from_logits(&t).unwrap();
            let h = cross_entropy(&p, CeTarget::Soft(&p), None).unwrap();
            prop_assert!(h >= 0.0 && h <= 3f64.ln() + 1e-12);
        }

        #[test]
        fn ema_twice_is_squared_decay(
            old in proptest::collection::vec(-10.0f64..10.0, 5),
            new in proptest::collection::vec(-10.0f64..10.0, 5),
            d in 0.0f64..=1.0,
        ) {
            let o = Tensor::from_vec(&[5], old).unwrap();
            let n = Tensor::from_vec(&[5], new).unwrap();
            let twice = ema_blend(&ema_blend(&o, &n, d).unwrap(), &n, d).unwrap();
            let once = ema_blend(&o, &n, d * d).unwrap();
            for (a, b) in twice.data().iter().zip(once.data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
