//! Interval arithmetic and interval bound propagation through networks.
//!
//! Bounds are sound in real arithmetic. No outward rounding is performed, so a bound computed
//! in floating point may be off by accumulated rounding error (a few ulps per operation). Every
//! entry point that matters to the verifier accepts an additive `slack` that widens the result
//! when extra conservatism is wanted.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::nn::{Activation, Mlp};
use crate::scalar::{softplus, Scalar};
use crate::{Error, Result};

/// A closed interval `[lo, hi]` with finite endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Interval<S: Scalar> {
    pub lo: S,
    pub hi: S,
}

impl<S: Scalar> Interval<S> {
    pub fn new(lo: S, hi: S) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::InvalidInterval {
                lo: lo.as_f64(),
                hi: hi.as_f64(),
            });
        }
        Ok(Self { lo, hi })
    }

    /// Builds an interval from two endpoints in either order.
    #[inline]
    pub fn hull_of(a: S, b: S) -> Self {
        if a <= b {
            Self { lo: a, hi: b }
        } else {
            Self { lo: b, hi: a }
        }
    }

    #[inline]
    pub fn point(x: S) -> Self {
        Self { lo: x, hi: x }
    }

    #[inline]
    pub fn width(&self) -> S {
        self.hi - self.lo
    }

    #[inline]
    pub fn mid(&self) -> S {
        self.lo + (self.hi - self.lo) * S::half()
    }

    #[inline]
    pub fn contains(&self, x: S) -> bool {
        self.lo <= x && x <= self.hi
    }

    #[inline]
    pub fn is_subset_of(&self, other: &Self) -> bool {
        other.lo <= self.lo && self.hi <= other.hi
    }

    /// Largest absolute value attained on the interval.
    #[inline]
    pub fn mag(&self) -> S {
        self.lo.abs().max(self.hi.abs())
    }

    /// Smallest interval containing both operands.
    #[inline]
    pub fn hull(&self, other: &Self) -> Self {
        Self {
            lo: self.lo.min(other.lo),
            hi: self.hi.max(other.hi),
        }
    }

    #[inline]
    pub fn intersects(&self, other: &Self) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }

    #[inline]
    pub fn add(&self, other: &Self) -> Self {
        Self {
            lo: self.lo + other.lo,
            hi: self.hi + other.hi,
        }
    }

    #[inline]
    pub fn sub(&self, other: &Self) -> Self {
        Self {
            lo: self.lo - other.hi,
            hi: self.hi - other.lo,
        }
    }

    #[inline]
    pub fn shift(&self, c: S) -> Self {
        Self {
            lo: self.lo + c,
            hi: self.hi + c,
        }
    }

    #[inline]
    pub fn scale(&self, c: S) -> Self {
        Self::hull_of(self.lo * c, self.hi * c)
    }

    #[inline]
    pub fn mul(&self, other: &Self) -> Self {
        let p = [
            self.lo * other.lo,
            self.lo * other.hi,
            self.hi * other.lo,
            self.hi * other.hi,
        ];
        let (mut lo, mut hi) = (p[0], p[0]);
        for &v in &p[1..] {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        Self { lo, hi }
    }

    /// Widens both endpoints by `slack >= 0`.
    #[inline]
    pub fn widen(&self, slack: S) -> Self {
        Self {
            lo: self.lo - slack,
            hi: self.hi + slack,
        }
    }

    /// Image under a nondecreasing map.
    #[inline]
    pub fn map_monotone(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            lo: f(self.lo),
            hi: f(self.hi),
        }
    }

    /// `[max(lo, a), min(hi, b)]`, collapsed onto the nearer bound when the interval lies
    /// entirely outside `[a, b]`.
    #[inline]
    pub fn clamp(&self, a: S, b: S) -> Self {
        let lo = self.lo.max(a).min(b);
        let hi = self.hi.min(b).max(a);
        Self { lo, hi }
    }

    /// Exact range of `sin` over the interval.
    pub fn sin(&self) -> Self {
        range_periodic(self, S::FRAC_PI_2(), -S::FRAC_PI_2(), S::sin)
    }

    /// Exact range of `cos` over the interval.
    pub fn cos(&self) -> Self {
        range_periodic(self, S::zero(), S::PI(), S::cos)
    }
}

/// Range of a 2π-periodic function whose only interior extrema over one period are a maximum
/// at `argmax` and a minimum at `argmin` (both taken modulo 2π).
fn range_periodic<S: Scalar>(iv: &Interval<S>, argmax: S, argmin: S, f: fn(S) -> S) -> Interval<S> {
    let two_pi = S::two() * S::PI();
    if iv.width() >= two_pi {
        return Interval {
            lo: -S::one(),
            hi: S::one(),
        };
    }
    let (a, b) = (f(iv.lo), f(iv.hi));
    let mut lo = a.min(b);
    let mut hi = a.max(b);
    let hits = |c: S| {
        let k = ((iv.lo - c) / two_pi).ceil();
        c + k * two_pi <= iv.hi
    };
    if hits(argmax) {
        hi = S::one();
    }
    if hits(argmin) {
        lo = -S::one();
    }
    Interval { lo, hi }
}

/// An axis-aligned box: one [`Interval`] per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct IntervalBox<S: Scalar>(Vec<Interval<S>>);

impl<S: Scalar> IntervalBox<S> {
    pub fn new(dims: Vec<Interval<S>>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::dims("IntervalBox::new", 1, 0));
        }
        for iv in &dims {
            Interval::new(iv.lo, iv.hi)?;
        }
        Ok(Self(dims))
    }

    /// Builds a box from per-dimension lower and upper corners.
    pub fn from_corners(lo: &[S], hi: &[S]) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::dims("IntervalBox::from_corners", lo.len(), hi.len()));
        }
        Self::new(lo.iter().zip(hi).map(|(&l, &h)| Interval { lo: l, hi: h }).collect())
    }

    /// Convenience constructor from `(lo, hi)` pairs; panics on invalid input.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        Self::new(
            pairs
                .iter()
                .map(|&(l, h)| Interval {
                    lo: S::lit(l),
                    hi: S::lit(h),
                })
                .collect(),
        )
        .expect("valid box")
    }

    pub fn point(x: &[S]) -> Self {
        assert!(!x.is_empty(), "empty point");
        Self(x.iter().map(|&v| Interval::point(v)).collect())
    }

    #[allow(dead_code)]
    pub(crate) fn from_vec_unchecked(dims: Vec<Interval<S>>) -> Self {
        Self(dims)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn intervals(&self) -> &[Interval<S>] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Interval<S>> {
        self.0.iter()
    }

    pub fn lo(&self) -> Vec<S> {
        self.0.iter().map(|iv| iv.lo).collect()
    }

    pub fn hi(&self) -> Vec<S> {
        self.0.iter().map(|iv| iv.hi).collect()
    }

    pub fn center(&self) -> Vec<S> {
        self.0.iter().map(Interval::mid).collect()
    }

    pub fn widths(&self) -> Vec<S> {
        self.0.iter().map(Interval::width).collect()
    }

    pub fn volume(&self) -> S {
        self.0.iter().fold(S::one(), |acc, iv| acc * iv.width())
    }

    pub fn contains(&self, x: &[S]) -> bool {
        x.len() == self.dim() && self.0.iter().zip(x).all(|(iv, &v)| iv.contains(v))
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.dim() == other.dim() && self.0.iter().zip(&other.0).all(|(a, b)| a.is_subset_of(b))
    }

    pub fn intersects(&self, other: &Self) -> bool {
        self.dim() == other.dim() && self.0.iter().zip(&other.0).all(|(a, b)| a.intersects(b))
    }

    /// Componentwise clamp of a point into the box.
    pub fn clamp_point(&self, x: &mut [S]) {
        for (v, iv) in x.iter_mut().zip(&self.0) {
            *v = v.max(iv.lo).min(iv.hi);
        }
    }

    /// Componentwise clamp of another box into this one.
    pub fn clamp_box(&self, other: &Self) -> Self {
        Self(other.0.iter().zip(&self.0).map(|(o, b)| o.clamp(b.lo, b.hi)).collect())
    }

    pub fn widen(&self, slack: S) -> Self {
        Self(self.0.iter().map(|iv| iv.widen(slack)).collect())
    }

    /// Concatenation of two boxes (product set).
    pub fn concat(&self, other: &Self) -> Self {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        Self(v)
    }
}

impl<S: Scalar> std::ops::Index<usize> for IntervalBox<S> {
    type Output = Interval<S>;

    fn index(&self, i: usize) -> &Interval<S> {
        &self.0[i]
    }
}

/// Elementwise operations that can be propagated through intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp<S: Scalar> {
    Relu,
    Tanh,
    Softplus,
    Identity,
    Sin,
    Cos,
    Clamp(S, S),
}

impl<S: Scalar> From<Activation> for ElementwiseOp<S> {
    fn from(act: Activation) -> Self {
        match act {
            Activation::Relu => ElementwiseOp::Relu,
            Activation::Tanh => ElementwiseOp::Tanh,
            Activation::Softplus => ElementwiseOp::Softplus,
            Activation::Identity => ElementwiseOp::Identity,
        }
    }
}

impl<S: Scalar> ElementwiseOp<S> {
    pub fn apply_interval(&self, iv: &Interval<S>) -> Interval<S> {
        match *self {
            ElementwiseOp::Relu => iv.map_monotone(|v| v.max(S::zero())),
            ElementwiseOp::Tanh => iv.map_monotone(S::tanh),
            ElementwiseOp::Softplus => iv.map_monotone(softplus),
            ElementwiseOp::Identity => *iv,
            ElementwiseOp::Sin => iv.sin(),
            ElementwiseOp::Cos => iv.cos(),
            ElementwiseOp::Clamp(a, b) => iv.clamp(a, b),
        }
    }
}

/// Interval image of `x ↦ Wx + b` over a box, with `W` stored as `(out, in)`.
pub fn affine_prop<S: Scalar>(
    w: ArrayView2<'_, S>,
    b: ArrayView1<'_, S>,
    input: &IntervalBox<S>,
) -> Result<IntervalBox<S>> {
    let (rows, cols) = w.dim();
    if cols != input.dim() {
        return Err(Error::dims("affine_prop (input)", cols, input.dim()));
    }
    if b.len() != rows {
        return Err(Error::dims("affine_prop (bias)", rows, b.len()));
    }
    let out = w
        .outer_iter()
        .zip(b.iter())
        .map(|(row, &bj)| {
            let (mut lo, mut hi) = (bj, bj);
            for (&wji, iv) in row.iter().zip(input.iter()) {
                if wji >= S::zero() {
                    lo += wji * iv.lo;
                    hi += wji * iv.hi;
                } else {
                    lo += wji * iv.hi;
                    hi += wji * iv.lo;
                }
            }
            Interval { lo, hi }
        })
        .collect();
    Ok(IntervalBox(out))
}

/// Applies an elementwise operation to every component of a box.
pub fn activation_prop<S: Scalar>(op: ElementwiseOp<S>, input: &IntervalBox<S>) -> IntervalBox<S> {
    IntervalBox(input.iter().map(|iv| op.apply_interval(iv)).collect())
}

/// Two-sided output bounds of a network over an input box.
pub fn net_bounds<S: Scalar>(net: &Mlp<S>, input: &IntervalBox<S>) -> Result<IntervalBox<S>> {
    if input.dim() != net.input_dim() {
        return Err(Error::dims("net_bounds", net.input_dim(), input.dim()));
    }
    let mut cur = input.clone();
    for layer in net.layers() {
        cur = affine_prop(layer.weights().view(), layer.bias().view(), &cur)?;
        cur = activation_prop(layer.activation().into(), &cur);
    }
    Ok(cur)
}

/// [`net_bounds`] followed by an additive widening of every output interval.
pub fn net_bounds_with_slack<S: Scalar>(net: &Mlp<S>, input: &IntervalBox<S>, slack: S) -> Result<IntervalBox<S>> {
    Ok(net_bounds(net, input)?.widen(slack))
}

/// A batch of boxes in midpoint/radius form, one box per row.
///
/// This is the representation used on the verifier's hot path: an affine layer maps
/// `(mid, rad)` to `(mid·Wᵀ + b, rad·|W|ᵀ)`, which is two matrix products per layer and denotes
/// the same real interval as [`affine_prop`].
#[derive(Debug, Clone)]
pub struct BoxBatch<S: Scalar> {
    pub mid: Array2<S>,
    pub rad: Array2<S>,
}

impl<S: Scalar> BoxBatch<S> {
    pub fn with_capacity(rows: usize, dim: usize) -> Self {
        Self {
            mid: Array2::zeros((rows, dim)),
            rad: Array2::zeros((rows, dim)),
        }
    }

    pub fn from_boxes(boxes: &[IntervalBox<S>]) -> Self {
        let dim = boxes.first().map_or(0, IntervalBox::dim);
        let mut out = Self::with_capacity(boxes.len(), dim);
        for (r, bx) in boxes.iter().enumerate() {
            out.set_row(r, bx);
        }
        out
    }

    pub fn set_row(&mut self, r: usize, bx: &IntervalBox<S>) {
        for (d, iv) in bx.iter().enumerate() {
            self.mid[(r, d)] = iv.mid();
            self.rad[(r, d)] = iv.width() * S::half();
        }
    }

    pub fn rows(&self) -> usize {
        self.mid.nrows()
    }

    pub fn lo(&self, r: usize, d: usize) -> S {
        self.mid[(r, d)] - self.rad[(r, d)]
    }

    pub fn hi(&self, r: usize, d: usize) -> S {
        self.mid[(r, d)] + self.rad[(r, d)]
    }

    pub fn row(&self, r: usize) -> IntervalBox<S> {
        IntervalBox(
            (0..self.mid.ncols())
                .map(|d| Interval {
                    lo: self.lo(r, d),
                    hi: self.hi(r, d),
                })
                .collect(),
        )
    }
}

fn monotone_batch<S: Scalar>(batch: &mut BoxBatch<S>, f: impl Fn(S) -> S + Sync) {
    Zip::from(&mut batch.mid).and(&mut batch.rad).for_each(|m, r| {
        let lo = f(*m - *r);
        let hi = f(*m + *r);
        *m = (lo + hi) * S::half();
        *r = (hi - lo) * S::half();
    });
}

/// Batched [`net_bounds`]: propagates every row of `input` through `net`.
pub fn net_bounds_batch<S: Scalar>(net: &Mlp<S>, input: &BoxBatch<S>) -> Result<BoxBatch<S>> {
    if input.mid.ncols() != net.input_dim() {
        return Err(Error::dims("net_bounds_batch", net.input_dim(), input.mid.ncols()));
    }
    let mut mid = input.mid.clone();
    let mut rad = input.rad.clone();
    for layer in net.layers() {
        let w = layer.weights();
        let abs_w = w.mapv(S::abs);
        let mut next_mid = mid.dot(&w.t());
        next_mid += &layer.bias().view().insert_axis(Axis(0));
        let next_rad = rad.dot(&abs_w.t());
        let mut out = BoxBatch {
            mid: next_mid,
            rad: next_rad,
        };
        match layer.activation() {
            Activation::Identity => {}
            Activation::Relu => monotone_batch(&mut out, |v| v.max(S::zero())),
            Activation::Tanh => monotone_batch(&mut out, S::tanh),
            Activation::Softplus => monotone_batch(&mut out, softplus),
        }
        mid = out.mid;
        rad = out.rad;
    }
    Ok(BoxBatch { mid, rad })
}

/// Lower and upper bounds of a scalar-output network for each row of `input`.
pub fn scalar_bounds_batch<S: Scalar>(net: &Mlp<S>, input: &BoxBatch<S>) -> Result<(Array1<S>, Array1<S>)> {
    if net.output_dim() != 1 {
        return Err(Error::dims("scalar_bounds_batch (output)", 1, net.output_dim()));
    }
    let out = net_bounds_batch(net, input)?;
    let mid = out.mid.column(0);
    let rad = out.rad.column(0);
    Ok((&mid - &rad, &mid + &rad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn iv(lo: f64, hi: f64) -> Interval<f64> {
        Interval::new(lo, hi).unwrap()
    }

    #[test]
    fn affine_examples() {
        let out = affine_prop(
            array![[2.0]].view(),
            array![1.0].view(),
            &IntervalBox::from_pairs(&[(0.0, 1.0)]),
        )
        .unwrap();
        assert_eq!(out[0], iv(1.0, 3.0));

        let out = affine_prop(
            array![[1.0, -1.0]].view(),
            array![0.0].view(),
            &IntervalBox::from_pairs(&[(0.0, 1.0), (0.0, 1.0)]),
        )
        .unwrap();
        assert_eq!(out[0], iv(-1.0, 1.0));
    }

    #[test]
    fn affine_rejects_bad_dims() {
        let err = affine_prop(
            array![[1.0, 2.0]].view(),
            array![0.0].view(),
            &IntervalBox::from_pairs(&[(0.0, 1.0)]),
        );
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn activation_examples() {
        let relu = activation_prop(ElementwiseOp::Relu, &IntervalBox::<f64>::from_pairs(&[(-1.0, 2.0)]));
        assert_eq!(relu[0], iv(0.0, 2.0));

        let s = activation_prop(ElementwiseOp::Sin, &IntervalBox::<f64>::from_pairs(&[(0.0, PI)]));
        assert_eq!(s[0].hi, 1.0);
        assert!(s[0].lo.abs() < 1e-15);

        let sp = activation_prop(ElementwiseOp::Softplus, &IntervalBox::from_pairs(&[(0.0, 0.0)]));
        assert_eq!(sp[0], iv(2f64.ln(), 2f64.ln()));
    }

    #[test]
    fn sin_cos_cover_interior_extrema() {
        assert_eq!(iv(-0.1, 0.1).sin(), iv((-0.1f64).sin(), 0.1f64.sin()));
        assert_eq!(iv(3.0 * PI / 2.0 - 0.1, 3.0 * PI / 2.0 + 0.1).sin().lo, -1.0);
        assert_eq!(iv(-7.0, 0.0).sin(), iv(-1.0, 1.0));
        assert_eq!(iv(-0.2, 0.3).cos().hi, 1.0);
        assert_eq!(iv(PI - 0.01, PI + 0.01).cos().lo, -1.0);
        assert_eq!(iv(0.0, 10.0).cos(), iv(-1.0, 1.0));
    }

    #[test]
    fn periodic_ranges_contain_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let a = rng.gen_range(-10.0..10.0);
            let w = rng.gen_range(0.0..7.0);
            let x = iv(a, a + w);
            let (s, c) = (x.sin(), x.cos());
            for k in 0..=50 {
                let t = a + w * k as f64 / 50.0;
                assert!(s.widen(1e-12).contains(t.sin()), "sin {t} not in {s:?}");
                assert!(c.widen(1e-12).contains(t.cos()), "cos {t} not in {c:?}");
            }
        }
    }

    #[test]
    fn clamp_keeps_order() {
        assert_eq!(iv(-3.0, 0.5).clamp(-1.0, 1.0), iv(-1.0, 0.5));
        assert_eq!(iv(2.0, 3.0).clamp(-1.0, 1.0), iv(1.0, 1.0));
        assert_eq!(iv(-5.0, -2.0).clamp(-1.0, 1.0), iv(-1.0, -1.0));
    }

    #[test]
    fn interval_rejects_inverted_bounds() {
        assert!(Interval::new(1.0, 0.0).is_err());
        assert!(Interval::new(0.0, f64::NAN).is_err());
        assert!(IntervalBox::<f64>::new(vec![]).is_err());
    }

    #[test]
    fn batch_agrees_with_endpoint_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::<f64>::random(&[3, 8, 8, 2], Activation::Relu, Activation::Tanh, &mut rng);
        let boxes: Vec<_> = (0..20)
            .map(|_| {
                let lo: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let hi: Vec<f64> = lo.iter().map(|l| l + rng.gen_range(0.0..0.5)).collect();
                IntervalBox::from_corners(&lo, &hi).unwrap()
            })
            .collect();
        let batch = net_bounds_batch(&net, &BoxBatch::from_boxes(&boxes)).unwrap();
        for (r, bx) in boxes.iter().enumerate() {
            let single = net_bounds(&net, bx).unwrap();
            for d in 0..2 {
                assert!((batch.lo(r, d) - single[d].lo).abs() < 1e-12);
                assert!((batch.hi(r, d) - single[d].hi).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_net_bounds_are_exact() {
        let net = Mlp::<f64>::new(vec![
            Layer::new(array![[1.0]], array![0.0], Activation::Identity).unwrap()
        ])
        .unwrap();
        let out = net_bounds(&net, &IntervalBox::from_pairs(&[(-1.0, 1.0)])).unwrap();
        assert_eq!(out[0], iv(-1.0, 1.0));
    }
}
