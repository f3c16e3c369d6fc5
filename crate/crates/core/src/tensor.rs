//! Dense row-major tensors and the handful of numeric kernels the probe needs.
//!
//! Precision is chosen by the element type: training runs on `f32`, gradient
//! verification instantiates the same code with `f64`.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type usable in tensors and probe math.
pub trait Scalar: Float + Debug + Default + Send + Sync + 'static {
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, rejecting shape/length disagreement and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }

    /// Element-wise `a * self + b * other`.
    pub fn axpby(&self, a: T, other: &Tensor<T>, b: T) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| a * x + b * y)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::invalid(format!(
                "expected an H x W x C tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Align-corners bilinear resampling of an `H' x W' x C` tensor to
    /// `out_h x out_w x C`.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let (in_h, in_w, c) = self.dims3()?;
        if in_h == 0 || in_w == 0 {
            return Err(Error::invalid("cannot resize an empty grid"));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid(format!(
                "target size must be positive, got {out_h}x{out_w}"
            )));
        }
        if (in_h, in_w) == (out_h, out_w) {
            return Ok(self.clone());
        }
        let rows = AxisSampler::new(in_h, out_h);
        let cols = AxisSampler::new(in_w, out_w);
        let mut out = vec![T::zero(); out_h * out_w * c];
        let mut blended = vec![T::zero(); in_w * c];
        for (oy, ry) in rows.taps().iter().enumerate() {
            let wy = T::of_f64(ry.frac);
            let top = &self.data[ry.lo * in_w * c..(ry.lo + 1) * in_w * c];
            let bottom = &self.data[ry.hi * in_w * c..(ry.hi + 1) * in_w * c];
            for ((b, &t), &u) in blended.iter_mut().zip(top).zip(bottom) {
                *b = lerp(t, u, wy);
            }
            let out_row = &mut out[oy * out_w * c..(oy + 1) * out_w * c];
            for (ox, rx) in cols.taps().iter().enumerate() {
                let wx = T::of_f64(rx.frac);
                let left = &blended[rx.lo * c..(rx.lo + 1) * c];
                let right = &blended[rx.hi * c..(rx.hi + 1) * c];
                for (k, o) in out_row[ox * c..(ox + 1) * c].iter_mut().enumerate() {
                    *o = lerp(left[k], right[k], wx);
                }
            }
        }
        Ok(Tensor {
            shape: vec![out_h, out_w, c],
            data: out,
        })
    }

    /// Transpose of [`Tensor::bilinear_resize`]: maps a gradient over the
    /// `H x W x C` output back onto the `in_h x in_w x C` input grid.
    pub fn bilinear_resize_adjoint(&self, in_h: usize, in_w: usize) -> Result<Tensor<T>> {
        let (out_h, out_w, c) = self.dims3()?;
        if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::invalid("adjoint resize needs non-empty grids"));
        }
        if (in_h, in_w) == (out_h, out_w) {
            return Ok(self.clone());
        }
        let rows = AxisSampler::new(in_h, out_h);
        let cols = AxisSampler::new(in_w, out_w);
        let mut grad = vec![T::zero(); in_h * in_w * c];
        let mut row_acc = vec![T::zero(); in_w * c];
        for (oy, ry) in rows.taps().iter().enumerate() {
            row_acc.iter_mut().for_each(|v| *v = T::zero());
            let g_row = &self.data[oy * out_w * c..(oy + 1) * out_w * c];
            for (ox, rx) in cols.taps().iter().enumerate() {
                let wx = T::of_f64(rx.frac);
                for k in 0..c {
                    let g = g_row[ox * c + k];
                    row_acc[rx.lo * c + k] = row_acc[rx.lo * c + k] + (T::one() - wx) * g;
                    row_acc[rx.hi * c + k] = row_acc[rx.hi * c + k] + wx * g;
                }
            }
            let wy = T::of_f64(ry.frac);
            for (j, &acc) in row_acc.iter().enumerate() {
                let lo = ry.lo * in_w * c + j;
                let hi = ry.hi * in_w * c + j;
                grad[lo] = grad[lo] + (T::one() - wy) * acc;
                grad[hi] = grad[hi] + wy * acc;
            }
        }
        Ok(Tensor {
            shape: vec![in_h, in_w, c],
            data: grad,
        })
    }
}

#[inline]
fn lerp<T: Scalar>(a: T, b: T, w: T) -> T {
    a + w * (b - a)
}

/// One output coordinate's pair of source indices and the weight of `hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Precomputed align-corners sampling positions along one axis.
///
/// Output index `o` maps to source coordinate `o * (in - 1) / (out - 1)`, so the
/// first and last samples land exactly on the first and last source cells.
#[derive(Debug, Clone)]
pub struct AxisSampler {
    taps: Vec<Tap>,
}

impl AxisSampler {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let taps = (0..out_len)
            .map(|o| {
                if in_len <= 1 || out_len <= 1 {
                    return Tap {
                        lo: 0,
                        hi: 0,
                        frac: 0.0,
                    };
                }
                let num = o * (in_len - 1);
                let den = out_len - 1;
                let lo = num / den;
                let rem = num % den;
                if rem == 0 || lo + 1 >= in_len {
                    Tap {
                        lo,
                        hi: lo,
                        frac: 0.0,
                    }
                } else {
                    Tap {
                        lo,
                        hi: lo + 1,
                        frac: rem as f64 / den as f64,
                    }
                }
            })
            .collect();
        Self { taps }
    }

    pub fn taps(&self) -> &[Tap] {
        &self.taps
    }
}

/// Numerically stable `log(sum(exp(v)))`.
pub fn logsumexp<T: Scalar>(v: &[T]) -> T {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let sum = v.iter().fold(T::zero(), |acc, &x| acc + (x - max).exp());
    max + sum.ln()
}

/// Softmax with max-subtraction.
pub fn softmax<T: Scalar>(v: &[T]) -> Vec<T> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t3(h: usize, w: usize, c: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![h, w, c], data).unwrap()
    }

    #[test]
    fn constant_single_cell_fills_target() {
        let t = Tensor::new(vec![1, 1, 1], vec![5.0f32]).unwrap();
        let r = t.bilinear_resize(4, 4).unwrap();
        assert_eq!(r.shape(), &[4, 4, 1]);
        assert!(r.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn two_by_two_to_three_by_three() {
        let t = t3(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]);
        let r = t.bilinear_resize(3, 3).unwrap();
        let expected = [0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0];
        for (a, b) in r.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn same_size_resize_is_bitwise_identity() {
        let data: Vec<f32> = (0..24).map(|i| (i as f32 * 0.37).sin()).collect();
        let t = Tensor::new(vec![2, 3, 4], data).unwrap();
        assert_eq!(t.bilinear_resize(2, 3).unwrap(), t);
    }

    #[test]
    fn zero_target_is_rejected() {
        let t = t3(1, 1, 1, vec![1.0]);
        assert!(matches!(
            t.bilinear_resize(0, 3),
            Err(Error::InvalidArgument(_))
        ));
        assert!(t.bilinear_resize(3, 0).is_err());
    }

    #[test]
    fn constructor_rejects_nan_and_bad_length() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0f32, f32::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(Tensor::new(vec![2, 2], vec![1.0f32; 3]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0f64, 0.0, 0.0]);
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let p = softmax(&[2f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax(&[1000.0f32, 0.0, -1000.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_and_softplus_are_stable() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0f64) - 800.0).abs() < 1e-12);
    }

    #[test]
    fn adjoint_matches_dense_transpose() {
        // <resize(x), g> == <x, adjoint(g)> for random x, g
        let x = t3(3, 2, 2, (0..12).map(|i| (i as f64 * 1.3).cos()).collect());
        let g = t3(5, 4, 2, (0..40).map(|i| (i as f64 * 0.7).sin()).collect());
        let lhs: f64 = x
            .bilinear_resize(5, 4)
            .unwrap()
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| a * b)
            .sum();
        let adj = g.bilinear_resize_adjoint(3, 2).unwrap();
        let rhs: f64 = x.data().iter().zip(adj.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    fn grid() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, Vec<f64>)> {
        (1usize..5, 1usize..5, 1usize..3).prop_flat_map(|(h, w, c)| {
            let n = h * w * c;
            (
                Just(h),
                Just(w),
                Just(c),
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(-10.0f64..10.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn resize_is_linear((h, w, c, a, b) in grid(), oh in 1usize..9, ow in 1usize..9,
                            alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let ta = t3(h, w, c, a);
            let tb = t3(h, w, c, b);
            let combined = ta.axpby(alpha, &tb, beta).unwrap().bilinear_resize(oh, ow).unwrap();
            let separate = ta.bilinear_resize(oh, ow).unwrap()
                .axpby(alpha, &tb.bilinear_resize(oh, ow).unwrap(), beta).unwrap();
            for (x, y) in combined.data().iter().zip(separate.data()) {
                prop_assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs().max(y.abs())));
            }
        }

        #[test]
        fn resize_stays_within_input_range((h, w, c, a, _b) in grid(), oh in 1usize..9, ow in 1usize..9) {
            let t = t3(h, w, c, a.clone());
            let lo = a.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for &v in t.bilinear_resize(oh, ow).unwrap().data() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }

        #[test]
        fn resize_of_constant_is_constant(h in 1usize..5, w in 1usize..5, v in -50.0f64..50.0,
                                          oh in 1usize..9, ow in 1usize..9) {
            let t = Tensor::full(vec![h, w, 1], v);
            prop_assert!(t.bilinear_resize(oh, ow).unwrap().data().iter().all(|&x| x == v));
        }

        #[test]
        fn softmax_normalized_shift_invariant_argmax_preserving(
            v in prop::collection::vec(-30.0f64..30.0, 1..8), shift in -100.0f64..100.0)
        {
            let p = softmax(&v);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&x| x > 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let q = softmax(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            prop_assert_eq!(argmax(&p), argmax(&v));
        }
    }
}
