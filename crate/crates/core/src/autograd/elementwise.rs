use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::Activation;
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) fn activate<T: Scalar>(x: &Tensor<T>, act: Activation) -> Tensor<T> {
    match act {
        Activation::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        Activation::Sigmoid => x.map(|v| T::one() / (T::one() + (-v).exp())),
    }
}

pub(crate) fn activate_backward<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, act: Activation, dy: &[T]) -> Vec<T> {
    match act {
        // relu'(0) = 0
        Activation::Relu => x
            .data()
            .iter()
            .zip(dy)
            .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
            .collect(),
        Activation::Sigmoid => y.data().iter().zip(dy).map(|(&s, &d)| d * s * (T::one() - s)).collect(),
    }
}

/// Returns the output and the per-element multiplier (0 or 1/(1-rate)).
pub(crate) fn dropout<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, rate: f64, rng: &mut R) -> (Tensor<T>, Vec<T>) {
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.numel())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    (Tensor::new(x.shape(), data).expect("same shape"), mask)
}

pub(crate) fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

pub(crate) fn channel_scale<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("channel_scale")?;
    let ok = matches!(*s.shape(), [sn, sc] if sn == n && sc == c)
        || matches!(*s.shape(), [sn, sc, 1, 1] if sn == n && sc == c);
    if !ok {
        return Err(dim_err(
            "channel_scale",
            format!("scale shape {:?} does not match batch/channel axes N={n}, C={c}", s.shape()),
        ));
    }
    let hw = h * w;
    let mut out = x.data().to_vec();
    for (plane, &f) in out.chunks_mut(hw).zip(s.data()) {
        for v in plane {
            *v *= f;
        }
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn channel_scale_backward<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>, dy: &[T]) -> (Vec<T>, Vec<T>) {
    let hw = x.numel() / s.numel();
    let mut dx = vec![T::zero(); dy.len()];
    let mut ds = vec![T::zero(); s.numel()];
    for (i, &f) in s.data().iter().enumerate() {
        let span = i * hw..(i + 1) * hw;
        for j in span {
            dx[j] = dy[j] * f;
            ds[i] += dy[j] * x.data()[j];
        }
    }
    (dx, ds)
}
