use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) fn dense_forward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c) = input.dims2("dense")?;
    let (wc, o) = weight.dims2("dense")?;
    if c != wc {
        return Err(dim_err("dense", format!("input columns C={c} != weight rows {wc}")));
    }
    if bias.numel() != o {
        return Err(dim_err("dense", format!("bias length {} != weight columns O={o}", bias.numel())));
    }
    let mut out: Vec<T> = (0..n).flat_map(|_| bias.data().iter().copied()).collect();
    T::gemm(n, c, o, input.data(), false, weight.data(), false, T::one(), &mut out);
    Tensor::new(&[n, o], out)
}

pub(crate) fn dense_backward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, dy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c) = input.dims2("dense").expect("validated");
    let o = weight.shape()[1];
    let mut dx = vec![T::zero(); n * c];
    T::gemm(n, o, c, dy, false, weight.data(), true, T::zero(), &mut dx);
    let mut dw = vec![T::zero(); c * o];
    T::gemm(c, n, o, input.data(), true, dy, false, T::zero(), &mut dw);
    let mut db = vec![T::zero(); o];
    for row in dy.chunks(o) {
        for (b, &d) in db.iter_mut().zip(row) {
            *b += d;
        }
    }
    (dx, dw, db)
}

/// Mean cross-entropy with max subtraction. Returns the loss and the
/// softmax probabilities for the backward pass.
pub(crate) fn softmax_ce_forward<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(Tensor<T>, Vec<T>)> {
    let (n, k) = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(dim_err("softmax_cross_entropy", format!("{} labels for batch axis N={n}", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Input(format!("label {bad} outside [0, {k})")));
    }
    let mut probs = vec![T::zero(); n * k];
    let mut total = T::zero();
    for (r, (row, &label)) in logits.data().chunks(k).zip(labels).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
            *p = (v - max).exp();
            z += *p;
        }
        for p in &mut probs[r * k..(r + 1) * k] {
            *p /= z;
        }
        total += z.ln() - (row[label] - max);
    }
    Ok((Tensor::scalar(total / T::lit(n as f64)), probs))
}

pub(crate) fn softmax_ce_backward<T: Scalar>(probs: &[T], labels: &[usize], upstream: T) -> Vec<T> {
    let n = labels.len();
    let k = probs.len() / n;
    let scale = upstream / T::lit(n as f64);
    let mut g: Vec<T> = probs.to_vec();
    for (r, &label) in labels.iter().enumerate() {
        g[r * k + label] -= T::one();
    }
    for v in &mut g {
        *v *= scale;
    }
    g
}
