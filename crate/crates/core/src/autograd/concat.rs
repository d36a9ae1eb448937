use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Concatenation along axis 1 of equal-rank tensors.
pub(crate) fn forward<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs[0].shape();
    if first.len() < 2 {
        return Err(dim_err("concat_channels", format!("rank {} < 2", first.len())));
    }
    let outer = first[0];
    let inner: usize = first[2..].iter().product();
    let mut channels = 0;
    for t in inputs {
        let s = t.shape();
        if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
            return Err(dim_err(
                "concat_channels",
                format!("shape {s:?} disagrees with {first:?} outside the channel axis"),
            ));
        }
        channels += s[1];
    }
    let mut data = Vec::with_capacity(outer * channels * inner);
    for b in 0..outer {
        for t in inputs {
            let span = t.shape()[1] * inner;
            data.extend_from_slice(&t.data()[b * span..(b + 1) * span]);
        }
    }
    let mut shape = first.to_vec();
    shape[1] = channels;
    Tensor::new(&shape, data)
}

/// Splits the upstream gradient back into per-input channel ranges.
pub(crate) fn backward<T: Scalar>(inputs: &[&Tensor<T>], dy: &[T]) -> Vec<Vec<T>> {
    let outer = inputs[0].shape()[0];
    let inner: usize = inputs[0].shape()[2..].iter().product();
    let total: usize = inputs.iter().map(|t| t.shape()[1]).sum::<usize>() * inner;
    let mut out: Vec<Vec<T>> = inputs.iter().map(|t| vec![T::zero(); t.numel()]).collect();
    for b in 0..outer {
        let mut off = b * total;
        for (t, g) in inputs.iter().zip(out.iter_mut()) {
            let span = t.shape()[1] * inner;
            g[b * span..(b + 1) * span].copy_from_slice(&dy[off..off + span]);
            off += span;
        }
    }
    out
}
