use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::Mode;
use crate::error::{dim_err, Error, Result};
use crate::param::RunningStats;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

pub(crate) struct BnCtx<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

type Moments<T> = Option<(Vec<T>, Vec<T>)>;

pub(crate) fn forward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &RunningStats<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BnCtx<T>, Moments<T>)> {
    let (n, c, h, w) = input.dims4("batch_norm")?;
    for (name, t) in [("gamma", gamma), ("beta", beta), ("running_mean", &running.mean), ("running_var", &running.var)] {
        if t.numel() != c {
            return Err(dim_err("batch_norm", format!("{name} length {} != channel axis C={c}", t.numel())));
        }
    }
    let hw = h * w;
    let m = n * hw;
    let x = input.data();
    let eps = T::lit(BN_EPS);
    let (mean, var, moments) = match mode {
        Mode::Train => {
            if m < 2 {
                return Err(Error::Input(format!("train-mode batch norm needs N*H*W >= 2, got {m}")));
            }
            let inv_m = T::one() / T::lit(m as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s += input.plane(b, ch).iter().copied().sum::<T>();
                }
                let mu = s * inv_m;
                let mut sq = T::zero();
                for b in 0..n {
                    sq += input.plane(b, ch).iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                }
                mean[ch] = mu;
                var[ch] = sq * inv_m;
            }
            (mean.clone(), var.clone(), Some((mean, var)))
        }
        Mode::Eval => (running.mean.data().to_vec(), running.var.data().to_vec(), None),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let (g, bt) = (gamma.data(), beta.data());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = g[ch] * xh + bt[ch];
            }
        }
    }
    let ctx = BnCtx { xhat, inv_std, train: mode == Mode::Train };
    Ok((Tensor::new(input.shape(), out)?, ctx, moments))
}

pub(crate) fn backward<T: Scalar>(input: &Tensor<T>, gamma: &Tensor<T>, ctx: &BnCtx<T>, dy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = input.dims4("batch_norm").expect("validated");
    let hw = h * w;
    let m = T::lit((n * hw) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dgamma[ch] += dy[i] * ctx.xhat[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let g = gamma.data();
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let scale = g[ch] * ctx.inv_std[ch];
            for i in off..off + hw {
                dx[i] = if ctx.train {
                    scale * (dy[i] - (dbeta[ch] + ctx.xhat[i] * dgamma[ch]) / m)
                } else {
                    scale * dy[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
