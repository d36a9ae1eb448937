use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::conv::output_extent;
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
    /// Per-channel spatial mean; window, stride and pad are ignored.
    GlobalAvg,
}

pub(crate) enum PoolCtx {
    Window { window: usize, stride: usize, pad: usize, out_hw: (usize, usize) },
    /// Flat input index chosen by each output element.
    Argmax(Vec<usize>),
    Global,
}

pub(crate) fn forward<T: Scalar>(
    input: &Tensor<T>,
    mode: PoolMode,
    window: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, PoolCtx)> {
    let (n, c, h, w) = input.dims4("pool")?;
    let x = input.data();
    if mode == PoolMode::GlobalAvg {
        let inv = T::one() / T::lit((h * w) as f64);
        let data = x.chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        return Ok((Tensor::new(&[n, c, 1, 1], data)?, PoolCtx::Global));
    }
    if window == 0 || window > h + 2 * pad || window > w + 2 * pad {
        return Err(dim_err(
            "pool",
            format!("window {window} larger than spatial extent H={h}, W={w} (pad {pad})"),
        ));
    }
    let oh = output_extent(h, window, stride, pad).ok_or_else(|| dim_err("pool", "stride must be positive"))?;
    let ow = output_extent(w, window, stride, pad).ok_or_else(|| dim_err("pool", "stride must be positive"))?;
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut argmax = Vec::new();
    if mode == PoolMode::Max {
        argmax.resize(out.len(), 0);
    }
    let area = T::lit((window * window) as f64);
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (nc * oh + oy) * ow + ox;
                let mut acc = T::zero();
                let mut best: Option<(T, usize)> = None;
                for i in 0..window {
                    let y = (oy * stride + i) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for j in 0..window {
                        let xx = (ox * stride + j) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let idx = base + y as usize * w + xx as usize;
                        let v = x[idx];
                        acc += v;
                        // strict '>' keeps the first maximum in row-major scan order
                        if best.is_none_or(|(b, _)| v > b) {
                            best = Some((v, idx));
                        }
                    }
                }
                match mode {
                    PoolMode::Avg => out[o] = acc / area,
                    _ => {
                        let (v, idx) = best.expect("window overlaps the input");
                        out[o] = v;
                        argmax[o] = idx;
                    }
                }
            }
        }
    }
    let ctx = match mode {
        PoolMode::Max => PoolCtx::Argmax(argmax),
        _ => PoolCtx::Window { window, stride, pad, out_hw: (oh, ow) },
    };
    Ok((Tensor::new(&[n, c, oh, ow], out)?, ctx))
}

pub(crate) fn backward<T: Scalar>(input: &Tensor<T>, ctx: &PoolCtx, dy: &[T]) -> Vec<T> {
    let (n, c, h, w) = input.dims4("pool").expect("validated");
    let mut dx = vec![T::zero(); input.numel()];
    match ctx {
        PoolCtx::Global => {
            let inv = T::one() / T::lit((h * w) as f64);
            for (plane, &d) in dx.chunks_mut(h * w).zip(dy) {
                plane.fill(d * inv);
            }
        }
        PoolCtx::Argmax(idx) => {
            for (&i, &d) in idx.iter().zip(dy) {
                dx[i] += d;
            }
        }
        &PoolCtx::Window { window, stride, pad, out_hw: (oh, ow) } => {
            let inv = T::one() / T::lit((window * window) as f64);
            for nc in 0..n * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let d = dy[(nc * oh + oy) * ow + ox] * inv;
                        for i in 0..window {
                            let y = (oy * stride + i) as isize - pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for j in 0..window {
                                let xx = (ox * stride + j) as isize - pad as isize;
                                if xx >= 0 && xx < w as isize {
                                    dx[nc * h * w + y as usize * w + xx as usize] += d;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
