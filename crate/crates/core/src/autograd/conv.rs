//! 2-D cross-correlation via im2col + GEMM.
//!
//! Work is split per sample. With the `parallel` feature samples run on the
//! rayon pool; kernel gradients are still reduced in sample order, so
//! results do not depend on the thread count.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geom {
    fn cols(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn output_extent(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || len + 2 * pad < k {
        return None;
    }
    Some((len + 2 * pad - k) / stride + 1)
}

fn geometry<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<(usize, Geom)> {
    let (n, c, h, w) = input.dims4("conv2d")?;
    let (o, i, kh, kw) = kernel.dims4("conv2d")?;
    if c != i {
        return Err(dim_err(
            "conv2d",
            format!("input channel axis (C={c}) != kernel input axis (I={i})"),
        ));
    }
    let oh = output_extent(h, kh, stride, pad).ok_or_else(|| {
        dim_err("conv2d", format!("height axis: H={h} + 2*pad={pad} < kernel height {kh} (stride {stride})"))
    })?;
    let ow = output_extent(w, kw, stride, pad).ok_or_else(|| {
        dim_err("conv2d", format!("width axis: W={w} + 2*pad={pad} < kernel width {kw} (stride {stride})"))
    })?;
    Ok((n, Geom { c, h, w, o, kh, kw, oh, ow, stride, pad }))
}

fn im2col<T: Scalar>(x: &[T], g: &Geom, cols: &mut [T]) {
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * plane;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Geom, dx: &mut [T]) {
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * plane;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += cols[row + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward_sample<T: Scalar>(x: &[T], k: &[T], g: &Geom, out: &mut [T]) {
    let plane = g.oh * g.ow;
    if g.is_pointwise() {
        T::gemm(g.o, g.c, plane, k, false, x, false, T::zero(), out);
    } else {
        let mut cols = vec![T::zero(); g.cols() * plane];
        im2col(x, g, &mut cols);
        T::gemm(g.o, g.cols(), plane, k, false, &cols, false, T::zero(), out);
    }
}

/// Returns `(dx_sample, dk_partial)`.
fn backward_sample<T: Scalar>(
    x: &[T],
    k: &[T],
    dy: &[T],
    g: &Geom,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.oh * g.ow;
    let ncols = g.cols();
    let pointwise = g.is_pointwise();
    let dk = want_dk.then(|| {
        let mut dk = vec![T::zero(); g.o * ncols];
        if pointwise {
            T::gemm(g.o, plane, ncols, dy, false, x, true, T::zero(), &mut dk);
        } else {
            let mut cols = vec![T::zero(); ncols * plane];
            im2col(x, g, &mut cols);
            T::gemm(g.o, plane, ncols, dy, false, &cols, true, T::zero(), &mut dk);
        }
        dk
    });
    let dx = want_dx.then(|| {
        let mut dcols = vec![T::zero(); ncols * plane];
        T::gemm(ncols, g.o, plane, k, true, dy, false, T::zero(), &mut dcols);
        if pointwise {
            dcols
        } else {
            let mut dx = vec![T::zero(); g.c * g.h * g.w];
            col2im(&dcols, g, &mut dx);
            dx
        }
    });
    (dx, dk)
}

pub(crate) fn forward<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (n, g) = geometry(input, kernel, stride, pad)?;
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.o * g.oh * g.ow;
    let mut out = vec![T::zero(); n * out_sz];
    let x = input.data();
    let k = kernel.data();

    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(out_sz)
            .zip(x.par_chunks(in_sz))
            .for_each(|(o, xs)| forward_sample(xs, k, &g, o));
    }
    #[cfg(not(feature = "parallel"))]
    for (o, xs) in out.chunks_mut(out_sz).zip(x.chunks(in_sz)) {
        forward_sample(xs, k, &g, o);
    }

    Tensor::new(&[n, g.o, g.oh, g.ow], out)
}

pub(crate) fn backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &[T],
    stride: usize,
    pad: usize,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (_, g) = geometry(input, kernel, stride, pad).expect("shapes validated in forward");
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.o * g.oh * g.ow;
    let x = input.data();
    let k = kernel.data();

    #[cfg(feature = "parallel")]
    let parts: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = {
        use rayon::prelude::*;
        x.par_chunks(in_sz)
            .zip(dy.par_chunks(out_sz))
            .map(|(xs, d)| backward_sample(xs, k, d, &g, want_dx, want_dk))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = x
        .chunks(in_sz)
        .zip(dy.chunks(out_sz))
        .map(|(xs, d)| backward_sample(xs, k, d, &g, want_dx, want_dk))
        .collect();

    let mut dx = want_dx.then(|| Vec::with_capacity(x.len()));
    let mut dk = want_dk.then(|| vec![T::zero(); k.len()]);
    for (pdx, pdk) in parts {
        if let (Some(acc), Some(p)) = (dx.as_mut(), pdx) {
            acc.extend(p);
        }
        if let (Some(acc), Some(p)) = (dk.as_mut(), pdk) {
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v;
            }
        }
    }
    (dx, dk)
}
