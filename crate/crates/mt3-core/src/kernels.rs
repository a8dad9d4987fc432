//! Raw numeric kernels behind the graph primitives.
//!
//! Everything here is plain data-in/data-out; the graph layer owns shape
//! validation and differentiation. Convolutions run as im2col + GEMM with the
//! scratch column buffer discarded immediately, so backward only ever needs
//! the tensors already stored in the graph.

use crate::scalar::Scalar;
use crate::tensor::{numel_of, strides_of, Tensor};

/// Output spatial size for a conv/pool window sweep.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_width(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

/// Unfold one sample into `[oh*ow, c*kh*kw]` (rows are receptive fields).
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let ckk = g.col_width();
    debug_assert_eq!(col.len(), g.oh * g.ow * ckk);
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = (oy * g.ow + ox) * ckk;
            let iy0 = (oy * g.stride) as isize - g.pad as isize;
            let ix0 = (ox * g.stride) as isize - g.pad as isize;
            for c in 0..g.c {
                let plane = c * g.h * g.w;
                let dst = row + c * g.kh * g.kw;
                for ky in 0..g.kh {
                    let iy = iy0 + ky as isize;
                    let dst = dst + ky * g.kw;
                    if iy < 0 || iy >= g.h as isize {
                        col[dst..dst + g.kw].fill(T::zero());
                        continue;
                    }
                    let src = plane + iy as usize * g.w;
                    for kx in 0..g.kw {
                        let ix = ix0 + kx as isize;
                        col[dst + kx] = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            x[src + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add column rows back into an image plane.
fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let ckk = g.col_width();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = (oy * g.ow + ox) * ckk;
            let iy0 = (oy * g.stride) as isize - g.pad as isize;
            let ix0 = (ox * g.stride) as isize - g.pad as isize;
            for c in 0..g.c {
                let plane = c * g.h * g.w;
                let src = row + c * g.kh * g.kw;
                for ky in 0..g.kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = plane + iy as usize * g.w;
                    let src = src + ky * g.kw;
                    for kx in 0..g.kw {
                        let ix = ix0 + kx as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[dst + ix as usize] = x[dst + ix as usize] + col[src + kx];
                        }
                    }
                }
            }
        }
    }
}

/// y[n,oc,oh,ow] = sum over (c,kh,kw) windows of x * w.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, geom: &ConvGeom) -> Tensor<T> {
    let ckk = geom.col_width();
    let ohow = geom.oh * geom.ow;
    let mut col = vec![T::zero(); ohow * ckk];
    let mut out = vec![T::zero(); geom.n * geom.oc * ohow];
    let xs = x.data();
    let ws = w.data();
    for n in 0..geom.n {
        im2col(&xs[n * geom.c * geom.h * geom.w..], geom, &mut col);
        // out_n[oc, ohow] = w[oc, ckk] * col^T[ckk, ohow]
        unsafe {
            T::gemm(
                geom.oc,
                ckk,
                ohow,
                T::one(),
                ws.as_ptr(),
                ckk as isize,
                1,
                col.as_ptr(),
                1,
                ckk as isize,
                T::zero(),
                out.as_mut_ptr().add(n * geom.oc * ohow),
                ohow as isize,
                1,
            );
        }
    }
    Tensor::new(vec![geom.n, geom.oc, geom.oh, geom.ow], out).expect("conv output shape")
}

/// dL/dx given dL/dy: the adjoint of `conv2d` in its input.
pub fn conv2d_input_grad<T: Scalar>(gy: &Tensor<T>, w: &Tensor<T>, geom: &ConvGeom) -> Tensor<T> {
    let ckk = geom.col_width();
    let ohow = geom.oh * geom.ow;
    let mut colgrad = vec![T::zero(); ohow * ckk];
    let mut out = vec![T::zero(); geom.n * geom.c * geom.h * geom.w];
    let gs = gy.data();
    let ws = w.data();
    for n in 0..geom.n {
        // colgrad[ohow, ckk] = gy_n^T[ohow, oc] * w[oc, ckk]
        unsafe {
            T::gemm(
                ohow,
                geom.oc,
                ckk,
                T::one(),
                gs.as_ptr().add(n * geom.oc * ohow),
                1,
                ohow as isize,
                ws.as_ptr(),
                ckk as isize,
                1,
                T::zero(),
                colgrad.as_mut_ptr(),
                ckk as isize,
                1,
            );
        }
        col2im(
            &colgrad,
            geom,
            &mut out[n * geom.c * geom.h * geom.w..(n + 1) * geom.c * geom.h * geom.w],
        );
    }
    Tensor::new(vec![geom.n, geom.c, geom.h, geom.w], out).expect("conv input grad shape")
}

/// dL/dw given dL/dy: the adjoint of `conv2d` in its kernel.
pub fn conv2d_kernel_grad<T: Scalar>(gy: &Tensor<T>, x: &Tensor<T>, geom: &ConvGeom) -> Tensor<T> {
    let ckk = geom.col_width();
    let ohow = geom.oh * geom.ow;
    let mut col = vec![T::zero(); ohow * ckk];
    let mut out = vec![T::zero(); geom.oc * ckk];
    let xs = x.data();
    let gs = gy.data();
    for n in 0..geom.n {
        im2col(&xs[n * geom.c * geom.h * geom.w..], geom, &mut col);
        // out[oc, ckk] += gy_n[oc, ohow] * col[ohow, ckk]
        unsafe {
            T::gemm(
                geom.oc,
                ohow,
                ckk,
                T::one(),
                gs.as_ptr().add(n * geom.oc * ohow),
                ohow as isize,
                1,
                col.as_ptr(),
                ckk as isize,
                1,
                T::one(),
                out.as_mut_ptr(),
                ckk as isize,
                1,
            );
        }
    }
    Tensor::new(vec![geom.oc, geom.c, geom.kh, geom.kw], out).expect("conv kernel grad shape")
}

pub fn matmul<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
) -> Tensor<T> {
    let mut out = vec![T::zero(); m * n];
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            T::zero(),
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::new(vec![m, n], out).expect("matmul output shape")
}

pub fn avg_pool2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Tensor<T> {
    let oh = conv_out_dim(h, kernel, stride, 0);
    let ow = conv_out_dim(w, kernel, stride, 0);
    let inv = T::from_f64(1.0 / (kernel * kernel) as f64);
    let xs = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for nc in 0..n * c {
        let src = nc * h * w;
        let dst = nc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ky in 0..kernel {
                    let row = src + (oy * stride + ky) * w + ox * stride;
                    for kx in 0..kernel {
                        acc = acc + xs[row + kx];
                    }
                }
                out[dst + oy * ow + ox] = acc * inv;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).expect("avg pool shape")
}

/// Adjoint of `avg_pool2d`: spread each output gradient uniformly over its window.
pub fn avg_pool2d_grad<T: Scalar>(
    gy: &Tensor<T>,
    kernel: usize,
    stride: usize,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Tensor<T> {
    let oh = conv_out_dim(h, kernel, stride, 0);
    let ow = conv_out_dim(w, kernel, stride, 0);
    let inv = T::from_f64(1.0 / (kernel * kernel) as f64);
    let gs = gy.data();
    let mut out = vec![T::zero(); n * c * h * w];
    for nc in 0..n * c {
        let src = nc * oh * ow;
        let dst = nc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gs[src + oy * ow + ox] * inv;
                for ky in 0..kernel {
                    let row = dst + (oy * stride + ky) * w + ox * stride;
                    for kx in 0..kernel {
                        out[row + kx] = out[row + kx] + g;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out).expect("avg pool grad shape")
}

/// Sum over `axes` (deduplicated, ascending), optionally keeping them as 1s.
pub fn reduce_sum<T: Scalar>(x: &Tensor<T>, axes: &[usize], keep_dims: bool) -> Tensor<T> {
    let shape = x.shape();
    let mut keep_shape = shape.to_vec();
    for &a in axes {
        keep_shape[a] = 1;
    }
    let out_shape: Vec<usize> = if keep_dims {
        keep_shape.clone()
    } else {
        shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect()
    };
    let in_strides = strides_of(shape);
    let keep_strides = strides_of(&keep_shape);
    let mut out = vec![T::zero(); numel_of(&keep_shape)];
    let xs = x.data();
    for (idx, &v) in xs.iter().enumerate() {
        let mut rem = idx;
        let mut off = 0usize;
        for d in 0..shape.len() {
            let coord = rem / in_strides[d];
            rem %= in_strides[d];
            if keep_shape[d] != 1 {
                off += coord * keep_strides[d];
            }
        }
        out[off] = out[off] + v;
    }
    Tensor::new(out_shape, out).expect("reduce shape")
}

/// Broadcast `x` to `target` under right-aligned numpy rules.
pub fn broadcast_to<T: Scalar>(x: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    let src_shape = x.shape();
    let offset = target.len() - src_shape.len();
    let src_strides = strides_of(src_shape);
    let mut eff = vec![0usize; target.len()];
    for (i, &d) in target.iter().enumerate() {
        if i >= offset {
            let sd = src_shape[i - offset];
            debug_assert!(sd == d || sd == 1);
            if sd == d {
                eff[i] = src_strides[i - offset];
            }
        }
    }
    let out_strides = strides_of(target);
    let xs = x.data();
    let n = numel_of(target);
    let mut out = vec![T::zero(); n];
    for (idx, o) in out.iter_mut().enumerate() {
        let mut rem = idx;
        let mut off = 0usize;
        for d in 0..target.len() {
            let coord = rem / out_strides[d];
            rem %= out_strides[d];
            off += coord * eff[d];
        }
        *o = xs[off];
    }
    Tensor::new(target.to_vec(), out).expect("broadcast shape")
}

/// Copy the hyper-rectangle `ranges` (start, end per axis) out of `x`.
pub fn slice<T: Scalar>(x: &Tensor<T>, ranges: &[(usize, usize)]) -> Tensor<T> {
    let out_shape: Vec<usize> = ranges.iter().map(|&(s, e)| e - s).collect();
    let in_strides = strides_of(x.shape());
    let out_strides = strides_of(&out_shape);
    let n = numel_of(&out_shape);
    let xs = x.data();
    let mut out = vec![T::zero(); n];
    for (idx, o) in out.iter_mut().enumerate() {
        let mut rem = idx;
        let mut off = 0usize;
        for d in 0..out_shape.len() {
            let coord = rem / out_strides[d];
            rem %= out_strides[d];
            off += (coord + ranges[d].0) * in_strides[d];
        }
        *o = xs[off];
    }
    Tensor::new(out_shape, out).expect("slice shape")
}

/// Adjoint of `slice`: place `x` into a zero tensor of `full_shape` at `ranges`.
pub fn pad_zero<T: Scalar>(
    x: &Tensor<T>,
    ranges: &[(usize, usize)],
    full_shape: &[usize],
) -> Tensor<T> {
    let in_shape = x.shape().to_vec();
    let in_strides = strides_of(&in_shape);
    let full_strides = strides_of(full_shape);
    let mut out = vec![T::zero(); numel_of(full_shape)];
    let xs = x.data();
    for (idx, &v) in xs.iter().enumerate() {
        let mut rem = idx;
        let mut off = 0usize;
        for d in 0..in_shape.len() {
            let coord = rem / in_strides[d];
            rem %= in_strides[d];
            off += (coord + ranges[d].0) * full_strides[d];
        }
        out[off] = v;
    }
    Tensor::new(full_shape.to_vec(), out).expect("pad shape")
}
