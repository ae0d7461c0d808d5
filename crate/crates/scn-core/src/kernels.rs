//! Deterministic dense kernels: matmul, im2col convolution, linear layers.
//!
//! Every kernel fixes its floating-point summation order: each output element
//! accumulates contributions in ascending reduction index, starting from zero,
//! with any bias added after the sum. Convolution reduces over (channel,
//! kernel-row, kernel-col) in that lexicographic order, so a naive loop-nest
//! reference produces bit-identical results in the same precision. No
//! parallelism, no FMA contraction, no reassociation.

use crate::element::Element;
use crate::error::{Error, Result};

/// out[m,n] += a[m,k] · b[k,n]. Reduction index ascends per output element.
pub fn mm_nn<T: Element>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + aik * b_row[j];
            }
        }
    }
}

/// out[m,n] += aᵀ · b where a is stored [k,m] and b is [k,n].
pub fn mm_tn<T: Element>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = a_row[i];
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + aki * b_row[j];
            }
        }
    }
}

/// out[m,n] += a[m,k] · bᵀ where b is stored [n,k].
pub fn mm_nt<T: Element>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(b.len(), n * k);
    let mut bt = vec![T::zero(); k * n];
    transpose(b, n, k, &mut bt);
    mm_nn(out, a, &bt, m, k, n);
}

/// dst[j,i] = src[i,j] for src stored [rows, cols].
pub fn transpose<T: Element>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

/// Extents of a valid (no-padding) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn infer(input: &[usize], kernels: &[usize], bias: &[usize], stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Argument("conv2d stride must be positive".into()));
        }
        let [n, c, h, w] = match input {
            &[n, c, h, w] => [n, c, h, w],
            other => {
                return Err(Error::dimension("conv2d input", "[N,C,H,W]", format!("{other:?}")));
            }
        };
        let [f, kc, kh, kw] = match kernels {
            &[f, kc, kh, kw] => [f, kc, kh, kw],
            other => {
                return Err(Error::dimension("conv2d kernels", "[F,C,kh,kw]", format!("{other:?}")));
            }
        };
        if kc != c {
            return Err(Error::dimension(
                "conv2d kernel channels",
                c.to_string(),
                kc.to_string(),
            ));
        }
        if bias != [f] {
            return Err(Error::dimension("conv2d bias", format!("[{f}]"), format!("{bias:?}")));
        }
        if kh > h || kw > w {
            return Err(Error::dimension(
                "conv2d spatial extents",
                format!("kernel ≤ input, input {h}x{w}"),
                format!("kernel {kh}x{kw}"),
            ));
        }
        Ok(ConvDims {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            oh: (h - kh) / stride + 1,
            ow: (w - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.f, self.oh, self.ow]
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn spatial(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one (C,H,W) image into a [C·kh·kw, oh·ow] patch matrix, rows ordered
/// (channel, kernel-row, kernel-col) — the reduction order of the convolution.
fn im2col<T: Element>(d: &ConvDims, img: &[T], cols: &mut [T]) {
    let spatial = d.spatial();
    let mut row = 0;
    for ci in 0..d.c {
        let plane = &img[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oy in 0..d.oh {
                    let src = &plane[(oy * d.stride + i) * d.w..];
                    let dst_row = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    for ox in 0..d.ow {
                        dst_row[ox] = src[ox * d.stride + j];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto the (C,H,W) image gradient.
fn col2im_acc<T: Element>(d: &ConvDims, cols: &[T], img: &mut [T]) {
    let spatial = d.spatial();
    let mut row = 0;
    for ci in 0..d.c {
        let plane = &mut img[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oy in 0..d.oh {
                    let base = (oy * d.stride + i) * d.w;
                    let src_row = &src[oy * d.ow..(oy + 1) * d.ow];
                    for ox in 0..d.ow {
                        plane[base + ox * d.stride + j] =
                            plane[base + ox * d.stride + j] + src_row[ox];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Valid cross-correlation with per-filter bias. `out` is overwritten.
pub fn conv2d_forward<T: Element>(d: &ConvDims, input: &[T], kernels: &[T], bias: &[T], out: &mut [T]) {
    let ckk = d.ckk();
    let spatial = d.spatial();
    debug_assert_eq!(out.len(), d.n * d.f * spatial);
    let mut cols = vec![T::zero(); ckk * spatial];
    for ni in 0..d.n {
        let img = &input[ni * d.c * d.h * d.w..(ni + 1) * d.c * d.h * d.w];
        im2col(d, img, &mut cols);
        let out_img = &mut out[ni * d.f * spatial..(ni + 1) * d.f * spatial];
        out_img.fill(T::zero());
        mm_nn(out_img, kernels, &cols, d.f, ckk, spatial);
        for fi in 0..d.f {
            let b = bias[fi];
            for v in &mut out_img[fi * spatial..(fi + 1) * spatial] {
                *v = *v + b;
            }
        }
    }
}

/// Backward pass of `conv2d_forward`. Accumulates (+=) into the provided grad
/// buffers; `dinput` may be omitted when the input needs no gradient.
pub fn conv2d_backward<T: Element>(
    d: &ConvDims,
    input: &[T],
    kernels: &[T],
    dout: &[T],
    dinput: Option<&mut [T]>,
    dkernels: &mut [T],
    dbias: &mut [T],
) {
    let ckk = d.ckk();
    let spatial = d.spatial();
    let mut cols = vec![T::zero(); ckk * spatial];
    let mut dcols = vec![T::zero(); ckk * spatial];
    let mut dinput = dinput;
    for ni in 0..d.n {
        let img = &input[ni * d.c * d.h * d.w..(ni + 1) * d.c * d.h * d.w];
        let dout_img = &dout[ni * d.f * spatial..(ni + 1) * d.f * spatial];
        im2col(d, img, &mut cols);
        // dW += dOut · colsᵀ
        mm_nt(dkernels, dout_img, &cols, d.f, spatial, ckk);
        for fi in 0..d.f {
            let mut s = T::zero();
            for &v in &dout_img[fi * spatial..(fi + 1) * spatial] {
                s = s + v;
            }
            dbias[fi] = dbias[fi] + s;
        }
        if let Some(di) = dinput.as_deref_mut() {
            dcols.fill(T::zero());
            // dcols = Wᵀ · dOut
            mm_tn(&mut dcols, kernels, dout_img, ckk, d.f, spatial);
            col2im_acc(d, &dcols, &mut di[ni * d.c * d.h * d.w..(ni + 1) * d.c * d.h * d.w]);
        }
    }
}

/// out = x[m,in] · w[in,out] + b, rows of x mapped independently. Overwrites `out`.
pub fn linear_forward<T: Element>(x: &[T], w: &[T], b: &[T], out: &mut [T], m: usize, in_f: usize, out_f: usize) {
    debug_assert_eq!(b.len(), out_f);
    out.fill(T::zero());
    mm_nn(out, x, w, m, in_f, out_f);
    for i in 0..m {
        let row = &mut out[i * out_f..(i + 1) * out_f];
        for j in 0..out_f {
            row[j] = row[j] + b[j];
        }
    }
}

/// Backward of `linear_forward`; accumulates into the grad buffers.
pub fn linear_backward<T: Element>(
    x: &[T],
    w: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: &mut [T],
    db: &mut [T],
    m: usize,
    in_f: usize,
    out_f: usize,
) {
    if let Some(dx) = dx {
        // dX += dY · wᵀ
        mm_nt(dx, dout, w, m, out_f, in_f);
    }
    // dW += xᵀ · dY
    mm_tn(dw, x, dout, in_f, m, out_f);
    for i in 0..m {
        let row = &dout[i * out_f..(i + 1) * out_f];
        for j in 0..out_f {
            db[j] = db[j] + row[j];
        }
    }
}
