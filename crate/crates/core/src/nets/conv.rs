//! 2-D convolution as im2col followed by one matrix product.
//!
//! The column matrix has shape (C·k·k, B·Ho·Wo), so each layer is a single
//! large GEMM in both directions; the gradient of im2col is col2im.

use candle_core::{bail, CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.b * self.out_h() * self.out_w()
    }

    /// Visits every run of valid taps: `(column offset, image offset, len)`.
    /// Column entries in a run are adjacent; image entries are `stride`
    /// apart.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.out_h(), self.out_w());
        let cols = self.cols();
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((c * self.k + ky) * self.k + kx) * cols;
                    let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(self.stride) };
                    let hi = match (self.w + self.pad).checked_sub(kx + 1) {
                        Some(v) => (v / self.stride + 1).min(wo),
                        None => 0,
                    };
                    if lo >= hi {
                        continue;
                    }
                    for b in 0..self.b {
                        let plane = (b * self.c + c) * self.h * self.w;
                        for oy in 0..ho {
                            let iy = oy * self.stride + ky;
                            if iy < self.pad || iy - self.pad >= self.h {
                                continue;
                            }
                            let src = plane + (iy - self.pad) * self.w + lo * self.stride + kx - self.pad;
                            f(row + (b * ho + oy) * wo + lo, src, hi - lo);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: WithDType>(src: &[T], g: &Geometry) -> Vec<T> {
    let mut dst = vec![T::zero(); g.rows() * g.cols()];
    let stride = g.stride;
    g.for_each_run(|d, s, n| {
        let out = &mut dst[d..d + n];
        if stride == 1 {
            out.copy_from_slice(&src[s..s + n]);
        } else {
            for (o, v) in out.iter_mut().zip(src[s..].iter().step_by(stride)) {
                *o = *v;
            }
        }
    });
    dst
}

fn col2im<T: WithDType>(cols: &[T], g: &Geometry) -> Vec<T> {
    let mut dst = vec![T::zero(); g.b * g.c * g.h * g.w];
    let stride = g.stride;
    g.for_each_run(|d, s, n| {
        let from = &cols[d..d + n];
        if stride == 1 {
            for (o, v) in dst[s..s + n].iter_mut().zip(from) {
                *o += *v;
            }
        } else {
            for (o, v) in dst[s..].iter_mut().step_by(stride).zip(from) {
                *o += *v;
            }
        }
    });
    dst
}

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => bail!("convolution expects contiguous storage"),
    }
}

struct Im2Col {
    k: usize,
    stride: usize,
    pad: usize,
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let g = Geometry {
            b,
            c,
            h,
            w,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        };
        let shape = Shape::from((g.rows(), g.cols()));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous(v, l)?, &g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous(v, l)?, &g)),
            _ => bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, c, h, w) = arg.dims4()?;
        let g = Geometry {
            b,
            c,
            h,
            w,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im(g))?))
    }
}

struct Col2Im(Geometry);

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        if l.shape().dims() != [g.rows(), g.cols()] {
            bail!("col2im got shape {:?}", l.shape());
        }
        let shape = Shape::from((g.b, g.c, g.h, g.w));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous(v, l)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous(v, l)?, g)),
            _ => bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, shape))
    }
}

/// Cross-correlation of `x` (B, C, H, W) with `weight` (O, C, k, k), zero
/// padding `pad` on every side, no bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, ci, k, k2) = weight.dims4()?;
    if ci != c || k != k2 || h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
        return Err(crate::Error::invalid(format!(
            "conv2d: input {:?} does not fit kernel {:?}",
            x.dims(),
            weight.dims()
        )));
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let cols = x.contiguous()?.apply_op1(Im2Col { k, stride, pad })?;
    let y = weight.reshape((o, c * k * k))?.matmul(&cols)?;
    Ok(y.reshape((o, b, ho, wo))?.transpose(0, 1)?.contiguous()?)
}
