//! Convolutions for training and inference.
//!
//! With gradients enabled a convolution is an im2col copy followed by one
//! matrix product, so the backward pass is two matrix products and a col2im
//! scatter-add. Inside [`no_grad`] the native kernels are used, which
//! keep no graph and need far less memory at large sizes.

use std::cell::Cell;
use std::ops::AddAssign;

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, Var};

use crate::error::{Error, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without building an autograd graph through model parameters.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// The parameter as it should enter a forward pass.
pub(crate) fn param(v: &Var) -> Tensor {
    if grad_enabled() {
        v.as_tensor().clone()
    } else {
        v.as_tensor().detach()
    }
}

/// Shape of one convolution, seen as a stride-`stride` window over the input
/// after inserting `dilation - 1` zeros between pixels and padding with zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad_lo: usize,
    pad_hi: usize,
    dilation: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    #[allow(clippy::too_many_arguments)]
    fn new(
        (n, c, h, w): (usize, usize, usize, usize),
        k: usize,
        stride: usize,
        pad_lo: usize,
        pad_hi: usize,
        dilation: usize,
    ) -> Result<Self> {
        let out = |len: usize| -> Result<usize> {
            let extent = (len - 1) * dilation + 1 + pad_lo + pad_hi;
            if extent < k {
                return Err(Error::invalid(format!("kernel {k} does not fit a padded extent of {extent}")));
            }
            Ok((extent - k) / stride + 1)
        };
        if h == 0 || w == 0 {
            return Err(Error::invalid("convolution input has an empty spatial axis"));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            k,
            stride,
            pad_lo,
            pad_hi,
            dilation,
            oh: out(h)?,
            ow: out(w)?,
        })
    }

    /// For each kernel offset and output position along one axis, the source
    /// pixel or `usize::MAX` where the window reads padding.
    fn table(&self, len: usize, out: usize) -> Vec<usize> {
        let mut t = Vec::with_capacity(self.k * out);
        for kk in 0..self.k {
            for o in 0..out {
                let src = (o * self.stride + kk)
                    .checked_sub(self.pad_lo)
                    .filter(|q| q % self.dilation == 0 && q / self.dilation < len)
                    .map_or(usize::MAX, |q| q / self.dilation);
                t.push(src);
            }
        }
        t
    }

    fn cols_len(&self) -> usize {
        self.n * self.c * self.k * self.k * self.oh * self.ow
    }

    /// Horizontal runs per kernel column: `(first output, run length, first
    /// source pixel, source step)`. Without input dilation every kernel column
    /// reads one run; otherwise each real pixel is its own run.
    fn runs(&self) -> Vec<Vec<(usize, usize, usize, usize)>> {
        let tx = self.table(self.w, self.ow);
        (0..self.k)
            .map(|kx| {
                let row = &tx[kx * self.ow..(kx + 1) * self.ow];
                let valid = row.iter().enumerate().filter(|(_, &x)| x != usize::MAX);
                if self.dilation == 1 {
                    let mut valid = valid.peekable();
                    match valid.peek().copied() {
                        Some((j0, &x0)) => vec![(j0, valid.count(), x0, self.stride)],
                        None => Vec::new(),
                    }
                } else {
                    valid.map(|(j, &x)| (j, 1, x, 1)).collect()
                }
            })
            .collect()
    }

    /// Calls `f(column offset, input offset, length, input step)` for every run
    /// of real pixels read by the column matrix.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let ty = self.table(self.h, self.oh);
        let runs = self.runs();
        let mut col = 0;
        for n in 0..self.n {
            for c in 0..self.c {
                let plane = (n * self.c + c) * self.h * self.w;
                for ky in 0..self.k {
                    for kx_runs in &runs {
                        for &y in &ty[ky * self.oh..(ky + 1) * self.oh] {
                            if y != usize::MAX {
                                let row = plane + y * self.w;
                                for &(j, len, x, step) in kx_runs {
                                    f(col + j, row + x, len, step);
                                }
                            }
                            col += self.ow;
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, op: &'static str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle_core::Error::RequiresContiguous { op }),
    }
}

/// `(N, C, H, W)` to the `(N, C * k * k, oh * ow)` column matrix.
struct Im2Col(Geometry);

/// Adjoint of [`Im2Col`]: scatters column gradients back onto the input.
struct Col2Im(Geometry);

fn im2col<T: Copy + Default>(g: &Geometry, x: &[T]) -> Vec<T> {
    let mut cols = vec![T::default(); g.cols_len()];
    g.for_each_run(|col, src, len, step| {
        let dst = &mut cols[col..col + len];
        if step == 1 {
            dst.copy_from_slice(&x[src..src + len]);
        } else {
            for (d, s) in dst.iter_mut().zip(x[src..].iter().step_by(step)) {
                *d = *s;
            }
        }
    });
    cols
}

fn col2im<T: Copy + Default + AddAssign>(g: &Geometry, cols: &[T]) -> Vec<T> {
    let mut x = vec![T::default(); g.n * g.c * g.h * g.w];
    g.for_each_run(|col, dst, len, step| {
        for (d, s) in x[dst..].iter_mut().step_by(step).zip(&cols[col..col + len]) {
            *d += *s;
        }
    });
    x
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(g, contiguous(v, layout, "im2col")?)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(g, contiguous(v, layout, "im2col")?)),
            other => return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), "im2col")),
        };
        Ok((out, Shape::from((g.n, g.c * g.k * g.k, g.oh * g.ow))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(g, contiguous(v, layout, "col2im")?)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(g, contiguous(v, layout, "col2im")?)),
            other => return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), "col2im")),
        };
        Ok((out, Shape::from((g.n, g.c, g.h, g.w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

fn matmul_conv(x: &Tensor, weight: &Tensor, g: Geometry) -> Result<Tensor> {
    let o = weight.dims4()?.0;
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let y = weight.reshape((o, g.c * g.k * g.k))?.broadcast_matmul(&cols)?;
    Ok(y.reshape((g.n, o, g.oh, g.ow))?)
}

fn check_channels(x: &Tensor, c_in: usize, what: &str) -> Result<()> {
    let c = x.dims4()?.1;
    if c != c_in {
        return Err(Error::invalid(format!("{what}: input has {c} channels, weight expects {c_in}")));
    }
    Ok(())
}

/// Zero-padded convolution of `x` `(N, C, H, W)` with `weight` `(O, C, k, k)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, pad: usize, stride: usize) -> Result<Tensor> {
    let (_, c_in, k, k2) = weight.dims4()?;
    check_channels(x, c_in, "conv2d")?;
    if k != k2 {
        return Err(Error::invalid(format!("conv2d needs a square kernel, got {k}x{k2}")));
    }
    if !(grad_enabled() && (x.track_op() || weight.track_op())) {
        return Ok(x.conv2d(weight, pad, stride, 1, 1)?);
    }
    matmul_conv(x, weight, Geometry::new(x.dims4()?, k, stride, pad, pad, 1)?)
}

/// Transpose convolution with weight `(C, O, k, k)`, following the usual
/// `(stride, padding, output_padding)` convention.
pub fn conv_transpose2d(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor> {
    let (c_in, _, k, k2) = weight.dims4()?;
    check_channels(x, c_in, "conv_transpose2d")?;
    if k != k2 || padding >= k {
        return Err(Error::invalid(format!(
            "conv_transpose2d needs a square kernel larger than the padding, got {k}x{k2}, padding {padding}"
        )));
    }
    if !(grad_enabled() && (x.track_op() || weight.track_op())) {
        return Ok(x.conv_transpose2d(weight, padding, output_padding, stride, 1)?);
    }
    // a stride-1 convolution over the zero-dilated input with the spatially
    // flipped kernel, input and output channels swapped
    let flip = Tensor::from_vec((0..k as u32).rev().collect::<Vec<_>>(), k, weight.device())?;
    let flipped = weight
        .index_select(&flip, 2)?
        .index_select(&flip, 3)?
        .transpose(0, 1)?
        .contiguous()?;
    let pad_lo = k - 1 - padding;
    let g = Geometry::new(x.dims4()?, k, 1, pad_lo, pad_lo + output_padding, stride)?;
    matmul_conv(x, &flipped, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::to_vec_f64;
    use candle_core::{DType, Device};

    fn close(a: &Tensor, b: &Tensor) {
        assert_eq!(a.dims(), b.dims());
        for (x, y) in to_vec_f64(a).unwrap().iter().zip(to_vec_f64(b).unwrap()) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    fn randn(shape: &[usize]) -> Tensor {
        Tensor::randn(0f64, 1.0, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn matmul_conv_matches_native() {
        for (k, pad, stride, size) in [(3, 1, 1, 6), (4, 1, 2, 8), (7, 0, 1, 9), (3, 0, 2, 7), (1, 0, 1, 5)] {
            let x = Var::from_tensor(&randn(&[2, 3, size, size])).unwrap();
            let w = randn(&[4, 3, k, k]);
            let native = x.as_tensor().detach().conv2d(&w, pad, stride, 1, 1).unwrap();
            close(&conv2d(x.as_tensor(), &w, pad, stride).unwrap(), &native);
        }
    }

    #[test]
    fn matmul_transpose_matches_native() {
        let x = Var::from_tensor(&randn(&[2, 3, 5, 4])).unwrap();
        let w = randn(&[3, 2, 3, 3]);
        let native = x.as_tensor().detach().conv_transpose2d(&w, 1, 1, 2, 1).unwrap();
        let ours = conv_transpose2d(x.as_tensor(), &w, 2, 1, 1).unwrap();
        assert_eq!(ours.dims(), &[2, 2, 10, 8]);
        close(&ours, &native);
    }

    #[test]
    fn gradients_match_native_backward() {
        let x = Var::from_tensor(&randn(&[2, 3, 6, 6])).unwrap();
        let w = Var::from_tensor(&randn(&[4, 3, 3, 3])).unwrap();
        let probe = randn(&[2, 4, 3, 3]);
        let loss = |y: Tensor| (y * &probe).unwrap().sum_all().unwrap();
        let ours = loss(conv2d(x.as_tensor(), w.as_tensor(), 1, 2).unwrap()).backward().unwrap();
        let native = loss(x.as_tensor().conv2d(w.as_tensor(), 1, 2, 1, 1).unwrap())
            .backward()
            .unwrap();
        close(ours.get(&x).unwrap(), native.get(&x).unwrap());
        close(ours.get(&w).unwrap(), native.get(&w).unwrap());
    }

    #[test]
    fn no_grad_detaches_parameters() {
        let v = Var::zeros((2, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(param(&v).track_op());
        no_grad(|| {
            assert!(!grad_enabled());
            assert!(!param(&v).track_op());
        });
        assert!(grad_enabled());
    }
}
