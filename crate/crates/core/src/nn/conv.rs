//! Convolution as patch extraction plus a matrix product.
//!
//! Patch extraction is a custom op whose backward pass scatters patch
//! gradients back onto the image, so the whole convolution differentiates
//! through two matrix products and one scatter.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Visits every patch row `(c, ky, kx)` and output row `oy` of one image,
/// passing the matching input row (if in bounds) and the output column range
/// `ox_lo..ox_hi` whose taps land inside the image.
#[inline(always)]
fn for_each_span(g: &Geometry, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let (oh, ow) = (g.out_h(), g.out_w());
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                // ox such that 0 <= ox*s + kx - p < width
                let ox_lo = p.saturating_sub(kx).div_ceil(s);
                let ox_hi = ((g.width + p).saturating_sub(kx)).div_ceil(s).min(ow);
                for oy in 0..oh {
                    let y = oy * s + ky;
                    if y < p || y - p >= g.height {
                        continue;
                    }
                    let src_row = (c * g.height + (y - p)) * g.width;
                    f(row, oy * ow, src_row, ox_lo, ox_hi, kx);
                }
            }
        }
    }
}

/// Patches as columns: `(C*K*K, B*OH*OW)`.
fn unfold<T: Copy + Default>(src: &[T], batch: usize, g: &Geometry) -> Vec<T> {
    let image = g.channels * g.height * g.width;
    let rows = g.out_h() * g.out_w();
    let width = batch * rows;
    let (s, p) = (g.stride, g.padding);
    let mut out = vec![T::default(); g.patch() * width];
    for b in 0..batch {
        let img = &src[b * image..(b + 1) * image];
        for_each_span(g, |row, out_off, src_row, lo, hi, kx| {
            let dst = &mut out[row * width + b * rows + out_off..];
            for ox in lo..hi {
                dst[ox] = img[src_row + ox * s + kx - p];
            }
        });
    }
    out
}

fn fold<T: Copy + Default + std::ops::AddAssign>(src: &[T], batch: usize, g: &Geometry) -> Vec<T> {
    let image = g.channels * g.height * g.width;
    let rows = g.out_h() * g.out_w();
    let width = batch * rows;
    let (s, p) = (g.stride, g.padding);
    let mut out = vec![T::default(); batch * image];
    for b in 0..batch {
        let img = &mut out[b * image..(b + 1) * image];
        for_each_span(g, |row, out_off, src_row, lo, hi, kx| {
            let cols = &src[row * width + b * rows + out_off..];
            for ox in lo..hi {
                img[src_row + ox * s + kx - p] += cols[ox];
            }
        });
    }
    out
}

fn contiguous<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => Err(candle_core::Error::Msg("patch op needs a contiguous input".into())),
    }
}

/// `(B, C, H, W)` to `(C*K*K, B*OH*OW)`.
struct Unfold(Geometry);

/// `(C*K*K, B*OH*OW)` to `(B, C, H, W)`, summing overlapping taps.
struct Fold(Geometry, usize);

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold-patches"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let b = layout.shape().dims()[0];
        let shape = Shape::from((g.patch(), b * g.out_h() * g.out_w()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(unfold(contiguous(v, layout)?, b, g)),
            CpuStorage::F64(v) => CpuStorage::F64(unfold(contiguous(v, layout)?, b, g)),
            _ => return Err(candle_core::Error::Msg("patch op supports f32 and f64".into())),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let b = arg.dims()[0];
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Fold(self.0, b))?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold-patches"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (g, b) = (&self.0, self.1);
        let shape = Shape::from((b, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(fold(contiguous(v, layout)?, b, g)),
            CpuStorage::F64(v) => CpuStorage::F64(fold(contiguous(v, layout)?, b, g)),
            _ => return Err(candle_core::Error::Msg("patch op supports f32 and f64".into())),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Unfold(self.0))?))
    }
}

/// Cross-correlation of `x` `(B, C, H, W)` with `w` `(O, C, K, K)`, symmetric
/// zero padding, same semantics as `Tensor::conv2d` with dilation 1.
pub fn conv2d(x: &Tensor, w: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (o, _, k, _) = w.dims4()?;
    let g = Geometry {
        channels: c,
        height: h,
        width: wd,
        kernel: k,
        stride,
        padding,
    };
    let cols = x.contiguous()?.apply_op1(Unfold(g))?;
    let y = w.reshape((o, g.patch()))?.matmul(&cols)?;
    Ok(y.reshape((o, b, g.out_h(), g.out_w()))?.transpose(0, 1)?.contiguous()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn matches_candle_conv_forward_and_backward() {
        for (c, h, o, k, s) in [(3, 9, 4, 5, 2), (2, 8, 3, 3, 1), (4, 6, 2, 5, 1), (1, 7, 2, 3, 2)] {
            let x = Var::from_tensor(&rand(&[2, c, h, h], 1)).unwrap();
            let w = Var::from_tensor(&rand(&[o, c, k, k], 2)).unwrap();
            let probe = rand(&[2, o, (h + 2 * (k / 2) - k) / s + 1, (h + 2 * (k / 2) - k) / s + 1], 3);

            let ours = conv2d(x.as_tensor(), w.as_tensor(), k / 2, s).unwrap();
            let reference = x.as_tensor().conv2d(w.as_tensor(), k / 2, s, 1, 1).unwrap();
            assert!(max_diff(&ours, &reference) < 1e-12);

            let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            assert!(max_diff(g1.get(&x).unwrap(), g2.get(&x).unwrap()) < 1e-12);
            assert!(max_diff(g1.get(&w).unwrap(), g2.get(&w).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn fold_is_adjoint_of_unfold() {
        // <unfold(x), y> == <x, fold(y)>
        let g = Geometry {
            channels: 2,
            height: 5,
            width: 5,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let x = rand(&[1, 2, 5, 5], 4);
        let y = rand(&[g.patch(), g.out_h() * g.out_w()], 5);
        let ux = x.apply_op1_no_bwd(&Unfold(g)).unwrap();
        let fy = y.apply_op1_no_bwd(&Fold(g, 1)).unwrap();
        let lhs = (ux * &y).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let rhs = (x * fy).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
        assert_eq!(y.dtype(), DType::F64);
    }
}
