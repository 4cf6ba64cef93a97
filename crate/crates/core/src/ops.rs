//! Tensor helpers shared by the backbone and the losses.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (self.h - self.kh + 1, self.w - self.kw + 1)
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        let (oh, ow) = self.out_hw();
        self.b * oh * ow
    }

    /// `(B, C, H, W)` to `(C*KH*KW, B*OH*OW)`.
    fn unfold<T: Copy + Default>(&self, x: &[T]) -> Vec<T> {
        let (oh, ow) = self.out_hw();
        let n = self.cols();
        let mut out = vec![T::default(); self.rows() * n];
        for ci in 0..self.c {
            for di in 0..self.kh {
                for dj in 0..self.kw {
                    let row = (ci * self.kh + di) * self.kw + dj;
                    let dst = &mut out[row * n..(row + 1) * n];
                    for bi in 0..self.b {
                        let plane = (bi * self.c + ci) * self.h * self.w;
                        for i in 0..oh {
                            let src = plane + (i + di) * self.w + dj;
                            let at = (bi * oh + i) * ow;
                            dst[at..at + ow].copy_from_slice(&x[src..src + ow]);
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`Geometry::unfold`]: overlapping windows are summed.
    fn fold<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let (oh, ow) = self.out_hw();
        let n = self.cols();
        let mut out = vec![T::default(); self.b * self.c * self.h * self.w];
        for ci in 0..self.c {
            for di in 0..self.kh {
                for dj in 0..self.kw {
                    let row = (ci * self.kh + di) * self.kw + dj;
                    let src = &cols[row * n..(row + 1) * n];
                    for bi in 0..self.b {
                        let plane = (bi * self.c + ci) * self.h * self.w;
                        for i in 0..oh {
                            let dst = plane + (i + di) * self.w + dj;
                            let at = (bi * oh + i) * ow;
                            for (o, s) in out[dst..dst + ow].iter_mut().zip(&src[at..at + ow]) {
                                *o += *s;
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("unfold expects a contiguous input"),
    }
}

struct Unfold(Geometry);
struct Fold(Geometry);

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(g.unfold(contiguous(v, l)?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.unfold(contiguous(v, l)?)),
            _ => candle_core::bail!("unfold supports f32 and f64"),
        };
        Ok((out, Shape::from((g.rows(), g.cols()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Fold(self.0))?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(g.fold(contiguous(v, l)?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.fold(contiguous(v, l)?)),
            _ => candle_core::bail!("fold supports f32 and f64"),
        };
        Ok((out, Shape::from((g.b, g.c, g.h, g.w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Unfold(self.0))?))
    }
}

/// Valid-mode 2D cross-correlation of `(B, C, H, W)` with `(O, C, KH, KW)`
/// as an unfold followed by a single matmul.
pub fn conv2d_valid(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (o, wc, kh, kw) = w.dims4()?;
    if wc != c || kh > h || kw > wd {
        return Err(Error::ShapeMismatch(format!(
            "kernel {:?} for input {:?}",
            w.dims(),
            x.dims()
        )));
    }
    let g = Geometry { b, c, h, w: wd, kh, kw };
    let (oh, ow) = g.out_hw();
    let cols = x.contiguous()?.apply_op1(Unfold(g))?;
    let wm = w.reshape((o, g.rows()))?;
    Ok(wm
        .matmul(&cols)?
        .reshape((o, b, oh, ow))?
        .permute((1, 0, 2, 3))?
        .contiguous()?)
}

/// Zero-padded "same" convolution for odd square kernels.
pub fn conv2d_same(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let r = w.dim(2)? / 2;
    let xp = x.pad_with_zeros(2, r, r)?.pad_with_zeros(3, r, r)?;
    conv2d_valid(&xp, w)
}

/// Replicate-padded input for a `k`-wide odd kernel.
pub fn replicate_pad(x: &Tensor, r: usize) -> Result<Tensor> {
    if r == 0 {
        return Ok(x.clone());
    }
    Ok(x.pad_with_same(2, r, r)?.pad_with_same(3, r, r)?)
}

/// Nearest-neighbour 2x upsampling of `(B, C, H, W)`.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn matches_native_convolution() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (2, 3, 7, 6), &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (4, 3, 3, 3), &dev).unwrap();
        let ours = conv2d_same(&x, &w).unwrap();
        let native = x.conv2d(&w, 1, 1, 1, 1).unwrap();
        assert!(max_abs(&ours, &native) < 1e-12);
        let one = Tensor::ones((1, 1, 1, 1), DType::F64, &dev).unwrap();
        let y = Tensor::randn(0f64, 1.0, (1, 1, 4, 4), &dev).unwrap();
        assert!(max_abs(&conv2d_valid(&y, &one).unwrap(), &y) == 0.0);
    }

    #[test]
    fn gradients_match_native_convolution() {
        let dev = Device::Cpu;
        let x = Var::randn(0f64, 1.0, (2, 3, 6, 5), &dev).unwrap();
        let w = Var::randn(0f64, 1.0, (4, 3, 3, 3), &dev).unwrap();
        let probe = Tensor::randn(0f64, 1.0, (2, 4, 6, 5), &dev).unwrap();
        let ours = (conv2d_same(&x, &w).unwrap() * &probe).unwrap().sum_all().unwrap();
        let native = (x.conv2d(&w, 1, 1, 1, 1).unwrap() * &probe).unwrap().sum_all().unwrap();
        let ga = ours.backward().unwrap();
        let gb = native.backward().unwrap();
        for v in [&x, &w] {
            let a = ga.get(v.as_tensor()).unwrap();
            let b = gb.get(v.as_tensor()).unwrap();
            assert!(max_abs(a, b) < 1e-10);
        }
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = Tensor::arange(0f32, 4.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 2, 2))
            .unwrap();
        let up = upsample2(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(up, vec![0., 0., 1., 1., 0., 0., 1., 1., 2., 2., 3., 3., 2., 2., 3., 3.]);
    }
}
