//! Patch extraction (`im2col`) and its adjoint (`col2im`) as autograd ops.
//! Convolutions become one gemm plus one of these gathers, which keeps both
//! passes on the fast matmul path.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Geometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Calls `f(image_index, column_index)` for every in-bounds pair of one batch item.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        for c in 0..self.channels {
            for dy in 0..k {
                for dx in 0..k {
                    let row = (c * k + dy) * k + dx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + dy) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let base = (c * self.height + iy as usize) * self.width;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + dx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            f(base + ix as usize, row * oh * ow + oy * ow + ox);
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle_core::Error::Msg("patch ops need contiguous input".into())),
    }
}

fn gather<T: Copy + Default>(src: &[T], g: &Geometry, batch: usize) -> Vec<T> {
    let (img, col) = (g.image_len(), g.rows() * g.cols());
    let mut out = vec![T::default(); batch * col];
    for b in 0..batch {
        let (s, o) = (&src[b * img..(b + 1) * img], &mut out[b * col..(b + 1) * col]);
        g.for_each(|i, j| o[j] = s[i]);
    }
    out
}

fn scatter<T: Copy + Default + std::ops::AddAssign>(src: &[T], g: &Geometry, batch: usize) -> Vec<T> {
    let (img, col) = (g.image_len(), g.rows() * g.cols());
    let mut out = vec![T::default(); batch * img];
    for b in 0..batch {
        let (s, o) = (&src[b * col..(b + 1) * col], &mut out[b * img..(b + 1) * img]);
        g.for_each(|i, j| o[i] += s[j]);
    }
    out
}

/// B×C×H×W → B×(C·k·k)×(oh·ow)
pub struct Im2Col(pub Geometry);

/// B×(C·k·k)×(oh·ow) → B×C×H×W, summing overlapping patches.
pub struct Col2Im(pub Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = layout.dims()[0];
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(gather(contiguous(v, layout)?, g, batch)),
            CpuStorage::F64(v) => CpuStorage::F64(gather(contiguous(v, layout)?, g, batch)),
            _ => return Err(candle_core::Error::Msg("im2col supports f32/f64".into())),
        };
        Ok((out, Shape::from((batch, g.rows(), g.cols()))))
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
        let batch = layout.dims()[0];
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(scatter(contiguous(v, layout)?, g, batch)),
            CpuStorage::F64(v) => CpuStorage::F64(scatter(contiguous(v, layout)?, g, batch)),
            _ => return Err(candle_core::Error::Msg("col2im supports f32/f64".into())),
        };
        Ok((out, Shape::from((batch, g.channels, g.height, g.width))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Cross-correlation with weight `Cout×Cin×k×k`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (co, ci, k, _) = weight.dims4()?;
    if ci != c {
        return Err(candle_core::Error::Msg(format!("conv2d: input has {c} channels, weight expects {ci}")));
    }
    let g = Geometry { channels: c, height: h, width: w, kernel: k, stride, padding };
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let wm = weight.reshape((co, ci * k * k))?;
    wm.broadcast_matmul(&cols)?.reshape((b, co, g.out_h(), g.out_w()))
}

/// Adjoint of [`conv2d`] with weight `Cin×Cout×k×k`; output side is
/// `(h−1)·stride − 2·padding + k`.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    let (b, ci, h, w) = x.dims4()?;
    let (wi, co, k, _) = weight.dims4()?;
    if wi != ci {
        return Err(candle_core::Error::Msg(format!("conv_transpose2d: input has {ci} channels, weight expects {wi}")));
    }
    let (oh, ow) = ((h - 1) * stride + k - 2 * padding, (w - 1) * stride + k - 2 * padding);
    let g = Geometry { channels: co, height: oh, width: ow, kernel: k, stride, padding };
    debug_assert_eq!((g.out_h(), g.out_w()), (h, w));
    let wm = weight.reshape((ci, co * k * k))?.t()?;
    let cols = wm.broadcast_matmul(&x.reshape((b, ci, h * w))?)?;
    cols.contiguous()?.apply_op1(Col2Im(g))
}
