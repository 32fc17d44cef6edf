//! Small differentiable building blocks.
//!
//! Everything here is differentiable in both f32 and f64. Convolutions are
//! lowered to an unfold op plus a matmul, which is considerably faster to
//! differentiate on CPU than the native conv kernels.

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, WithDType, D};

use crate::error::{shape_err, Result};
use crate::params::{Init, Scope};

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(scope: &Scope, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = scope.get((out_dim, in_dim), "weight", Init::fan_in(in_dim))?;
        let bias = if bias {
            Some(scope.get(out_dim, "bias", Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Applies the map to the last axis of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().unwrap_or(&0);
        if in_dim != self.in_dim() {
            return shape_err(format!(
                "linear expects last dim {}, got {in_dim}",
                self.in_dim()
            ));
        }
        let rows = x.elem_count() / in_dim.max(1);
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.get(dim, "weight", Init::Ones)?,
            bias: scope.get(dim, "bias", Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

/// 2-D convolution over `[batch, channels, height, width]` with square kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        scope: &Scope,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        Ok(Self {
            weight: scope.get((out_c, in_c, kernel, kernel), "weight", Init::fan_in(fan_in))?,
            bias: Some(scope.get(out_c, "bias", Init::Zeros)?),
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (out_c, in_c, k, _) = self.weight.dims4()?;
        if c != in_c {
            return shape_err(format!("conv expects {in_c} channels, got {c}"));
        }
        let (s, p) = (self.stride, self.padding);
        if h + 2 * p < k || w + 2 * p < k {
            return shape_err(format!("conv kernel {k} larger than padded input {h}x{w}"));
        }
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        let wmat = self.weight.reshape((out_c, in_c * k * k))?;
        let y = if k == 1 && s == 1 && p == 0 {
            wmat.broadcast_matmul(&x.reshape((b, c, h * w))?)?
        } else {
            let op = Im2Col { kernel: k, stride: s, padding: p };
            let cols = x.contiguous()?.apply_op1(op)?.reshape((b * oh * ow, c * k * k))?;
            cols.matmul(&wmat.t()?)?
                .reshape((b, oh * ow, out_c))?
                .transpose(1, 2)?
        };
        let y = match &self.bias {
            Some(bias) => y.broadcast_add(&bias.reshape((1, out_c, 1))?)?,
            None => y,
        };
        Ok(y.reshape((b, out_c, oh, ow))?)
    }
}

/// Unfolds `[b, c, h, w]` into `[b, oh*ow, c*k*k]`, zero padding implied.
/// Columns are ordered `(c, ky, kx)` to match a `[out, c, k, k]` weight.
#[derive(Debug, Clone, Copy)]
struct Im2Col {
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Im2Col {
    fn out_side(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Visits every output row `[c*k*k]` with the image planes of its batch
    /// element; `f(col, plane, offset)` fires for each in-bounds tap.
    fn walk(
        &self,
        (b, c, h, w): (usize, usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize, usize),
    ) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let (oh, ow) = (self.out_side(h), self.out_side(w));
        for r in 0..b * oh * ow {
            let (bi, oy, ox) = (r / (oh * ow), r / ow % oh, r % ow);
            for ky in 0..k {
                let Some(iy) = (oy * s + ky).checked_sub(p).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = (ox * s + kx).checked_sub(p).filter(|&v| v < w) else {
                        continue;
                    };
                    for ci in 0..c {
                        f(r, (ci * k + ky) * k + kx, bi * c + ci, iy * w + ix);
                    }
                }
            }
        }
    }

    fn unfold<T: WithDType>(&self, src: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
        let (b, c, h, w) = dims;
        let ckk = c * self.kernel * self.kernel;
        let mut out = vec![T::zero(); b * self.out_side(h) * self.out_side(w) * ckk];
        self.walk(dims, |r, col, plane, off| out[r * ckk + col] = src[plane * h * w + off]);
        out
    }

    fn fold<T: WithDType>(&self, cols: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
        let (b, c, h, w) = dims;
        let ckk = c * self.kernel * self.kernel;
        let mut out = vec![T::zero(); b * c * h * w];
        self.walk(dims, |r, col, plane, off| out[plane * h * w + off] += cols[r * ckk + col]);
        out
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => Err(candle_core::Error::Msg("im2col expects a contiguous input".into())),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (b, c, h, w) = dims;
        let shape = Shape::from((b, self.out_side(h) * self.out_side(w), c * self.kernel * self.kernel));
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(self.unfold(contiguous_slice(d, layout)?, dims)),
            CpuStorage::F64(d) => CpuStorage::F64(self.unfold(contiguous_slice(d, layout)?, dims)),
            _ => return Err(candle_core::Error::Msg("im2col supports f32 and f64 only".into())),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = Col2Im { cols: *self, dims: arg.dims4()? };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

/// Adjoint of [`Im2Col`]: scatters columns back onto the image, summing overlaps.
struct Col2Im {
    cols: Im2Col,
    dims: (usize, usize, usize, usize),
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let shape = Shape::from(self.dims);
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(self.cols.fold(contiguous_slice(d, layout)?, self.dims)),
            CpuStorage::F64(d) => CpuStorage::F64(self.cols.fold(contiguous_slice(d, layout)?, self.dims)),
            _ => return Err(candle_core::Error::Msg("col2im supports f32 and f64 only".into())),
        };
        Ok((out, shape))
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Interpolation matrix `[out, inp]` for 1-D linear resampling.
pub fn bilinear_matrix(inp: usize, out: usize, align_corners: bool) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    for o in 0..out {
        let src = if align_corners {
            if out == 1 {
                0.0
            } else {
                o as f64 * (inp as f64 - 1.0) / (out as f64 - 1.0)
            }
        } else {
            ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0)
        };
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[o * inp + i0] += 1.0 - frac;
        m[o * inp + i1] += frac;
    }
    m
}

/// Box-average matrix `[inp / factor, inp]`.
pub fn box_matrix(inp: usize, factor: usize) -> Vec<f64> {
    let out = inp / factor;
    let mut m = vec![0.0; out * inp];
    for o in 0..out {
        for k in 0..factor {
            m[o * inp + o * factor + k] = 1.0 / factor as f64;
        }
    }
    m
}

fn matrix_tensor(m: Vec<f64>, rows: usize, cols: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(m, (rows, cols), dev)?.to_dtype(dtype)?)
}

/// Applies separable resampling matrices to the two spatial axes of `[b, c, h, w]`.
pub fn resample(x: &Tensor, rows: &Tensor, cols: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, h2) = rows.dims2()?;
    let (ow, w2) = cols.dims2()?;
    if h != h2 || w != w2 {
        return shape_err(format!(
            "resample matrices {oh}x{h2}/{ow}x{w2} do not fit input {h}x{w}"
        ));
    }
    let y = x.reshape((b * c * h, w))?.matmul(&cols.t()?)?; // [bch, ow]
    let y = y.reshape((b, c, h, ow))?.transpose(2, 3)?.contiguous()?;
    let y = y.reshape((b * c * ow, h))?.matmul(&rows.t()?)?; // [b c ow, oh]
    Ok(y.reshape((b, c, ow, oh))?.transpose(2, 3)?.contiguous()?)
}

pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize, align_corners: bool) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (dt, dev) = (x.dtype(), x.device());
    let rows = matrix_tensor(bilinear_matrix(h, oh, align_corners), oh, h, dt, dev)?;
    let cols = matrix_tensor(bilinear_matrix(w, ow, align_corners), ow, w, dt, dev)?;
    resample(x, &rows, &cols)
}

pub fn downsample_box(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return shape_err(format!("cannot box-downsample {h}x{w} by {factor}"));
    }
    let (dt, dev) = (x.dtype(), x.device());
    let rows = matrix_tensor(box_matrix(h, factor), h / factor, h, dt, dev)?;
    let cols = matrix_tensor(box_matrix(w, factor), w / factor, w, dt, dev)?;
    resample(x, &rows, &cols)
}

/// Row-wise cosine similarity of two `[n, d]` matrices.
pub fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = (a * b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
    Ok(dot.div(&(na * nb)?)?)
}
