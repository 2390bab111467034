//! Tensor-level primitives: convolutions, affine maps, normalization,
//! activations and resampling.
//!
//! Images and feature maps are `[channels, h, w]`; token sequences are
//! `[.., length, dim]`. The `*_backward` helpers hold the adjoints used by the
//! autograd layer.

use crate::error::{Error, Result};
use crate::kernels::{self, Window};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dSpec {
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn depthwise(channels: usize, padding: usize) -> Self {
        Conv2dSpec {
            stride: 1,
            padding,
            groups: channels,
        }
    }
}

struct ConvGeometry {
    groups: usize,
    c_out: usize,
    window: Window,
}

impl ConvGeometry {
    fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }
}

fn conv2d_geometry(x: &Tensor, w: &Tensor, spec: Conv2dSpec) -> Result<ConvGeometry> {
    const OP: &str = "conv2d";
    let [c_in, h, wd] = x.dims3(OP)?;
    let [c_out, c_per_group, kh, kw] = w.dims4(OP)?;
    if spec.stride == 0 {
        return Err(Error::invalid(OP, "stride must be at least 1"));
    }
    if spec.groups == 0 || c_in % spec.groups != 0 {
        return Err(Error::shape(
            OP,
            format!(
                "input channels {c_in} not divisible by groups {}",
                spec.groups
            ),
        ));
    }
    if c_out % spec.groups != 0 {
        return Err(Error::shape(
            OP,
            format!(
                "output channels {c_out} not divisible by groups {}",
                spec.groups
            ),
        ));
    }
    if c_per_group != c_in / spec.groups {
        return Err(Error::shape(
            OP,
            format!(
                "weight input-channel dim {c_per_group} != input channels {c_in} / groups {}",
                spec.groups
            ),
        ));
    }
    let (ph, pw) = (h + 2 * spec.padding, wd + 2 * spec.padding);
    if kh > ph {
        return Err(Error::shape(
            OP,
            format!("kernel height {kh} exceeds padded input height {ph}"),
        ));
    }
    if kw > pw {
        return Err(Error::shape(
            OP,
            format!("kernel width {kw} exceeds padded input width {pw}"),
        ));
    }
    Ok(ConvGeometry {
        groups: spec.groups,
        c_out,
        window: Window {
            channels: c_per_group,
            h,
            w: wd,
            kh,
            kw,
            stride: spec.stride,
            pad: spec.padding,
            oh: (ph - kh) / spec.stride + 1,
            ow: (pw - kw) / spec.stride + 1,
        },
    })
}

fn check_bias(b: Option<&Tensor>, channels: usize, op: &'static str) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [channels] {
            return Err(Error::shape(
                op,
                format!("bias shape {:?}, expected [{channels}]", b.shape()),
            ));
        }
    }
    Ok(())
}

fn is_pointwise(g: &Window) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0
}

/// Unfolded input for one group; a 1×1 stride-1 window is its own unfolding.
fn group_columns(x: &[f32], g: &Window, group: usize) -> Vec<f32> {
    let plane = g.channels * g.h * g.w;
    let xs = &x[group * plane..(group + 1) * plane];
    if is_pointwise(g) {
        xs.to_vec()
    } else {
        kernels::im2col(xs, g)
    }
}

/// 2-D cross-correlation of `x: [C_in, H, W]` with `w: [C_out, C_in/groups, kh, kw]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
    let geo = conv2d_geometry(x, w, spec)?;
    check_bias(b, geo.c_out, "conv2d")?;
    let g = &geo.window;
    let k = g.rows();
    let spatial = g.cols();
    let cog = geo.out_per_group();
    let mut out = vec![0.0f32; geo.c_out * spatial];
    for group in 0..geo.groups {
        let cols = group_columns(x.data(), g, group);
        let wg = &w.data()[group * cog * k..(group + 1) * cog * k];
        let dst = &mut out[group * cog * spatial..(group + 1) * cog * spatial];
        kernels::matmul_acc(wg, &cols, dst, cog, k, spatial);
    }
    if let Some(b) = b {
        for (co, chunk) in out.chunks_mut(spatial).enumerate() {
            let bv = b.data()[co];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(Tensor::from_parts(vec![geo.c_out, g.oh, g.ow], out))
}

pub(crate) struct ConvGrads {
    pub x: Option<Tensor>,
    pub w: Option<Tensor>,
    pub b: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    spec: Conv2dSpec,
    needs: [bool; 3],
) -> Result<ConvGrads> {
    let geo = conv2d_geometry(x, w, spec)?;
    let g = &geo.window;
    let k = g.rows();
    let spatial = g.cols();
    let cog = geo.out_per_group();
    let plane = g.channels * g.h * g.w;
    let mut gx = needs[0].then(|| vec![0.0f32; x.numel()]);
    let mut gw = needs[1].then(|| vec![0.0f32; w.numel()]);
    for group in 0..geo.groups {
        let gyg = &gy.data()[group * cog * spatial..(group + 1) * cog * spatial];
        let wg = &w.data()[group * cog * k..(group + 1) * cog * k];
        if let Some(gx) = gx.as_mut() {
            let wt = kernels::transpose(wg, cog, k);
            let gcols = kernels::matmul(&wt, gyg, k, cog, spatial);
            let dst = &mut gx[group * plane..(group + 1) * plane];
            if is_pointwise(g) {
                dst.iter_mut().zip(&gcols).for_each(|(d, s)| *d += s);
            } else {
                kernels::col2im_acc(&gcols, g, dst);
            }
        }
        if let Some(gw) = gw.as_mut() {
            let cols = group_columns(x.data(), g, group);
            let cols_t = kernels::transpose(&cols, k, spatial);
            let dst = &mut gw[group * cog * k..(group + 1) * cog * k];
            kernels::matmul_acc(gyg, &cols_t, dst, cog, spatial, k);
        }
    }
    let gb = needs[2].then(|| channel_sums(gy.data(), geo.c_out, spatial));
    Ok(ConvGrads {
        x: gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        w: gw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
        b: gb.map(|d| Tensor::from_parts(vec![geo.c_out], d)),
    })
}

fn channel_sums(data: &[f32], channels: usize, spatial: usize) -> Vec<f32> {
    (0..channels)
        .map(|c| data[c * spatial..(c + 1) * spatial].iter().sum())
        .collect()
}

fn conv_transpose_dims(x: &Tensor, w: &Tensor, stride: usize) -> Result<[usize; 6]> {
    const OP: &str = "conv_transpose2d";
    let [c_in, h, wd] = x.dims3(OP)?;
    let [wc_in, c_out, kh, kw] = w.dims4(OP)?;
    if stride == 0 {
        return Err(Error::invalid(OP, "stride must be at least 1"));
    }
    if wc_in != c_in {
        return Err(Error::shape(
            OP,
            format!("weight input-channel dim {wc_in} != input channels {c_in}"),
        ));
    }
    Ok([c_in, h, wd, c_out, kh, kw])
}

/// Transposed convolution, `x: [C_in, H, W]`, `w: [C_in, C_out, kh, kw]`,
/// no padding: output is `[C_out, (H-1)·stride + kh, (W-1)·stride + kw]`.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
) -> Result<Tensor> {
    let [c_in, h, wd, c_out, kh, kw] = conv_transpose_dims(x, w, stride)?;
    check_bias(b, c_out, "conv_transpose2d")?;
    let (oh, ow) = ((h - 1) * stride + kh, (wd - 1) * stride + kw);
    let mut out = vec![0.0f32; c_out * oh * ow];
    let xd = x.data();
    let wdat = w.data();
    for ci in 0..c_in {
        let xplane = &xd[ci * h * wd..(ci + 1) * h * wd];
        for co in 0..c_out {
            let oplane = &mut out[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wdat[((ci * c_out + co) * kh + ky) * kw + kx];
                    for y in 0..h {
                        let orow = (y * stride + ky) * ow + kx;
                        let xrow = &xplane[y * wd..(y + 1) * wd];
                        for (xi, &xv) in xrow.iter().enumerate() {
                            oplane[orow + xi * stride] += wv * xv;
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = b {
        for (co, chunk) in out.chunks_mut(oh * ow).enumerate() {
            let bv = b.data()[co];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(Tensor::from_parts(vec![c_out, oh, ow], out))
}

pub(crate) fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    needs: [bool; 3],
) -> Result<ConvGrads> {
    let [c_in, h, wd, c_out, kh, kw] = conv_transpose_dims(x, w, stride)?;
    // d/dx is a strided correlation of gy with the same weight, read as [C_in, C_out, kh, kw].
    let gx = if needs[0] {
        Some(conv2d(gy, w, None, Conv2dSpec::new(stride, 0))?)
    } else {
        None
    };
    let gw = if needs[1] {
        let (oh, ow) = (gy.dim(1), gy.dim(2));
        let g = Window {
            channels: c_out,
            h: oh,
            w: ow,
            kh,
            kw,
            stride,
            pad: 0,
            oh: h,
            ow: wd,
        };
        let cols = kernels::im2col(gy.data(), &g);
        let cols_t = kernels::transpose(&cols, g.rows(), g.cols());
        let d = kernels::matmul(x.data(), &cols_t, c_in, h * wd, g.rows());
        Some(Tensor::from_parts(w.shape().to_vec(), d))
    } else {
        None
    };
    let gb = needs[2].then(|| {
        let spatial = gy.dim(1) * gy.dim(2);
        Tensor::from_parts(vec![c_out], channel_sums(gy.data(), c_out, spatial))
    });
    Ok(ConvGrads {
        x: gx,
        w: gw,
        b: gb,
    })
}

fn seq_dims(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [l, d] => Ok((1, *l, *d)),
        [b, l, d] => Ok((*b, *l, *d)),
        s => Err(Error::shape(
            op,
            format!("expected [L, D] or [B, L, D], got {s:?}"),
        )),
    }
}

fn conv1d_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize)> {
    const OP: &str = "conv1d";
    let (batch, len, d) = seq_dims(x, OP)?;
    let [wd, one, k] = w.dims3(OP)?;
    if one != 1 {
        return Err(Error::shape(
            OP,
            format!("only depthwise kernels are supported, weight group dim is {one}"),
        ));
    }
    if wd != d {
        return Err(Error::shape(
            OP,
            format!("weight channels {wd} != sequence channels {d}"),
        ));
    }
    Ok((batch, len, d, k))
}

/// Causal depthwise 1-D convolution along the sequence axis of `x: [.., L, D]`
/// with `w: [D, 1, k]`; position `t` sees inputs `t-k+1 ..= t` (left zero padding).
pub fn conv1d_causal(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (batch, len, d, k) = conv1d_dims(x, w)?;
    check_bias(b, d, "conv1d")?;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0f32; x.numel()];
    for bi in 0..batch {
        let base = bi * len * d;
        for t in 0..len {
            let orow = &mut out[base + t * d..base + (t + 1) * d];
            if let Some(b) = b {
                orow.copy_from_slice(b.data());
            }
            for j in 0..k {
                let Some(src_t) = (t + j).checked_sub(k - 1) else {
                    continue;
                };
                let xrow = &xd[base + src_t * d..base + (src_t + 1) * d];
                for c in 0..d {
                    orow[c] += wdat[c * k + j] * xrow[c];
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn conv1d_causal_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    needs: [bool; 3],
) -> Result<ConvGrads> {
    let (batch, len, d, k) = conv1d_dims(x, w)?;
    let xd = x.data();
    let wdat = w.data();
    let g = gy.data();
    let mut gx = needs[0].then(|| vec![0.0f32; x.numel()]);
    let mut gw = needs[1].then(|| vec![0.0f32; w.numel()]);
    let mut gb = needs[2].then(|| vec![0.0f32; d]);
    for bi in 0..batch {
        let base = bi * len * d;
        for t in 0..len {
            let grow = &g[base + t * d..base + (t + 1) * d];
            if let Some(gb) = gb.as_mut() {
                gb.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
            }
            for j in 0..k {
                let Some(src_t) = (t + j).checked_sub(k - 1) else {
                    continue;
                };
                let off = base + src_t * d;
                for c in 0..d {
                    if let Some(gx) = gx.as_mut() {
                        gx[off + c] += wdat[c * k + j] * grow[c];
                    }
                    if let Some(gw) = gw.as_mut() {
                        gw[c * k + j] += xd[off + c] * grow[c];
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        x: gx.map(|v| Tensor::from_parts(x.shape().to_vec(), v)),
        w: gw.map(|v| Tensor::from_parts(w.shape().to_vec(), v)),
        b: gb.map(|v| Tensor::from_parts(vec![d], v)),
    })
}

fn linear_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize)> {
    const OP: &str = "linear";
    let [d_out, d_in] = w.dims2(OP)?;
    let last = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape(OP, "input must have rank >= 1"))?;
    if last != d_in {
        return Err(Error::shape(
            OP,
            format!("trailing input dim {last} != weight input dim {d_in}"),
        ));
    }
    Ok((x.numel() / d_in, d_in, d_out))
}

/// `y = x · wᵀ + b` over the trailing axis; `w: [D_out, D_in]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (rows, d_in, d_out) = linear_dims(x, w)?;
    check_bias(b, d_out, "linear")?;
    let wt = kernels::transpose(w.data(), d_out, d_in);
    let mut out = match b {
        Some(b) => b.data().repeat(rows),
        None => vec![0.0; rows * d_out],
    };
    kernels::matmul_acc(x.data(), &wt, &mut out, rows, d_in, d_out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    needs: [bool; 3],
) -> Result<ConvGrads> {
    let (rows, d_in, d_out) = linear_dims(x, w)?;
    let gx = needs[0].then(|| {
        Tensor::from_parts(
            x.shape().to_vec(),
            kernels::matmul(gy.data(), w.data(), rows, d_out, d_in),
        )
    });
    let gw = needs[1].then(|| {
        let gyt = kernels::transpose(gy.data(), rows, d_out);
        Tensor::from_parts(
            vec![d_out, d_in],
            kernels::matmul(&gyt, x.data(), d_out, rows, d_in),
        )
    });
    let gb = needs[2].then(|| {
        let mut acc = vec![0.0f32; d_out];
        for row in gy.data().chunks(d_out) {
            acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        Tensor::from_parts(vec![d_out], acc)
    });
    Ok(ConvGrads {
        x: gx,
        w: gw,
        b: gb,
    })
}

fn layer_norm_dims(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<usize> {
    const OP: &str = "layer_norm";
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape(OP, "input must have rank >= 1"))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(
            OP,
            format!(
                "gamma {:?} / beta {:?} must both be [{d}]",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok(d)
}

fn row_stats(row: &[f32], eps: f32) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps as f64).sqrt())
}

/// Normalizes each trailing-axis row to zero mean / unit (biased) variance, then
/// applies `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = layer_norm_dims(x, gamma, beta)?;
    if !(eps > 0.0) {
        return Err(Error::invalid("layer_norm", "eps must be positive"));
    }
    let (g, b) = (gamma.data(), beta.data());
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(d) {
        let (mean, rstd) = row_stats(row, eps);
        out.extend(
            row.iter()
                .enumerate()
                .map(|(i, &v)| (((v as f64 - mean) * rstd) as f32) * g[i] + b[i]),
        );
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    gy: &Tensor,
    eps: f32,
) -> Result<[Tensor; 3]> {
    let d = layer_norm_dims(x, gamma, beta)?;
    let g = gamma.data();
    let mut gx = Vec::with_capacity(x.numel());
    let mut gg = vec![0.0f64; d];
    let mut gb = vec![0.0f64; d];
    for (row, grow) in x.data().chunks(d).zip(gy.data().chunks(d)) {
        let (mean, rstd) = row_stats(row, eps);
        let xhat: Vec<f64> = row.iter().map(|&v| (v as f64 - mean) * rstd).collect();
        let gxhat: Vec<f64> = grow
            .iter()
            .zip(g)
            .map(|(&a, &b)| a as f64 * b as f64)
            .collect();
        let m1 = gxhat.iter().sum::<f64>() / d as f64;
        let m2 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for i in 0..d {
            gx.push((rstd * (gxhat[i] - m1 - xhat[i] * m2)) as f32);
            gg[i] += grow[i] as f64 * xhat[i];
            gb[i] += grow[i] as f64;
        }
    }
    let to32 = |v: Vec<f64>| Tensor::from_parts(vec![d], v.into_iter().map(|x| x as f32).collect());
    Ok([
        Tensor::from_parts(x.shape().to_vec(), gx),
        to32(gg),
        to32(gb),
    ])
}

pub fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu_scalar(x: f32) -> f32 {
    x * sigmoid_scalar(x)
}

pub fn softplus_scalar(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

pub fn softplus(x: &Tensor) -> Tensor {
    x.map(softplus_scalar)
}

/// Bilinear resampling of `[C, H, W]` with half-pixel centers (no corner
/// alignment); samples are clamped to the border.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    const OP: &str = "resize_bilinear";
    let [c, h, w] = img.dims3(OP)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(OP, "output size must be at least 1x1"));
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let src = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, out_h, out_w], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::seeded_rng;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop correlation, written independently of im2col.
    fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize, groups: usize) -> Tensor {
        let [c_in, h, wd] = [x.dim(0), x.dim(1), x.dim(2)];
        let [c_out, cpg, kh, kw] = [w.dim(0), w.dim(1), w.dim(2), w.dim(3)];
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let cog = c_out / groups;
        let mut out = vec![0.0f64; c_out * oh * ow];
        for co in 0..c_out {
            let g = co / cog;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0f64;
                    for ci in 0..cpg {
                        let cin = g * cpg + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x.data()[(cin * h + iy as usize) * wd + ix as usize] as f64
                                    * w.data()[((co * cpg + ci) * kh + ky) * kw + kx] as f64;
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = s;
                }
            }
        }
        let _ = c_in;
        Tensor::new(
            vec![c_out, oh, ow],
            out.into_iter().map(|v| v as f32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = random(&[3, 5, 4], 1);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv2d(&x, &w, Some(&Tensor::zeros(&[3])), Conv2dSpec::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv2d_all_ones_sums_window() {
        let x = Tensor::ones(&[1, 2, 2]);
        let w = Tensor::ones(&[1, 1, 2, 2]);
        let y = conv2d(&x, &w, None, Conv2dSpec::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn depthwise_conv_matches_nested_loops() {
        let x = random(&[3, 8, 8], 2);
        let w = random(&[3, 1, 3, 3], 3);
        let y = conv2d(&x, &w, None, Conv2dSpec::depthwise(3, 1)).unwrap();
        let o = conv_oracle(&x, &w, 1, 1, 3);
        assert_eq!(y.shape(), o.shape());
        assert!(y.max_abs_diff(&o).unwrap() < 1e-5);
    }

    #[test]
    fn strided_grouped_conv_matches_nested_loops() {
        let x = random(&[4, 9, 7], 4);
        let w = random(&[6, 2, 4, 4], 5);
        let spec = Conv2dSpec {
            stride: 2,
            padding: 1,
            groups: 2,
        };
        let y = conv2d(&x, &w, None, spec).unwrap();
        assert_eq!(y.shape(), &[6, 4, 3]);
        assert!(y.max_abs_diff(&conv_oracle(&x, &w, 2, 1, 2)).unwrap() < 1e-5);
    }

    #[test]
    fn conv2d_shape_errors_name_the_dimension() {
        let x = Tensor::zeros(&[3, 4, 4]);
        let err = conv2d(
            &x,
            &Tensor::zeros(&[2, 2, 1, 1]),
            None,
            Conv2dSpec::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("input-channel"), "{err}");
        let spec = Conv2dSpec {
            groups: 2,
            ..Default::default()
        };
        let err = conv2d(&x, &Tensor::zeros(&[2, 1, 1, 1]), None, spec).unwrap_err();
        assert!(err.to_string().contains("groups"), "{err}");
        let err = conv2d(
            &x,
            &Tensor::zeros(&[1, 3, 5, 5]),
            None,
            Conv2dSpec::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("kernel height"), "{err}");
    }

    #[test]
    fn conv_transpose_small_cases() {
        let x = Tensor::full(&[1, 1, 1], 0.7);
        let w = Tensor::ones(&[1, 1, 2, 2]);
        let y = conv_transpose2d(&x, &w, None, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 0.7));

        let z = conv_transpose2d(
            &Tensor::zeros(&[3, 4, 5]),
            &random(&[3, 2, 2, 2], 6),
            None,
            2,
        )
        .unwrap();
        assert_eq!(z.shape(), &[2, 8, 10]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv1d_kernels_shift_and_identity() {
        let x = Tensor::new([4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ident = Tensor::new([1, 1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(conv1d_causal(&x, &ident, None).unwrap(), x);
        let shift = Tensor::new([1, 1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(
            conv1d_causal(&x, &shift, None).unwrap().data(),
            &[0.0, 1.0, 2.0, 3.0]
        );
        assert!(conv1d_causal(&x, &Tensor::zeros(&[1, 2, 2]), None).is_err());
    }

    #[test]
    fn conv1d_matches_sliding_window() {
        let (l, d, k) = (11, 3, 4);
        let x = random(&[l, d], 7);
        let w = random(&[d, 1, k], 8);
        let b = random(&[d], 9);
        let y = conv1d_causal(&x, &w, Some(&b)).unwrap();
        for t in 0..l {
            for c in 0..d {
                let mut s = b.data()[c] as f64;
                for lag in 0..k {
                    if t >= lag {
                        s += w.data()[c * k + (k - 1 - lag)] as f64
                            * x.data()[(t - lag) * d + c] as f64;
                    }
                }
                assert!((y.data()[t * d + c] as f64 - s).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn linear_cases() {
        let x = random(&[4, 8], 10);
        let mut eye = Tensor::zeros(&[8, 8]);
        for i in 0..8 {
            eye.data_mut()[i * 9] = 1.0;
        }
        assert_eq!(linear(&x, &eye, Some(&Tensor::zeros(&[8]))).unwrap(), x);

        let b = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let y = linear(&x, &Tensor::zeros(&[3, 8]), Some(&b)).unwrap();
        for row in y.data().chunks(3) {
            assert_eq!(row, b.data());
        }

        let w = random(&[3, 8], 11);
        let y = linear(&x, &w, None).unwrap();
        for i in 0..4 {
            for o in 0..3 {
                let mut s = 0.0f64;
                for p in 0..8 {
                    s += x.data()[i * 8 + p] as f64 * w.data()[o * 8 + p] as f64;
                }
                assert!((y.data()[i * 3 + o] as f64 - s).abs() < 1e-5);
            }
        }
        assert!(linear(&x, &Tensor::zeros(&[3, 7]), None).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let g = Tensor::ones(&[2]);
        let b = Tensor::zeros(&[2]);
        let y = layer_norm(&Tensor::new([1, 2], vec![1.0, 3.0]).unwrap(), &g, &b, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-6 && (y.data()[1] - 1.0).abs() < 1e-6);

        let g = Tensor::ones(&[5]);
        let b = Tensor::zeros(&[5]);
        let c = layer_norm(&Tensor::full(&[2, 5], 0.1), &g, &b, LAYER_NORM_EPS).unwrap();
        assert!(c.data().iter().all(|v| v.abs() < 1e-5));

        let x = random(&[6, 64], 12).scale(3.0);
        let y = layer_norm(
            &x,
            &Tensor::ones(&[64]),
            &Tensor::zeros(&[64]),
            LAYER_NORM_EPS,
        )
        .unwrap();
        for row in y.data().chunks(64) {
            let m = row.iter().map(|&v| v as f64).sum::<f64>() / 64.0;
            let v = row.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / 64.0;
            assert!(m.abs() < 1e-6, "mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "var {v}");
        }
    }

    #[test]
    fn activation_values() {
        assert_eq!(silu_scalar(0.0), 0.0);
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        // x·σ(x) in double precision: -0.2689414213699951, 9.999546021312976
        assert!((silu_scalar(-1.0) - (-0.268_941_42)).abs() < 1e-6);
        assert!((silu_scalar(10.0) - 9.999_546).abs() < 1e-5);
        assert!(sigmoid_scalar(-100.0) > 0.0 && sigmoid_scalar(100.0) <= 1.0);
        assert!((softplus_scalar(0.0) - std::f32::consts::LN_2).abs() < 1e-7);
    }

    #[test]
    fn resize_cases() {
        let c = Tensor::full(&[2, 3, 5], 0.3);
        let r = resize_bilinear(&c, 7, 4).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.3).abs() < 1e-7));

        let one = Tensor::full(&[1, 1, 1], 0.8);
        assert!(resize_bilinear(&one, 2, 2)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.8));

        let checker = Tensor::new([1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(resize_bilinear(&checker, 1, 1).unwrap().data(), &[0.5]);

        let x = random(&[3, 9, 6], 13);
        let r = resize_bilinear(&x, 13, 4).unwrap();
        assert!(r.min() >= x.min() && r.max() <= x.max());
    }
}
