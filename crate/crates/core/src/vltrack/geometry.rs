//! Square crops around a box and the map back to frame coordinates.

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps crop pixel coordinates to frame coordinates:
/// `frame = origin + crop / scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform {
    /// Output pixels per frame pixel (`out_size / side`).
    pub scale: f64,
    /// Frame coordinates of the crop's top-left corner.
    pub origin: (f64, f64),
    pub out_size: usize,
}

impl CropTransform {
    pub fn to_frame(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.origin.0 + x / self.scale,
            self.origin.1 + y / self.scale,
        )
    }

    pub fn to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin.0) * self.scale,
            (y - self.origin.1) * self.scale,
        )
    }

    pub fn box_to_frame(&self, b: &BBox) -> BBox {
        let (x, y) = self.to_frame(b.x, b.y);
        BBox {
            x,
            y,
            w: b.w / self.scale,
            h: b.h / self.scale,
        }
    }

    pub fn box_to_crop(&self, b: &BBox) -> BBox {
        let (x, y) = self.to_crop(b.x, b.y);
        BBox {
            x,
            y,
            w: b.w * self.scale,
            h: b.h * self.scale,
        }
    }
}

/// Side of the square crop: `factor · sqrt(w · h)`.
pub fn crop_side(b: &BBox, factor: f64) -> f64 {
    factor * (b.w * b.h).sqrt()
}

/// Samples an `out_size²` square centered on `b` with side
/// `factor · sqrt(w·h)`. Pixels are bilinear samples at pixel centers; any
/// sample whose center falls outside the frame takes the frame's per-channel
/// mean.
pub fn crop_region(
    frame: &Tensor,
    b: &BBox,
    factor: f64,
    out_size: usize,
) -> Result<(Tensor, CropTransform)> {
    const OP: &str = "crop_region";
    if !b.is_valid() {
        return Err(Error::invalid(OP, format!("degenerate box {b:?}")));
    }
    if !(factor > 0.0) || out_size == 0 {
        return Err(Error::invalid(
            OP,
            format!("factor {factor}, out_size {out_size}"),
        ));
    }
    let [c, h, w] = frame.dims3(OP)?;
    let side = crop_side(b, factor);
    let (cx, cy) = b.center();
    let t = CropTransform {
        scale: out_size as f64 / side,
        origin: (cx - side / 2.0, cy - side / 2.0),
        out_size,
    };
    let plane = h * w;
    let src = frame.data();
    let means: Vec<f32> = (0..c)
        .map(|ch| {
            (src[ch * plane..(ch + 1) * plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>()
                / plane as f64) as f32
        })
        .collect();

    // Per-axis taps; `None` marks samples outside the frame.
    let taps = |len: usize, origin: f64| -> Vec<Option<(usize, usize, f32)>> {
        (0..out_size)
            .map(|o| {
                let pos = origin + (o as f64 + 0.5) / t.scale;
                if pos < 0.0 || pos > len as f64 {
                    return None;
                }
                let s = (pos - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = s.floor() as usize;
                Some((i0, (i0 + 1).min(len - 1), (s - i0 as f64) as f32))
            })
            .collect()
    };
    let xs = taps(w, t.origin.0);
    let ys = taps(h, t.origin.1);
    let mut out = Vec::with_capacity(c * out_size * out_size);
    for ch in 0..c {
        let p = &src[ch * plane..(ch + 1) * plane];
        for ty in &ys {
            for tx in &xs {
                out.push(match (ty, tx) {
                    (Some((y0, y1, fy)), Some((x0, x1, fx))) => {
                        let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                        let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                        top * (1.0 - fy) + bot * fy
                    }
                    _ => means[ch],
                });
            }
        }
    }
    Ok((Tensor::from_parts(vec![c, out_size, out_size], out), t))
}
