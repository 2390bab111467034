//! Binary 8-bit PGM (P5) and PPM (P6) images as `[C, H, W]` tensors in `[0, 1]`.

use std::path::Path;

use nightrack_core::Tensor;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnmKind {
    /// P5, one channel.
    Gray,
    /// P6, three channels.
    Rgb,
}

impl PnmKind {
    pub fn channels(self) -> usize {
        match self {
            PnmKind::Gray => 1,
            PnmKind::Rgb => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub kind: PnmKind,
    /// `[channels, h, w]`.
    pub data: Tensor,
}

impl Image {
    /// Three-channel view; gray images are replicated.
    pub fn to_rgb(&self) -> Tensor {
        match self.kind {
            PnmKind::Rgb => self.data.clone(),
            PnmKind::Gray => {
                let plane = self.data.data();
                let (h, w) = (self.data.dim(1), self.data.dim(2));
                let mut v = Vec::with_capacity(3 * plane.len());
                for _ in 0..3 {
                    v.extend_from_slice(plane);
                }
                Tensor::new([3, h, w], v).expect("sizes agree")
            }
        }
    }

    /// Stores an RGB tensor as `kind`; gray output is the channel mean.
    pub fn from_rgb(rgb: &Tensor, kind: PnmKind) -> Image {
        let data = match kind {
            PnmKind::Rgb => rgb.clone(),
            PnmKind::Gray => {
                let (h, w) = (rgb.dim(1), rgb.dim(2));
                let n = h * w;
                let d = rgb.data();
                Tensor::from_fn(&[1, h, w], |k| (d[k] + d[n + k] + d[2 * n + k]) / 3.0)
            }
        };
        Image { kind, data }
    }
}

/// Header tokenizer that skips whitespace and `#` comments.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, String> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad {what} in header"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Image, String> {
    let kind = match bytes.get(..2) {
        Some(b"P5") => PnmKind::Gray,
        Some(b"P6") => PnmKind::Rgb,
        _ => return Err("not a binary PGM (P5) or PPM (P6) file".into()),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported (only 8-bit, 255)"));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after header".into());
    }
    let pixels = &bytes[h.pos + 1..];
    let c = kind.channels();
    let n = width * height;
    if pixels.len() != c * n {
        return Err(format!(
            "expected {} pixel bytes, found {}",
            c * n,
            pixels.len()
        ));
    }
    // Interleaved to planar.
    let data = Tensor::from_fn(&[c, height, width], |k| {
        let (ch, p) = (k / n, k % n);
        f32::from(pixels[p * c + ch]) / 255.0
    });
    Ok(Image { kind, data })
}

/// Clamps to `[0, 1]` and rounds to 8 bits.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode(img: &Image) -> Vec<u8> {
    let (c, h, w) = (img.data.dim(0), img.data.dim(1), img.data.dim(2));
    let magic = match img.kind {
        PnmKind::Gray => "P5",
        PnmKind::Rgb => "P6",
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let n = h * w;
    let d = img.data.data();
    out.reserve(c * n);
    for p in 0..n {
        for ch in 0..c {
            out.push(quantize(d[ch * n + p]));
        }
    }
    out
}

pub fn read(path: &Path) -> Result<Image, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::unreadable(path, e))?;
    decode(&bytes).map_err(|e| CliError::unreadable(path, e))
}

pub fn write(path: &Path, img: &Image) -> Result<(), CliError> {
    std::fs::write(path, encode(img)).map_err(|e| CliError::write(path, e))
}

pub fn is_pnm(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("ppm" | "pgm" | "pnm")
    )
}
