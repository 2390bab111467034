//! Seeded synthetic data: smooth images with gamma-darkened counterparts, and
//! tracking sequences of a textured square gliding over noise.

use rand::Rng;

use crate::bbox::BBox;
use crate::init::{seeded_rng, SeededRng};
use crate::nn::resize_bilinear;
use crate::tensor::Tensor;

/// Bilinear upsampling of a coarse random grid; values in `[0.1, 0.9]`.
pub fn smooth_image(rng: &mut SeededRng, h: usize, w: usize) -> Tensor {
    let coarse = Tensor::from_fn(&[3, 4, 4], |_| rng.gen_range(0.1..0.9));
    resize_bilinear(&coarse, h, w).expect("nonzero size")
}

/// `gain · img^gamma`, elementwise.
pub fn gamma_darken(img: &Tensor, gamma: f32, gain: f32) -> Tensor {
    img.map(|v| gain * v.max(0.0).powf(gamma))
}

/// `n` pairs `(dark, bright)` with `dark = 0.3 · bright²`.
pub fn enhancer_pairs(seed: u64, n: usize, h: usize, w: usize) -> Vec<(Tensor, Tensor)> {
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|_| {
            let bright = smooth_image(&mut rng, h, w);
            (gamma_darken(&bright, 2.0, 0.3), bright)
        })
        .collect()
}

/// A rendered sequence with its ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    pub frames: Vec<Tensor>,
    pub boxes: Vec<BBox>,
    pub prompt: String,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SquareMotion {
    pub frames: usize,
    pub frame_size: usize,
    pub side: f64,
    /// Top-left corner in the first frame.
    pub start: (f64, f64),
    /// Displacement per frame.
    pub velocity: (f64, f64),
    /// Multiplies every pixel; below 1 for night scenes.
    pub brightness: f32,
}

impl Default for SquareMotion {
    fn default() -> Self {
        SquareMotion {
            frames: 20,
            frame_size: 96,
            side: 16.0,
            start: (24.0, 30.0),
            velocity: (1.5, 1.0),
            brightness: 1.0,
        }
    }
}

/// A checkerboard-textured square moving linearly over uniform noise.
pub fn square_sequence(seed: u64, m: &SquareMotion) -> SyntheticSequence {
    let mut rng = seeded_rng(seed);
    let s = m.frame_size;
    let background: Vec<f32> = (0..3 * s * s).map(|_| rng.gen_range(0.0..0.6)).collect();
    let palette = [[0.95f32, 0.85, 0.2], [0.9, 0.15, 0.1]];
    let mut frames = Vec::with_capacity(m.frames);
    let mut boxes = Vec::with_capacity(m.frames);
    for f in 0..m.frames {
        let x0 = m.start.0 + m.velocity.0 * f as f64;
        let y0 = m.start.1 + m.velocity.1 * f as f64;
        let bx = BBox::new(x0, y0, m.side, m.side).expect("positive side");
        let mut data = background.clone();
        for y in 0..s {
            for x in 0..s {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if px < x0 || py < y0 || px >= x0 + m.side || py >= y0 + m.side {
                    continue;
                }
                let cell = (((px - x0) / (m.side / 4.0)) as usize
                    + ((py - y0) / (m.side / 4.0)) as usize)
                    % 2;
                for c in 0..3 {
                    data[c * s * s + y * s + x] = palette[cell][c];
                }
            }
        }
        for v in &mut data {
            *v *= m.brightness;
        }
        frames.push(Tensor::new([3, s, s], data).expect("frame"));
        boxes.push(bx);
    }
    SyntheticSequence {
        frames,
        boxes,
        prompt: "a yellow and red checkered square moving over gray noise".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_are_darkened_and_deterministic() {
        let a = enhancer_pairs(1, 3, 16, 16);
        let b = enhancer_pairs(1, 3, 16, 16);
        for ((d1, b1), (d2, b2)) in a.iter().zip(&b) {
            assert_eq!(d1, d2);
            assert_eq!(b1, b2);
            assert!(d1.mean() < 0.5 * b1.mean());
            for (d, v) in d1.data().iter().zip(b1.data()) {
                assert!((d - 0.3 * v * v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn square_moves_linearly() {
        let m = SquareMotion::default();
        let seq = square_sequence(2, &m);
        assert_eq!(seq.frames.len(), 20);
        let (c0, c5) = (seq.boxes[0].center(), seq.boxes[5].center());
        assert!((c5.0 - c0.0 - 7.5).abs() < 1e-12 && (c5.1 - c0.1 - 5.0).abs() < 1e-12);
        let last = seq.boxes.last().unwrap();
        assert!(last.right() <= m.frame_size as f64 && last.bottom() <= m.frame_size as f64);
        // The square is drawn where the box says.
        let (cx, cy) = c0;
        let s = m.frame_size;
        let px = (cy as usize) * s + cx as usize;
        assert!(seq.frames[0].data()[px] >= 0.9);
    }
}
