//! Center-based head: score, sub-cell offset and size maps over the search
//! grid, and their decoding into a box.

use crate::autograd::Var;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::init::SeededRng;
use crate::layers;
use crate::nn::Conv2dSpec;
use crate::params::{ParamStore, Params};
use crate::tensor::Tensor;

/// Initial score logit, so every cell starts near probability 0.1.
pub const SCORE_PRIOR_BIAS: f32 = -2.19;

/// Head maps. `offset` and `size` hold `(x, y)` and `(w, h)` in channel order.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    /// `[G, G]` in `(0, 1)`.
    pub score: Tensor,
    /// `[2, G, G]`, cell fractions.
    pub offset: Tensor,
    /// `[2, G, G]`, fractions of the search side.
    pub size: Tensor,
}

/// The same maps, still on the graph.
pub struct HeadVars {
    pub score: Var,
    pub offset: Var,
    pub size: Var,
}

impl HeadVars {
    pub fn values(&self) -> HeadOutput {
        HeadOutput {
            score: self.score.value().clone(),
            offset: self.offset.value().clone(),
            size: self.size.value().clone(),
        }
    }

    /// Normalized `[x, y, w, h]` read at `cell = (row, col)`.
    pub fn box_at(&self, cell: (usize, usize)) -> Result<Var> {
        let g = self.score.shape()[0];
        let (i, j) = cell;
        let at = |m: &Var, ch: usize| m.gather(&[ch * g * g + i * g + j]);
        let inv = 1.0 / g as f32;
        let cx = at(&self.offset, 0)?.add_scalar(j as f32)?.scale(inv)?;
        let cy = at(&self.offset, 1)?.add_scalar(i as f32)?.scale(inv)?;
        let (w, h) = (at(&self.size, 0)?, at(&self.size, 1)?);
        let x = cx.sub(&w.scale(0.5)?)?;
        let y = cy.sub(&h.scale(0.5)?)?;
        Var::concat(&[&x, &y, &w, &h], 0)
    }
}

/// Peak cell `(row, col)`; ties go to the lowest row-major index.
pub fn argmax_cell(score: &Tensor) -> (usize, usize) {
    let g = score.shape()[1];
    let mut best = 0;
    for (k, &v) in score.data().iter().enumerate() {
        if v > score.data()[best] {
            best = k;
        }
    }
    (best / g, best % g)
}

/// Box in search-crop pixels read at the peak of `maps`.
pub fn decode(maps: &HeadOutput, search_size: usize) -> ((usize, usize), BBox) {
    let g = maps.score.shape()[0];
    let (i, j) = argmax_cell(&maps.score);
    let s = search_size as f64;
    let pick = |m: &Tensor, ch: usize| m.data()[ch * g * g + i * g + j] as f64;
    let cx = (j as f64 + pick(&maps.offset, 0)) / g as f64 * s;
    let cy = (i as f64 + pick(&maps.offset, 1)) / g as f64 * s;
    let (w, h) = (pick(&maps.size, 0) * s, pick(&maps.size, 1) * s);
    (
        (i, j),
        BBox {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        },
    )
}

/// Training targets for a crop-space box: its cell, sub-cell offset and
/// normalized size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellTarget {
    pub cell: (usize, usize),
    pub offset: (f64, f64),
    pub size: (f64, f64),
}

pub fn encode(b: &BBox, search_size: usize, grid: usize) -> CellTarget {
    let s = search_size as f64;
    let (cx, cy) = b.center();
    let gx = (cx / s * grid as f64).clamp(0.0, grid as f64 - 1e-9);
    let gy = (cy / s * grid as f64).clamp(0.0, grid as f64 - 1e-9);
    let (j, i) = (gx.floor() as usize, gy.floor() as usize);
    CellTarget {
        cell: (i, j),
        offset: (gx - j as f64, gy - i as f64),
        size: (b.w / s, b.h / s),
    }
}

/// Maps that decode to exactly `t`: a one-hot score and constant offset/size.
pub fn render_maps(t: &CellTarget, grid: usize) -> HeadOutput {
    let (i, j) = t.cell;
    let gg = grid * grid;
    HeadOutput {
        score: Tensor::from_fn(&[grid, grid], |k| if k == i * grid + j { 0.9 } else { 0.1 }),
        offset: Tensor::from_fn(&[2, grid, grid], |k| {
            if k < gg {
                t.offset.0 as f32
            } else {
                t.offset.1 as f32
            }
        }),
        size: Tensor::from_fn(&[2, grid, grid], |k| {
            if k < gg {
                t.size.0 as f32
            } else {
                t.size.1 as f32
            }
        }),
    }
}

/// Three conv stacks `conv3×3 → ReLU → conv3×3 → ReLU → conv1×1 → sigmoid`
/// under `vltrack.head.{score,offset,size}.conv{1,2,3}`.
#[derive(Clone, Debug)]
pub struct Head {
    pub d1: usize,
    pub channels: usize,
}

const BRANCHES: [(&str, usize); 3] = [("score", 1), ("offset", 2), ("size", 2)];

impl Head {
    pub fn new(d1: usize, channels: usize) -> Self {
        Head { d1, channels }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) -> Result<()> {
        for (b, out) in BRANCHES {
            let pre = format!("vltrack.head.{b}");
            layers::init_conv2d(
                store,
                rng,
                &format!("{pre}.conv1"),
                self.channels,
                self.d1,
                3,
            )?;
            layers::init_conv2d(
                store,
                rng,
                &format!("{pre}.conv2"),
                self.channels,
                self.channels,
                3,
            )?;
            layers::init_conv2d(store, rng, &format!("{pre}.conv3"), out, self.channels, 1)?;
        }
        store.set(
            "vltrack.head.score.conv3.bias",
            Tensor::full(&[1], SCORE_PRIOR_BIAS),
        )?;
        Ok(())
    }

    /// `tokens: [G², D1]`, row-major over the grid.
    pub fn forward(&self, p: &Params, tokens: &Var) -> Result<HeadVars> {
        let [n, d] = tokens.value().dims2("head_predict")?;
        let g = (n as f64).sqrt().round() as usize;
        if g * g != n || d != self.d1 {
            return Err(Error::shape(
                "head_predict",
                format!(
                    "expected [G², {}] tokens, got {:?}",
                    self.d1,
                    tokens.shape()
                ),
            ));
        }
        let map = tokens.transpose2d()?.reshape(&[d, g, g])?;
        let same = Conv2dSpec::new(1, 1);
        let branch = |b: &str| -> Result<Var> {
            let pre = format!("vltrack.head.{b}");
            let x = layers::conv2d(p, &format!("{pre}.conv1"), &map, same)?.relu()?;
            let x = layers::conv2d(p, &format!("{pre}.conv2"), &x, same)?.relu()?;
            layers::conv2d(p, &format!("{pre}.conv3"), &x, Conv2dSpec::default())?.sigmoid()
        };
        Ok(HeadVars {
            score: branch("score")?.reshape(&[g, g])?,
            offset: branch("offset")?,
            size: branch("size")?,
        })
    }
}
