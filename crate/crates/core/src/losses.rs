//! Training losses: L1 and GIoU on normalized boxes, the penalty-reduced
//! focal loss on the score map, and their weighted total.
//!
//! Box arguments are `[x, y, w, h]` in search-region units, i.e. `[0, 1]`.

use crate::autograd::Var;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;
pub const FOCAL_EPS: f32 = 1e-7;

/// Weights of the total loss, in the order L1, GIoU, focal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f32,
    pub giou: f32,
    pub focal: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 5.0,
            giou: 2.0,
            focal: 1.5,
        }
    }
}

impl LossWeights {
    pub fn new(l1: f32, giou: f32, focal: f32) -> Result<Self> {
        if [l1, giou, focal]
            .iter()
            .any(|w| !(*w >= 0.0) || !w.is_finite())
        {
            return Err(Error::invalid(
                "loss_weights",
                "weights must be finite and nonnegative",
            ));
        }
        Ok(LossWeights { l1, giou, focal })
    }

    /// `λ1·l1 + λgiou·giou + λfocal·focal` on scalar graph values.
    pub fn combine(&self, l1: &Var, giou: &Var, focal: &Var) -> Result<Var> {
        l1.scale(self.l1)?
            .add(&giou.scale(self.giou)?)?
            .add(&focal.scale(self.focal)?)
    }
}

/// Weighted sum of `(l1, giou, focal)` component values.
pub fn total_loss(components: [f64; 3], w: LossWeights) -> f64 {
    w.l1 as f64 * components[0] + w.giou as f64 * components[1] + w.focal as f64 * components[2]
}

fn box_tensor(b: &BBox) -> Tensor {
    Tensor::new([4], b.to_array().iter().map(|&v| v as f32).collect()).unwrap()
}

fn check_box_var(pred: &Var, op: &'static str) -> Result<()> {
    if pred.shape() != [4] {
        return Err(Error::shape(
            op,
            format!("expected a [4] box, got {:?}", pred.shape()),
        ));
    }
    Ok(())
}

/// Mean absolute difference over the four coordinates.
pub fn l1_loss(pred: &BBox, gt: &BBox) -> f64 {
    pred.to_array()
        .iter()
        .zip(gt.to_array())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / 4.0
}

pub fn l1_loss_var(pred: &Var, gt: &BBox) -> Result<Var> {
    check_box_var(pred, "l1_loss")?;
    pred.sub(&Var::constant(box_tensor(gt)))?.abs()?.mean()
}

pub fn giou_loss(pred: &BBox, gt: &BBox) -> f64 {
    1.0 - pred.giou(gt)
}

/// `1 - giou(pred, gt)` built from differentiable primitives.
pub fn giou_loss_var(pred: &Var, gt: &BBox) -> Result<Var> {
    check_box_var(pred, "giou_loss")?;
    let c = |v: f64| Var::constant(Tensor::full(&[1], v as f32));
    let (x1, y1) = (pred.gather(&[0])?, pred.gather(&[1])?);
    let (w, h) = (pred.gather(&[2])?, pred.gather(&[3])?);
    let (x2, y2) = (x1.add(&w)?, y1.add(&h)?);
    let (gx1, gy1, gx2, gy2) = (c(gt.x), c(gt.y), c(gt.right()), c(gt.bottom()));

    let iw = x2.minimum(&gx2)?.sub(&x1.maximum(&gx1)?)?.relu()?;
    let ih = y2.minimum(&gy2)?.sub(&y1.maximum(&gy1)?)?.relu()?;
    let inter = iw.mul(&ih)?;
    let union = w.mul(&h)?.add_scalar(gt.area() as f32)?.sub(&inter)?;
    let ew = x2.maximum(&gx2)?.sub(&x1.minimum(&gx1)?)?;
    let eh = y2.maximum(&gy2)?.sub(&y1.minimum(&gy1)?)?;
    let enclosure = ew.mul(&eh)?;
    let giou = inter
        .div(&union)?
        .sub(&enclosure.sub(&union)?.div(&enclosure)?)?;
    giou.neg()?.add_scalar(1.0)?.sum()
}

/// Gaussian heat map on a `grid × grid` lattice peaking at `cell = (row, col)`.
/// `sigma = max(1, max(w_cells, h_cells) / 6)`.
pub fn gaussian_target(
    cell: (usize, usize),
    size_cells: (f64, f64),
    grid: usize,
) -> Result<Tensor> {
    let (ci, cj) = cell;
    if ci >= grid || cj >= grid {
        return Err(Error::invalid(
            "gaussian_target",
            format!("cell {cell:?} outside a {grid}x{grid} grid"),
        ));
    }
    let diameter = size_cells.0.max(size_cells.1);
    let sigma = (diameter / 6.0).max(1.0);
    let two_s2 = 2.0 * sigma * sigma;
    Ok(Tensor::from_fn(&[grid, grid], |k| {
        let (di, dj) = ((k / grid) as f64 - ci as f64, (k % grid) as f64 - cj as f64);
        (-(di * di + dj * dj) / two_s2).exp() as f32
    }))
}

/// Penalty-reduced focal loss. Cells with `target == 1` are positives:
/// `-(1-p)^α ln p`; all others contribute `-(1-q)^β p^α ln(1-p)`. The sum is
/// divided by the number of positives. `p` is clamped to `[ε, 1-ε]`.
pub fn focal_loss(score: &Var, target: &Tensor) -> Result<Var> {
    const OP: &str = "focal_loss";
    if score.shape() != target.shape() {
        return Err(Error::shape(
            OP,
            format!("score {:?} vs target {:?}", score.shape(), target.shape()),
        ));
    }
    let num_pos = target.data().iter().filter(|&&q| q == 1.0).count();
    if num_pos == 0 {
        return Err(Error::invalid(OP, "target has no positive cell"));
    }
    let norm = num_pos as f64;
    let mut total = 0.0f64;
    for (&p, &q) in score.value().data().iter().zip(target.data()) {
        let p = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS) as f64;
        total += if q == 1.0 {
            -(1.0 - p).powi(FOCAL_ALPHA) * p.ln()
        } else {
            -(1.0 - q as f64).powi(FOCAL_BETA) * p.powi(FOCAL_ALPHA) * (1.0 - p).ln()
        };
    }
    let target = target.clone();
    Var::from_op(
        OP,
        Tensor::scalar((total / norm) as f32),
        vec![score.clone()],
        move |c| {
            let g = c.grad.data()[0] as f64 / norm;
            let grad = c.inputs[0]
                .data()
                .iter()
                .zip(target.data())
                .map(|(&p_raw, &q)| {
                    if !(FOCAL_EPS..=1.0 - FOCAL_EPS).contains(&p_raw) {
                        return 0.0;
                    }
                    let p = p_raw as f64;
                    let d = if q == 1.0 {
                        2.0 * (1.0 - p) * p.ln() - (1.0 - p).powi(2) / p
                    } else {
                        -(1.0 - q as f64).powi(FOCAL_BETA)
                            * (2.0 * p * (1.0 - p).ln() - p * p / (1.0 - p))
                    };
                    (g * d) as f32
                })
                .collect();
            Ok(vec![Some(Tensor::from_parts(
                c.inputs[0].shape().to_vec(),
                grad,
            ))])
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_of;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    fn var_box(bx: &BBox) -> Var {
        Var::param("box", box_tensor(bx))
    }

    #[test]
    fn paper_weights_and_total() {
        let w = LossWeights::default();
        assert_eq!((w.l1, w.giou, w.focal), (5.0, 2.0, 1.5));
        assert_eq!(total_loss([0.0; 3], w), 0.0);
        assert!((total_loss([0.1, 0.2, 0.3], w) - 1.35).abs() < 1e-6);
        assert!(LossWeights::new(1.0, -0.5, 1.0).is_err());
    }

    #[test]
    fn combine_gradient_is_the_weight() {
        let w = LossWeights::default();
        let parts: Vec<Var> = ["l1", "g", "f"]
            .iter()
            .map(|n| Var::param(*n, Tensor::scalar(0.3)))
            .collect();
        let total = w.combine(&parts[0], &parts[1], &parts[2]).unwrap();
        assert!((total.value().data()[0] - 0.3 * 8.5).abs() < 1e-6);
        let g = grad_of(&total).unwrap();
        assert_eq!(g.get("l1").unwrap().data(), &[5.0]);
        assert_eq!(g.get("g").unwrap().data(), &[2.0]);
        assert_eq!(g.get("f").unwrap().data(), &[1.5]);
    }

    #[test]
    fn l1_examples() {
        let a = b(0.2, 0.3, 0.4, 0.5);
        assert_eq!(l1_loss(&a, &a), 0.0);
        let shifted = a.translate(0.1, 0.0);
        assert!((l1_loss(&shifted, &a) - 0.025).abs() < 1e-12);
        assert_eq!(l1_loss(&shifted, &a), l1_loss(&a, &shifted));
        let v = l1_loss_var(&var_box(&shifted), &a).unwrap();
        assert!((v.value().data()[0] - 0.025).abs() < 1e-6);
    }

    #[test]
    fn giou_var_matches_f64() {
        let cases = [
            (b(0.0, 0.0, 1.0, 1.0), b(2.0, 0.0, 1.0, 1.0), 4.0 / 3.0),
            (b(0.0, 0.0, 2.0, 2.0), b(0.0, 0.0, 2.0, 1.0), 0.5),
            (b(0.1, 0.2, 0.3, 0.3), b(0.1, 0.2, 0.3, 0.3), 0.0),
        ];
        for (p, g, want) in cases {
            assert!((giou_loss(&p, &g) - want).abs() < 1e-12);
            let v = giou_loss_var(&var_box(&p), &g).unwrap();
            assert!((v.value().data()[0] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn gaussian_target_values() {
        let t = gaussian_target((8, 8), (3.0, 3.0), 16).unwrap();
        assert_eq!(t.data()[8 * 16 + 8], 1.0);
        assert_eq!(t.data().iter().filter(|&&v| v == 1.0).count(), 1);
        let n = (-0.5f32).exp();
        for k in [7 * 16 + 8, 9 * 16 + 8, 8 * 16 + 7, 8 * 16 + 9] {
            assert!((t.data()[k] - n).abs() < 1e-6);
            assert!((t.data()[k] - 0.6065).abs() < 1e-4);
        }
        let at = |i: usize, j: usize| t.data()[i * 16 + j];
        for d in 1..8 {
            assert_eq!(at(8 - d, 8), at(8 + d, 8));
            assert_eq!(at(8, 8 - d), at(8, 8 + d));
            assert_eq!(at(8 - d, 8 + d), at(8 + d, 8 - d));
        }
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(gaussian_target((16, 0), (1.0, 1.0), 16).is_err());
        // Wide targets widen the kernel.
        let wide = gaussian_target((8, 8), (12.0, 3.0), 16).unwrap();
        assert!(wide.data()[8 * 16 + 9] > t.data()[8 * 16 + 9]);
    }

    #[test]
    fn gaussian_target_is_symmetric_about_the_peak() {
        let t = gaussian_target((7, 7), (6.0, 6.0), 15).unwrap();
        for i in 0..15 {
            for j in 0..15 {
                assert_eq!(t.data()[i * 15 + j], t.data()[(14 - i) * 15 + (14 - j)]);
                assert_eq!(t.data()[i * 15 + j], t.data()[j * 15 + i]);
            }
        }
    }

    fn one_hot(k: usize) -> Tensor {
        Tensor::from_fn(&[16, 16], |i| if i == k { 1.0 } else { 0.0 })
    }

    #[test]
    fn focal_examples() {
        let target = one_hot(40);
        let perfect = Var::constant(one_hot(40));
        assert!(focal_loss(&perfect, &target).unwrap().value().data()[0] < 1e-5);

        let mut half = Tensor::zeros(&[16, 16]);
        half.data_mut()[40] = 0.5;
        let l = focal_loss(&Var::constant(half), &target)
            .unwrap()
            .value()
            .data()[0];
        assert!((l - 0.25 * 2f32.ln()).abs() < 1e-6);
        assert!((l - 0.1733).abs() < 1e-4);

        let mut prev = f32::INFINITY;
        for step in 1..=9 {
            let mut s = Tensor::full(&[16, 16], 0.1);
            s.data_mut()[40] = step as f32 / 10.0;
            let l = focal_loss(&Var::constant(s), &target)
                .unwrap()
                .value()
                .data()[0];
            assert!(l < prev);
            prev = l;
        }
        assert!(focal_loss(
            &Var::constant(Tensor::full(&[16, 16], 0.5)),
            &Tensor::zeros(&[16, 16])
        )
        .is_err());
        assert!(focal_loss(&Var::constant(Tensor::zeros(&[4, 4])), &target).is_err());
    }

    #[test]
    fn focal_is_normalized_by_positive_count() {
        let mut t = one_hot(3);
        t.data_mut()[200] = 1.0;
        let mut s = Tensor::zeros(&[16, 16]);
        s.data_mut()[3] = 0.5;
        s.data_mut()[200] = 0.5;
        let l = focal_loss(&Var::constant(s), &t).unwrap().value().data()[0];
        assert!((l - 0.25 * 2f32.ln()).abs() < 1e-6);
    }
}
