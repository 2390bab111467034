//! Central finite-difference checks for every differentiable primitive.
//!
//! The checked scalar is `sum(f(x) ⊙ W)` for a fixed random `W`, so every
//! output element contributes. Errors are normwise per input:
//! `|g_analytic - g_numeric|_2 / max(|g_analytic|_2, |g_numeric|_2)`.

use rand::Rng;

use crate::autograd::{grad_of, Var};
use crate::bbox::BBox;
use crate::error::Result;
use crate::init::{seeded_rng, SeededRng};
use crate::nn::Conv2dSpec;
use crate::tensor::Tensor;

pub const FD_STEP: f32 = 1e-3;

pub type BuildFn = fn(&[Var]) -> Result<Var>;
pub type InputsFn = fn(&mut SeededRng) -> Vec<Tensor>;

/// One differentiable primitive: how to draw inputs and how to apply it.
#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub inputs: InputsFn,
    pub build: BuildFn,
}

/// Largest normwise relative error over all inputs of `build` at `inputs`.
pub fn max_relative_error(build: BuildFn, inputs: &[Tensor], h: f32, seed: u64) -> Result<f64> {
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| Var::param(format!("in{i}"), t.clone()))
        .collect();
    let y = build(&vars)?;
    let mut rng = seeded_rng(seed ^ 0x5eed);
    let w = Tensor::from_fn(y.shape(), |_| rng.gen_range(-1.0..1.0));
    let loss = y.mul(&Var::constant(w.clone()))?.sum()?;
    let grads = grad_of(&loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let vars: Vec<Var> = xs.iter().cloned().map(Var::constant).collect();
        let y = build(&vars)?;
        Ok(y.value()
            .data()
            .iter()
            .zip(w.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    };

    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(&format!("in{i}"))?;
        let mut xs = inputs.to_vec();
        let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
        for j in 0..x.numel() {
            let orig = x.data()[j];
            xs[i].data_mut()[j] = orig + h;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - h;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h as f64);
            let a = analytic.data()[j] as f64;
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt()).max(1e-6);
        worst = worst.max(diff2.sqrt() / denom);
    }
    Ok(worst)
}

/// Runs `trials` independent draws of a case; returns the worst error.
pub fn check_case(case: &GradCase, trials: usize, base_seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for k in 0..trials as u64 {
        let seed = base_seed.wrapping_mul(1_000_003).wrapping_add(k);
        let inputs = (case.inputs)(&mut seeded_rng(seed));
        worst = worst.max(max_relative_error(case.build, &inputs, FD_STEP, seed)?);
    }
    Ok(worst)
}

fn uniform(rng: &mut SeededRng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values in `±[lo, hi]`, keeping clear of kinks at zero.
fn away_from_zero(rng: &mut SeededRng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(lo..hi);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn pair(rng: &mut SeededRng) -> Vec<Tensor> {
    vec![
        uniform(rng, &[3, 4], -1.0, 1.0),
        uniform(rng, &[3, 4], -1.0, 1.0),
    ]
}

fn separated_pair(rng: &mut SeededRng) -> Vec<Tensor> {
    let a = uniform(rng, &[3, 4], -1.0, 1.0);
    let off = away_from_zero(rng, &[3, 4], 0.1, 1.0);
    let b = a.add(&off).unwrap();
    vec![a, b]
}

fn single(rng: &mut SeededRng) -> Vec<Tensor> {
    vec![uniform(rng, &[3, 4], -2.0, 2.0)]
}

fn single_away(rng: &mut SeededRng) -> Vec<Tensor> {
    vec![away_from_zero(rng, &[3, 4], 0.1, 2.0)]
}

fn scan_inputs(rng: &mut SeededRng, lead: &[usize]) -> Vec<Tensor> {
    let with = |last: usize| {
        let mut s = lead.to_vec();
        s.push(last);
        s
    };
    vec![
        uniform(rng, &with(3), -1.0, 1.0),
        uniform(rng, &with(3), 0.05, 0.6),
        uniform(rng, &[3, 4], -1.5, -0.1),
        uniform(rng, &with(4), -1.0, 1.0),
        uniform(rng, &with(4), -1.0, 1.0),
        uniform(rng, &[3], -1.0, 1.0),
    ]
}

const GT_BOX: BBox = BBox {
    x: 0.3,
    y: 0.25,
    w: 0.3,
    h: 0.35,
};

fn box_inputs(rng: &mut SeededRng) -> Vec<Tensor> {
    vec![Tensor::from_fn(&[4], |i| {
        if i < 2 {
            rng.gen_range(0.05..0.5)
        } else {
            rng.gen_range(0.2..0.5)
        }
    })]
}

fn scan_build(v: &[Var]) -> Result<Var> {
    crate::ssm::selective_scan(&v[0], &v[1], &v[2], &v[3], &v[4], &v[5])
}

/// Every graph primitive, plus the fused loss and scan kernels.
pub fn primitive_cases() -> Vec<GradCase> {
    macro_rules! case {
        ($name:expr, $inputs:expr, $build:expr) => {
            GradCase {
                name: $name,
                inputs: $inputs,
                build: $build,
            }
        };
    }
    vec![
        case!("add", pair, |v| v[0].add(&v[1])),
        case!("sub", pair, |v| v[0].sub(&v[1])),
        case!("mul", pair, |v| v[0].mul(&v[1])),
        case!(
            "div",
            |r| vec![
                uniform(r, &[3, 4], -1.0, 1.0),
                away_from_zero(r, &[3, 4], 0.5, 2.0)
            ],
            |v| v[0].div(&v[1])
        ),
        case!("minimum", separated_pair, |v| v[0].minimum(&v[1])),
        case!("maximum", separated_pair, |v| v[0].maximum(&v[1])),
        case!("scale", single, |v| v[0].scale(-1.7)),
        case!("add_scalar", single, |v| v[0].add_scalar(0.3)),
        case!("neg", single, |v| v[0].neg()),
        case!("exp", single, |v| v[0].exp()),
        case!("ln", |r| vec![uniform(r, &[3, 4], 0.5, 2.0)], |v| v[0].ln()),
        case!("abs", single_away, |v| v[0].abs()),
        case!("relu", single_away, |v| v[0].relu()),
        case!("sigmoid", single, |v| v[0].sigmoid()),
        case!("silu", single, |v| v[0].silu()),
        case!("softplus", single, |v| v[0].softplus()),
        case!(
            "add_row",
            |r| vec![
                uniform(r, &[2, 5, 3], -1.0, 1.0),
                uniform(r, &[3], -1.0, 1.0)
            ],
            |v| v[0].add_row(&v[1])
        ),
        case!(
            "mul_row",
            |r| vec![uniform(r, &[5, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
            |v| v[0].mul_row(&v[1])
        ),
        case!("sum", single, |v| v[0].sum()),
        case!("mean", single, |v| v[0].mean()),
        case!(
            "linear",
            |r| vec![
                uniform(r, &[2, 4, 5], -1.0, 1.0),
                uniform(r, &[3, 5], -1.0, 1.0),
                uniform(r, &[3], -1.0, 1.0),
            ],
            |v| v[0].linear(&v[1], Some(&v[2]))
        ),
        case!(
            "conv2d",
            |r| vec![
                uniform(r, &[2, 6, 6], -1.0, 1.0),
                uniform(r, &[3, 2, 3, 3], -1.0, 1.0),
                uniform(r, &[3], -1.0, 1.0),
            ],
            |v| v[0].conv2d(&v[1], Some(&v[2]), Conv2dSpec::new(1, 1))
        ),
        case!(
            "conv2d_stride2",
            |r| vec![
                uniform(r, &[2, 6, 6], -1.0, 1.0),
                uniform(r, &[3, 2, 4, 4], -1.0, 1.0),
                uniform(r, &[3], -1.0, 1.0),
            ],
            |v| v[0].conv2d(&v[1], Some(&v[2]), Conv2dSpec::new(2, 1))
        ),
        case!(
            "conv2d_pointwise",
            |r| vec![
                uniform(r, &[4, 3, 5], -1.0, 1.0),
                uniform(r, &[2, 4, 1, 1], -1.0, 1.0),
                uniform(r, &[2], -1.0, 1.0),
            ],
            |v| v[0].conv2d(&v[1], Some(&v[2]), Conv2dSpec::default())
        ),
        case!(
            "conv2d_depthwise",
            |r| vec![
                uniform(r, &[3, 7, 7], -1.0, 1.0),
                uniform(r, &[3, 1, 5, 5], -1.0, 1.0),
                uniform(r, &[3], -1.0, 1.0),
            ],
            |v| v[0].conv2d(&v[1], Some(&v[2]), Conv2dSpec::depthwise(3, 2))
        ),
        case!(
            "conv_transpose2d",
            |r| vec![
                uniform(r, &[3, 4, 4], -1.0, 1.0),
                uniform(r, &[3, 2, 2, 2], -1.0, 1.0),
                uniform(r, &[2], -1.0, 1.0),
            ],
            |v| v[0].conv_transpose2d(&v[1], Some(&v[2]), 2)
        ),
        case!(
            "conv1d_causal",
            |r| vec![
                uniform(r, &[2, 6, 3], -1.0, 1.0),
                uniform(r, &[3, 1, 4], -1.0, 1.0),
                uniform(r, &[3], -1.0, 1.0),
            ],
            |v| v[0].conv1d_causal(&v[1], Some(&v[2]))
        ),
        case!(
            "layer_norm",
            |r| vec![
                uniform(r, &[4, 6], -2.0, 2.0),
                uniform(r, &[6], 0.5, 1.5),
                uniform(r, &[6], -1.0, 1.0),
            ],
            |v| v[0].layer_norm(&v[1], &v[2], crate::nn::LAYER_NORM_EPS)
        ),
        case!("reshape", single, |v| v[0].reshape(&[2, 6])),
        case!("transpose2d", single, |v| v[0].transpose2d()),
        case!("flip", |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0)], |v| v
            [0]
        .flip(1)),
        case!("narrow", |r| vec![uniform(r, &[2, 5, 3], -1.0, 1.0)], |v| v
            [0]
        .narrow(1, 1, 3)),
        case!(
            "concat",
            |r| vec![
                uniform(r, &[2, 3], -1.0, 1.0),
                uniform(r, &[2, 2], -1.0, 1.0)
            ],
            |v| Var::concat(&[&v[0], &v[1]], 1)
        ),
        case!("gather", single, |v| v[0].gather(&[0, 5, 5, 11])),
        case!("selective_scan", |r| scan_inputs(r, &[6]), scan_build),
        case!(
            "selective_scan_batched",
            |r| scan_inputs(r, &[2, 5]),
            scan_build
        ),
        case!(
            "focal_loss",
            |r| vec![uniform(r, &[6, 6], 0.05, 0.95)],
            |v| crate::losses::focal_loss(
                &v[0],
                &crate::losses::gaussian_target((2, 3), (9.0, 6.0), 6)?
            )
        ),
        case!("giou_loss", box_inputs, |v| crate::losses::giou_loss_var(
            &v[0], &GT_BOX
        )),
        case!("l1_loss", box_inputs, |v| crate::losses::l1_loss_var(
            &v[0], &GT_BOX
        )),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_matches_finite_differences() {
        for (i, case) in primitive_cases().iter().enumerate() {
            let err = check_case(case, 10, i as u64).unwrap();
            assert!(err < 1e-2, "{}: relative error {err}", case.name);
        }
    }

    #[test]
    fn a_wrong_gradient_is_detected() {
        // x^2 with a backward claiming 3x.
        fn bad(v: &[Var]) -> Result<Var> {
            let y = v[0].value().mul(v[0].value())?;
            Var::from_op("bad", y, vec![v[0].clone()], |c| {
                Ok(vec![Some(c.inputs[0].scale(3.0).mul(c.grad)?)])
            })
        }
        let x = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        assert!(max_relative_error(bad, &[x], FD_STEP, 0).unwrap() > 0.1);
    }
}
