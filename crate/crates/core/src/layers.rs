//! Parameter naming and initialization for the standard layers.
//!
//! Every layer lives under a dotted prefix: `<prefix>.weight`, `<prefix>.bias`
//! for affine maps and convolutions, `<prefix>.gamma`, `<prefix>.beta` for
//! layer norms. Weights are uniform in `±sqrt(1/fan_in)`, biases start at zero.

use crate::autograd::Var;
use crate::error::Result;
use crate::init::{uniform_fan_in, SeededRng};
use crate::nn::{Conv2dSpec, LAYER_NORM_EPS};
use crate::params::{ParamStore, Params};
use crate::tensor::Tensor;

pub fn weight(prefix: &str) -> String {
    format!("{prefix}.weight")
}

pub fn bias(prefix: &str) -> String {
    format!("{prefix}.bias")
}

pub fn init_linear(
    store: &mut ParamStore,
    rng: &mut SeededRng,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    with_bias: bool,
) -> Result<()> {
    store.insert(weight(prefix), uniform_fan_in(rng, &[d_out, d_in], d_in))?;
    if with_bias {
        store.insert(bias(prefix), Tensor::zeros(&[d_out]))?;
    }
    Ok(())
}

/// Applies `<prefix>.weight` and, when present in `p`, `<prefix>.bias`.
pub fn linear(p: &Params, prefix: &str, x: &Var) -> Result<Var> {
    let b = bias(prefix);
    let b = if p.contains(&b) {
        Some(p.get(&b)?)
    } else {
        None
    };
    x.linear(p.get(&weight(prefix))?, b)
}

pub fn init_conv2d(
    store: &mut ParamStore,
    rng: &mut SeededRng,
    prefix: &str,
    c_out: usize,
    c_in_per_group: usize,
    kernel: usize,
) -> Result<()> {
    let fan_in = c_in_per_group * kernel * kernel;
    store.insert(
        weight(prefix),
        uniform_fan_in(rng, &[c_out, c_in_per_group, kernel, kernel], fan_in),
    )?;
    store.insert(bias(prefix), Tensor::zeros(&[c_out]))?;
    Ok(())
}

pub fn conv2d(p: &Params, prefix: &str, x: &Var, spec: Conv2dSpec) -> Result<Var> {
    x.conv2d(p.get(&weight(prefix))?, Some(p.get(&bias(prefix))?), spec)
}

/// Weight layout `[c_in, c_out, k, k]`.
pub fn init_conv_transpose2d(
    store: &mut ParamStore,
    rng: &mut SeededRng,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
) -> Result<()> {
    store.insert(
        weight(prefix),
        uniform_fan_in(rng, &[c_in, c_out, kernel, kernel], c_in * kernel * kernel),
    )?;
    store.insert(bias(prefix), Tensor::zeros(&[c_out]))?;
    Ok(())
}

pub fn conv_transpose2d(p: &Params, prefix: &str, x: &Var, stride: usize) -> Result<Var> {
    x.conv_transpose2d(p.get(&weight(prefix))?, Some(p.get(&bias(prefix))?), stride)
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Tensor::ones(&[d]))?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[d]))?;
    Ok(())
}

pub fn layer_norm(p: &Params, prefix: &str, x: &Var) -> Result<Var> {
    x.layer_norm(
        p.get(&format!("{prefix}.gamma"))?,
        p.get(&format!("{prefix}.beta"))?,
        LAYER_NORM_EPS,
    )
}

/// Zeroes every entry under `prefix` whose name ends with `.bias` or `.beta`.
pub fn zero_biases(store: &mut ParamStore, prefix: &str) {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(prefix) && (n.ends_with(".bias") || n.ends_with(".beta")))
        .map(str::to_string)
        .collect();
    for n in names {
        let shape = store.get(&n).unwrap().shape().to_vec();
        store.set(n, Tensor::zeros(&shape)).unwrap();
    }
}

/// Zeroes every entry under `prefix`.
pub fn zero_all(store: &mut ParamStore, prefix: &str) {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(prefix))
        .map(str::to_string)
        .collect();
    for n in names {
        let shape = store.get(&n).unwrap().shape().to_vec();
        store.set(n, Tensor::zeros(&shape)).unwrap();
    }
}
