//! Cross-modal mamba fusion.
//!
//! The language CLS row scales every search token (`H̄_x = H_x ⊙ cls`). Two
//! branches then run over `H_vl = [H̄_x; H_z]` and `H_v = [H_x; H_z]`:
//! `h_m = Linear_m(LN_m(H_m))`, `y_m = SSM_m(SiLU(conv1d_m(h_m)))`, and both are
//! gated by the vision branch, `z_m = y_m ⊙ SiLU(h_v)`. The output is
//! `Linear_o(z_v + z_vl) + H_v`, split back into search and template parts.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::init::{uniform_fan_in, SeededRng};
use crate::layers;
use crate::params::{ParamStore, Params};
use crate::ssm::{SelectiveSsm, DEFAULT_CONV_WIDTH};
use crate::tensor::Tensor;

/// Intermediate and final tensors of one fusion pass.
pub struct CmmOutput {
    pub h_bar_x: Var,
    pub h_v: Var,
    pub z_v: Var,
    pub z_vl: Var,
    /// `H̃_x`
    pub fused_x: Var,
    /// `H̃_z`
    pub fused_z: Var,
}

#[derive(Clone, Debug)]
pub struct Cmm {
    pub d1: usize,
    pub d_state: usize,
}

const BRANCHES: [&str; 2] = ["v", "vl"];

fn name(branch: &str, leaf: &str) -> String {
    format!("vltrack.cmm.{branch}.{leaf}")
}

impl Cmm {
    pub fn new(d1: usize, d_state: usize) -> Self {
        Cmm { d1, d_state }
    }

    fn ssm(&self, branch: &str) -> SelectiveSsm {
        SelectiveSsm::new(
            name(branch, "ssm"),
            self.d1,
            self.d_state,
            self.d1.div_ceil(16),
        )
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) -> Result<()> {
        let d = self.d1;
        for b in BRANCHES {
            layers::init_layer_norm(store, &name(b, "norm"), d)?;
            layers::init_linear(store, rng, &name(b, "in_proj"), d, d, true)?;
            store.insert(
                name(b, "conv1d.weight"),
                uniform_fan_in(rng, &[d, 1, DEFAULT_CONV_WIDTH], DEFAULT_CONV_WIDTH),
            )?;
            store.insert(name(b, "conv1d.bias"), Tensor::zeros(&[d]))?;
            self.ssm(b).init(store, rng)?;
        }
        layers::init_linear(store, rng, "vltrack.cmm.out_proj", d, d, true)
    }

    fn branch(&self, p: &Params, b: &str, h: &Var) -> Result<(Var, Var)> {
        let hm = layers::linear(
            p,
            &name(b, "in_proj"),
            &layers::layer_norm(p, &name(b, "norm"), h)?,
        )?;
        let x = hm
            .conv1d_causal(
                p.get(&name(b, "conv1d.weight"))?,
                Some(p.get(&name(b, "conv1d.bias"))?),
            )?
            .silu()?;
        Ok((hm, self.ssm(b).forward(p, &x)?))
    }

    /// `h_z: [N_z, D1]`, `h_x: [N_x, D1]`, `h_t: [N_t, D1]` with CLS first.
    pub fn fuse(&self, p: &Params, h_z: &Var, h_x: &Var, h_t: &Var) -> Result<CmmOutput> {
        let d = self.d1;
        for (what, v) in [("H_z", h_z), ("H_x", h_x), ("H_t", h_t)] {
            if v.shape().len() != 2 || v.shape()[1] != d {
                return Err(Error::shape(
                    "cmm_fuse",
                    format!("{what} {:?}, expected [N, {d}]", v.shape()),
                ));
            }
        }
        let nx = h_x.shape()[0];
        let nz = h_z.shape()[0];
        let cls = h_t.narrow(0, 0, 1)?.reshape(&[d])?;
        let h_bar_x = h_x.mul_row(&cls)?;
        let h_vl = Var::concat(&[&h_bar_x, h_z], 0)?;
        let h_v = Var::concat(&[h_x, h_z], 0)?;

        let (gate_in, y_v) = self.branch(p, "v", &h_v)?;
        let (_, y_vl) = self.branch(p, "vl", &h_vl)?;
        let gate = gate_in.silu()?;
        let z_v = y_v.mul(&gate)?;
        let z_vl = y_vl.mul(&gate)?;
        let out = layers::linear(p, "vltrack.cmm.out_proj", &z_v.add(&z_vl)?)?.add(&h_v)?;
        Ok(CmmOutput {
            fused_x: out.narrow(0, 0, nx)?,
            fused_z: out.narrow(0, nx, nz)?,
            h_bar_x,
            h_v,
            z_v,
            z_vl,
        })
    }
}
