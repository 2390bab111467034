//! AdamW with decoupled weight decay.
//!
//! Moment buffers live in the store itself under `optim.m.<name>` /
//! `optim.v.<name>` with the step counter at `optim.step`, so a saved weights
//! file resumes training exactly.

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::params::{ParamStore, OPTIMIZER_PREFIX};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f32,
    pub betas: (f32, f32),
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

const STEP_KEY: &str = "optim.step";

impl AdamW {
    pub fn with_lr(lr: f32) -> Self {
        AdamW {
            lr,
            ..Default::default()
        }
    }

    /// One update of every trainable entry. Fails before touching anything if a
    /// trainable parameter has no gradient or a gradient of the wrong shape.
    pub fn step(&self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let names: Vec<String> = store.trainable_names().map(str::to_string).collect();
        for name in &names {
            let g = grads
                .get(name)
                .map_err(|_| Error::MissingGradient(name.clone()))?;
            let p = store.require(name)?;
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!(
                        "gradient {:?} vs parameter `{name}` {:?}",
                        g.shape(),
                        p.shape()
                    ),
                ));
            }
        }

        let t = store.get(STEP_KEY).map_or(0.0, |s| s.data()[0]) + 1.0;
        store.set(STEP_KEY, Tensor::scalar(t))?;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - (b1 as f64).powf(t as f64);
        let bc2 = 1.0 - (b2 as f64).powf(t as f64);

        for name in &names {
            let g = grads.get(name)?;
            let m_key = format!("{OPTIMIZER_PREFIX}m.{name}");
            let v_key = format!("{OPTIMIZER_PREFIX}v.{name}");
            let mut m = store
                .get(&m_key)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.shape()));
            let mut v = store
                .get(&v_key)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.shape()));
            let mut p = store.require(name)?.clone();
            {
                let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
                for (i, &gi) in g.data().iter().enumerate() {
                    md[i] = b1 * md[i] + (1.0 - b1) * gi;
                    vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                    let m_hat = md[i] as f64 / bc1;
                    let v_hat = vd[i] as f64 / bc2;
                    let update = m_hat / (v_hat.sqrt() + self.eps as f64);
                    pd[i] -= (self.lr as f64 * (update + self.weight_decay as f64 * pd[i] as f64))
                        as f32;
                }
            }
            store.set(name.clone(), p)?;
            store.set(m_key, m)?;
            store.set(v_key, v)?;
        }
        Ok(())
    }
}

/// Functional form of [`AdamW::step`].
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &Gradients,
    lr: f32,
    betas: (f32, f32),
    weight_decay: f32,
) -> Result<()> {
    AdamW {
        lr,
        betas,
        weight_decay,
        ..Default::default()
    }
    .step(store, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{grad_of, Var};
    use crate::params::Params;

    fn quadratic_grads(store: &ParamStore, target: f32) -> Gradients {
        let p = Params::trainable(store);
        let x = p.get("x").unwrap();
        let d = x.add_scalar(-target).unwrap();
        grad_of(&d.mul(&d).unwrap().sum().unwrap()).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        let before = s.get("x").unwrap().clone();
        let p = Params::trainable(&s);
        let loss = p.get("x").unwrap().scale(0.0).unwrap().sum().unwrap();
        let g = grad_of(&loss).unwrap();
        adamw_step(&mut s, &g, 1e-3, (0.9, 0.999), 0.0).unwrap();
        assert_eq!(s.get("x").unwrap(), &before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        for &(x0, target) in &[(0.0f32, 3.0f32), (0.0, -3.0)] {
            let mut s = ParamStore::new();
            s.insert("x", Tensor::scalar(x0)).unwrap();
            let g = quadratic_grads(&s, target);
            adamw_step(&mut s, &g, 1e-3, (0.9, 0.999), 0.0).unwrap();
            let moved = s.get("x").unwrap().data()[0] - x0;
            let expected = 1e-3 * (target - x0).signum();
            assert!((moved - expected).abs() < 1e-6, "{moved} vs {expected}");
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(0.0)).unwrap();
        let opt = AdamW {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..200 {
            let g = quadratic_grads(&s, 3.0);
            opt.step(&mut s, &g).unwrap();
        }
        let x = s.get("x").unwrap().data()[0];
        assert!((x - 3.0).abs() < 1e-2, "x = {x}");
        assert_eq!(s.get("optim.step").unwrap().data(), &[200.0]);
    }

    #[test]
    fn missing_gradient_is_reported_before_any_update() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(1.0)).unwrap();
        s.insert("b", Tensor::scalar(1.0)).unwrap();
        let a = Var::param("a", Tensor::scalar(1.0));
        let g = grad_of(&a.scale(2.0).unwrap()).unwrap();
        let err = AdamW::default().step(&mut s, &g).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "b"));
        assert_eq!(s.get("a").unwrap().data(), &[1.0]);
        assert!(!s.contains("optim.step"));
    }
}
