//! Joint visual encoder over `[template; search]` tokens.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::init::SeededRng;
use crate::layers;
use crate::params::{ParamStore, Params};
use crate::ssm::{bidirectional_mamba, MambaBlock, MambaConfig};

/// `depth` residual blocks `x + bimamba(LN(x))` and a final norm. Names:
/// `vltrack.vim.layer{i}.{norm,fwd,bwd}`, `vltrack.vim.norm_f`.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub d1: usize,
    layers: Vec<(MambaBlock, MambaBlock)>,
}

impl VisualEncoder {
    pub fn new(d1: usize, depth: usize, d_state: usize) -> Self {
        let cfg = MambaConfig {
            d_state,
            ..MambaConfig::new(d1)
        };
        let layers = (0..depth)
            .map(|i| {
                (
                    MambaBlock::new(format!("vltrack.vim.layer{i}.fwd"), cfg),
                    MambaBlock::new(format!("vltrack.vim.layer{i}.bwd"), cfg),
                )
            })
            .collect();
        VisualEncoder { d1, layers }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) -> Result<()> {
        for (i, (f, b)) in self.layers.iter().enumerate() {
            layers::init_layer_norm(store, &format!("vltrack.vim.layer{i}.norm"), self.d1)?;
            f.init(store, rng)?;
            b.init(store, rng)?;
        }
        layers::init_layer_norm(store, "vltrack.vim.norm_f", self.d1)
    }

    /// Encodes any `[N, D1]` token sequence.
    pub fn encode(&self, p: &Params, tokens: &Var) -> Result<Var> {
        let mut x = tokens.clone();
        for (i, (f, b)) in self.layers.iter().enumerate() {
            let h = layers::layer_norm(p, &format!("vltrack.vim.layer{i}.norm"), &x)?;
            x = x.add(&bidirectional_mamba(p, f, b, &h)?)?;
        }
        layers::layer_norm(p, "vltrack.vim.norm_f", &x)
    }

    /// `(H_z, H_x)` from jointly encoding `[tokens_z; tokens_x]`.
    pub fn forward(&self, p: &Params, tokens_z: &Var, tokens_x: &Var) -> Result<(Var, Var)> {
        let (nz, nx) = (tokens_z.shape()[0], tokens_x.shape()[0]);
        if tokens_z.shape().get(1) != Some(&self.d1) || tokens_x.shape().get(1) != Some(&self.d1) {
            return Err(Error::shape(
                "visual_encode",
                format!(
                    "expected [.., {}], got {:?} and {:?}",
                    self.d1,
                    tokens_z.shape(),
                    tokens_x.shape()
                ),
            ));
        }
        let joint = self.encode(p, &Var::concat(&[tokens_z, tokens_x], 0)?)?;
        Ok((joint.narrow(0, 0, nz)?, joint.narrow(0, nz, nx)?))
    }
}
