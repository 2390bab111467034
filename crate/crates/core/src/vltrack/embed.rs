//! Patch embedding, the byte tokenizer and the language encoder.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::init::{normal, SeededRng};
use crate::layers;
use crate::params::{ParamStore, Params};
use crate::ssm::{bidirectional_mamba, MambaBlock, MambaConfig};

pub const CLS_ID: usize = 256;
pub const VOCAB: usize = 257;
pub const MAX_PROMPT_BYTES: usize = 64;

/// Flat source indices that lay out `[3, side, side]` as one row per patch
/// (patches row-major), each row ordered `(y, x, channel)`.
pub fn patch_order(side: usize, patch: usize) -> Result<Vec<usize>> {
    if patch == 0 || side == 0 || !side.is_multiple_of(patch) {
        return Err(Error::invalid(
            "patch_embed",
            format!("side {side} is not a multiple of patch {patch}"),
        ));
    }
    let g = side / patch;
    let mut idx = Vec::with_capacity(3 * side * side);
    for pi in 0..g {
        for pj in 0..g {
            for y in 0..patch {
                for x in 0..patch {
                    for c in 0..3 {
                        idx.push(c * side * side + (pi * patch + y) * side + pj * patch + x);
                    }
                }
            }
        }
    }
    Ok(idx)
}

pub fn init_patch_embed(
    store: &mut ParamStore,
    rng: &mut SeededRng,
    patch: usize,
    d1: usize,
) -> Result<()> {
    layers::init_linear(
        store,
        rng,
        "vltrack.patch_embed",
        3 * patch * patch,
        d1,
        true,
    )
}

/// `[3, S, S]` → `[(S/patch)², D1]`.
pub fn patch_embed(p: &Params, img: &Var, patch: usize) -> Result<Var> {
    let [c, h, w] = img.value().dims3("patch_embed")?;
    if c != 3 || h != w {
        return Err(Error::shape(
            "patch_embed",
            format!("expected a square RGB patch, got {:?}", img.shape()),
        ));
    }
    let order = patch_order(h, patch)?;
    let n = (h / patch).pow(2);
    let rows = img.gather(&order)?.reshape(&[n, 3 * patch * patch])?;
    layers::linear(p, "vltrack.patch_embed", &rows)
}

/// CLS followed by up to 64 UTF-8 bytes.
pub fn tokenize_prompt(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Err(Error::invalid("tokenize_prompt", "empty prompt"));
    }
    let mut ids = Vec::with_capacity(1 + s.len().min(MAX_PROMPT_BYTES));
    ids.push(CLS_ID);
    ids.extend(s.bytes().take(MAX_PROMPT_BYTES).map(usize::from));
    Ok(ids)
}

/// Embedding table, `depth` pre-norm residual bidirectional mamba blocks at
/// width D2, and a projection to D1. The backward pass is what lets the
/// leading CLS row see the rest of the prompt. Names:
/// `vltrack.lang.embed.weight [257, D2]`, `vltrack.lang.layer{i}.{norm,fwd,bwd}`,
/// `vltrack.lang.proj`.
#[derive(Clone, Debug)]
pub struct LanguageEncoder {
    pub d1: usize,
    pub d2: usize,
    blocks: Vec<(MambaBlock, MambaBlock)>,
}

impl LanguageEncoder {
    pub fn new(d1: usize, d2: usize, depth: usize, d_state: usize) -> Self {
        let cfg = MambaConfig {
            d_state,
            ..MambaConfig::new(d2)
        };
        let blocks = (0..depth)
            .map(|i| {
                (
                    MambaBlock::new(format!("vltrack.lang.layer{i}.fwd"), cfg),
                    MambaBlock::new(format!("vltrack.lang.layer{i}.bwd"), cfg),
                )
            })
            .collect();
        LanguageEncoder { d1, d2, blocks }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) -> Result<()> {
        store.insert(
            "vltrack.lang.embed.weight",
            normal(rng, &[VOCAB, self.d2], 0.02),
        )?;
        for (i, (f, b)) in self.blocks.iter().enumerate() {
            layers::init_layer_norm(store, &format!("vltrack.lang.layer{i}.norm"), self.d2)?;
            f.init(store, rng)?;
            b.init(store, rng)?;
        }
        layers::init_linear(store, rng, "vltrack.lang.proj", self.d2, self.d1, true)
    }

    /// `[N_t, D1]` for ids from [`tokenize_prompt`].
    pub fn forward(&self, p: &Params, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= VOCAB) {
            return Err(Error::invalid(
                "language_encode",
                format!("token id {bad} outside vocabulary"),
            ));
        }
        if ids.is_empty() {
            return Err(Error::invalid("language_encode", "no tokens"));
        }
        let d2 = self.d2;
        let flat: Vec<usize> = ids
            .iter()
            .flat_map(|&id| (0..d2).map(move |k| id * d2 + k))
            .collect();
        let mut x = p
            .get("vltrack.lang.embed.weight")?
            .gather(&flat)?
            .reshape(&[ids.len(), d2])?;
        for (i, (f, b)) in self.blocks.iter().enumerate() {
            let h = layers::layer_norm(p, &format!("vltrack.lang.layer{i}.norm"), &x)?;
            x = x.add(&bidirectional_mamba(p, f, b, &h)?)?;
        }
        layers::linear(p, "vltrack.lang.proj", &x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::seeded_rng;
    use crate::tensor::Tensor;

    #[test]
    fn tokenizer_examples() {
        assert_eq!(tokenize_prompt("a").unwrap(), vec![256, 97]);
        assert_eq!(tokenize_prompt("ab").unwrap(), vec![256, 97, 98]);
        assert_eq!(tokenize_prompt(&"x".repeat(100)).unwrap().len(), 65);
        assert_eq!(tokenize_prompt("é").unwrap(), vec![256, 0xc3, 0xa9]);
        assert!(tokenize_prompt("").is_err());
    }

    #[test]
    fn patch_order_layout() {
        let order = patch_order(4, 2).unwrap();
        assert_eq!(order.len(), 48);
        // First row: patch (0,0), pixel (0,0) channels 0..3, then pixel (0,1).
        assert_eq!(&order[..6], &[0, 16, 32, 1, 17, 33]);
        // Second patch starts at column 2.
        assert_eq!(order[12], 2);
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(sorted, (0..48).collect::<Vec<_>>());
        assert!(patch_order(10, 4).is_err());
    }

    #[test]
    fn patch_embed_shapes_and_constants() {
        let mut store = ParamStore::new();
        init_patch_embed(&mut store, &mut seeded_rng(1), 16, 8).unwrap();
        let p = Params::constants(&store);
        for (side, n) in [(128, 64), (256, 256)] {
            let t = patch_embed(&p, &Var::constant(Tensor::zeros(&[3, side, side])), 16).unwrap();
            assert_eq!(t.shape(), &[n, 8]);
            assert!(t.value().data().iter().all(|&v| v == 0.0));
        }
        let t = patch_embed(&p, &Var::constant(Tensor::full(&[3, 32, 32], 0.7)), 16).unwrap();
        let rows: Vec<&[f32]> = t.value().data().chunks(8).collect();
        assert!(rows.iter().all(|r| *r == rows[0]));
        assert!(patch_embed(&p, &Var::constant(Tensor::zeros(&[3, 40, 40])), 16).is_err());
    }

    #[test]
    fn language_encoder_contract() {
        let mut store = ParamStore::new();
        let enc = LanguageEncoder::new(12, 16, 2, 4);
        enc.init(&mut store, &mut seeded_rng(2)).unwrap();
        let p = Params::constants(&store);
        let ids = tokenize_prompt("a red car").unwrap();
        let a = enc.forward(&p, &ids).unwrap();
        assert_eq!(a.shape(), &[10, 12]);
        assert_eq!(a.value(), enc.forward(&p, &ids).unwrap().value());
        assert!(enc.forward(&p, &[257]).is_err());

        // The CLS row depends on every later token.
        let cls = |text: &str| {
            let out = enc.forward(&p, &tokenize_prompt(text).unwrap()).unwrap();
            out.value().data()[..12].to_vec()
        };
        assert_ne!(cls("a red car"), cls("a red cat"));
        assert_ne!(cls("a red car"), cls("a red car!"));

        store
            .set("vltrack.lang.embed.weight", Tensor::zeros(&[VOCAB, 16]))
            .unwrap();
        let p = Params::constants(&store);
        let z = enc.forward(&p, &ids).unwrap();
        assert!(z.value().data().iter().all(|&v| v == 0.0));
    }
}
