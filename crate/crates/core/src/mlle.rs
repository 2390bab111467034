//! Low-light enhancement by Retinex-style light-up plus learned restoration.
//!
//! Images are `[3, H, W]` floats in `[0, 1]`. The illumination estimator maps
//! the image and its channel-mean prior to a light-up map `L_bar > 0` and a
//! feature map `F_lu`; the light-up image is `I_lu = I ⊗ L_bar`. The damage
//! restorer, a two-stage U-net whose blocks mix tokens with a mamba scan
//! modulated by illumination features, predicts a residual `I_re`, and the
//! result is `I_en = I_lu + I_re`. Nothing is clamped inside the pipeline.
//!
//! Parameters live under `mlle.ie.*` and `mlle.dr.*`.

use std::thread;

use crate::autograd::{grad_of, Var};
use crate::error::{Error, Result};
use crate::init::SeededRng;
use crate::layers;
use crate::nn::{self, Conv2dSpec};
use crate::optim::AdamW;
use crate::params::{ParamStore, Params};
use crate::ssm::{MambaBlock, MambaConfig, DEFAULT_D_STATE};
use crate::tensor::Tensor;

pub const LIGHT_UP_CHANNELS: usize = 40;
pub const L_BAR_FLOOR: f32 = 1e-3;
pub const PREFIX: &str = "mlle";

/// Channel-mean brightness, `[H, W]`.
pub fn illumination_prior(img: &Tensor) -> Result<Tensor> {
    let [c, h, w] = img.dims3("illumination_prior")?;
    if c != 3 {
        return Err(Error::shape(
            "illumination_prior",
            format!("expected 3 channels, got {c}"),
        ));
    }
    let d = img.data();
    let n = h * w;
    Ok(Tensor::from_parts(
        vec![h, w],
        (0..n)
            .map(|i| (d[i] + d[n + i] + d[2 * n + i]) / 3.0)
            .collect(),
    ))
}

/// `I ⊗ L_bar`, with `L_bar` shaped `[H,W]`, `[1,H,W]` or `[3,H,W]`.
pub fn light_up(img: &Tensor, l_bar: &Tensor) -> Result<Tensor> {
    let [c, h, w] = img.dims3("light_up")?;
    let n = h * w;
    let per_channel = match l_bar.shape() {
        s if s == [h, w] || s == [1, h, w] => false,
        s if s == [c, h, w] => true,
        s => {
            return Err(Error::shape(
                "light_up",
                format!("map {s:?} does not broadcast over image {:?}", img.shape()),
            ))
        }
    };
    if l_bar.data().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::invalid(
            "light_up",
            "light-up map must be strictly positive",
        ));
    }
    let m = l_bar.data();
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        img.data()[i] * if per_channel { m[i] } else { m[i % n] }
    }))
}

/// Retinex bookkeeping: `I = (R + R_hat) ⊗ (L + L_hat)` with a single-channel
/// illumination broadcast over color.
#[derive(Clone, Debug)]
pub struct RetinexImage {
    pub i: Tensor,
    pub r: Option<Tensor>,
    pub l: Option<Tensor>,
    pub r_hat: Option<Tensor>,
    pub l_hat: Option<Tensor>,
    pub l_bar: Option<Tensor>,
}

fn broadcast_mul(rgb: &Tensor, plane: &Tensor) -> Result<Tensor> {
    let [c, h, w] = rgb.dims3("retinex")?;
    if plane.shape() != [h, w] {
        return Err(Error::shape(
            "retinex",
            format!("plane {:?} vs image {:?}", plane.shape(), rgb.shape()),
        ));
    }
    let n = h * w;
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        rgb.data()[i] * plane.data()[i % n]
    }))
}

impl RetinexImage {
    /// Builds `I` from its factors; `L_bar` is set to `1 / L`.
    pub fn compose(
        r: Tensor,
        l: Tensor,
        r_hat: Option<Tensor>,
        l_hat: Option<Tensor>,
    ) -> Result<Self> {
        if l.data().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::invalid(
                "retinex",
                "illumination must be strictly positive",
            ));
        }
        let rr = match &r_hat {
            Some(p) => r.add(p)?,
            None => r.clone(),
        };
        let ll = match &l_hat {
            Some(p) => l.add(p)?,
            None => l.clone(),
        };
        let i = broadcast_mul(&rr, &ll)?;
        let l_bar = l.map(|v| 1.0 / v);
        Ok(RetinexImage {
            i,
            r: Some(r),
            l: Some(l),
            r_hat,
            l_hat,
            l_bar: Some(l_bar),
        })
    }

    pub fn light_up(&self) -> Result<Tensor> {
        let l_bar = self
            .l_bar
            .as_ref()
            .ok_or_else(|| Error::invalid("retinex", "no light-up map"))?;
        light_up(&self.i, l_bar)
    }

    /// `C = I ⊗ L_bar - R`: everything the light-up leaves on top of the
    /// reflectance.
    pub fn corruption(&self) -> Result<Tensor> {
        let r = self
            .r
            .as_ref()
            .ok_or_else(|| Error::invalid("retinex", "no reflectance"))?;
        self.light_up()?.sub(r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnhancerConfig {
    /// Width of `F_lu` and of the first restorer stage.
    pub channels: usize,
    pub d_state: usize,
}

impl Default for EnhancerConfig {
    fn default() -> Self {
        EnhancerConfig {
            channels: LIGHT_UP_CHANNELS,
            d_state: DEFAULT_D_STATE,
        }
    }
}

/// Illumination-fused SSM block:
/// `m = f + f ⊙ illum; out = m + mamba(LN(tokens(m)))` over row-major pixels.
#[derive(Clone, Debug)]
pub struct Ifssm {
    pub prefix: String,
    pub mamba: MambaBlock,
}

impl Ifssm {
    pub fn new(prefix: &str, channels: usize, d_state: usize) -> Self {
        let cfg = MambaConfig {
            d_state,
            ..MambaConfig::new(channels)
        };
        Ifssm {
            prefix: prefix.to_string(),
            mamba: MambaBlock::new(format!("{prefix}.mamba"), cfg),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) -> Result<()> {
        layers::init_layer_norm(
            store,
            &format!("{}.norm", self.prefix),
            self.mamba.config.d_model,
        )?;
        self.mamba.init(store, rng)
    }

    /// `features`, `illum`: `[C, H, W]`.
    pub fn forward(&self, p: &Params, features: &Var, illum: &Var) -> Result<Var> {
        if features.shape() != illum.shape() {
            return Err(Error::shape(
                "ifssm",
                format!(
                    "features {:?} vs illumination {:?}",
                    features.shape(),
                    illum.shape()
                ),
            ));
        }
        let [c, h, w] = features.value().dims3("ifssm")?;
        let m = features.add(&features.mul(illum)?)?;
        let tokens = m.reshape(&[c, h * w])?.transpose2d()?;
        let mixed = layers::layer_norm(p, &format!("{}.norm", self.prefix), &tokens)?;
        let mixed = self.mamba.forward(p, &mixed)?;
        m.add(&mixed.transpose2d()?.reshape(&[c, h, w])?)
    }
}

/// Outputs of one enhancer pass, kept on the graph.
pub struct EnhanceOutput {
    pub l_bar: Var,
    pub f_lu: Var,
    pub i_lu: Var,
    pub i_re: Var,
    pub i_en: Var,
}

#[derive(Clone, Debug)]
pub struct Enhancer {
    pub config: EnhancerConfig,
    blocks: [Ifssm; 4],
}

const ENC1: usize = 0;
const ENC2: usize = 1;
const DEC1: usize = 2;
const DEC2: usize = 3;

fn n(leaf: &str) -> String {
    format!("{PREFIX}.{leaf}")
}

impl Enhancer {
    pub fn new(config: EnhancerConfig) -> Self {
        let (c, s) = (config.channels, config.d_state);
        let blocks = [
            Ifssm::new(&n("dr.enc1"), c, s),
            Ifssm::new(&n("dr.enc2"), 2 * c, s),
            Ifssm::new(&n("dr.dec1"), 2 * c, s),
            Ifssm::new(&n("dr.dec2"), c, s),
        ];
        Enhancer { config, blocks }
    }

    /// Reads the configuration back from stored shapes.
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let fuse = store.require(&n("ie.fuse.weight"))?;
        let a_log = store.require(&n("dr.enc1.mamba.a_log"))?;
        Ok(Enhancer::new(EnhancerConfig {
            channels: fuse.dim(0),
            d_state: a_log.dim(1),
        }))
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) -> Result<()> {
        let c = self.config.channels;
        layers::init_conv2d(store, rng, &n("ie.fuse"), c, 4, 1)?;
        layers::init_conv2d(store, rng, &n("ie.depthwise"), c, 1, 5)?;
        layers::init_conv2d(store, rng, &n("ie.out"), 3, c, 1)?;

        layers::init_conv2d(store, rng, &n("dr.in"), c, 3, 3)?;
        layers::init_conv2d(store, rng, &n("dr.down1"), 2 * c, c, 4)?;
        layers::init_conv2d(store, rng, &n("dr.illum_down1"), 2 * c, c, 4)?;
        layers::init_conv2d(store, rng, &n("dr.down2"), 4 * c, 2 * c, 4)?;
        layers::init_conv_transpose2d(store, rng, &n("dr.up1"), 4 * c, 2 * c, 2)?;
        layers::init_conv2d(store, rng, &n("dr.merge1"), 2 * c, 4 * c, 1)?;
        layers::init_conv_transpose2d(store, rng, &n("dr.up2"), 2 * c, c, 2)?;
        layers::init_conv2d(store, rng, &n("dr.merge2"), c, 2 * c, 1)?;
        layers::init_conv2d(store, rng, &n("dr.out"), 3, c, 3)?;
        for b in &self.blocks {
            b.init(store, rng)?;
        }
        Ok(())
    }

    /// Returns `(L_bar, F_lu, I_lu)` for `img: [3, H, W]`.
    pub fn illumination_estimator(&self, p: &Params, img: &Var) -> Result<(Var, Var, Var)> {
        let [c, h, w] = img.value().dims3("illumination_estimator")?;
        if c != 3 {
            return Err(Error::shape(
                "illumination_estimator",
                format!("expected 3 channels, got {c}"),
            ));
        }
        let prior = illumination_prior(img.value())?.reshape(&[1, h, w])?;
        let x = Var::concat(&[img, &Var::constant(prior)], 0)?;
        let x = layers::conv2d(p, &n("ie.fuse"), &x, Conv2dSpec::default())?;
        let f_lu = layers::conv2d(
            p,
            &n("ie.depthwise"),
            &x,
            Conv2dSpec::depthwise(self.config.channels, 2),
        )?;
        let l_bar = layers::conv2d(p, &n("ie.out"), &f_lu, Conv2dSpec::default())?
            .softplus()?
            .add_scalar(L_BAR_FLOOR)?;
        let i_lu = img.mul(&l_bar)?;
        Ok((l_bar, f_lu, i_lu))
    }

    /// Residual `I_re` from `I_lu: [3,H,W]` and `F_lu: [C,H,W]`. With
    /// `zero_skips` the encoder tensors are zeroed before each skip merge.
    pub fn damage_restorer(
        &self,
        p: &Params,
        i_lu: &Var,
        f_lu: &Var,
        zero_skips: bool,
    ) -> Result<Var> {
        let [_, h, w] = i_lu.value().dims3("damage_restorer")?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid(
                "damage_restorer",
                format!("spatial size {h}x{w} must be divisible by 4"),
            ));
        }
        let down = Conv2dSpec::new(2, 1);
        let same3 = Conv2dSpec::new(1, 1);
        let skip = |t: &Var| -> Var {
            if zero_skips {
                Var::constant(Tensor::zeros(t.shape()))
            } else {
                t.clone()
            }
        };

        let x = layers::conv2d(p, &n("dr.in"), i_lu, same3)?;
        let e1 = self.blocks[ENC1].forward(p, &x, f_lu)?;
        let x = layers::conv2d(p, &n("dr.down1"), &e1, down)?;
        let illum1 = layers::conv2d(p, &n("dr.illum_down1"), f_lu, down)?;
        let e2 = self.blocks[ENC2].forward(p, &x, &illum1)?;
        let x = layers::conv2d(p, &n("dr.down2"), &e2, down)?;

        let x = layers::conv_transpose2d(p, &n("dr.up1"), &x, 2)?;
        let x = Var::concat(&[&x, &skip(&e2)], 0)?;
        let x = layers::conv2d(p, &n("dr.merge1"), &x, Conv2dSpec::default())?;
        let x = self.blocks[DEC1].forward(p, &x, &illum1)?;
        let x = layers::conv_transpose2d(p, &n("dr.up2"), &x, 2)?;
        let x = Var::concat(&[&x, &skip(&e1)], 0)?;
        let x = layers::conv2d(p, &n("dr.merge2"), &x, Conv2dSpec::default())?;
        let x = self.blocks[DEC2].forward(p, &x, f_lu)?;
        let raw = layers::conv2d(p, &n("dr.out"), &x, same3)?;
        // The residual as realised on top of `i_lu`, so that subtracting
        // `i_lu` from the enhanced image gives it back bit for bit.
        i_lu.add(&raw)?.sub(i_lu)
    }

    pub fn forward(&self, p: &Params, img: &Var) -> Result<EnhanceOutput> {
        self.forward_probe(p, img, false)
    }

    pub fn forward_probe(&self, p: &Params, img: &Var, zero_skips: bool) -> Result<EnhanceOutput> {
        let (l_bar, f_lu, i_lu) = self.illumination_estimator(p, img)?;
        let i_re = self.damage_restorer(p, &i_lu, &f_lu, zero_skips)?;
        let i_en = i_lu.add(&i_re)?;
        Ok(EnhanceOutput {
            l_bar,
            f_lu,
            i_lu,
            i_re,
            i_en,
        })
    }

    /// Inference on a plain image.
    pub fn enhance(&self, store: &ParamStore, img: &Tensor) -> Result<Tensor> {
        let p = Params::constants(store);
        Ok(self
            .forward(&p, &Var::constant(img.clone()))?
            .i_en
            .value()
            .clone())
    }

    /// Enhances `images` on up to `threads` worker threads; output order
    /// follows input order and does not depend on `threads`.
    pub fn enhance_many(
        &self,
        store: &ParamStore,
        images: &[Tensor],
        threads: usize,
    ) -> Result<Vec<Tensor>> {
        let threads = threads.clamp(1, images.len().max(1));
        if threads == 1 {
            return images.iter().map(|im| self.enhance(store, im)).collect();
        }
        let per = images.len().div_ceil(threads);
        let chunks: Vec<Result<Vec<Tensor>>> = thread::scope(|s| {
            let handles: Vec<_> = images
                .chunks(per)
                .map(|chunk| {
                    s.spawn(move || chunk.iter().map(|im| self.enhance(store, im)).collect())
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("enhance worker panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(images.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }
}

/// Clamps to `[0, 1]`; used only when writing images out.
pub fn clamp_for_export(img: &Tensor) -> Tensor {
    img.map(|v| v.clamp(0.0, 1.0))
}

/// Optimizes the `mlle.*` entries of `store` on `(dark, bright)` pairs with a
/// mean L1 reconstruction loss. Returns the loss before each step followed
/// by the loss after the last one.
pub fn train_enhancer(
    store: &mut ParamStore,
    pairs: &[(Tensor, Tensor)],
    steps: usize,
    opt: &AdamW,
) -> Result<Vec<f32>> {
    if pairs.is_empty() {
        return Err(Error::invalid("train_enhancer", "no training pairs"));
    }
    for (d, b) in pairs {
        if d.shape() != b.shape() {
            return Err(Error::shape(
                "train_enhancer",
                format!("dark {:?} vs bright {:?}", d.shape(), b.shape()),
            ));
        }
    }
    let enhancer = Enhancer::from_store(store)?;
    let saved: Vec<(String, bool)> = store
        .names()
        .map(|k| (k.to_string(), store.is_trainable(k)))
        .collect();
    store.set_trainable("", false);
    store.set_trainable(&format!("{PREFIX}."), true);

    let loss_of = |p: &Params| -> Result<Var> {
        let mut total: Option<Var> = None;
        for (dark, bright) in pairs {
            let out = enhancer.forward(p, &Var::constant(dark.clone()))?;
            let l = out
                .i_en
                .sub(&Var::constant(bright.clone()))?
                .abs()?
                .mean()?;
            total = Some(match total {
                Some(t) => t.add(&l)?,
                None => l,
            });
        }
        total.unwrap().scale(1.0 / pairs.len() as f32)
    };

    let mut history = Vec::with_capacity(steps + 1);
    let result = (|| {
        for _ in 0..steps {
            let loss = loss_of(&Params::trainable(store))?;
            history.push(loss.value().data()[0]);
            let grads = grad_of(&loss)?;
            opt.step(store, &grads)?;
        }
        history.push(loss_of(&Params::constants(store))?.value().data()[0]);
        Ok(())
    })();
    for (k, t) in saved {
        if store.contains(&k) {
            store.set_trainable(&k, t);
        }
    }
    result.map(|_| history)
}

/// Mean absolute difference between two images.
pub fn mean_abs_error(a: &Tensor, b: &Tensor) -> Result<f32> {
    Ok(a.sub(b)?.map(f32::abs).mean())
}

/// Resizes with the shared bilinear kernel; convenience for callers that
/// need restorer-compatible sizes.
pub fn resize_to_multiple_of_4(img: &Tensor) -> Result<Tensor> {
    let [_, h, w] = img.dims3("resize")?;
    let (nh, nw) = ((h / 4).max(1) * 4, (w / 4).max(1) * 4);
    if (nh, nw) == (h, w) {
        return Ok(img.clone());
    }
    nn::resize_bilinear(img, nh, nw)
}
