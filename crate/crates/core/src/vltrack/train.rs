//! Supervised training of the tracker on one annotated sequence.

use rand::Rng;

use crate::autograd::{grad_of, Var};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::init::seeded_rng;
use crate::losses::{focal_loss, gaussian_target, giou_loss_var, l1_loss_var, LossWeights};
use crate::optim::AdamW;
use crate::params::{ParamStore, Params};
use crate::tensor::Tensor;

use super::embed::tokenize_prompt;
use super::head::encode;
use super::tracker::Tracker;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub optimizer: AdamW,
    pub weights: LossWeights,
    /// Maximum shift, in pixels, of the box the search crop is centered on.
    pub jitter: f64,
    /// The same box is also resized by a factor in `[e^-s, e^s]`.
    pub scale_jitter: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 500,
            optimizer: AdamW::default(),
            weights: LossWeights::default(),
            jitter: 4.0,
            scale_jitter: 0.25,
            seed: 0,
        }
    }
}

/// Loss terms of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub l1: f32,
    pub giou: f32,
    pub focal: f32,
    pub total: f32,
}

/// Trains every `vltrack.*` entry of `store` on `(frames, boxes)`. The search
/// crop for frame `i` is centered on a jittered copy of its true box; the
/// template comes from frame 0. Enhancer weights stay frozen.
pub fn train_tracker(
    tracker: &Tracker,
    store: &mut ParamStore,
    frames: &[Tensor],
    boxes: &[BBox],
    prompt: &str,
    opts: &TrainOptions,
) -> Result<Vec<StepLoss>> {
    if frames.is_empty() || frames.len() != boxes.len() {
        return Err(Error::invalid(
            "train_tracker",
            format!("{} frames vs {} boxes", frames.len(), boxes.len()),
        ));
    }
    let cfg = tracker.config;
    let ids = tokenize_prompt(prompt)?;
    let template = tracker.template_crop(store, &frames[0], &boxes[0])?;
    let grid = cfg.grid();
    let s = cfg.search_size as f64;
    let mut rng = seeded_rng(opts.seed);

    let saved: Vec<(String, bool)> = store
        .names()
        .map(|k| (k.to_string(), store.is_trainable(k)))
        .collect();
    store.set_trainable("", false);
    store.set_trainable("vltrack.", true);

    let mut history = Vec::with_capacity(opts.steps);
    let result = (|| {
        for _ in 0..opts.steps {
            let i = rng.gen_range(0..frames.len());
            let gt = boxes[i];
            let (j, sj) = (opts.jitter, opts.scale_jitter);
            let mut center_on = gt;
            if j > 0.0 {
                center_on = center_on.translate(rng.gen_range(-j..=j), rng.gen_range(-j..=j));
            }
            if sj > 0.0 {
                let (cx, cy) = center_on.center();
                let f = rng.gen_range(-sj..=sj).exp();
                center_on = BBox::from_center(cx, cy, gt.w * f, gt.h * f)?;
            }
            let (search, transform, _) = tracker.search_crop(store, &frames[i], &center_on)?;
            let crop_gt = transform.box_to_crop(&gt);
            let target = encode(&crop_gt, cfg.search_size, grid);
            let norm_gt = BBox {
                x: crop_gt.x / s,
                y: crop_gt.y / s,
                w: crop_gt.w / s,
                h: crop_gt.h / s,
            };

            let p = Params::trainable(store);
            let language = tracker.language.forward(&p, &ids)?;
            let out = tracker.forward(&p, &template, &search, &language)?;
            let pred = out.maps.box_at(target.cell)?;
            let l1 = l1_loss_var(&pred, &norm_gt)?;
            let giou = giou_loss_var(&pred, &norm_gt)?;
            let heat = gaussian_target(
                target.cell,
                (crop_gt.w * grid as f64 / s, crop_gt.h * grid as f64 / s),
                grid,
            )?;
            let focal = focal_loss(&out.maps.score, &heat)?;
            let total = opts.weights.combine(&l1, &giou, &focal)?;
            let item = |v: &Var| v.value().data()[0];
            history.push(StepLoss {
                l1: item(&l1),
                giou: item(&giou),
                focal: item(&focal),
                total: item(&total),
            });
            let grads = grad_of(&total)?;
            opts.optimizer.step(store, &grads)?;
        }
        Ok(())
    })();
    for (k, t) in saved {
        store.set_trainable(&k, t);
    }
    result.map(|_| history)
}

/// Mean IoU between two equally long box lists.
pub fn mean_iou(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::invalid(
            "mean_iou",
            format!("{} vs {} boxes", pred.len(), gt.len()),
        ));
    }
    Ok(pred.iter().zip(gt).map(|(a, b)| a.iou(b)).sum::<f64>() / pred.len() as f64)
}
