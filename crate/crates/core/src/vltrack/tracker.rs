//! Per-sequence tracking loop.

use crate::autograd::Var;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::init::SeededRng;
use crate::mlle::{illumination_prior, Enhancer};
use crate::params::{ParamStore, Params};
use crate::tensor::Tensor;

use super::cmm::{Cmm, CmmOutput};
use super::config::TrackerConfig;
use super::embed::{init_patch_embed, patch_embed, tokenize_prompt, LanguageEncoder};
use super::encoder::VisualEncoder;
use super::geometry::{crop_region, CropTransform};
use super::head::{decode, Head, HeadOutput, HeadVars};

/// Everything fixed after the first frame plus the running box.
#[derive(Clone, Debug)]
pub struct TrackState {
    /// Template crop after optional enhancement, `[3, T, T]`.
    pub template: Tensor,
    /// Projected language embeddings `[N_t, D1]`, CLS first.
    pub language: Tensor,
    pub prev_box: BBox,
    pub last_transform: Option<CropTransform>,
    /// Frames seen so far, including the first.
    pub frames: usize,
}

/// One tracked frame.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub bbox: BBox,
    pub cell: (usize, usize),
    pub maps: HeadOutput,
    pub transform: CropTransform,
    pub enhanced: bool,
}

/// Graph outputs of a forward pass over one template/search pair.
pub struct Forward {
    pub maps: HeadVars,
    pub fusion: CmmOutput,
}

#[derive(Clone, Debug)]
pub struct Tracker {
    pub config: TrackerConfig,
    pub language: LanguageEncoder,
    pub visual: VisualEncoder,
    pub cmm: Cmm,
    pub head: Head,
    pub enhancer: Enhancer,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        Ok(Tracker {
            language: LanguageEncoder::new(c.d1, c.d2, c.lang_depth, c.d_state),
            visual: VisualEncoder::new(c.d1, c.depth, c.d_state),
            cmm: Cmm::new(c.d1, c.d_state),
            head: Head::new(c.d1, c.head_channels),
            enhancer: Enhancer::new(c.enhancer),
            config,
        })
    }

    /// Builds a tracker whose widths match `store`; geometry and switches come
    /// from `base`.
    pub fn from_store(store: &ParamStore, base: &TrackerConfig) -> Result<Self> {
        let mut config = base.infer_from(store)?;
        config.enhance &= base.enhance;
        Tracker::new(config)
    }

    /// Adds freshly initialized tracker and enhancer parameters to `store`.
    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) -> Result<()> {
        init_patch_embed(store, rng, self.config.patch, self.config.d1)?;
        self.language.init(store, rng)?;
        self.visual.init(store, rng)?;
        self.cmm.init(store, rng)?;
        self.head.init(store, rng)?;
        self.enhancer.init(store, rng)
    }

    fn maybe_enhance(&self, store: &ParamStore, crop: Tensor) -> Result<(Tensor, bool)> {
        if !self.config.enhance {
            return Ok((crop, false));
        }
        if let Some(th) = self.config.enhance_threshold {
            if illumination_prior(&crop)?.mean() > th {
                return Ok((crop, false));
            }
        }
        Ok((self.enhancer.enhance(store, &crop)?, true))
    }

    /// Template crop of `frame` around `b`, enhanced when configured.
    pub fn template_crop(&self, store: &ParamStore, frame: &Tensor, b: &BBox) -> Result<Tensor> {
        let c = &self.config;
        let (crop, _) = crop_region(frame, b, c.template_factor, c.template_size)?;
        Ok(self.maybe_enhance(store, crop)?.0)
    }

    /// Search crop of `frame` around `b`, enhanced when configured.
    pub fn search_crop(
        &self,
        store: &ParamStore,
        frame: &Tensor,
        b: &BBox,
    ) -> Result<(Tensor, CropTransform, bool)> {
        let c = &self.config;
        let (crop, t) = crop_region(frame, b, c.search_factor, c.search_size)?;
        let (crop, enhanced) = self.maybe_enhance(store, crop)?;
        Ok((crop, t, enhanced))
    }

    /// Embedding, joint encoding, fusion and head for already cropped inputs.
    pub fn forward(
        &self,
        p: &Params,
        template: &Tensor,
        search: &Tensor,
        language: &Var,
    ) -> Result<Forward> {
        let patch = self.config.patch;
        let tz = patch_embed(p, &Var::constant(template.clone()), patch)?;
        let tx = patch_embed(p, &Var::constant(search.clone()), patch)?;
        let (hz, hx) = self.visual.forward(p, &tz, &tx)?;
        let fusion = self.cmm.fuse(p, &hz, &hx, language)?;
        let maps = self.head.forward(p, &fusion.fused_x)?;
        Ok(Forward { maps, fusion })
    }

    pub fn prepare(
        &self,
        store: &ParamStore,
        first_frame: &Tensor,
        init_box: &BBox,
        prompt: &str,
    ) -> Result<TrackState> {
        if !init_box.is_valid() {
            return Err(Error::invalid(
                "track_sequence",
                format!("invalid initial box {init_box:?}"),
            ));
        }
        let ids = tokenize_prompt(prompt)?;
        let language = self
            .language
            .forward(&Params::constants(store), &ids)?
            .value()
            .clone();
        Ok(TrackState {
            template: self.template_crop(store, first_frame, init_box)?,
            language,
            prev_box: *init_box,
            last_transform: None,
            frames: 1,
        })
    }

    /// Tracks one frame and advances `state`.
    pub fn step(
        &self,
        store: &ParamStore,
        state: &mut TrackState,
        frame: &Tensor,
    ) -> Result<StepOutput> {
        let [_, fh, fw] = frame.dims3("track_step")?;
        let (search, transform, enhanced) = self.search_crop(store, frame, &state.prev_box)?;
        let p = Params::constants(store);
        let out = self.forward(
            &p,
            &state.template,
            &search,
            &Var::constant(state.language.clone()),
        )?;
        let maps = out.maps.values();
        let (cell, crop_box) = decode(&maps, self.config.search_size);
        let bbox = transform.box_to_frame(&crop_box).clamp_to(fw, fh);
        state.prev_box = bbox;
        state.last_transform = Some(transform);
        state.frames += 1;
        Ok(StepOutput {
            bbox,
            cell,
            maps,
            transform,
            enhanced,
        })
    }

    /// Boxes for every frame; the first is `init_box` itself.
    pub fn track_sequence(
        &self,
        store: &ParamStore,
        frames: &[Tensor],
        init_box: &BBox,
        prompt: &str,
    ) -> Result<Vec<BBox>> {
        let first = frames
            .first()
            .ok_or_else(|| Error::invalid("track_sequence", "no frames"))?;
        let mut state = self.prepare(store, first, init_box, prompt)?;
        let mut boxes = vec![*init_box];
        for f in &frames[1..] {
            boxes.push(self.step(store, &mut state, f)?.bbox);
        }
        Ok(boxes)
    }
}
