use crate::error::{Error, Result};
use crate::mlle::{EnhancerConfig, LIGHT_UP_CHANNELS};
use crate::params::ParamStore;
use crate::ssm::DEFAULT_D_STATE;

/// Sizes of the tracker. Model widths can be recovered from a weights file
/// with [`TrackerConfig::infer_from`]; crop geometry and switches cannot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackerConfig {
    /// Visual token width.
    pub d1: usize,
    /// Language embedding width.
    pub d2: usize,
    /// Bidirectional blocks in the visual encoder.
    pub depth: usize,
    /// Mamba blocks in the language encoder.
    pub lang_depth: usize,
    pub patch: usize,
    pub template_size: usize,
    pub search_size: usize,
    /// Crop side as a multiple of `sqrt(w·h)`.
    pub template_factor: f64,
    pub search_factor: f64,
    pub d_state: usize,
    pub head_channels: usize,
    pub enhance: bool,
    /// Skip enhancement of a crop whose mean illumination prior exceeds this.
    pub enhance_threshold: Option<f32>,
    pub enhancer: EnhancerConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            d1: 384,
            d2: 768,
            depth: 4,
            lang_depth: 2,
            patch: 16,
            template_size: 128,
            search_size: 256,
            template_factor: 2.0,
            search_factor: 4.0,
            d_state: DEFAULT_D_STATE,
            head_channels: 64,
            enhance: true,
            enhance_threshold: None,
            enhancer: EnhancerConfig {
                channels: LIGHT_UP_CHANNELS,
                d_state: DEFAULT_D_STATE,
            },
        }
    }
}

impl TrackerConfig {
    /// Small widths for tests, demos and the bundled sequence.
    pub fn toy() -> Self {
        TrackerConfig {
            d1: 32,
            d2: 32,
            depth: 2,
            lang_depth: 1,
            patch: 4,
            template_size: 32,
            search_size: 64,
            d_state: 8,
            head_channels: 16,
            enhance: false,
            enhancer: EnhancerConfig {
                channels: 8,
                d_state: 4,
            },
            ..TrackerConfig::default()
        }
    }

    /// Cells per side of the search grid.
    pub fn grid(&self) -> usize {
        self.search_size / self.patch
    }

    pub fn template_tokens(&self) -> usize {
        (self.template_size / self.patch).pow(2)
    }

    pub fn search_tokens(&self) -> usize {
        self.grid().pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("tracker_config", msg));
        if [
            self.d1,
            self.d2,
            self.depth,
            self.patch,
            self.d_state,
            self.head_channels,
        ]
        .contains(&0)
        {
            return bad("widths, depth and patch must be positive".into());
        }
        for (name, size) in [
            ("template_size", self.template_size),
            ("search_size", self.search_size),
        ] {
            if size == 0 || size % self.patch != 0 {
                return bad(format!(
                    "{name} {size} is not a positive multiple of patch {}",
                    self.patch
                ));
            }
            if self.enhance && size % 4 != 0 {
                return bad(format!(
                    "{name} {size} must be divisible by 4 when enhancing"
                ));
            }
        }
        if !(self.template_factor > 0.0) || !(self.search_factor > 0.0) {
            return bad("crop factors must be positive".into());
        }
        Ok(())
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let err = || Error::invalid("tracker_config", format!("bad value `{value}` for `{key}`"));
        let usize_v = || value.parse::<usize>().map_err(|_| err());
        let f64_v = || value.parse::<f64>().map_err(|_| err());
        match key {
            "d1" => self.d1 = usize_v()?,
            "d2" => self.d2 = usize_v()?,
            "depth" => self.depth = usize_v()?,
            "lang_depth" => self.lang_depth = usize_v()?,
            "patch" => self.patch = usize_v()?,
            "template_size" => self.template_size = usize_v()?,
            "search_size" => self.search_size = usize_v()?,
            "template_factor" => self.template_factor = f64_v()?,
            "search_factor" => self.search_factor = f64_v()?,
            "d_state" => self.d_state = usize_v()?,
            "head_channels" => self.head_channels = usize_v()?,
            "enhance" => self.enhance = value.parse::<bool>().map_err(|_| err())?,
            "enhance_threshold" => {
                self.enhance_threshold = if value == "none" {
                    None
                } else {
                    Some(value.parse::<f32>().map_err(|_| err())?)
                }
            }
            "enhancer_channels" => self.enhancer.channels = usize_v()?,
            "enhancer_d_state" => self.enhancer.d_state = usize_v()?,
            _ => {
                return Err(Error::invalid(
                    "tracker_config",
                    format!("unknown key `{key}`"),
                ))
            }
        }
        Ok(())
    }

    /// `key=value` lines accepted by [`TrackerConfig::set`].
    pub fn to_text(&self) -> String {
        let th = self
            .enhance_threshold
            .map_or("none".to_string(), |t| t.to_string());
        format!(
            "d1={}\nd2={}\ndepth={}\nlang_depth={}\npatch={}\ntemplate_size={}\nsearch_size={}\n\
             template_factor={}\nsearch_factor={}\nd_state={}\nhead_channels={}\nenhance={}\n\
             enhance_threshold={th}\nenhancer_channels={}\nenhancer_d_state={}\n",
            self.d1,
            self.d2,
            self.depth,
            self.lang_depth,
            self.patch,
            self.template_size,
            self.search_size,
            self.template_factor,
            self.search_factor,
            self.d_state,
            self.head_channels,
            self.enhance,
            self.enhancer.channels,
            self.enhancer.d_state
        )
    }

    /// Replaces the widths in `self` with those implied by `store`.
    pub fn infer_from(&self, store: &ParamStore) -> Result<Self> {
        let mut c = *self;
        let pe = store.require("vltrack.patch_embed.weight")?;
        c.d1 = pe.dim(0);
        let patch2 = pe.dim(1) / 3;
        c.patch = (patch2 as f64).sqrt().round() as usize;
        if c.patch * c.patch * 3 != pe.dim(1) {
            return Err(Error::invalid(
                "tracker_config",
                "patch embedding is not square",
            ));
        }
        c.d2 = store.require("vltrack.lang.embed.weight")?.dim(1);
        let count = |pre: &str| {
            (0..)
                .take_while(|i| store.contains(&format!("{pre}{i}.norm.gamma")))
                .count()
        };
        c.depth = count("vltrack.vim.layer");
        c.lang_depth = count("vltrack.lang.layer");
        c.d_state = store.require("vltrack.cmm.v.ssm.a_log")?.dim(1);
        c.head_channels = store.require("vltrack.head.score.conv1.weight")?.dim(0);
        if store.contains("mlle.ie.fuse.weight") {
            c.enhancer = crate::mlle::Enhancer::from_store(store)?.config;
        } else {
            c.enhance = false;
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_setup() {
        let c = TrackerConfig::default();
        assert_eq!((c.d1, c.d2), (384, 768));
        assert_eq!((c.template_size, c.search_size), (128, 256));
        assert_eq!((c.template_factor, c.search_factor), (2.0, 4.0));
        assert_eq!(c.enhancer.channels, 40);
        assert_eq!(
            (c.grid(), c.template_tokens(), c.search_tokens()),
            (16, 64, 256)
        );
        c.validate().unwrap();
        TrackerConfig::toy().validate().unwrap();
    }

    #[test]
    fn text_round_trip_and_errors() {
        let mut c = TrackerConfig::toy();
        c.enhance_threshold = Some(0.5);
        let mut back = TrackerConfig::default();
        for line in c.to_text().lines() {
            let (k, v) = line.split_once('=').unwrap();
            back.set(k, v).unwrap();
        }
        assert_eq!(back, c);
        assert!(c.clone().set("nope", "1").is_err());
        assert!(c.clone().set("d1", "x").is_err());
        let mut bad = c;
        bad.search_size = 66;
        assert!(bad.validate().is_err());
    }
}
