//! Language-guided visual tracker.

pub mod cmm;
pub mod config;
pub mod embed;
pub mod encoder;
pub mod geometry;
pub mod head;
pub mod tracker;
pub mod train;

pub use cmm::{Cmm, CmmOutput};
pub use config::TrackerConfig;
pub use embed::{patch_embed, tokenize_prompt, LanguageEncoder};
pub use encoder::VisualEncoder;
pub use geometry::{crop_region, CropTransform};
pub use head::{decode, Head, HeadOutput, HeadVars};
pub use tracker::{StepOutput, TrackState, Tracker};
pub use train::{mean_iou, train_tracker, StepLoss, TrainOptions};
