//! The `enhance`, `track`, `eval` and `init` commands as library calls.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nightrack_core::init::seeded_rng;
use nightrack_core::metrics::{norm_precision_curve, precision_curve, success_auc, EvalReport};
use nightrack_core::mlle::{clamp_for_export, Enhancer};
use nightrack_core::vltrack::{Tracker, TrackerConfig};
use nightrack_core::{BBox, ParamStore, WeightsError};

use crate::error::{CliError, CliResult};
use crate::pnm::{self, Image};
use crate::text;

pub const THREADS_ENV: &str = "NIGHTRACK_THREADS";
pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";
pub const PROMPT_FILE: &str = "prompt.txt";

/// Settings shared by all commands. File values are applied first, then flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub tracker: TrackerConfig,
    pub weights: Option<PathBuf>,
    pub seed: u64,
    /// Overrides `<sequence>/prompt.txt`.
    pub prompt: Option<PathBuf>,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        match key {
            "weights" => self.weights = Some(PathBuf::from(value)),
            "prompt" => self.prompt = Some(PathBuf::from(value)),
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| CliError::Config(format!("bad value `{value}` for `seed`")))?
            }
            _ => self
                .tracker
                .set(key, value)
                .map_err(|e| CliError::Config(e.to_string()))?,
        }
        Ok(())
    }

    /// Applies a `key=value` file. Relative `weights` and `prompt` paths are
    /// resolved against the file's directory.
    pub fn apply_file(&mut self, path: &Path) -> CliResult<()> {
        let body = std::fs::read_to_string(path).map_err(|e| CliError::unreadable(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for (k, v) in text::parse_config(&body, path)? {
            let v = if matches!(k.as_str(), "weights" | "prompt") {
                base.join(&v).to_string_lossy().into_owned()
            } else {
                v
            };
            self.set(&k, &v)?;
        }
        Ok(())
    }
}

fn bad_weights(path: &Path, detail: impl ToString) -> CliError {
    CliError::BadWeights {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    }
}

/// Every entry of `reference` under `prefix` must be present in `store` with
/// the same shape.
fn check_layout(
    store: &ParamStore,
    reference: &ParamStore,
    prefix: &str,
    path: &Path,
) -> CliResult<()> {
    for (name, t) in reference.iter().filter(|(n, _)| n.starts_with(prefix)) {
        match store.get(name) {
            None => return Err(bad_weights(path, format!("missing tensor `{name}`"))),
            Some(s) if s.shape() != t.shape() => {
                return Err(bad_weights(
                    path,
                    format!(
                        "`{name}` has shape {:?}, expected {:?}",
                        s.shape(),
                        t.shape()
                    ),
                ))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

pub fn load_weights(path: &Path) -> CliResult<ParamStore> {
    let bytes = std::fs::read(path).map_err(|e| CliError::unreadable(path, e))?;
    ParamStore::from_bytes(&bytes).map_err(|e: WeightsError| bad_weights(path, e))
}

/// Fresh weights for `config` drawn from `seed`.
pub fn seeded_weights(config: &TrackerConfig, seed: u64) -> CliResult<ParamStore> {
    let tracker = Tracker::new(*config)?;
    let mut store = ParamStore::new();
    tracker.init(&mut store, &mut seeded_rng(seed))?;
    Ok(store)
}

/// The tracker and its weights: loaded from `run.weights` (widths inferred
/// from the file) or seeded from `run.seed`.
pub fn load_tracker(run: &RunConfig) -> CliResult<(Tracker, ParamStore)> {
    match &run.weights {
        None => {
            let store = seeded_weights(&run.tracker, run.seed)?;
            Ok((Tracker::new(run.tracker)?, store))
        }
        Some(path) => {
            let store = load_weights(path)?;
            let tracker =
                Tracker::from_store(&store, &run.tracker).map_err(|e| bad_weights(path, e))?;
            let mut cfg = tracker.config;
            cfg.enhance = true;
            let reference = seeded_weights(&cfg, 0)?;
            check_layout(&store, &reference, "vltrack.", path)?;
            if tracker.config.enhance {
                check_layout(&store, &reference, "mlle.", path)?;
            }
            Ok((tracker, store))
        }
    }
}

pub fn load_enhancer(run: &RunConfig) -> CliResult<(Enhancer, ParamStore)> {
    match &run.weights {
        None => {
            let store = seeded_weights(&run.tracker, run.seed)?;
            Ok((Enhancer::from_store(&store)?, store))
        }
        Some(path) => {
            let store = load_weights(path)?;
            let enhancer = Enhancer::from_store(&store).map_err(|e| bad_weights(path, e))?;
            let mut reference = ParamStore::new();
            enhancer.init(&mut reference, &mut seeded_rng(0))?;
            check_layout(&store, &reference, "mlle.", path)?;
            Ok((enhancer, store))
        }
    }
}

/// `NIGHTRACK_THREADS` if set to a positive integer, else the core count.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Image files in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::unreadable(dir, e))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e.map_err(|e| CliError::unreadable(dir, e))?.path();
        if p.is_file() && pnm::is_pnm(&p) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnhanceSummary {
    pub written: Vec<PathBuf>,
    pub threads: usize,
}

/// Enhances every image in `input` into `out` under the same file name.
pub fn cmd_enhance(
    input: &Path,
    out: &Path,
    run: &RunConfig,
    threads: usize,
) -> CliResult<EnhanceSummary> {
    let files = list_images(input)?;
    let (enhancer, store) = load_enhancer(run)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::write(out, e))?;
    let threads = threads.max(1);
    let mut written = Vec::with_capacity(files.len());
    for batch in files.chunks(threads) {
        let mut images = Vec::with_capacity(batch.len());
        for path in batch {
            let img = pnm::read(path)?;
            let (h, w) = (img.data.dim(1), img.data.dim(2));
            if h % 4 != 0 || w % 4 != 0 {
                return Err(CliError::unreadable(
                    path,
                    format!("{w}x{h} sides must be divisible by 4"),
                ));
            }
            images.push(img);
        }
        let rgb: Vec<_> = images.iter().map(Image::to_rgb).collect();
        let enhanced = enhancer.enhance_many(&store, &rgb, threads)?;
        for ((path, img), en) in batch.iter().zip(&images).zip(&enhanced) {
            let dest = out.join(path.file_name().expect("listed files have names"));
            pnm::write(&dest, &Image::from_rgb(&clamp_for_export(en), img.kind))?;
            written.push(dest);
        }
    }
    Ok(EnhanceSummary { written, threads })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackSummary {
    pub boxes: Vec<BBox>,
    /// Frames after the first, which are the ones actually tracked.
    pub tracked_frames: usize,
    pub seconds: f64,
    pub config: TrackerConfig,
}

impl TrackSummary {
    pub fn frames_per_second(&self) -> f64 {
        if self.seconds > 0.0 {
            self.tracked_frames as f64 / self.seconds
        } else {
            0.0
        }
    }

    /// Results file contents.
    pub fn results(&self) -> String {
        text::format_boxes(&self.boxes)
    }

    pub fn throughput_line(&self) -> String {
        let c = &self.config;
        format!(
            "throughput: {:.2} frames/s over {} frames on CPU (d1={}, depth={}, search={}px, enhance={}); \
             the published 42 FPS GPU figure is not reproducible with this build and is not comparable",
            self.frames_per_second(),
            self.tracked_frames,
            c.d1,
            c.depth,
            c.search_size,
            c.enhance
        )
    }
}

pub fn read_prompt(path: &Path) -> CliResult<String> {
    let s =
        std::fs::read_to_string(path).map_err(|_| CliError::MissingPrompt(path.to_path_buf()))?;
    let s = s.trim();
    if s.is_empty() {
        return Err(CliError::MissingPrompt(path.to_path_buf()));
    }
    Ok(s.to_string())
}

/// Tracks the sequence stored in `dir`.
pub fn cmd_track(dir: &Path, run: &RunConfig) -> CliResult<TrackSummary> {
    let frames = list_images(dir)?;
    if frames.is_empty() {
        return Err(CliError::unreadable(dir, "no PPM/PGM frames"));
    }
    let gt = text::read_boxes(&dir.join(GROUNDTRUTH_FILE))?;
    let init = *gt
        .first()
        .ok_or_else(|| CliError::unreadable(&dir.join(GROUNDTRUTH_FILE), "no initial box"))?;
    if gt.len() > frames.len() {
        return Err(CliError::CountMismatch {
            what: format!("{} vs frames in {}", GROUNDTRUTH_FILE, dir.display()),
            left: gt.len(),
            right: frames.len(),
        });
    }
    let prompt_path = run.prompt.clone().unwrap_or_else(|| dir.join(PROMPT_FILE));
    let prompt = read_prompt(&prompt_path)?;
    let (tracker, store) = load_tracker(run)?;

    let read_frame = |index: usize| -> CliResult<nightrack_core::Tensor> {
        let path = &frames[index];
        pnm::read(path)
            .map(|img| img.to_rgb())
            .map_err(|e| CliError::UnreadableFrame {
                index,
                path: path.clone(),
                detail: e.to_string(),
            })
    };
    let start = Instant::now();
    let mut state = tracker.prepare(&store, &read_frame(0)?, &init, &prompt)?;
    let mut boxes = vec![init];
    for i in 1..frames.len() {
        let frame = read_frame(i)?;
        boxes.push(tracker.step(&store, &mut state, &frame)?.bbox);
    }
    Ok(TrackSummary {
        boxes,
        tracked_frames: frames.len() - 1,
        seconds: start.elapsed().as_secs_f64(),
        config: tracker.config,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub report: EvalReport,
    pub curves: Vec<PathBuf>,
}

impl EvalSummary {
    pub fn text(&self) -> String {
        format!(
            "auc={:.4}\np={:.4}\np_norm={:.4}\n",
            self.report.auc, self.report.precision, self.report.norm_precision
        )
    }
}

/// Scores `results` against `groundtruth` and writes the three curves as
/// CSV next to `results` (or into `out`).
pub fn cmd_eval(results: &Path, groundtruth: &Path, out: Option<&Path>) -> CliResult<EvalSummary> {
    let pred = text::read_boxes(results)?;
    let gt = text::read_boxes(groundtruth)?;
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(CliError::CountMismatch {
            what: format!("{} vs {}", results.display(), groundtruth.display()),
            left: pred.len(),
            right: gt.len(),
        });
    }
    let report = EvalReport::compute(&pred, &gt)?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => results.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    std::fs::create_dir_all(&dir).map_err(|e| CliError::write(&dir, e))?;
    let stem = results
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("results");
    let mut curves = Vec::new();
    for (name, curve) in [
        ("success", success_auc(&pred, &gt)?),
        ("precision", precision_curve(&pred, &gt)?),
        ("norm_precision", norm_precision_curve(&pred, &gt)?),
    ] {
        let path = dir.join(format!("{stem}.{name}.csv"));
        std::fs::write(&path, curve.to_csv()).map_err(|e| CliError::write(&path, e))?;
        curves.push(path);
    }
    Ok(EvalSummary { report, curves })
}

/// Writes seeded weights for `run.tracker` to `out`.
pub fn cmd_init(out: &Path, run: &RunConfig) -> CliResult<usize> {
    let store = seeded_weights(&run.tracker, run.seed)?;
    let bytes = store.to_bytes();
    std::fs::write(out, &bytes).map_err(|e| CliError::write(out, e))?;
    Ok(bytes.len())
}
