#![allow(dead_code)]

use std::path::{Path, PathBuf};

use nightrack::pnm::{self, Image, PnmKind};
use nightrack::text::format_boxes;
use nightrack::RunConfig;
use nightrack_core::init::seeded_rng;
use nightrack_core::synth::{gamma_darken, smooth_image, square_sequence, SquareMotion};

pub const BLESS_ENV: &str = "NIGHTRACK_BLESS";

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

pub fn blessing() -> bool {
    std::env::var(BLESS_ENV).is_ok_and(|v| v == "1")
}

/// Compares `actual` with the committed file, or rewrites it when blessing.
pub fn check_golden(path: &Path, actual: &[u8]) {
    if blessing() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(path, actual).unwrap();
        return;
    }
    let expected = std::fs::read(path).unwrap_or_else(|e| {
        panic!(
            "{}: {e}; rerun with {BLESS_ENV}=1 to create it",
            path.display()
        )
    });
    assert!(
        expected == actual,
        "{} differs from the golden copy",
        path.display()
    );
}

pub const SEQ_MOTION: SquareMotion = SquareMotion {
    frames: 10,
    frame_size: 96,
    side: 16.0,
    start: (24.0, 30.0),
    velocity: (1.5, 1.0),
    brightness: 0.35,
};
pub const SEQ_SEED: u64 = 3;

/// Files of the bundled night sequence as `(name, bytes)`.
pub fn sequence_files() -> Vec<(String, Vec<u8>)> {
    let seq = square_sequence(SEQ_SEED, &SEQ_MOTION);
    let mut files: Vec<(String, Vec<u8>)> = seq
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let img = Image {
                kind: PnmKind::Rgb,
                data: f.clone(),
            };
            (format!("{:04}.ppm", i + 1), pnm::encode(&img))
        })
        .collect();
    files.push((
        "groundtruth.txt".into(),
        format_boxes(&seq.boxes).into_bytes(),
    ));
    files.push((
        "prompt.txt".into(),
        format!("{}\n", seq.prompt).into_bytes(),
    ));
    files
}

/// The bundled 64×64 low-light test image.
pub fn enhance_input() -> Vec<u8> {
    let bright = smooth_image(&mut seeded_rng(21), 64, 64);
    pnm::encode(&Image {
        kind: PnmKind::Rgb,
        data: gamma_darken(&bright, 2.0, 0.3),
    })
}

pub fn toy_run() -> RunConfig {
    let mut run = RunConfig::default();
    run.apply_file(&data_dir().join("toy.cfg")).unwrap();
    run
}
