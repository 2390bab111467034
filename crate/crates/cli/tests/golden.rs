mod common;

use common::*;
use nightrack::commands::{cmd_enhance, cmd_track, seeded_weights};
use nightrack_core::ParamStore;

#[test]
fn bundled_inputs_come_from_the_generators() {
    let dir = data_dir();
    for (name, bytes) in sequence_files() {
        check_golden(&dir.join("night_seq").join(name), &bytes);
    }
    check_golden(&dir.join("enhance").join("dusk.ppm"), &enhance_input());
}

#[test]
fn track_matches_golden_and_is_repeatable() {
    let run = toy_run();
    let seq = data_dir().join("night_seq");
    let a = cmd_track(&seq, &run).unwrap();
    let b = cmd_track(&seq, &run).unwrap();
    assert_eq!(a.boxes.len(), 10);
    assert_eq!(a.results(), b.results());
    check_golden(
        &data_dir().join("golden").join("night_seq_results.txt"),
        a.results().as_bytes(),
    );
}

#[test]
fn enhance_matches_golden() {
    let out = tempfile::tempdir().unwrap();
    let summary = cmd_enhance(&data_dir().join("enhance"), out.path(), &toy_run(), 2).unwrap();
    assert_eq!(summary.written.len(), 1);
    let bytes = std::fs::read(out.path().join("dusk.ppm")).unwrap();
    check_golden(&data_dir().join("golden").join("dusk_enhanced.ppm"), &bytes);
}

#[test]
fn seeded_weights_round_trip_byte_identically() {
    let run = toy_run();
    let store = seeded_weights(&run.tracker, run.seed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.mtwt");
    store.save(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded = ParamStore::load(&path).unwrap();
    loaded.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
    assert_eq!(
        seeded_weights(&run.tracker, run.seed).unwrap().to_bytes(),
        first
    );
}
