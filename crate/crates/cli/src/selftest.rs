//! Embedded invariant checks run by `nightrack selftest`.

use std::path::Path;

use rand::Rng;

use nightrack_core::gradcheck::{check_case, primitive_cases};
use nightrack_core::init::seeded_rng;
use nightrack_core::metrics::{norm_precision, precision, success_auc};
use nightrack_core::mlle::RetinexImage;
use nightrack_core::ssm::{selective_scan_parallel, selective_scan_seq, SsmParams};
use nightrack_core::vltrack::TrackerConfig;
use nightrack_core::{BBox, ParamStore, Tensor};

use crate::commands::{load_weights, seeded_weights};

pub type GroupResult = Result<String, String>;

fn scan_group() -> GroupResult {
    let mut rng = seeded_rng(101);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (l, d, n) = (
            rng.gen_range(1..300),
            rng.gen_range(1..=16),
            rng.gen_range(1..=16),
        );
        let mut r =
            |shape: &[usize], lo: f32, hi: f32| Tensor::from_fn(shape, |_| rng.gen_range(lo..hi));
        let u = r(&[l, d], -1.0, 1.0);
        let p = SsmParams::new(
            r(&[d, n], -2.0, -0.05),
            r(&[l, n], -1.0, 1.0),
            r(&[l, n], -1.0, 1.0),
            r(&[d], -1.0, 1.0),
            r(&[l, d], 0.001, 0.5),
        )
        .map_err(|e| e.to_string())?;
        let s = selective_scan_seq(&u, &p).map_err(|e| e.to_string())?;
        let q = selective_scan_parallel(&u, &p).map_err(|e| e.to_string())?;
        let scale = s
            .data()
            .iter()
            .fold(0.0f32, |m, v| m.max(v.abs()))
            .max(f32::MIN_POSITIVE);
        worst = worst.max(f64::from(
            s.max_abs_diff(&q).map_err(|e| e.to_string())? / scale,
        ));
    }
    if worst < 1e-4 {
        Ok(format!("20 configs, max relative error {worst:.2e}"))
    } else {
        Err(format!("max relative error {worst:.2e} >= 1e-4"))
    }
}

fn retinex_group() -> GroupResult {
    let mut rng = seeded_rng(102);
    let mut worst = 0.0f32;
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let r = Tensor::from_fn(&[3, h, w], |_| rng.gen_range(0.0..1.0));
        let l = Tensor::from_fn(&[h, w], |_| rng.gen_range(0.05..1.0));
        let img = RetinexImage::compose(r.clone(), l, None, None).map_err(|e| e.to_string())?;
        let back = img.light_up().map_err(|e| e.to_string())?;
        worst = worst.max(back.max_abs_diff(&r).map_err(|e| e.to_string())?);
    }
    if worst < 1e-6 {
        Ok(format!("20 compositions, max error {worst:.2e}"))
    } else {
        Err(format!("max error {worst:.2e} >= 1e-6"))
    }
}

fn gradient_group() -> GroupResult {
    let cases = primitive_cases();
    for case in &cases {
        let err = check_case(case, 2, 103).map_err(|e| format!("{}: {e}", case.name))?;
        if err.is_nan() || err >= 1e-2 {
            return Err(format!("{}: relative error {err:.2e}", case.name));
        }
    }
    Ok(format!("{} primitives, 2 trials each", cases.len()))
}

/// Brute-force recomputation of the three metrics straight from definitions.
fn oracle(pred: &[BBox], gt: &[BBox]) -> (f64, f64, f64) {
    let n = gt.len() as f64;
    let mut auc = 0.0;
    for i in 0..=20 {
        let t = i as f64 / 20.0;
        auc += pred.iter().zip(gt).filter(|(p, g)| p.iou(g) >= t).count() as f64 / n;
    }
    let center_err = |p: &BBox, g: &BBox, sx: f64, sy: f64| {
        let ((px, py), (gx, gy)) = (p.center(), g.center());
        ((px - gx) / sx).hypot((py - gy) / sy)
    };
    let p20 = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| center_err(p, g, 1.0, 1.0) <= 20.0)
        .count() as f64
        / n;
    let pn = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| center_err(p, g, g.w, g.h) <= 0.2)
        .count() as f64
        / n;
    (auc / 21.0, p20, pn)
}

fn metric_group() -> GroupResult {
    let mut rng = seeded_rng(104);
    for track in 0..30 {
        let len = rng.gen_range(1..=50);
        let mut boxes = || {
            (0..len)
                .map(|_| {
                    BBox::new(
                        rng.gen_range(0.0..100.0),
                        rng.gen_range(0.0..100.0),
                        rng.gen_range(1.0..60.0),
                        rng.gen_range(1.0..60.0),
                    )
                    .expect("positive extents")
                })
                .collect::<Vec<_>>()
        };
        let (pred, gt) = (boxes(), boxes());
        let got = (
            success_auc(&pred, &gt).map_err(|e| e.to_string())?.summary,
            precision(&pred, &gt).map_err(|e| e.to_string())?,
            norm_precision(&pred, &gt).map_err(|e| e.to_string())?,
        );
        let want = oracle(&pred, &gt);
        if got != want {
            return Err(format!("track {track}: {got:?} vs oracle {want:?}"));
        }
    }
    Ok("30 random tracks match the oracle".into())
}

fn weights_group(weights: Option<&Path>) -> GroupResult {
    let store = match weights {
        Some(p) => load_weights(p).map_err(|e| e.to_string())?,
        None => seeded_weights(&TrackerConfig::toy(), 7).map_err(|e| e.to_string())?,
    };
    let bytes = store.to_bytes();
    let back = ParamStore::from_bytes(&bytes).map_err(|e| e.to_string())?;
    if back.to_bytes() != bytes {
        return Err("re-encoded bytes differ".into());
    }
    Ok(format!("{} tensors, {} bytes", store.len(), bytes.len()))
}

/// Runs every group, returning `(name, outcome)` in a fixed order.
pub fn run(weights: Option<&Path>) -> Vec<(&'static str, GroupResult)> {
    vec![
        ("scan", scan_group()),
        ("retinex", retinex_group()),
        ("gradients", gradient_group()),
        ("metrics", metric_group()),
        ("weights", weights_group(weights)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_groups_pass_and_corrupt_weights_fail() {
        for (name, r) in run(None) {
            assert!(r.is_ok(), "{name}: {r:?}");
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        std::fs::write(&path, b"MTWT garbage").unwrap();
        assert!(weights_group(Some(&path)).is_err());
    }
}
