//! One-pass evaluation metrics: IoU success curve with its AUC, center
//! precision at 20 px, and size-normalized precision at 0.2.

use std::fmt::Write as _;

use crate::bbox::BBox;
use crate::error::{Error, Result};

pub const SUCCESS_STEPS: usize = 20;
pub const PRECISION_PX: f64 = 20.0;
pub const NORM_PRECISION: f64 = 0.2;

/// A metric as a function of its threshold, plus one summary number.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCurve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
    pub summary: f64,
}

impl EvalCurve {
    /// `threshold,value` lines under a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,value\n");
        for (t, v) in self.thresholds.iter().zip(&self.values) {
            let _ = writeln!(s, "{t},{v}");
        }
        s
    }
}

fn check_lengths(pred: &[BBox], gt: &[BBox], op: &'static str) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(
            op,
            format!(
                "{} predictions vs {} ground-truth boxes",
                pred.len(),
                gt.len()
            ),
        ));
    }
    if gt.is_empty() {
        return Err(Error::invalid(op, "empty track"));
    }
    Ok(())
}

fn fraction(count: usize, total: usize) -> f64 {
    count as f64 / total as f64
}

fn curve(values: &[f64], thresholds: Vec<f64>, pass: impl Fn(f64, f64) -> bool) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&t| fraction(values.iter().filter(|&&v| pass(v, t)).count(), values.len()))
        .collect()
}

/// Success at thresholds `0, 0.05, ..., 1` (IoU ≥ t); the summary is the mean.
pub fn success_auc(pred: &[BBox], gt: &[BBox]) -> Result<EvalCurve> {
    check_lengths(pred, gt, "success_auc")?;
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
    let thresholds: Vec<f64> = (0..=SUCCESS_STEPS)
        .map(|i| i as f64 / SUCCESS_STEPS as f64)
        .collect();
    let values = curve(&ious, thresholds.clone(), |v, t| v >= t);
    let summary = values.iter().sum::<f64>() / values.len() as f64;
    Ok(EvalCurve {
        thresholds,
        values,
        summary,
    })
}

fn center_errors(pred: &[BBox], gt: &[BBox]) -> Vec<f64> {
    pred.iter()
        .zip(gt)
        .map(|(p, g)| {
            let ((px, py), (gx, gy)) = (p.center(), g.center());
            (px - gx).hypot(py - gy)
        })
        .collect()
}

fn norm_center_errors(pred: &[BBox], gt: &[BBox]) -> Vec<f64> {
    pred.iter()
        .zip(gt)
        .map(|(p, g)| {
            let ((px, py), (gx, gy)) = (p.center(), g.center());
            ((px - gx) / g.w).hypot((py - gy) / g.h)
        })
        .collect()
}

/// Fraction of frames whose center error is at most 20 px.
pub fn precision(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    check_lengths(pred, gt, "precision")?;
    let e = center_errors(pred, gt);
    Ok(fraction(
        e.iter().filter(|&&v| v <= PRECISION_PX).count(),
        e.len(),
    ))
}

/// Fraction of frames whose size-normalized center error is at most 0.2.
pub fn norm_precision(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    check_lengths(pred, gt, "norm_precision")?;
    let e = norm_center_errors(pred, gt);
    Ok(fraction(
        e.iter().filter(|&&v| v <= NORM_PRECISION).count(),
        e.len(),
    ))
}

/// Precision at `0, 1, ..., 50` px; the summary is the value at 20 px.
pub fn precision_curve(pred: &[BBox], gt: &[BBox]) -> Result<EvalCurve> {
    let summary = precision(pred, gt)?;
    let thresholds: Vec<f64> = (0..=50).map(f64::from).collect();
    let values = curve(&center_errors(pred, gt), thresholds.clone(), |v, t| v <= t);
    Ok(EvalCurve {
        thresholds,
        values,
        summary,
    })
}

/// Normalized precision at `0, 0.01, ..., 0.5`; the summary is the value at 0.2.
pub fn norm_precision_curve(pred: &[BBox], gt: &[BBox]) -> Result<EvalCurve> {
    let summary = norm_precision(pred, gt)?;
    let thresholds: Vec<f64> = (0..=50).map(|i| i as f64 / 100.0).collect();
    let values = curve(&norm_center_errors(pred, gt), thresholds.clone(), |v, t| {
        v <= t
    });
    Ok(EvalCurve {
        thresholds,
        values,
        summary,
    })
}

/// The three headline numbers of one track.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub frames: usize,
}

impl EvalReport {
    pub fn compute(pred: &[BBox], gt: &[BBox]) -> Result<Self> {
        Ok(EvalReport {
            auc: success_auc(pred, gt)?.summary,
            precision: precision(pred, gt)?,
            norm_precision: norm_precision(pred, gt)?,
            frames: gt.len(),
        })
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "frames={}\nauc={:.6}\nprecision={:.6}\nnorm_precision={:.6}\n",
            self.frames, self.auc, self.precision, self.norm_precision
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn success_examples() {
        let g = vec![b(0.0, 0.0, 10.0, 10.0); 3];
        let same = success_auc(&g, &g).unwrap();
        assert_eq!(same.summary, 1.0);
        assert_eq!(same.thresholds.len(), 21);

        let far = vec![b(100.0, 100.0, 10.0, 10.0); 3];
        let c = success_auc(&far, &g).unwrap();
        assert_eq!(c.values[0], 1.0);
        assert!(c.values[1..].iter().all(|&v| v == 0.0));
        assert_eq!(c.summary, 1.0 / 21.0);

        let mixed = success_auc(&[g[0], far[0]], &g[..2]).unwrap();
        assert_eq!(mixed.summary, 22.0 / 42.0);
        assert!(success_auc(&g[..1], &g).is_err());
        assert!(success_auc(&[], &[]).is_err());
    }

    #[test]
    fn precision_examples() {
        let g: Vec<BBox> = (0..4)
            .map(|i| b(i as f64 * 5.0, 0.0, 300.0, 40.0))
            .collect();
        assert_eq!(precision(&g, &g).unwrap(), 1.0);
        assert_eq!(norm_precision(&g, &g).unwrap(), 1.0);
        let off: Vec<BBox> = g.iter().map(|x| x.translate(30.0, 0.0)).collect();
        assert_eq!(precision(&off, &g).unwrap(), 0.0);
        assert_eq!(norm_precision(&off, &g).unwrap(), 1.0);
        let edge = [g[0].translate(20.0, 0.0)];
        assert_eq!(precision(&edge, &g[..1]).unwrap(), 1.0);
        assert!(precision(&g[..2], &g).is_err());
    }

    #[test]
    fn curves_are_monotone_and_summaries_agree() {
        let g: Vec<BBox> = (0..10).map(|i| b(i as f64, 0.0, 20.0, 20.0)).collect();
        let p: Vec<BBox> = g
            .iter()
            .enumerate()
            .map(|(i, x)| x.translate(i as f64 * 3.0, 1.0))
            .collect();
        let pc = precision_curve(&p, &g).unwrap();
        assert_eq!(pc.values[20], pc.summary);
        assert!(pc.values.windows(2).all(|w| w[0] <= w[1]));
        let nc = norm_precision_curve(&p, &g).unwrap();
        assert_eq!(nc.values[20], nc.summary);
        let sc = success_auc(&p, &g).unwrap();
        assert!(sc.values.windows(2).all(|w| w[0] >= w[1]));
        let csv = sc.to_csv();
        assert!(csv.starts_with("threshold,value\n0,1\n0.05,"));
        assert_eq!(csv.lines().count(), 22);
        let r = EvalReport::compute(&p, &g).unwrap();
        assert!(r.to_text().contains("frames=10\nauc="));
    }
}
