use crate::error::{Error, Result};

/// Axis-aligned box: top-left corner plus extents, in pixels unless a caller
/// says otherwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { x, y, w, h };
        if !b.is_valid() {
            return Err(Error::invalid(
                "bbox",
                format!("degenerate box {x},{y},{w},{h}"),
            ));
        }
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h]
            .iter()
            .all(|v| v.is_finite())
            && self.w > 0.0
            && self.h > 0.0
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn intersection(&self, o: &BBox) -> f64 {
        let iw = (self.right().min(o.right()) - self.x.max(o.x)).max(0.0);
        let ih = (self.bottom().min(o.bottom()) - self.y.max(o.y)).max(0.0);
        iw * ih
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// IoU minus the fraction of the enclosing box not covered by the union.
    pub fn giou(&self, o: &BBox) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        let ew = self.right().max(o.right()) - self.x.min(o.x);
        let eh = self.bottom().max(o.bottom()) - self.y.min(o.y);
        let enclosure = ew * eh;
        inter / union - (enclosure - union) / enclosure
    }

    /// Keeps the center inside the frame and the extents within `[1, frame]`.
    pub fn clamp_to(&self, frame_w: usize, frame_h: usize) -> BBox {
        let (fw, fh) = (frame_w as f64, frame_h as f64);
        let w = self.w.clamp(1.0, fw);
        let h = self.h.clamp(1.0, fh);
        let (cx, cy) = self.center();
        let cx = cx.clamp(0.0, fw);
        let cy = cy.clamp(0.0, fh);
        BBox {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn hand_computed_giou() {
        let g = b(0.0, 0.0, 1.0, 1.0).giou(&b(2.0, 0.0, 1.0, 1.0));
        assert!((g + 1.0 / 3.0).abs() < 1e-12);
        let outer = b(0.0, 0.0, 2.0, 2.0);
        let inner = b(0.0, 0.0, 2.0, 1.0);
        assert!((outer.giou(&inner) - 0.5).abs() < 1e-12);
        assert!((outer.iou(&inner) - 0.5).abs() < 1e-12);
        assert_eq!(outer.giou(&outer), 1.0);
    }

    #[test]
    fn degenerate_rejected() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn clamp_keeps_center_in_frame() {
        let c = b(-50.0, 90.0, 20.0, 300.0).clamp_to(100, 100);
        let (cx, cy) = c.center();
        assert!((0.0..=100.0).contains(&cx) && (0.0..=100.0).contains(&cy));
        assert_eq!(c.h, 100.0);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.5..40.0f64, 0.5..40.0f64)
            .prop_map(|(x, y, w, h)| b(x, y, w, h))
    }

    proptest! {
        #[test]
        fn giou_symmetric_translation_invariant_and_bounded(a in arb_box(), c in arb_box(), dx in -20.0..20.0f64, dy in -20.0..20.0f64) {
            let g = a.giou(&c);
            prop_assert!((g - c.giou(&a)).abs() < 1e-12);
            prop_assert!((g - a.translate(dx, dy).giou(&c.translate(dx, dy))).abs() < 1e-9);
            prop_assert!(g > -1.0 && g <= 1.0);
            prop_assert!(g <= a.iou(&c) + 1e-12);
        }

        #[test]
        fn giou_equals_iou_for_nested_boxes(a in arb_box(), fx in 0.0..1.0f64, fy in 0.0..1.0f64, fw in 0.1..1.0f64, fh in 0.1..1.0f64) {
            let w = a.w * fw;
            let h = a.h * fh;
            let inner = b(a.x + (a.w - w) * fx, a.y + (a.h - h) * fy, w, h);
            prop_assert!((a.giou(&inner) - a.iou(&inner)).abs() < 1e-9);
        }
    }
}
