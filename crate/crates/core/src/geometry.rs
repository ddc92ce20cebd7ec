//! Box algebra: IoU, per-class NMS and the relative box encoding that ties a
//! target box to the human box it is predicted from.

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// Axis-aligned rectangle in image coordinates, stored as corners.
///
/// Construction enforces strictly positive width and height, so every
/// `BBox` in circulation is non-degenerate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x2 <= x1 || y2 <= y1 {
            return Err(GeometryError::Degenerate([x1, y1, x2, y2]));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Box from its center and size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Intersect with `[0, width] x [0, height]`. `None` when nothing remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        BBox::new(
            self.x1.max(0.0),
            self.y1.max(0.0),
            self.x2.min(width),
            self.y2.min(height),
        )
        .ok()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn contained_in(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Target box expressed relative to a reference (human) box: normalized center
/// offsets and log size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct RelOffset {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl RelOffset {
    pub const ZERO: RelOffset = RelOffset {
        tx: 0.0,
        ty: 0.0,
        tw: 0.0,
        th: 0.0,
    };

    pub fn new(tx: f64, ty: f64, tw: f64, th: f64) -> Self {
        Self { tx, ty, tw, th }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn sq_dist(&self, other: &RelOffset) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl From<[f64; 4]> for RelOffset {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<RelOffset> for [f64; 4] {
    fn from(r: RelOffset) -> Self {
        r.to_array()
    }
}

/// A scored box of a given category. `source` remembers the proposal the box
/// was regressed from, so feature lookups keyed by proposal still work after
/// box refinement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<usize>,
}

impl Detection {
    pub fn new(bbox: BBox, category: usize, score: f64) -> Self {
        Self {
            bbox,
            category,
            score,
            source: None,
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy non-maximum suppression, independently per category.
///
/// Survivors come back sorted by descending score. Equal scores keep input
/// order, which makes the result a pure function of the multiset of inputs
/// up to that tie rule.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score));

    let mut keep: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = keep.iter().any(|&k| {
            dets[k].category == dets[i].category && iou(&dets[k].bbox, &dets[i].bbox) > iou_thresh
        });
        if !suppressed {
            keep.push(i);
        }
    }
    keep.into_iter().map(|i| dets[i]).collect()
}

/// Encode `target` relative to `reference` using box centers.
pub fn encode_rel(target: &BBox, reference: &BBox) -> RelOffset {
    let (cx_o, cy_o) = target.center();
    let (cx_h, cy_h) = reference.center();
    let (w_h, h_h) = (reference.width(), reference.height());
    RelOffset {
        tx: (cx_o - cx_h) / w_h,
        ty: (cy_o - cy_h) / h_h,
        tw: (target.width() / w_h).ln(),
        th: (target.height() / h_h).ln(),
    }
}

/// Inverse of [`encode_rel`].
pub fn decode_rel(t: &RelOffset, reference: &BBox) -> Result<BBox, GeometryError> {
    let (cx_h, cy_h) = reference.center();
    let (w_h, h_h) = (reference.width(), reference.height());
    BBox::from_center(
        cx_h + t.tx * w_h,
        cy_h + t.ty * h_h,
        w_h * t.tw.exp(),
        h_h * t.th.exp(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(bx: BBox, score: f64) -> Detection {
        Detection::new(bx, 0, score)
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BBox::new(0.0, 0.0, 0.0, 10.0).is_err());
        assert!(BBox::new(0.0, 5.0, 10.0, 4.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(serde_json::from_str::<BBox>("[3, 3, 1, 5]").is_err());
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
        // intersection 50, union 150
        assert!((iou(&a, &b(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn nms_full_overlap_keeps_best() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        let out = nms(&[det(a, 0.8), det(a, 0.9)], 0.3);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
    }

    #[test]
    fn nms_disjoint_keeps_all() {
        let out = nms(
            &[det(b(0.0, 0.0, 1.0, 1.0), 0.1), det(b(5.0, 5.0, 6.0, 6.0), 0.7)],
            0.3,
        );
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].score, 0.7);
    }

    #[test]
    fn nms_three_box_trace() {
        // IoU(A,B) = 0.5, IoU(A,C) = 0.1, IoU(B,C) = 0.1 by construction below.
        let a = b(0.0, 0.0, 30.0, 10.0);
        let bb = b(10.0, 0.0, 40.0, 10.0);
        // C is centered on the A/B overlap, straddling their bottom edge:
        // inter 5w, union 300 + 5w, so w = 20/3 gives exactly 0.1 with both.
        let c = b(20.0 - 10.0 / 3.0, 5.0, 20.0 + 10.0 / 3.0, 15.0);
        assert!((iou(&a, &c) - 0.1).abs() < 1e-12);
        assert!((iou(&bb, &c) - 0.1).abs() < 1e-12);
        assert!((iou(&a, &bb) - 0.5).abs() < 1e-12);
        let out = nms(&[det(a, 0.9), det(bb, 0.8), det(c, 0.7)], 0.3);
        let scores: Vec<f64> = out.iter().map(|d| d.score).collect();
        assert_eq!(scores, vec![0.9, 0.7]);
    }

    #[test]
    fn nms_is_per_category() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        let mut d2 = det(a, 0.5);
        d2.category = 3;
        assert_eq!(nms(&[det(a, 0.9), d2], 0.3).len(), 2);
    }

    #[test]
    fn nms_empty() {
        assert!(nms(&[], 0.3).is_empty());
    }

    #[test]
    fn encode_examples() {
        let h = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(encode_rel(&h, &h), RelOffset::ZERO);

        let t = encode_rel(&b(5.0, 5.0, 25.0, 25.0), &h);
        let ln2 = 2f64.ln();
        for (got, want) in t.to_array().iter().zip([1.0, 1.0, ln2, ln2]) {
            assert!((got - want).abs() < 1e-12);
        }

        let t = encode_rel(&b(-10.0, 0.0, 0.0, 10.0), &h);
        assert_eq!(t.to_array(), [-1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn decode_examples() {
        let h = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(decode_rel(&RelOffset::ZERO, &h).unwrap(), h);
        let ln2 = 2f64.ln();
        let out = decode_rel(&RelOffset::new(1.0, 1.0, ln2, ln2), &h).unwrap();
        for (got, want) in out.to_array().iter().zip([5.0, 5.0, 25.0, 25.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-500.0..500.0f64, -500.0..500.0f64, 0.5..300.0f64, 0.5..300.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert_eq!(v, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn encode_decode_round_trip(o in arb_box(), h in arb_box()) {
            let back = decode_rel(&encode_rel(&o, &h), &h).unwrap();
            let scale = o.to_array().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (g, w) in back.to_array().iter().zip(o.to_array()) {
                prop_assert!((g - w).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn nms_subset_and_order_invariant(
            boxes in proptest::collection::vec((arb_box(), 0.0..1.0f64, 0usize..2), 0..12),
            seed in any::<u64>(),
        ) {
            let dets: Vec<Detection> = boxes
                .iter()
                .map(|&(bx, s, c)| Detection::new(bx, c, s))
                .collect();
            let out = nms(&dets, 0.3);
            for d in &out {
                prop_assert!(dets.contains(d));
            }
            for w in out.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
            for (i, x) in out.iter().enumerate() {
                for y in &out[i + 1..] {
                    if x.category == y.category {
                        prop_assert!(iou(&x.bbox, &y.bbox) <= 0.3);
                    }
                }
            }
            // Every suppressed box overlaps a survivor of at least its score.
            for d in &dets {
                if !out.contains(d) {
                    prop_assert!(out.iter().any(|k| k.category == d.category
                        && k.score >= d.score
                        && iou(&k.bbox, &d.bbox) > 0.3));
                }
            }
            let mut shuffled = dets.clone();
            let n = shuffled.len();
            if n > 1 {
                shuffled.rotate_left((seed as usize) % n);
            }
            let mut a: Vec<[f64; 4]> = out.iter().map(|d| d.bbox.to_array()).collect();
            let mut bb: Vec<[f64; 4]> = nms(&shuffled, 0.3).iter().map(|d| d.bbox.to_array()).collect();
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            bb.sort_by(|x, y| x.partial_cmp(y).unwrap());
            prop_assert_eq!(a, bb);
        }
    }
}
