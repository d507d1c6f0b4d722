//! Axis-aligned box geometry shared by detection, re-ID, and evaluation.

use serde::{Deserialize, Serialize};

/// Identity label attached to an annotated or detected person box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Identity {
    Labeled(u32),
    Unlabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<Identity>,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoundingBox {
            x1,
            y1,
            x2,
            y2,
            score: None,
            identity: None,
        }
    }

    pub fn with_score(mut self, s: f64) -> Self {
        self.score = Some(s);
        self
    }

    pub fn with_identity(mut self, id: Identity) -> Self {
        self.identity = Some(id);
        self
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        BoundingBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
            score: self.score,
            identity: self.identity,
        }
    }

    pub fn flip_horizontal(&self, image_width: f64) -> Self {
        BoundingBox {
            x1: image_width - self.x2,
            y1: self.y1,
            x2: image_width - self.x1,
            y2: self.y2,
            score: self.score,
            identity: self.identity,
        }
    }

    /// Scale coordinates by 1/stride into a feature grid frame.
    pub fn downscale(&self, stride: f64) -> Self {
        BoundingBox {
            x1: self.x1 / stride,
            y1: self.y1 / stride,
            x2: self.x2 / stride,
            y2: self.y2 / stride,
            score: self.score,
            identity: self.identity,
        }
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy NMS over score-sorted boxes; ties keep input order.
pub fn nms(boxes: &[BoundingBox], threshold: f64) -> Vec<BoundingBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        let sa = boxes[a].score.unwrap_or(0.0);
        let sb = boxes[b].score.unwrap_or(0.0);
        sb.partial_cmp(&sa).unwrap().then(a.cmp(&b))
    });
    let mut kept: Vec<BoundingBox> = Vec::new();
    for &i in &order {
        if kept.iter().all(|k| iou(k, &boxes[i]) <= threshold) {
            kept.push(boxes[i]);
        }
    }
    kept
}

/// Standard box-regression parameterization relative to an anchor.
pub fn encode_deltas(anchor: &BoundingBox, gt: &BoundingBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (gcx - acx) / aw,
        (gcy - acy) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ]
}

pub fn decode_deltas(anchor: &BoundingBox, deltas: &[f64; 4]) -> BoundingBox {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + deltas[0] * aw;
    let cy = acy + deltas[1] * ah;
    let w = aw * deltas[2].exp();
    let h = ah * deltas[3].exp();
    BoundingBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

/// IoU-matcher outcome for one candidate box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Match {
    Positive(usize),
    Negative,
    Ignore,
}

/// Match candidates against ground truth: positive at IoU >= `pos_thr`
/// (to the best-overlapping GT), negative below `neg_thr`, ignored between.
pub fn match_to_ground_truth(
    candidates: &[BoundingBox],
    gts: &[BoundingBox],
    pos_thr: f64,
    neg_thr: f64,
) -> Vec<Match> {
    candidates
        .iter()
        .map(|c| {
            let mut best = (None, 0.0);
            for (gi, g) in gts.iter().enumerate() {
                let v = iou(c, g);
                if v > best.1 {
                    best = (Some(gi), v);
                }
            }
            match best {
                (Some(gi), v) if v >= pos_thr => Match::Positive(gi),
                (_, v) if v < neg_thr => Match::Negative,
                _ => Match::Ignore,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_of_identical_boxes_is_one() {
        let b = BoundingBox::new(1.0, 2.0, 5.0, 8.0);
        assert!((iou(&b, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_of_disjoint_boxes_is_zero() {
        let a = BoundingBox::new(0.0, 0.0, 1.0, 1.0);
        let b = BoundingBox::new(2.0, 2.0, 3.0, 3.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn nms_suppresses_overlaps() {
        let boxes = vec![
            BoundingBox::new(0.0, 0.0, 10.0, 10.0).with_score(0.9),
            BoundingBox::new(1.0, 1.0, 11.0, 11.0).with_score(0.8),
            BoundingBox::new(20.0, 20.0, 30.0, 30.0).with_score(0.7),
        ];
        let kept = nms(&boxes, 0.4);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, Some(0.9));
        assert_eq!(kept[1].score, Some(0.7));
    }

    #[test]
    fn deltas_roundtrip() {
        let a = BoundingBox::new(8.0, 8.0, 24.0, 40.0);
        let g = BoundingBox::new(10.0, 6.0, 22.0, 44.0);
        let d = encode_deltas(&a, &g);
        let r = decode_deltas(&a, &d);
        for (x, y) in [(r.x1, g.x1), (r.y1, g.y1), (r.x2, g.x2), (r.y2, g.y2)] {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn matcher_bands() {
        let gts = vec![BoundingBox::new(0.0, 0.0, 10.0, 10.0)];
        let cands = vec![
            BoundingBox::new(0.0, 0.0, 10.0, 10.0),  // IoU 1
            BoundingBox::new(50.0, 50.0, 60.0, 60.0), // IoU 0
            BoundingBox::new(0.0, 0.0, 10.0, 22.5),  // IoU ~0.44, in the ignore band
        ];
        let m = match_to_ground_truth(&cands, &gts, 0.5, 0.4);
        assert_eq!(m[0], Match::Positive(0));
        assert_eq!(m[1], Match::Negative);
        assert_eq!(m[2], Match::Ignore);
    }

    #[test]
    fn flip_preserves_size() {
        let b = BoundingBox::new(10.0, 5.0, 20.0, 25.0);
        let f = b.flip_horizontal(64.0);
        assert_eq!(f.x1, 44.0);
        assert_eq!(f.x2, 54.0);
        assert_eq!(f.width(), b.width());
    }
}
