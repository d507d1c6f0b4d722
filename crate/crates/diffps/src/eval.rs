//! Detection and person-search metrics.
//!
//! Detection AP uses greedy score-ordered matching at a fixed IoU threshold
//! and the continuous precision envelope. AP over small objects keeps the
//! bottom quartile of ground-truth areas (ties included) and *ignores* the
//! rest: detections overlapping an excluded box count neither as hits nor
//! as false positives, so a perfect detector still scores 1.0. Search mAP
//! ranks gallery detections by cosine similarity per query and averages
//! precision at each correct hit.

use ndarray::Array1;

use crate::boxes::{iou, BoundingBox, Identity};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DetectionMetrics {
    pub ap: f64,
    pub recall: f64,
}

/// Greedy matching: detections in descending score order claim the
/// highest-IoU unmatched ground truth at or above `iou_thr`.
fn match_greedy(
    dets: &[BoundingBox],
    gts: &[BoundingBox],
    iou_thr: f64,
    ignore: &[bool],
) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let sa = dets[a].score.unwrap_or(0.0);
        let sb = dets[b].score.unwrap_or(0.0);
        sb.partial_cmp(&sa).unwrap().then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut assignment = vec![None; dets.len()];
    for &di in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] && !ignore[gi] {
                continue;
            }
            let v = iou(&dets[di], g);
            if v >= iou_thr && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            assignment[di] = Some(gi);
            if !ignore[gi] {
                taken[gi] = true;
            }
        }
    }
    assignment
}

/// AP (continuous precision envelope) and recall over a set of images.
/// `ignore` marks per-image ground truths that neither count as positives
/// nor penalize detections matched to them.
pub fn detection_ap_recall_ignoring(
    dets_per_image: &[Vec<BoundingBox>],
    gts_per_image: &[Vec<BoundingBox>],
    ignore_per_image: &[Vec<bool>],
    iou_thr: f64,
) -> Result<DetectionMetrics> {
    if dets_per_image.len() != gts_per_image.len()
        || dets_per_image.len() != ignore_per_image.len()
    {
        return Err(Error::Argument(
            "detections, ground truths, and ignore flags must cover the same images".into(),
        ));
    }
    if !(0.0..=1.0).contains(&iou_thr) {
        return Err(Error::Argument(format!("iou threshold {iou_thr} outside [0,1]")));
    }
    let mut total_gt = 0usize;
    // (score, image insertion rank, is_tp, is_ignored)
    let mut records: Vec<(f64, usize, bool, bool)> = Vec::new();
    let mut rank = 0usize;
    for ((dets, gts), ignore) in dets_per_image
        .iter()
        .zip(gts_per_image)
        .zip(ignore_per_image)
    {
        if gts.len() != ignore.len() {
            return Err(Error::Argument("ignore flags must match ground truths".into()));
        }
        total_gt += ignore.iter().filter(|&&i| !i).count();
        let assignment = match_greedy(dets, gts, iou_thr, ignore);
        for (di, d) in dets.iter().enumerate() {
            let (tp, ign) = match assignment[di] {
                Some(gi) if ignore[gi] => (false, true),
                Some(_) => (true, false),
                None => (false, false),
            };
            records.push((d.score.unwrap_or(0.0), rank, tp, ign));
            rank += 1;
        }
    }
    records.retain(|r| !r.3);
    records.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    if total_gt == 0 {
        return Ok(DetectionMetrics { ap: 0.0, recall: 0.0 });
    }
    let mut tp_cum = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
    for (i, r) in records.iter().enumerate() {
        if r.2 {
            tp_cum += 1;
        }
        curve.push((
            tp_cum as f64 / total_gt as f64,
            tp_cum as f64 / (i + 1) as f64,
        ));
    }
    // precision envelope from the right
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for &(r, p) in &curve {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    Ok(DetectionMetrics {
        ap,
        recall: tp_cum as f64 / total_gt as f64,
    })
}

pub fn detection_ap_recall(
    dets_per_image: &[Vec<BoundingBox>],
    gts_per_image: &[Vec<BoundingBox>],
    iou_thr: f64,
) -> Result<DetectionMetrics> {
    let ignore: Vec<Vec<bool>> = gts_per_image.iter().map(|g| vec![false; g.len()]).collect();
    detection_ap_recall_ignoring(dets_per_image, gts_per_image, &ignore, iou_thr)
}

/// The area at or below which a ground truth counts as "small": the lower
/// quartile of all ground-truth areas, with ties included.
pub fn small_area_cutoff(gts_per_image: &[Vec<BoundingBox>]) -> Option<f64> {
    let mut areas: Vec<f64> = gts_per_image
        .iter()
        .flatten()
        .map(|g| g.area())
        .collect();
    if areas.is_empty() {
        return None;
    }
    areas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = (areas.len().div_ceil(4)).saturating_sub(1);
    Some(areas[idx])
}

/// AP restricted to small ground truths; larger boxes are ignored rather
/// than treated as background.
pub fn detection_ap_small(
    dets_per_image: &[Vec<BoundingBox>],
    gts_per_image: &[Vec<BoundingBox>],
    iou_thr: f64,
) -> Result<DetectionMetrics> {
    let total: usize = gts_per_image.iter().map(|g| g.len()).sum();
    if total < 4 {
        return Err(Error::Protocol(format!(
            "area quartile undefined with {total} ground-truth boxes (need >= 4)"
        )));
    }
    let cutoff = small_area_cutoff(gts_per_image).unwrap_or(0.0);
    let ignore: Vec<Vec<bool>> = gts_per_image
        .iter()
        .map(|g| g.iter().map(|b| b.area() > cutoff).collect())
        .collect();
    detection_ap_recall_ignoring(dets_per_image, gts_per_image, &ignore, iou_thr)
}

// ---- person search ----

/// One gallery detection with its re-ID embedding.
#[derive(Debug, Clone)]
pub struct GalleryItem {
    pub image: usize,
    pub bbox: BoundingBox,
    pub embedding: Array1<f64>,
}

/// One probe person: the identity to find, its embedding, and the image it
/// came from (excluded from its own gallery).
#[derive(Debug, Clone)]
pub struct Query {
    pub identity: u32,
    pub image: usize,
    pub embedding: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SearchMetrics {
    pub map: f64,
    pub top1: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(b) / (na * nb)
    }
}

/// Search mAP and top-1 over a query set. Ground truths carry identities;
/// a ranked detection is correct when it overlaps (IoU >= `iou_thr`) an
/// unclaimed ground-truth box of the query identity in its image. Queries
/// whose identity appears in no gallery image are skipped with a warning.
pub fn search_map_top1(
    queries: &[Query],
    gallery: &[GalleryItem],
    gts: &[(usize, BoundingBox)],
    iou_thr: f64,
) -> Result<SearchMetrics> {
    if !(0.0..=1.0).contains(&iou_thr) {
        return Err(Error::Argument(format!("iou threshold {iou_thr} outside [0,1]")));
    }
    for (_, g) in gts {
        if g.identity.is_none() {
            return Err(Error::Argument("search ground truths must carry identities".into()));
        }
    }
    let mut sum_ap = 0.0;
    let mut sum_top1 = 0.0;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for q in queries {
        let relevant: Vec<&(usize, BoundingBox)> = gts
            .iter()
            .filter(|(img, g)| {
                *img != q.image && g.identity == Some(Identity::Labeled(q.identity))
            })
            .collect();
        if relevant.is_empty() {
            eprintln!(
                "warning: query identity {} from image {} has no gallery occurrence, skipping",
                q.identity, q.image
            );
            skipped += 1;
            continue;
        }
        let mut ranked: Vec<(usize, f64)> = gallery
            .iter()
            .enumerate()
            .filter(|(_, d)| d.image != q.image)
            .map(|(i, d)| (i, cosine(&q.embedding, &d.embedding)))
            .collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

        let mut claimed = vec![false; relevant.len()];
        let mut hits = 0usize;
        let mut ap = 0.0;
        let mut top1 = 0.0;
        for (rank, (di, _)) in ranked.iter().enumerate() {
            let d = &gallery[*di];
            let mut best: Option<(usize, f64)> = None;
            for (ri, (img, g)) in relevant.iter().enumerate() {
                if claimed[ri] || *img != d.image {
                    continue;
                }
                let v = iou(&d.bbox, g);
                if v >= iou_thr && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((ri, v));
                }
            }
            if let Some((ri, _)) = best {
                claimed[ri] = true;
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
                if rank == 0 {
                    top1 = 1.0;
                }
            }
        }
        sum_ap += ap / relevant.len() as f64;
        sum_top1 += top1;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::Protocol("no query could be evaluated".into()));
    }
    Ok(SearchMetrics {
        map: sum_ap / evaluated as f64,
        top1: sum_top1 / evaluated as f64,
        evaluated,
        skipped,
    })
}
