//! Instance-level segmentation scores at IoU > 0.5, all in `[0, 100]`.
//!
//! A predicted and a ground-truth group match when their IoU exceeds 0.5;
//! such a match is necessarily unique on both sides. From the matches:
//!
//! * precision, recall and F1 over TP / FP / FN,
//! * PQ = Σ matched IoU / (TP + FP/2 + FN/2),
//! * mIoU = mean over ground-truth groups of their best IoU with any prediction,
//! * AP = all-point interpolated average precision, predictions ranked by
//!   size (largest first, then smallest member index).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MATCH_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub ap: f64,
    pub pq: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub miou: f64,
}

/// Members of each group, keyed by id.
fn groups<T: Ord + Copy>(ids: &[T]) -> Vec<Vec<usize>> {
    let mut map: BTreeMap<T, Vec<usize>> = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        map.entry(id).or_default().push(i);
    }
    map.into_values().collect()
}

pub fn segmentation_metrics<P: Ord + Copy, G: Ord + Copy>(pred: &[P], gt: &[G]) -> Result<SegmentationMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::shape("predicted ids", gt.len(), pred.len()));
    }
    if gt.is_empty() {
        return Ok(SegmentationMetrics::default());
    }
    let pg = groups(pred);
    let gg = groups(gt);
    let gt_index: Vec<usize> = {
        let mut v = vec![0; gt.len()];
        for (g, members) in gg.iter().enumerate() {
            for &i in members {
                v[i] = g;
            }
        }
        v
    };
    // intersections via one pass over each predicted group's members
    let iou: Vec<Vec<f64>> = pg
        .iter()
        .map(|members| {
            let mut inter = vec![0usize; gg.len()];
            for &i in members {
                inter[gt_index[i]] += 1;
            }
            inter
                .iter()
                .zip(&gg)
                .map(|(&n, g)| n as f64 / (members.len() + g.len() - n) as f64)
                .collect()
        })
        .collect();

    let mut matched_pred = vec![None; pg.len()];
    for (p, row) in iou.iter().enumerate() {
        if let Some((g, &v)) = row.iter().enumerate().find(|(_, &v)| v > MATCH_IOU) {
            matched_pred[p] = Some((g, v));
        }
    }
    let tp = matched_pred.iter().flatten().count() as f64;
    let fp = pg.len() as f64 - tp;
    let fn_ = gg.len() as f64 - tp;
    let iou_sum = matched_pred.iter().flatten().fold(0.0, |s, (_, v)| s + v);
    let miou = (0..gg.len())
        .map(|g| iou.iter().map(|row| row[g]).fold(0.0, f64::max))
        .sum::<f64>()
        / gg.len() as f64;

    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = ratio(2.0 * tp, 2.0 * tp + fp + fn_);
    let pq = ratio(iou_sum, tp + 0.5 * fp + 0.5 * fn_);

    let mut order: Vec<usize> = (0..pg.len()).collect();
    order.sort_by(|&a, &b| pg[b].len().cmp(&pg[a].len()).then(pg[a][0].cmp(&pg[b][0])));
    let mut curve = Vec::with_capacity(order.len());
    let mut hits = 0.0;
    for (rank, &p) in order.iter().enumerate() {
        if matched_pred[p].is_some() {
            hits += 1.0;
        }
        curve.push((hits / gg.len() as f64, hits / (rank + 1) as f64));
    }
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &(r, p) in &curve {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }

    Ok(SegmentationMetrics {
        ap: 100.0 * ap,
        pq: 100.0 * pq,
        f1: 100.0 * f1,
        precision: 100.0 * precision,
        recall: 100.0 * recall,
        miou: 100.0 * miou,
    })
}
