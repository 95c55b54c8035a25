//! Average precision of detections against ground truth.

use std::collections::HashMap;

use super::io::Detection;
use crate::error::Result;
use crate::geometry::{iou3d, Box3D};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassEval {
    pub class_id: usize,
    pub n_gt: usize,
    pub n_pred: usize,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub iou_thresh: f64,
    pub classes: Vec<ClassEval>,
    /// Mean AP over classes with ground truth.
    pub map: f64,
    pub recall: f64,
}

/// All-point interpolated AP from a ranked true/false-positive list.
pub fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut rec = Vec::with_capacity(tp.len());
    let mut prec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        rec.push(hits as f64 / n_gt as f64);
        prec.push(hits as f64 / (k + 1) as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut last = 0.0;
    for (r, p) in rec.iter().zip(&prec) {
        ap += (r - last) * p;
        last = *r;
    }
    ap
}

/// Greedy matching per class: detections in descending score take the
/// best-overlapping ground truth of their scene; a match needs IoU at least
/// `iou_thresh` and an unclaimed box.
pub fn eval_map(
    preds: &[Detection],
    gts: &[(String, Vec<(Box3D, usize)>)],
    n_class: usize,
    iou_thresh: f64,
) -> Result<EvalResult> {
    let mut classes = Vec::with_capacity(n_class);
    let (mut tp_all, mut gt_all) = (0usize, 0usize);
    for c in 0..n_class {
        let mut gt_by_scene: HashMap<&str, Vec<Box3D>> = HashMap::new();
        for (sid, boxes) in gts {
            let v: Vec<Box3D> = boxes.iter().filter(|b| b.1 == c).map(|b| b.0).collect();
            gt_by_scene.entry(sid.as_str()).or_default().extend(v);
        }
        let n_gt: usize = gt_by_scene.values().map(Vec::len).sum();
        let mut mine: Vec<&Detection> = preds.iter().filter(|d| d.class == c).collect();
        mine.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut claimed: HashMap<&str, Vec<bool>> =
            gt_by_scene.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
        let mut tp = Vec::with_capacity(mine.len());
        for d in &mine {
            let b = d.bbox()?;
            let hit = gt_by_scene.get(d.scene_id.as_str()).and_then(|cands| {
                let (best, iou) = cands.iter().enumerate().map(|(i, g)| (i, iou3d(&b, g))).fold(
                    None,
                    |acc: Option<(usize, f64)>, x| match acc {
                        Some(a) if a.1 >= x.1 => Some(a),
                        _ => Some(x),
                    },
                )?;
                let used = &mut claimed.get_mut(d.scene_id.as_str())?[best];
                if iou >= iou_thresh && !*used {
                    *used = true;
                    Some(())
                } else {
                    None
                }
            });
            tp.push(hit.is_some());
        }
        let hits = tp.iter().filter(|&&t| t).count();
        tp_all += hits;
        gt_all += n_gt;
        classes.push(ClassEval {
            class_id: c,
            n_gt,
            n_pred: mine.len(),
            ap: (n_gt > 0).then(|| average_precision(&tp, n_gt)),
            recall: (n_gt > 0).then(|| hits as f64 / n_gt as f64),
        });
    }
    let aps: Vec<f64> = classes.iter().filter_map(|c| c.ap).collect();
    let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    let recall = if gt_all == 0 { 0.0 } else { tp_all as f64 / gt_all as f64 };
    Ok(EvalResult { iou_thresh, classes, map, recall })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> Box3D {
        Box3D::new([x, 0.0, 0.5], [1.0, 1.0, 1.0], 0.0).unwrap()
    }

    #[test]
    fn ap_of_ranked_lists() {
        assert_eq!(average_precision(&[true, true], 2), 1.0);
        assert_eq!(average_precision(&[false, true], 1), 0.5);
        // precisions 1, 1/2, 2/3 at recalls 1/2, 1/2, 1: envelope gives 1·½ + ⅔·½
        assert!((average_precision(&[true, false, true], 2) - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
        assert_eq!(average_precision(&[], 3), 0.0);
    }

    #[test]
    fn duplicates_count_as_false_positives() {
        let gts = vec![("s".to_string(), vec![(b(0.0), 0), (b(5.0), 1)])];
        let preds = vec![
            Detection::new("s", 0, 0.9, &b(0.0)),
            Detection::new("s", 0, 0.8, &b(0.05)),
            Detection::new("s", 1, 0.7, &b(9.0)),
        ];
        let r = eval_map(&preds, &gts, 3, 0.25).unwrap();
        assert_eq!(r.classes[0].ap, Some(1.0));
        assert_eq!(r.classes[1].ap, Some(0.0));
        assert_eq!(r.classes[2].ap, None);
        assert_eq!(r.map, 0.5);
        assert_eq!(r.recall, 0.5);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gts = vec![("a".to_string(), vec![(b(0.0), 0)]), ("b".to_string(), vec![(b(2.0), 0)])];
        let preds: Vec<Detection> =
            gts.iter().flat_map(|(s, g)| g.iter().map(move |(x, c)| Detection::new(s, *c, 1.0, x))).collect();
        assert_eq!(eval_map(&preds, &gts, 1, 0.5).unwrap().map, 1.0);
    }
}
