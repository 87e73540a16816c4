//! Triplet mean average precision over clips.

use crate::decoder::HoiPrediction;
use crate::error::{invalid, Result};
use crate::matching::HoiInstance;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `None` for classes without ground truth.
    pub ap: Vec<Option<f64>>,
    pub map_all: f64,
    pub map_static: f64,
    pub map_dynamic: f64,
}

fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let (ax0, ay0, ax1, ay1) = (a[0] - a[2] / 2.0, a[1] - a[3] / 2.0, a[0] + a[2] / 2.0, a[1] + a[3] / 2.0);
    let (bx0, by0, bx1, by1) = (b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union > 0.0 { inter / union } else { 0.0 }
}

/// Object class of a prediction (no-pair slot excluded) and its probability.
pub fn predicted_class(p: &HoiPrediction, n_obj: usize) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, &v) in p.class_prob.iter().take(n_obj).enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best
}

/// Area under the precision envelope for hits sorted by falling score.
pub fn average_precision(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(hits.len());
    let mut rec = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut last = 0.0;
    for (r, p) in rec.iter().zip(&prec) {
        if *r > last {
            ap += (r - last) * p;
            last = *r;
        }
    }
    ap
}

/// A detection for action `a` is scored by `action_prob[a]` alone.
/// Detections are visited by falling score, ties by clip then query index;
/// each claims the best-overlapping unclaimed ground truth of the same
/// object class holding action `a`, if both boxes clear `iou_threshold`.
pub fn evaluate_map(
    preds: &[Vec<HoiPrediction>],
    gts: &[Vec<HoiInstance>],
    n_obj: usize,
    dynamic: &[bool],
    iou_threshold: f64,
) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return invalid(format!("{} prediction lists for {} clips", preds.len(), gts.len()));
    }
    let n_act = dynamic.len();
    let mut ap = vec![None; n_act];
    for (a, slot) in ap.iter_mut().enumerate() {
        let n_gt: usize = gts.iter().flatten().filter(|g| g.actions[a]).count();
        if n_gt == 0 {
            continue;
        }
        let mut dets: Vec<(f64, usize, usize)> = Vec::new();
        for (c, ps) in preds.iter().enumerate() {
            for (q, p) in ps.iter().enumerate() {
                if p.action_prob.len() != n_act {
                    return invalid(format!("prediction has {} actions, expected {n_act}", p.action_prob.len()));
                }
                let score = p.action_prob[a];
                dets.push((score, c, q));
            }
        }
        dets.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut hits = Vec::with_capacity(dets.len());
        for &(_, c, q) in &dets {
            let p = &preds[c][q];
            let cls = predicted_class(p, n_obj).0;
            let mut best: Option<(usize, f64)> = None;
            for (i, g) in gts[c].iter().enumerate() {
                if claimed[c][i] || !g.actions[a] || g.class != cls {
                    continue;
                }
                let o = iou(&g.human, &p.human).min(iou(&g.object, &p.object));
                if o >= iou_threshold && best.is_none_or(|b| o > b.1) {
                    best = Some((i, o));
                }
            }
            if let Some((i, _)) = best {
                claimed[c][i] = true;
            }
            hits.push(best.is_some());
        }
        *slot = Some(average_precision(&hits, n_gt));
    }
    let mean = |keep: &dyn Fn(usize) -> bool| {
        let v: Vec<f64> = ap.iter().enumerate().filter(|(a, _)| keep(*a)).filter_map(|(_, x)| *x).collect();
        if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 }
    };
    Ok(EvalReport {
        map_all: mean(&|_| true),
        map_static: mean(&|a| !dynamic[a]),
        map_dynamic: mean(&|a| dynamic[a]),
        ap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(cx: f64, class: usize, action: usize) -> HoiInstance {
        let mut actions = vec![false; 2];
        actions[action] = true;
        HoiInstance { human: [cx, 0.5, 0.1, 0.2], object: [cx + 0.1, 0.5, 0.1, 0.1], class, actions }
    }

    fn perfect(g: &HoiInstance, score: f64) -> HoiPrediction {
        let mut class_prob = vec![0.0; 3];
        class_prob[g.class] = 1.0;
        HoiPrediction {
            human: g.human,
            object: g.object,
            class_prob,
            action_prob: g.actions.iter().map(|&a| if a { score } else { 0.0 }).collect(),
        }
    }

    #[test]
    fn perfect_empty_and_half() {
        let gts = vec![vec![gt(0.2, 0, 0), gt(0.6, 1, 1)], vec![gt(0.4, 1, 0)]];
        let preds: Vec<Vec<_>> = gts.iter().map(|g| g.iter().map(|x| perfect(x, 1.0)).collect()).collect();
        let r = evaluate_map(&preds, &gts, 2, &[false, true], 0.5).unwrap();
        assert_eq!((r.map_all, r.map_static, r.map_dynamic), (1.0, 1.0, 1.0));
        let r = evaluate_map(&[vec![], vec![]], &gts, 2, &[false, true], 0.5).unwrap();
        assert_eq!(r.map_all, 0.0);

        let two = vec![vec![gt(0.2, 0, 0), gt(0.6, 0, 0)]];
        let mut miss = perfect(&two[0][1], 0.5);
        miss.human[0] = 0.9;
        let r = evaluate_map(&[vec![perfect(&two[0][0], 1.0), miss]], &two, 2, &[false, false], 0.5).unwrap();
        assert_eq!(r.ap, vec![Some(0.5), None]);
        assert_eq!(r.map_all, 0.5);
    }

    #[test]
    fn duplicates_count_once() {
        let gts = vec![vec![gt(0.2, 0, 0)]];
        let p = perfect(&gts[0][0], 0.9);
        let r = evaluate_map(&[vec![p.clone(), p]], &gts, 2, &[false, false], 0.5).unwrap();
        assert_eq!(r.ap[0], Some(1.0));
        let mut low = perfect(&gts[0][0], 0.8);
        low.action_prob[0] = 0.8;
        let hi_fp = HoiPrediction { human: [0.8, 0.8, 0.1, 0.1], ..perfect(&gts[0][0], 0.95) };
        let r = evaluate_map(&[vec![hi_fp, low]], &gts, 2, &[false, false], 0.5).unwrap();
        assert_eq!(r.ap[0], Some(0.5));
    }

    #[test]
    fn wrong_class_is_a_miss() {
        let gts = vec![vec![gt(0.2, 0, 0)]];
        let mut p = perfect(&gts[0][0], 1.0);
        p.class_prob = vec![0.0, 1.0, 0.0];
        assert_eq!(evaluate_map(&[vec![p]], &gts, 2, &[false, false], 0.5).unwrap().ap[0], Some(0.0));
    }

    #[test]
    fn order_invariant_at_equal_scores() {
        let gts = vec![vec![gt(0.2, 0, 0), gt(0.6, 0, 0)], vec![gt(0.4, 0, 0)]];
        let hit = |g: &HoiInstance| perfect(g, 0.7);
        let fp = HoiPrediction { human: [0.9, 0.1, 0.05, 0.05], ..perfect(&gts[0][0], 0.7) };
        let a = vec![vec![hit(&gts[0][0]), fp.clone(), hit(&gts[0][1])], vec![fp.clone(), hit(&gts[1][0])]];
        let b = vec![vec![hit(&gts[0][1]), hit(&gts[0][0]), fp.clone()], vec![hit(&gts[1][0]), fp.clone()]];
        let ra = evaluate_map(&a, &gts, 2, &[false, false], 0.5).unwrap();
        let rb = evaluate_map(&b, &gts, 2, &[false, false], 0.5).unwrap();
        assert_eq!(ra, evaluate_map(&a, &gts, 2, &[false, false], 0.5).unwrap());
        assert!(rb.ap[0].unwrap() >= ra.ap[0].unwrap());
        // reordering detections of one outcome class leaves the score alone
        let c = vec![vec![hit(&gts[0][1]), fp.clone(), hit(&gts[0][0])], vec![fp, hit(&gts[1][0])]];
        assert_eq!(ra, evaluate_map(&c, &gts, 2, &[false, false], 0.5).unwrap());
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(average_precision(&[true, false], 2), 0.5);
        assert_eq!(average_precision(&[false, true], 1), 0.5);
        assert_eq!(average_precision(&[], 3), 0.0);
        assert!((average_precision(&[true, false, true], 2) - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }
}
