//! Reference implementations shared by the integration tests.
#![allow(dead_code)]

use mdal::bbox::BoundingBox;

/// IoU from corner coordinates, written independently of the library.
pub fn iou_ref(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax0, ax1) = (a.x - a.w / 2.0, a.x + a.w / 2.0);
    let (ay0, ay1) = (a.y - a.h / 2.0, a.y + a.h / 2.0);
    let (bx0, bx1) = (b.x - b.w / 2.0, b.x + b.w / 2.0);
    let (by0, by1) = (b.y - b.h / 2.0, b.y + b.h / 2.0);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One prediction: (image, class, confidence, box).
pub type Pred = (usize, usize, f64, BoundingBox);

/// True-positive count among the `k` most confident predictions, found by
/// replaying the greedy matching from scratch on that prefix alone.
fn tp_in_prefix(ranked: &[&Pred], gt: &[Vec<BoundingBox>], k: usize, thr: f64) -> usize {
    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0;
    for p in &ranked[..k] {
        let mut best = None;
        let mut best_iou = f64::NEG_INFINITY;
        for (j, g) in gt[p.0].iter().enumerate() {
            let v = iou_ref(&p.3, g);
            if v > best_iou {
                best_iou = v;
                best = Some(j);
            }
        }
        if let Some(j) = best {
            if best_iou > thr && !used[p.0][j] {
                used[p.0][j] = true;
                tp += 1;
            }
        }
    }
    tp
}

/// Brute-force all-point interpolated AP for one class: every prefix of the
/// ranking is a point on the PR curve, and each recall step of 1/n_gt is
/// credited with the best precision at that recall or beyond.
pub fn ap_bruteforce(preds: &[Pred], gt: &[Vec<BoundingBox>], thr: f64) -> f64 {
    let n_gt: usize = gt.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut ranked: Vec<&Pred> = preds.iter().collect();
    ranked.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
    let tps: Vec<usize> = (0..=ranked.len()).map(|k| tp_in_prefix(&ranked, gt, k, thr)).collect();
    let precision = |k: usize| tps[k] as f64 / k as f64;
    let mut ap = 0.0;
    for k in 1..=ranked.len() {
        if tps[k] > tps[k - 1] {
            let best = (k..=ranked.len()).map(precision).fold(0.0, f64::max);
            ap += best / n_gt as f64;
        }
    }
    ap
}

/// mAP over classes `1..=num_classes` that have ground truth.
pub fn map_bruteforce(
    preds: &[Pred],
    gt: &[Vec<(usize, BoundingBox)>],
    num_classes: usize,
    thr: f64,
) -> f64 {
    let mut aps = Vec::new();
    for c in 1..=num_classes {
        let gt_c: Vec<Vec<BoundingBox>> = gt
            .iter()
            .map(|g| g.iter().filter(|(k, _)| *k == c).map(|(_, b)| *b).collect())
            .collect();
        if gt_c.iter().all(Vec::is_empty) {
            continue;
        }
        let p_c: Vec<Pred> = preds.iter().filter(|p| p.1 == c).copied().collect();
        aps.push(ap_bruteforce(&p_c, &gt_c, thr));
    }
    aps.iter().sum::<f64>() / aps.len() as f64
}

/// Hand-built evaluation fixture: three images, three classes, a mix of
/// exact hits, loose hits that pass only the 0.5 threshold, duplicates,
/// misses and a false class.
pub fn map_fixture() -> (Vec<Pred>, Vec<Vec<(usize, BoundingBox)>>) {
    let b = BoundingBox::new;
    let gt = vec![
        vec![(1, b(20.0, 20.0, 10.0, 10.0)), (2, b(45.0, 40.0, 14.0, 8.0))],
        vec![(1, b(10.0, 50.0, 12.0, 12.0)), (1, b(40.0, 12.0, 8.0, 16.0))],
        vec![(3, b(30.0, 30.0, 20.0, 20.0)), (2, b(8.0, 8.0, 6.0, 6.0))],
    ];
    let preds = vec![
        (0, 1, 0.95, b(20.0, 20.0, 10.0, 10.0)),
        (0, 1, 0.90, b(20.5, 20.0, 10.0, 10.0)),
        (0, 2, 0.40, b(46.0, 41.0, 14.0, 8.0)),
        (0, 3, 0.35, b(45.0, 40.0, 14.0, 8.0)),
        (1, 1, 0.85, b(11.5, 51.0, 12.0, 12.0)),
        (1, 1, 0.60, b(40.0, 14.5, 8.0, 16.0)),
        (1, 1, 0.30, b(55.0, 55.0, 6.0, 6.0)),
        (2, 3, 0.80, b(31.0, 29.0, 22.0, 19.0)),
        (2, 3, 0.20, b(30.0, 30.0, 20.0, 20.0)),
        (2, 2, 0.70, b(9.5, 8.0, 6.0, 6.0)),
        (2, 2, 0.10, b(50.0, 10.0, 6.0, 6.0)),
    ];
    (preds, gt)
}
