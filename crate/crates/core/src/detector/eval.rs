//! VOC-style mean average precision with all-point interpolation.

use mdal_autodiff::ParamStore;

use super::gmm::postprocess_gmm;
use super::predict::{detections_from_scores, predict, Detection, InferenceConfig};
use super::{Detector, HeadVariant};
use crate::bbox::{iou, BoundingBox};
use crate::error::{MdalError, Result};
use crate::scenes::Scene;
use crate::uncertainty::{detection_uncertainties, ClassReduction};

/// The two reporting thresholds: the standard and the strict metric.
pub const MAP_THRESHOLDS: [f64; 2] = [0.5, 0.75];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapScores {
    pub map50: f64,
    pub map75: f64,
}

/// A scored prediction for evaluation: image index, class, confidence, box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub class: usize,
    pub confidence: f64,
    pub bbox: BoundingBox,
}

impl From<(usize, &Detection)> for ScoredBox {
    fn from((image, d): (usize, &Detection)) -> Self {
        Self {
            image,
            class: d.class,
            confidence: d.confidence,
            bbox: d.bbox,
        }
    }
}

/// Area under the interpolated precision/recall curve for one class.
///
/// A prediction is a true positive when its best-overlapping, not yet claimed
/// GT box of the same image has IoU strictly above `threshold`.
pub fn average_precision(preds: &[ScoredBox], gt: &[Vec<BoundingBox>], threshold: f64) -> f64 {
    let n_gt: usize = gt.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<&ScoredBox> = preds.iter().collect();
    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut claimed: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    for (rank, p) in order.iter().enumerate() {
        let boxes = &gt[p.image];
        let best = boxes
            .iter()
            .enumerate()
            .map(|(j, g)| (j, iou(&p.bbox, g)))
            .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            });
        if let Some((j, v)) = best {
            if v > threshold && !claimed[p.image][j] {
                claimed[p.image][j] = true;
                tp += 1;
            }
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // Monotone precision envelope, then integrate over recall steps.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

/// mAP over the classes that have at least one GT box, one value per threshold.
pub fn evaluate_detections(
    preds: &[Vec<Detection>],
    gts: &[Vec<(usize, BoundingBox)>],
    num_classes: usize,
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    if gts.is_empty() {
        return Err(MdalError::EmptyTestSet);
    }
    let mut per_threshold = vec![Vec::new(); thresholds.len()];
    for class in 1..=num_classes {
        let gt_c: Vec<Vec<BoundingBox>> = gts
            .iter()
            .map(|g| g.iter().filter(|(c, _)| *c == class).map(|(_, b)| *b).collect())
            .collect();
        if gt_c.iter().all(Vec::is_empty) {
            continue;
        }
        let preds_c: Vec<ScoredBox> = preds
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| ds.iter().filter(|d| d.class == class).map(move |d| (i, d).into()))
            .collect();
        for (t, &thr) in thresholds.iter().enumerate() {
            per_threshold[t].push(average_precision(&preds_c, &gt_c, thr));
        }
    }
    if per_threshold.first().map_or(true, Vec::is_empty) {
        return Err(MdalError::NoGroundTruth);
    }
    Ok(per_threshold
        .iter()
        .map(|aps| aps.iter().sum::<f64>() / aps.len() as f64)
        .collect())
}

/// Runs inference on one scene: surviving detections with uncertainties
/// filled in for mixture heads.
pub fn detect(
    detector: &Detector,
    params: &ParamStore,
    image: &[f64],
    cfg: &InferenceConfig,
    reduction: ClassReduction,
) -> Result<Vec<Detection>> {
    let raw = detector.forward(params, image)?;
    detect_from_raw(detector, &raw, cfg, reduction)
}

pub fn detect_from_raw(
    detector: &Detector,
    raw: &super::RawHeadOutput,
    cfg: &InferenceConfig,
    reduction: ClassReduction,
) -> Result<Vec<Detection>> {
    let config = detector.config();
    let size = config.image_size;
    match config.head {
        HeadVariant::Deterministic => {
            let a = detector.num_anchors();
            let offsets: Vec<[f64; 4]> = raw
                .loc
                .data()
                .chunks(4)
                .map(|c| [c[0], c[1], c[2], c[3]])
                .collect();
            let probs: Vec<Vec<f64>> = raw
                .cls
                .data()
                .chunks(config.class_outputs())
                .map(super::gmm::softmax)
                .collect();
            debug_assert_eq!(offsets.len(), a);
            Ok(detections_from_scores(
                detector.anchors(),
                size,
                config.offset_scale,
                &offsets,
                &probs,
                cfg,
            ))
        }
        head => {
            let gmms = postprocess_gmm(raw, config)?;
            let mut dets = predict(&gmms, detector.anchors(), size, config.offset_scale, cfg);
            detection_uncertainties(&gmms, &mut dets, head, reduction);
            Ok(dets)
        }
    }
}

/// mAP at IoU > 0.5 and IoU > 0.75 against the clean object extents.
pub fn evaluate_map(
    detector: &Detector,
    params: &ParamStore,
    scenes: &[&Scene],
    cfg: &InferenceConfig,
) -> Result<MapScores> {
    if scenes.is_empty() {
        return Err(MdalError::EmptyTestSet);
    }
    let preds = scenes
        .iter()
        .map(|s| detect(detector, params, &s.image, cfg, ClassReduction::PredictedClass))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<(usize, BoundingBox)>> = scenes.iter().map(|s| s.true_boxes()).collect();
    let m = evaluate_detections(&preds, &gts, detector.config().num_classes, &MAP_THRESHOLDS)?;
    Ok(MapScores {
        map50: m[0],
        map75: m[1],
    })
}
