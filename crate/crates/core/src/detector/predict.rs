//! Mixture aggregation into boxes and class scores, confidence filtering and
//! per-class non-maximum suppression.

use serde::{Deserialize, Serialize};

use super::anchors::{decode_box, AnchorSet};
use super::gmm::{softmax, AnchorGmm, GmmParams};
use crate::bbox::{iou, BoundingBox};
use crate::uncertainty::UncertaintyQuad;

/// Log-ratio offsets are clipped to this magnitude before decoding.
const MAX_LOG_RATIO: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub conf_floor: f64,
    pub nms_iou: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            conf_floor: 0.3,
            nms_iou: 0.45,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    /// Foreground class id in `1..=C`.
    pub class: usize,
    pub confidence: f64,
    pub anchor: usize,
    /// Full class distribution `P` including background at index 0.
    pub class_probs: Vec<f64>,
    pub uncertainty: UncertaintyQuad,
}

/// Weighted sum of component means for a scalar mixture.
pub fn mixture_mean(g: &GmmParams) -> f64 {
    g.weights.iter().zip(&g.means).map(|(p, m)| p * m).sum()
}

/// Box offsets `R_b` for the four coordinates.
pub fn mixture_offsets(g: &AnchorGmm) -> [f64; 4] {
    std::array::from_fn(|b| mixture_mean(&g.loc[b]))
}

/// Class distribution `P_i = Σ_k π^k softmax(μ^k)_i`.
pub fn mixture_class_probs(cls: &GmmParams) -> Vec<f64> {
    let mut p = vec![0.0; cls.dim];
    for k in 0..cls.components() {
        let sm = softmax(cls.mean(k));
        for (acc, v) in p.iter_mut().zip(sm) {
            *acc += cls.weights[k] * v;
        }
    }
    p
}

/// Greedy per-class NMS. Higher confidence wins; equal confidence goes to the
/// lower anchor index.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.anchor.cmp(&b.anchor))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Turns per-anchor offsets and class distributions into surviving detections.
/// `offsets` are in network units, i.e. encoded offsets times `offset_scale`.
pub fn detections_from_scores(
    anchors: &AnchorSet,
    image_size: usize,
    offset_scale: f64,
    offsets: &[[f64; 4]],
    probs: &[Vec<f64>],
    cfg: &InferenceConfig,
) -> Vec<Detection> {
    let mut dets = Vec::new();
    for (a, (off, p)) in offsets.iter().zip(probs).enumerate() {
        let (best, conf) = p
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        if best == 0 || conf < cfg.conf_floor {
            continue;
        }
        let mut o = off.map(|v| v / offset_scale);
        o[2] = o[2].clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO);
        o[3] = o[3].clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO);
        let bbox = decode_box(&anchors.boxes[a], &o).clamped(image_size as f64);
        if !bbox.is_valid() {
            continue;
        }
        dets.push(Detection {
            bbox,
            class: best,
            confidence: conf,
            anchor: a,
            class_probs: p.clone(),
            uncertainty: UncertaintyQuad::default(),
        });
    }
    nms(dets, cfg.nms_iou)
}

/// Inference for mixture heads.
pub fn predict(
    gmms: &[AnchorGmm],
    anchors: &AnchorSet,
    image_size: usize,
    offset_scale: f64,
    cfg: &InferenceConfig,
) -> Vec<Detection> {
    let offsets: Vec<[f64; 4]> = gmms.iter().map(mixture_offsets).collect();
    let probs: Vec<Vec<f64>> = gmms.iter().map(|g| mixture_class_probs(&g.cls)).collect();
    detections_from_scores(anchors, image_size, offset_scale, &offsets, &probs, cfg)
}
