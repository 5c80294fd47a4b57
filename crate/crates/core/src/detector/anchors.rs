//! Anchor grid, IoU matching and offset coding.

use crate::bbox::{iou, BoundingBox};
use crate::error::{MdalError, Result};

/// Strict IoU threshold above which an anchor is matched to a GT box.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    /// Feature map side F.
    pub feature_size: usize,
    /// Anchors per cell D.
    pub per_cell: usize,
    /// `F·F·D` anchors, ordered by cell (row-major) then by anchor within the cell.
    pub boxes: Vec<BoundingBox>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// The same anchors clipped to the image.
    pub fn clamped(&self, image_size: usize) -> AnchorSet {
        AnchorSet {
            boxes: self
                .boxes
                .iter()
                .map(|b| b.clamped(image_size as f64))
                .collect(),
            ..self.clone()
        }
    }
}

/// Anchors centred on a uniform `F×F` grid; one anchor per (scale, ratio)
/// pair with `w = s·√r`, `h = s/√r`.
pub fn build_anchor_grid(
    image_size: usize,
    feature_size: usize,
    scales: &[f64],
    ratios: &[f64],
) -> Result<AnchorSet> {
    if feature_size == 0 || scales.is_empty() || ratios.is_empty() {
        return Err(MdalError::Config(
            "anchor grid needs F > 0 and at least one scale and ratio".into(),
        ));
    }
    let stride = image_size as f64 / feature_size as f64;
    let mut shapes = Vec::with_capacity(scales.len() * ratios.len());
    for &s in scales {
        for &r in ratios {
            let (w, h) = (s * r.sqrt(), s / r.sqrt());
            if !(w > 0.0 && h > 0.0) {
                return Err(MdalError::Config(format!("degenerate anchor {w}x{h}")));
            }
            if w > image_size as f64 || h > image_size as f64 {
                return Err(MdalError::AnchorTooLarge {
                    w,
                    h,
                    size: image_size,
                });
            }
            shapes.push((w, h));
        }
    }
    let mut boxes = Vec::with_capacity(feature_size * feature_size * shapes.len());
    for row in 0..feature_size {
        for col in 0..feature_size {
            let cx = (col as f64 + 0.5) * stride;
            let cy = (row as f64 + 0.5) * stride;
            for &(w, h) in &shapes {
                boxes.push(BoundingBox::new(cx, cy, w, h));
            }
        }
    }
    Ok(AnchorSet {
        feature_size,
        per_cell: shapes.len(),
        boxes,
    })
}

/// Anchor-to-GT assignment with encoded regression targets.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchTable {
    /// Matched GT index per anchor.
    pub assignment: Vec<Option<usize>>,
    /// Indices of positive anchors, ascending.
    pub positives: Vec<usize>,
    /// Encoded offsets `(x, y, w, h)` per positive anchor.
    pub offsets: Vec<[f64; 4]>,
    /// GT class in `1..=C` per positive anchor.
    pub classes: Vec<usize>,
}

impl MatchTable {
    /// Number of positive matches N.
    pub fn num_positives(&self) -> usize {
        self.positives.len()
    }

    /// Target class per anchor: the GT class for positives, background otherwise.
    pub fn anchor_targets(&self) -> Vec<usize> {
        let mut t = vec![0; self.assignment.len()];
        for (&a, &c) in self.positives.iter().zip(&self.classes) {
            t[a] = c;
        }
        t
    }

    pub fn negatives(&self) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.is_none().then_some(i))
            .collect()
    }
}

/// Matches each anchor to the GT box with the highest IoU, provided that IoU
/// exceeds [`MATCH_IOU`]. Ties go to the lower GT index.
pub fn match_anchors(anchors: &AnchorSet, gt: &[(usize, BoundingBox)]) -> Result<MatchTable> {
    let mut table = MatchTable {
        assignment: vec![None; anchors.len()],
        positives: Vec::new(),
        offsets: Vec::new(),
        classes: Vec::new(),
    };
    for (i, anchor) in anchors.boxes.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, (_, g)) in gt.iter().enumerate() {
            let v = iou(anchor, g);
            if v > MATCH_IOU && best.map_or(true, |(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            table.assignment[i] = Some(j);
            table.positives.push(i);
            table.offsets.push(encode_offsets(&gt[j].1, anchor)?);
            table.classes.push(gt[j].0);
        }
    }
    Ok(table)
}

/// Regression target of `gt` relative to `anchor`: centre offsets normalised
/// by the anchor size, log ratios for width and height.
pub fn encode_offsets(gt: &BoundingBox, anchor: &BoundingBox) -> Result<[f64; 4]> {
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(MdalError::InvalidBox { w: gt.w, h: gt.h });
    }
    Ok([
        (gt.x - anchor.x) / anchor.w,
        (gt.y - anchor.y) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
    ])
}

pub fn decode_box(anchor: &BoundingBox, offsets: &[f64; 4]) -> BoundingBox {
    BoundingBox::new(
        anchor.x + offsets[0] * anchor.w,
        anchor.y + offsets[1] * anchor.h,
        anchor.w * offsets[2].exp(),
        anchor.h * offsets[3].exp(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_centres_and_counts() {
        let a = build_anchor_grid(64, 8, &[16.0], &[1.0]).unwrap();
        assert_eq!(a.len(), 64);
        let xs: Vec<f64> = a.boxes[..8].iter().map(|b| b.x).collect();
        assert_eq!(xs, vec![4.0, 12.0, 20.0, 28.0, 36.0, 44.0, 52.0, 60.0]);
        assert!(a.boxes.iter().all(|b| b.y == 4.0 || b.y > 4.0));
        let a3 = build_anchor_grid(64, 8, &[16.0], &[0.5, 1.0, 2.0]).unwrap();
        assert_eq!(a3.len(), 192);
        assert_eq!(a3.per_cell, 3);
    }

    #[test]
    fn clamped_anchors_stay_inside() {
        let a = build_anchor_grid(64, 8, &[16.0, 30.0], &[0.5, 2.0]).unwrap();
        assert!(a.clamped(64).boxes.iter().all(|b| b.within(64.0)));
    }

    #[test]
    fn oversized_anchor_rejected() {
        assert!(matches!(
            build_anchor_grid(64, 8, &[80.0], &[1.0]),
            Err(MdalError::AnchorTooLarge { .. })
        ));
    }

    #[test]
    fn exact_gt_is_matched() {
        let a = build_anchor_grid(64, 8, &[16.0], &[1.0]).unwrap();
        let m = match_anchors(&a, &[(2, a.boxes[10])]).unwrap();
        assert!(m.num_positives() >= 1);
        assert_eq!(m.assignment[10], Some(0));
        assert_eq!(m.offsets[m.positives.iter().position(|&p| p == 10).unwrap()], [0.0; 4]);
        let empty = match_anchors(&a, &[]).unwrap();
        assert_eq!(empty.num_positives(), 0);
        assert_eq!(empty.negatives().len(), 64);
    }

    #[test]
    fn encode_known_values() {
        let d = BoundingBox::new(10.0, 10.0, 20.0, 20.0);
        let g = BoundingBox::new(12.0, 10.0, 20.0, 40.0);
        let o = encode_offsets(&g, &d).unwrap();
        assert!((o[0] - 0.1).abs() < 1e-15 && o[1] == 0.0 && o[2] == 0.0);
        assert!((o[3] - 2f64.ln()).abs() < 1e-15);
        let e = BoundingBox::new(10.0, 10.0, 20.0 * std::f64::consts::E, 20.0);
        assert!((encode_offsets(&e, &d).unwrap()[2] - 1.0).abs() < 1e-15);
        let back = decode_box(&d, &[0.1, 0.0, 0.0, 2f64.ln()]);
        assert!((back.x - 12.0).abs() < 1e-12 && (back.h - 40.0).abs() < 1e-12);
        assert_eq!(decode_box(&d, &[0.0; 4]), d);
        assert!(encode_offsets(&BoundingBox::new(1.0, 1.0, 0.0, 2.0), &d).is_err());
    }
}
