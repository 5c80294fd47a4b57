//! Mixture parameter post-processing: softmax weights, identity means,
//! sigmoid variances.

use super::{HeadVariant, NetworkConfig, RawHeadOutput};
use crate::error::{MdalError, Result};

/// Variances are kept strictly inside `(0, 1)` even where the sigmoid
/// saturates in floating point.
const VAR_MARGIN: f64 = 1e-15;

/// Post-processed mixture for one output group.
///
/// `means` holds `K × dim` values, component-major. `variances`, when
/// present, has the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Option<Vec<f64>>,
}

impl GmmParams {
    pub fn scalar(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Self {
        Self {
            dim: 1,
            weights,
            means,
            variances: Some(variances),
        }
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    pub fn variance(&self, k: usize) -> Option<&[f64]> {
        self.variances
            .as_ref()
            .map(|v| &v[k * self.dim..(k + 1) * self.dim])
    }

    /// Checks the simplex and variance-range invariants.
    pub fn is_valid(&self) -> bool {
        let sum: f64 = self.weights.iter().sum();
        (sum - 1.0).abs() <= 1e-9
            && self.weights.iter().all(|w| *w >= 0.0)
            && self.means.len() == self.weights.len() * self.dim
            && self
                .variances
                .as_ref()
                .map_or(true, |v| v.iter().all(|s| *s > 0.0 && *s < 1.0))
    }
}

/// Mixtures for one anchor: one scalar mixture per box coordinate
/// (x, y, w, h) and one `C'`-dimensional mixture over class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGmm {
    pub loc: [GmmParams; 4],
    pub cls: GmmParams,
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(VAR_MARGIN, 1.0 - VAR_MARGIN)
}

/// Applies the mixture post-processing to every anchor of a mixture head.
pub fn postprocess_gmm(raw: &RawHeadOutput, config: &NetworkConfig) -> Result<Vec<AnchorGmm>> {
    if !config.head.is_mixture() {
        return Err(MdalError::WrongHead {
            expected: "full_gmm or efficient",
        });
    }
    let k = config.components;
    let c = config.class_outputs();
    let lw = config.loc_width();
    let cw = config.cls_width();
    let anchors = raw.loc.len() / lw;
    let mut out = Vec::with_capacity(anchors);
    for a in 0..anchors {
        let lrow = &raw.loc.data()[a * lw..(a + 1) * lw];
        let loc = std::array::from_fn(|b| {
            let base = b * 3 * k;
            GmmParams::scalar(
                softmax(&lrow[base..base + k]),
                lrow[base + k..base + 2 * k].to_vec(),
                lrow[base + 2 * k..base + 3 * k].iter().map(|&v| sigmoid(v)).collect(),
            )
        });
        let crow = &raw.cls.data()[a * cw..(a + 1) * cw];
        let variances = match config.head {
            HeadVariant::FullGmm => Some(
                crow[k + k * c..k + 2 * k * c]
                    .iter()
                    .map(|&v| sigmoid(v))
                    .collect(),
            ),
            _ => None,
        };
        let cls = GmmParams {
            dim: c,
            weights: softmax(&crow[..k]),
            means: crow[k..k + k * c].to_vec(),
            variances,
        };
        out.push(AnchorGmm { loc, cls });
    }
    Ok(out)
}
