//! Closed-form aleatoric and epistemic uncertainty of mixture outputs.

use serde::{Deserialize, Serialize};

use crate::detector::gmm::{softmax, AnchorGmm, GmmParams};
use crate::detector::predict::Detection;
use crate::detector::HeadVariant;
use crate::error::{MdalError, Result};

/// Raw per-object uncertainties: localization and classification, aleatoric
/// and epistemic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyQuad {
    pub al_b: f64,
    pub ep_b: f64,
    pub al_c: f64,
    pub ep_c: f64,
}

impl UncertaintyQuad {
    pub fn as_array(&self) -> [f64; 4] {
        [self.al_b, self.ep_b, self.al_c, self.ep_c]
    }
}

/// How a per-class aleatoric vector is reduced to one value per object.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassReduction {
    #[default]
    PredictedClass,
    MaxOverClasses,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureUncertainty {
    /// `Σ_k π^k Σ^k`, per output dimension; empty when the mixture has no variances.
    pub aleatoric: Vec<f64>,
    /// `Σ_k π^k ‖μ^k − μ̄‖²` with `μ̄ = Σ_k π^k μ^k`.
    pub epistemic: f64,
}

pub fn mixture_uncertainty(g: &GmmParams) -> MixtureUncertainty {
    let dim = g.dim;
    let mut mean = vec![0.0; dim];
    for k in 0..g.components() {
        for (m, v) in mean.iter_mut().zip(g.mean(k)) {
            *m += g.weights[k] * v;
        }
    }
    let epistemic = (0..g.components())
        .map(|k| {
            let d2: f64 = g.mean(k).iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum();
            g.weights[k] * d2
        })
        .sum();
    let aleatoric = match &g.variances {
        Some(_) => (0..dim)
            .map(|d| {
                (0..g.components())
                    .map(|k| g.weights[k] * g.variance(k).expect("present")[d])
                    .sum()
            })
            .collect(),
        None => Vec::new(),
    };
    MixtureUncertainty {
        aleatoric,
        epistemic,
    }
}

const SIMPLEX_TOL: f64 = 1e-9;

/// `Σ_k π^k (diag(ĉ^k) − ĉ^k ĉ^kᵀ)`, row-major `C'×C'`.
pub fn efficient_cls_aleatoric(weights: &[f64], probs: &[Vec<f64>]) -> Result<Vec<f64>> {
    if weights.len() != probs.len() || probs.is_empty() {
        return Err(MdalError::NotOnSimplex(format!(
            "{} weights for {} component vectors",
            weights.len(),
            probs.len()
        )));
    }
    let c = probs[0].len();
    for p in probs {
        let s: f64 = p.iter().sum();
        if p.len() != c || (s - 1.0).abs() > SIMPLEX_TOL || p.iter().any(|v| *v < 0.0) {
            return Err(MdalError::NotOnSimplex(format!("{p:?}")));
        }
    }
    let mut m = vec![0.0; c * c];
    for (w, p) in weights.iter().zip(probs) {
        for i in 0..c {
            for j in 0..c {
                let diag = if i == j { p[i] } else { 0.0 };
                m[i * c + j] += w * (diag - p[i] * p[j]);
            }
        }
    }
    Ok(m)
}

fn max4(v: [f64; 4]) -> f64 {
    v.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

fn reduce(values: &[f64], class: usize, reduction: ClassReduction) -> f64 {
    match reduction {
        ClassReduction::PredictedClass => values[class],
        ClassReduction::MaxOverClasses => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// The four raw uncertainties of one object.
pub fn anchor_uncertainty(
    g: &AnchorGmm,
    class: usize,
    head: HeadVariant,
    reduction: ClassReduction,
) -> UncertaintyQuad {
    let loc = g.loc.each_ref().map(mixture_uncertainty);
    let al_b = max4(std::array::from_fn(|b| loc[b].aleatoric[0]));
    let ep_b = max4(std::array::from_fn(|b| loc[b].epistemic));
    let (al_c, ep_c) = match head {
        HeadVariant::FullGmm => {
            let u = mixture_uncertainty(&g.cls);
            (reduce(&u.aleatoric, class, reduction), u.epistemic)
        }
        _ => {
            let probs: Vec<Vec<f64>> = (0..g.cls.components()).map(|k| softmax(g.cls.mean(k))).collect();
            let c = g.cls.dim;
            let m = efficient_cls_aleatoric(&g.cls.weights, &probs)
                .expect("softmax output lies on the simplex");
            let diag: Vec<f64> = (0..c).map(|i| m[i * c + i]).collect();
            let prob_mix = GmmParams {
                dim: c,
                weights: g.cls.weights.clone(),
                means: probs.concat(),
                variances: None,
            };
            (reduce(&diag, class, reduction), mixture_uncertainty(&prob_mix).epistemic)
        }
    };
    UncertaintyQuad {
        al_b,
        ep_b,
        al_c,
        ep_c,
    }
}

/// Fills `uncertainty` for every detection from its anchor's mixtures.
pub fn detection_uncertainties(
    gmms: &[AnchorGmm],
    dets: &mut [Detection],
    head: HeadVariant,
    reduction: ClassReduction,
) {
    if !head.is_mixture() {
        return;
    }
    for d in dets {
        d.uncertainty = anchor_uncertainty(&gmms[d.anchor], d.class, head, reduction);
    }
}
