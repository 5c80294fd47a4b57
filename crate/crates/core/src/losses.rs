//! Training objectives for the mixture heads and the point-estimate baseline.
//!
//! All losses are built on a [`Graph`] so that they can be differentiated.
//! Row layouts follow [`crate::detector::RawHeadOutput`].

use mdal_autodiff::{GatherIndex, Graph, Tensor, Var};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::detector::anchors::MatchTable;
use crate::detector::{HeadVariant, HeadVars, NetworkConfig};
use crate::error::{MdalError, Result};
use crate::seed::{rng_for, TAG_NOISE};

/// Log-densities are clamped below at this value before exponentiation.
pub const LOG_DENSITY_FLOOR: f64 = -700.0;

/// `ε = e⁻⁹`, added to the mixture density inside the logarithm.
pub fn default_epsilon() -> f64 {
    (-9.0f64).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub epsilon: f64,
    /// Hard-negative mining ratio M.
    pub neg_ratio: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: default_epsilon(),
            neg_ratio: 3,
        }
    }
}

/// Localization mixtures for the positive anchors, each `[P·4, K]`, rows
/// ordered by positive anchor then coordinate.
#[derive(Clone, Copy, Debug)]
pub struct LocGmmVars {
    pub weights: Var,
    pub means: Var,
    pub variances: Var,
}

/// Classification mixtures for all anchors: weights `[A, K]`, means and
/// variances `[A·K, C']`.
#[derive(Clone, Copy, Debug)]
pub struct ClsGmmVars {
    pub weights: Var,
    pub means: Var,
    pub variances: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub loc: f64,
    pub cls_pos: f64,
    pub cls_neg: f64,
    pub n: usize,
}

impl LossBreakdown {
    pub fn new(loc: f64, cls_pos: f64, cls_neg: f64, n: usize) -> Self {
        Self {
            total: total_loss(loc, cls_pos, cls_neg, n),
            loc,
            cls_pos,
            cls_neg,
            n,
        }
    }
}

/// `(L_loc + L_pos + L_neg) / N` for `N > 0`, otherwise exactly 0.
pub fn total_loss(loc: f64, cls_pos: f64, cls_neg: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        (loc + cls_pos + cls_neg) / n as f64
    }
}

fn zero(g: &mut Graph) -> Result<Var> {
    Ok(g.constant(Tensor::scalar(0.0))?)
}

fn index(v: Vec<usize>) -> GatherIndex {
    v.into_iter().map(Some).collect()
}

/// Gathers and post-processes the localization mixtures of `anchors`.
pub fn loc_gmm_vars(g: &mut Graph, loc_raw: Var, anchors: &[usize], k: usize) -> Result<LocGmmVars> {
    let width = g.shape(loc_raw)[1];
    let rows = anchors.len() * 4;
    let part = |offset: usize| {
        let mut idx = Vec::with_capacity(rows * k);
        for &a in anchors {
            for b in 0..4 {
                for c in 0..k {
                    idx.push(a * width + b * 3 * k + offset * k + c);
                }
            }
        }
        index(idx)
    };
    let pi_raw = g.gather(loc_raw, part(0), &[rows, k])?;
    let mu = g.gather(loc_raw, part(1), &[rows, k])?;
    let var_raw = g.gather(loc_raw, part(2), &[rows, k])?;
    Ok(LocGmmVars {
        weights: g.softmax_lastdim(pi_raw)?,
        means: mu,
        variances: g.sigmoid(var_raw)?,
    })
}

/// Gathers and post-processes the classification mixtures of every anchor.
pub fn cls_gmm_vars(g: &mut Graph, cls_raw: Var, config: &NetworkConfig) -> Result<ClsGmmVars> {
    if !config.head.is_mixture() {
        return Err(MdalError::WrongHead {
            expected: "full_gmm or efficient",
        });
    }
    let (a_n, width) = (g.shape(cls_raw)[0], g.shape(cls_raw)[1]);
    let (k, c) = (config.components, config.class_outputs());
    let pi_idx = index((0..a_n).flat_map(|a| (0..k).map(move |j| a * width + j)).collect());
    let block = |start: usize| {
        index(
            (0..a_n)
                .flat_map(|a| (0..k * c).map(move |j| a * width + start + j))
                .collect(),
        )
    };
    let pi_raw = g.gather(cls_raw, pi_idx, &[a_n, k])?;
    let means = g.gather(cls_raw, block(k), &[a_n * k, c])?;
    let variances = match config.head {
        HeadVariant::FullGmm => {
            let raw = g.gather(cls_raw, block(k + k * c), &[a_n * k, c])?;
            Some(g.sigmoid(raw)?)
        }
        _ => None,
    };
    Ok(ClsGmmVars {
        weights: g.softmax_lastdim(pi_raw)?,
        means,
        variances,
    })
}

/// Mixture negative log-likelihood of the encoded targets:
/// `−Σ_pos Σ_b log(Σ_k π N(ĝ | μ, Σ) + ε)`.
pub fn localization_loss(g: &mut Graph, loc: &LocGmmVars, targets: &[[f64; 4]], eps: f64) -> Result<Var> {
    if targets.is_empty() {
        return zero(g);
    }
    let (rows, k) = (g.shape(loc.means)[0], g.shape(loc.means)[1]);
    if rows != targets.len() * 4 {
        return Err(MdalError::Config(format!(
            "{} localization rows for {} targets",
            rows,
            targets.len()
        )));
    }
    let t: Vec<f64> = targets
        .iter()
        .flat_map(|o| o.iter().flat_map(|&v| std::iter::repeat(v).take(k)))
        .collect();
    let t = g.constant(Tensor::new(vec![rows, k], t)?)?;
    let diff = g.sub(t, loc.means)?;
    let sq = g.square(diff)?;
    let q = g.div(sq, loc.variances)?;
    let q = g.scale(q, -0.5)?;
    let logvar = g.log(loc.variances)?;
    let logvar = g.scale(logvar, -0.5)?;
    let logdens = g.add(q, logvar)?;
    let logdens = g.add_scalar(logdens, -0.5 * (2.0 * std::f64::consts::PI).ln())?;
    let logdens = g.max_scalar(logdens, LOG_DENSITY_FLOOR)?;
    let dens = g.exp(logdens)?;
    let weighted = g.mul(loc.weights, dens)?;
    let mix = g.sum_lastdim(weighted)?;
    let mix = g.add_scalar(mix, eps)?;
    let ll = g.log(mix)?;
    let s = g.sum(ll)?;
    Ok(g.neg(s)?)
}

/// One standard-normal draw per class logit, reproducible from `seed`.
pub fn class_noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_for(seed, &[TAG_NOISE]);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Noise-perturbed logits `ĉ = μ + √Σ · γ`, `γ ~ N(0, 1)`.
pub fn sample_class_logits(g: &mut Graph, cls: &ClsGmmVars, seed: u64) -> Result<Var> {
    let var = cls.variances.ok_or(MdalError::WrongHead {
        expected: "full_gmm",
    })?;
    let gamma = class_noise(g.shape(cls.means), seed);
    let gamma = g.constant(gamma)?;
    let sd = g.sqrt(var)?;
    let noise = g.mul(sd, gamma)?;
    Ok(g.add(cls.means, noise)?)
}

/// Per-anchor loss `−Σ_k π^k log softmax(logits^k)[target]`, shape `[A]`.
///
/// `weights` is `[A, K]`; `None` means a single unweighted component.
pub fn class_nll_per_anchor(
    g: &mut Graph,
    weights: Option<Var>,
    logits: Var,
    targets: &[usize],
) -> Result<Var> {
    let (rows, c) = (g.shape(logits)[0], g.shape(logits)[1]);
    let a_n = targets.len();
    let k = rows / a_n.max(1);
    let logp = g.log_softmax_lastdim(logits)?;
    let idx = index(
        (0..a_n)
            .flat_map(|a| (0..k).map(move |j| (a * k + j) * c + targets[a]))
            .collect(),
    );
    let picked = g.gather(logp, idx, &[a_n, k])?;
    let weighted = match weights {
        Some(w) => g.mul(w, picked)?,
        None => picked,
    };
    let per_anchor = g.sum_lastdim(weighted)?;
    Ok(g.neg(per_anchor)?)
}

/// Indices of the `min(M·N, #candidates)` candidates with the largest loss;
/// ties go to the lower anchor index. Returned in selection order.
pub fn hard_negative_select(candidates: &[(usize, f64)], neg_ratio: usize, n_pos: usize) -> Vec<usize> {
    let take = (neg_ratio * n_pos).min(candidates.len());
    if take == 0 {
        return Vec::new();
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sorted.truncate(take);
    sorted.into_iter().map(|(i, _)| i).collect()
}

/// Splits a per-anchor loss vector into the positive sum and the
/// hard-mined negative sum.
pub fn positive_and_mined_negative(
    g: &mut Graph,
    per_anchor: Var,
    matches: &MatchTable,
    neg_ratio: usize,
) -> Result<(Var, Var)> {
    let n = matches.num_positives();
    let pos = if n == 0 {
        zero(g)?
    } else {
        let p = g.select(per_anchor, &matches.positives, &[n])?;
        g.sum(p)?
    };
    let values = g.value(per_anchor).data();
    let candidates: Vec<(usize, f64)> = matches
        .negatives()
        .into_iter()
        .map(|a| (a, values[a]))
        .collect();
    let chosen = hard_negative_select(&candidates, neg_ratio, n);
    let neg = if chosen.is_empty() {
        zero(g)?
    } else {
        let s = g.select(per_anchor, &chosen, &[chosen.len()])?;
        g.sum(s)?
    };
    Ok((pos, neg))
}

/// Positive and hard-negative classification terms of the full mixture head,
/// with one noise draw per logit shared by both terms.
pub fn classification_loss_full(
    g: &mut Graph,
    cls: &ClsGmmVars,
    matches: &MatchTable,
    neg_ratio: usize,
    noise_seed: u64,
) -> Result<(Var, Var)> {
    let logits = sample_class_logits(g, cls, noise_seed)?;
    let per_anchor = class_nll_per_anchor(g, Some(cls.weights), logits, &matches.anchor_targets())?;
    positive_and_mined_negative(g, per_anchor, matches, neg_ratio)
}

/// Classification terms of the efficient head: the component means act as
/// logits directly.
pub fn classification_loss_eff(
    g: &mut Graph,
    cls: &ClsGmmVars,
    matches: &MatchTable,
    neg_ratio: usize,
) -> Result<(Var, Var)> {
    let per_anchor = class_nll_per_anchor(g, Some(cls.weights), cls.means, &matches.anchor_targets())?;
    positive_and_mined_negative(g, per_anchor, matches, neg_ratio)
}

/// Smooth-L1 regression loss of the point-estimate baseline, summed over
/// positives and coordinates.
pub fn smooth_l1_loss(g: &mut Graph, pred: Var, targets: &[[f64; 4]]) -> Result<Var> {
    if targets.is_empty() {
        return zero(g);
    }
    let t: Vec<f64> = targets.iter().flatten().copied().collect();
    let t = g.constant(Tensor::new(vec![targets.len(), 4], t)?)?;
    let diff = g.sub(pred, t)?;
    let d = g.value(diff).data().to_vec();
    let quad_mask: Vec<f64> = d.iter().map(|v| if v.abs() < 1.0 { 0.5 } else { 0.0 }).collect();
    let lin_sign: Vec<f64> = d
        .iter()
        .map(|v| if v.abs() < 1.0 { 0.0 } else { v.signum() })
        .collect();
    let lin_offset: f64 = d.iter().filter(|v| v.abs() >= 1.0).count() as f64 * -0.5;
    let shape = [targets.len(), 4];
    let qm = g.constant(Tensor::new(shape.to_vec(), quad_mask)?)?;
    let ls = g.constant(Tensor::new(shape.to_vec(), lin_sign)?)?;
    let sq = g.square(diff)?;
    let quad = g.mul(sq, qm)?;
    let lin = g.mul(diff, ls)?;
    let both = g.add(quad, lin)?;
    let s = g.sum(both)?;
    Ok(g.add_scalar(s, lin_offset)?)
}

/// The three loss sums of one scene plus its positive count.
#[derive(Clone, Copy, Debug)]
pub struct SceneLoss {
    pub loc: Var,
    pub cls_pos: Var,
    pub cls_neg: Var,
    pub n: usize,
}

/// Builds all loss terms for one scene on top of a forward pass.
pub fn scene_loss(
    g: &mut Graph,
    config: &NetworkConfig,
    heads: &HeadVars,
    matches: &MatchTable,
    loss_cfg: &LossConfig,
    noise_seed: u64,
) -> Result<SceneLoss> {
    let n = matches.num_positives();
    let targets: Vec<[f64; 4]> = matches
        .offsets
        .iter()
        .map(|o| o.map(|v| v * config.offset_scale))
        .collect();
    let (loc, (cls_pos, cls_neg)) = match config.head {
        HeadVariant::Deterministic => {
            let idx = index(
                matches
                    .positives
                    .iter()
                    .flat_map(|&a| (0..4).map(move |b| a * 4 + b))
                    .collect(),
            );
            let loc = if n == 0 {
                zero(g)?
            } else {
                let pred = g.gather(heads.loc, idx, &[n, 4])?;
                smooth_l1_loss(g, pred, &targets)?
            };
            let per_anchor = class_nll_per_anchor(g, None, heads.cls, &matches.anchor_targets())?;
            (loc, positive_and_mined_negative(g, per_anchor, matches, loss_cfg.neg_ratio)?)
        }
        head => {
            let loc = if n == 0 {
                zero(g)?
            } else {
                let lv = loc_gmm_vars(g, heads.loc, &matches.positives, config.components)?;
                localization_loss(g, &lv, &targets, loss_cfg.epsilon)?
            };
            let cv = cls_gmm_vars(g, heads.cls, config)?;
            let terms = if head == HeadVariant::FullGmm {
                classification_loss_full(g, &cv, matches, loss_cfg.neg_ratio, noise_seed)?
            } else {
                classification_loss_eff(g, &cv, matches, loss_cfg.neg_ratio)?
            };
            (loc, terms)
        }
    };
    Ok(SceneLoss {
        loc,
        cls_pos,
        cls_neg,
        n,
    })
}
