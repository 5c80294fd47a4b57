//! Pool scoring and selection: z-score normalization of per-object
//! uncertainties, max-over-objects image scores, aggregation across the four
//! uncertainty types, and the random / entropy / core-set baselines.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::detector::predict::Detection;
use crate::error::{MdalError, Result};
use crate::seed::{rng_for, TAG_RANDOM_ACQ};
use crate::uncertainty::UncertaintyQuad;

/// Column names of the four uncertainty types, in `UncertaintyQuad` order.
pub const TYPE_NAMES: [&str; 4] = ["al_b", "ep_b", "al_c", "ep_c"];

const AL_B: usize = 0;
const EP_B: usize = 1;
const AL_C: usize = 2;
const EP_C: usize = 3;

/// How the four normalized image scores are combined into one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AggregationMode {
    AlB,
    EpB,
    AlC,
    EpC,
    SumAlBEpB,
    SumAlCEpC,
    SumAlBAlC,
    SumEpBEpC,
    SumAll,
    MaxAlBEpB,
    MaxAlCEpC,
    MaxAlBAlC,
    MaxEpBEpC,
    MaxAll,
}

impl AggregationMode {
    pub const ALL: [AggregationMode; 14] = [
        Self::AlB,
        Self::EpB,
        Self::AlC,
        Self::EpC,
        Self::SumAlBEpB,
        Self::SumAlCEpC,
        Self::SumAlBAlC,
        Self::SumEpBEpC,
        Self::SumAll,
        Self::MaxAlBEpB,
        Self::MaxAlCEpC,
        Self::MaxAlBAlC,
        Self::MaxEpBEpC,
        Self::MaxAll,
    ];

    /// The single-type modes, in `UncertaintyQuad` order.
    pub const SINGLE: [AggregationMode; 4] = [Self::AlB, Self::EpB, Self::AlC, Self::EpC];

    pub fn name(self) -> &'static str {
        match self {
            Self::AlB => "al_b",
            Self::EpB => "ep_b",
            Self::AlC => "al_c",
            Self::EpC => "ep_c",
            Self::SumAlBEpB => "sum_al_b_ep_b",
            Self::SumAlCEpC => "sum_al_c_ep_c",
            Self::SumAlBAlC => "sum_al_b_al_c",
            Self::SumEpBEpC => "sum_ep_b_ep_c",
            Self::SumAll => "sum_all",
            Self::MaxAlBEpB => "max_al_b_ep_b",
            Self::MaxAlCEpC => "max_al_c_ep_c",
            Self::MaxAlBAlC => "max_al_b_al_c",
            Self::MaxEpBEpC => "max_ep_b_ep_c",
            Self::MaxAll => "max_all",
        }
    }

    /// Indices into `UncertaintyQuad::as_array` that the mode combines.
    pub fn members(self) -> &'static [usize] {
        match self {
            Self::AlB => &[AL_B],
            Self::EpB => &[EP_B],
            Self::AlC => &[AL_C],
            Self::EpC => &[EP_C],
            Self::SumAlBEpB | Self::MaxAlBEpB => &[AL_B, EP_B],
            Self::SumAlCEpC | Self::MaxAlCEpC => &[AL_C, EP_C],
            Self::SumAlBAlC | Self::MaxAlBAlC => &[AL_B, AL_C],
            Self::SumEpBEpC | Self::MaxEpBEpC => &[EP_B, EP_C],
            Self::SumAll | Self::MaxAll => &[AL_B, EP_B, AL_C, EP_C],
        }
    }

    pub fn is_max(self) -> bool {
        matches!(
            self,
            Self::MaxAlBEpB | Self::MaxAlCEpC | Self::MaxAlBAlC | Self::MaxEpBEpC | Self::MaxAll
        )
    }
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregationMode {
    type Err = MdalError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| MdalError::Config(format!("unknown aggregation mode {s:?}")))
    }
}

impl TryFrom<String> for AggregationMode {
    type Error = MdalError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AggregationMode> for String {
    fn from(m: AggregationMode) -> String {
        m.name().to_string()
    }
}

/// Z-score with the population standard deviation. A constant input maps to
/// all zeros.
pub fn zscore_normalize(values: &[f64]) -> Vec<f64> {
    let (mean, sd) = mean_and_sd(values);
    if sd == 0.0 || !sd.is_finite() {
        if !values.is_empty() {
            log::warn!("zero spread over {} values; normalized scores set to 0", values.len());
        }
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / sd).collect()
}

fn mean_and_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Maximum over an image's objects; `None` when nothing survived inference.
pub fn image_score(values: &[f64]) -> Option<f64> {
    values.iter().copied().reduce(f64::max)
}

pub fn aggregate(scores: &[f64; 4], mode: AggregationMode) -> f64 {
    let vals = mode.members().iter().map(|&i| scores[i]);
    if mode.is_max() {
        vals.fold(f64::NEG_INFINITY, f64::max)
    } else {
        vals.sum()
    }
}

/// Raw uncertainties of the surviving detections of one pool image.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolImage {
    pub id: usize,
    pub objects: Vec<UncertaintyQuad>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub id: usize,
    /// Max normalized value per type, `None` for images without detections.
    pub per_type: Option<[f64; 4]>,
}

/// Normalized pool scores together with the per-type statistics used.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolScores {
    pub images: Vec<ImageScores>,
    /// `(mean, population sd)` per type over all objects in the pool.
    pub stats: [(f64, f64); 4],
}

impl PoolScores {
    pub fn aggregated(&self, mode: AggregationMode) -> Vec<(usize, Option<f64>)> {
        self.images
            .iter()
            .map(|im| (im.id, im.per_type.map(|s| aggregate(&s, mode))))
            .collect()
    }

    pub fn select(&self, mode: AggregationMode, budget: usize) -> Result<Vec<usize>> {
        select_top_k(&self.aggregated(mode), budget)
    }
}

/// Normalizes each type over every object of the pool, then reduces each
/// image to its per-type maximum.
pub fn score_pool(pool: &[PoolImage]) -> PoolScores {
    let mut stats = [(0.0, 0.0); 4];
    let mut normalized: Vec<Vec<[f64; 4]>> =
        pool.iter().map(|p| vec![[0.0; 4]; p.objects.len()]).collect();
    for (t, stat) in stats.iter_mut().enumerate() {
        let flat: Vec<f64> = pool
            .iter()
            .flat_map(|p| p.objects.iter().map(move |o| o.as_array()[t]))
            .collect();
        *stat = mean_and_sd(&flat);
        let z = zscore_normalize(&flat);
        let mut it = z.into_iter();
        for img in normalized.iter_mut() {
            for obj in img.iter_mut() {
                obj[t] = it.next().expect("one value per object");
            }
        }
    }
    let images = pool
        .iter()
        .zip(normalized)
        .map(|(p, objs)| ImageScores {
            id: p.id,
            per_type: (!objs.is_empty()).then(|| {
                std::array::from_fn(|t| {
                    let vals: Vec<f64> = objs.iter().map(|o| o[t]).collect();
                    image_score(&vals).expect("non-empty")
                })
            }),
        })
        .collect();
    PoolScores { images, stats }
}

/// The `budget` best ids, highest score first. Unscored images rank below
/// every scored one; ties go to the lower id.
pub fn select_top_k(scores: &[(usize, Option<f64>)], budget: usize) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(MdalError::EmptyPool);
    }
    if budget > scores.len() {
        return Err(MdalError::BudgetExceedsPool {
            budget,
            pool: scores.len(),
        });
    }
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| match (a.1, b.1) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.0.cmp(&b.0)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.0.cmp(&b.0),
    });
    Ok(ranked.into_iter().take(budget).map(|(id, _)| id).collect())
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Mean class-distribution entropy over an image's detections.
pub fn entropy_score(dets: &[Detection]) -> Option<f64> {
    if dets.is_empty() {
        return None;
    }
    Some(dets.iter().map(|d| entropy(&d.class_probs)).sum::<f64>() / dets.len() as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// k-center greedy: repeatedly take the pool point farthest from its nearest
/// labeled or already selected point. Ties go to the earlier pool entry; with
/// no labeled points the first pick is the first pool entry.
pub fn coreset_greedy(
    pool: &[(usize, Vec<f64>)],
    labeled: &[Vec<f64>],
    budget: usize,
) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(MdalError::EmptyPool);
    }
    if budget > pool.len() {
        return Err(MdalError::BudgetExceedsPool {
            budget,
            pool: pool.len(),
        });
    }
    let dim = pool[0].1.len();
    if let Some(bad) = pool
        .iter()
        .map(|p| p.1.len())
        .chain(labeled.iter().map(Vec::len))
        .find(|&d| d != dim)
    {
        return Err(MdalError::Config(format!(
            "feature dimension {bad} differs from {dim}"
        )));
    }
    let mut nearest: Vec<f64> = pool
        .iter()
        .map(|(_, f)| {
            labeled
                .iter()
                .map(|l| sq_dist(f, l))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut taken = vec![false; pool.len()];
    let mut out = Vec::with_capacity(budget);
    for _ in 0..budget {
        let mut best: Option<usize> = None;
        for (i, &d) in nearest.iter().enumerate() {
            if taken[i] {
                continue;
            }
            if best.map_or(true, |b| d > nearest[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("budget ≤ pool");
        taken[b] = true;
        out.push(pool[b].0);
        for (i, (_, f)) in pool.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(f, &pool[b].1));
        }
    }
    Ok(out)
}

/// Uniform sample without replacement, returned in ascending id order.
pub fn random_select(pool_ids: &[usize], budget: usize, seed: u64) -> Result<Vec<usize>> {
    if budget > pool_ids.len() {
        return Err(MdalError::BudgetExceedsPool {
            budget,
            pool: pool_ids.len(),
        });
    }
    let mut rng = rng_for(seed, &[TAG_RANDOM_ACQ]);
    let mut ids: Vec<usize> = sample(&mut rng, pool_ids.len(), budget)
        .into_iter()
        .map(|i| pool_ids[i])
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

/// `100·|A∩B| / |A|` for equally sized selections.
pub fn overlap_ratio(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MdalError::SelectionSizeMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MdalError::EmptyPool);
    }
    let set: std::collections::BTreeSet<usize> = b.iter().copied().collect();
    let common = a.iter().filter(|i| set.contains(i)).count();
    Ok(100.0 * common as f64 / a.len() as f64)
}

pub fn overlap_matrix(selections: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    selections
        .iter()
        .map(|a| selections.iter().map(|b| overlap_ratio(a, b)).collect())
        .collect()
}
