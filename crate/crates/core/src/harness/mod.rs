//! Pool-based active learning: train from scratch on the labeled set,
//! evaluate, score the unlabeled pool, move the top of the ranking over,
//! repeat.

pub mod config;
pub mod report;

use std::time::Instant;

use mdal_autodiff::ParamStore;
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{
    coreset_greedy, entropy_score, overlap_matrix, random_select, score_pool, select_top_k,
    AggregationMode, PoolImage, PoolScores,
};
use crate::detector::eval::{detect, evaluate_map, MapScores};
use crate::detector::predict::Detection;
use crate::detector::Detector;
use crate::error::{MdalError, Result};
use crate::scenes::{generate_dataset, split, Scene};
use crate::seed::{derive_seed, rng_for, TAG_AL};
use crate::train::{train, StepRecord};
pub use config::{ActiveLearningConfig, ExperimentConfig, Method, SplitConfig};

/// Generated dataset, its split and the network structure, shared by every
/// run of an experiment.
pub struct Benchmark {
    pub config: ExperimentConfig,
    pub detector: Detector,
    pub scenes: Vec<Scene>,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

impl Benchmark {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let scenes = generate_dataset(&config.dataset)?;
        let ids: Vec<usize> = scenes.iter().map(|s| s.id).collect();
        let (train_ids, test_ids) = split(
            &ids,
            (config.split.train, config.split.test),
            config.dataset.seed,
        )?;
        let detector = Detector::new(config.network.clone())?;
        Ok(Self {
            config,
            detector,
            scenes,
            train_ids,
            test_ids,
        })
    }

    pub fn scene(&self, id: usize) -> &Scene {
        &self.scenes[id]
    }

    pub fn scenes_for(&self, ids: &[usize]) -> Vec<&Scene> {
        ids.iter().map(|&i| self.scene(i)).collect()
    }
}

/// Seed of the fresh initialization used in `cycle`.
pub fn cycle_seed(master: u64, cycle: usize) -> u64 {
    master ^ cycle as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    /// 1-based; cycle 1 trains on the initial set.
    pub cycle: usize,
    pub labeled_count: usize,
    pub map50: f64,
    pub map75: f64,
    /// Ids moved to the labeled set after this cycle, in rank order.
    pub selection: Vec<usize>,
    pub init_fingerprint: String,
    pub trained_fingerprint: String,
    pub wall_sec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ALState {
    pub seed: u64,
    pub method: Method,
    /// Number of completed cycles.
    pub cycle: usize,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub records: Vec<CycleRecord>,
    /// Set when a cycle aborted; earlier records stay valid.
    pub error: Option<String>,
}

impl ALState {
    /// Draws the initial labeled set uniformly from the train pool.
    pub fn initial(bench: &Benchmark, seed: u64, method: Method) -> Result<Self> {
        let pool = &bench.train_ids;
        let n = bench.config.al.initial;
        if n > pool.len() {
            return Err(MdalError::BudgetExceedsPool {
                budget: n,
                pool: pool.len(),
            });
        }
        let mut rng = rng_for(seed, &[TAG_AL]);
        let mut labeled: Vec<usize> = sample(&mut rng, pool.len(), n)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        labeled.sort_unstable();
        let unlabeled = pool
            .iter()
            .copied()
            .filter(|id| labeled.binary_search(id).is_err())
            .collect();
        Ok(Self {
            seed,
            method,
            cycle: 0,
            labeled,
            unlabeled,
            records: Vec::new(),
            error: None,
        })
    }

    /// Moves `ids` from the unlabeled pool to the labeled set.
    pub fn label(&mut self, ids: &[usize]) {
        for id in ids {
            if let Ok(pos) = self.unlabeled.binary_search(id) {
                self.unlabeled.remove(pos);
                let at = self.labeled.binary_search(id).unwrap_err();
                self.labeled.insert(at, *id);
            }
        }
    }
}

/// Outcome of training and evaluating one cycle's model.
#[derive(Debug)]
pub struct TrainedCycle {
    pub params: ParamStore,
    pub curve: Vec<StepRecord>,
    pub map: MapScores,
    pub init_fingerprint: String,
    pub wall_sec: f64,
}

/// Fresh initialization, training on the labeled set, test-set mAP.
pub fn train_cycle(bench: &Benchmark, state: &ALState) -> Result<TrainedCycle> {
    let start = Instant::now();
    let cycle = state.cycle + 1;
    let seed = cycle_seed(state.seed, cycle);
    let init = bench.detector.init_params(seed);
    let init_fingerprint = init.fingerprint();
    let labeled = bench.scenes_for(&state.labeled);
    let out = train(
        &bench.detector,
        init,
        &labeled,
        &bench.config.optimizer,
        seed,
    )?;
    let test = bench.scenes_for(&bench.test_ids);
    let map = evaluate_map(&bench.detector, &out.params, &test, &bench.config.inference)?;
    Ok(TrainedCycle {
        params: out.params,
        curve: out.curve,
        map,
        init_fingerprint,
        wall_sec: start.elapsed().as_secs_f64(),
    })
}

/// Detections (with uncertainties) and pooled backbone features per scene.
pub fn infer(
    bench: &Benchmark,
    params: &ParamStore,
    ids: &[usize],
) -> Result<Vec<(Vec<Detection>, Vec<f64>)>> {
    let cfg = &bench.config;
    ids.par_iter()
        .map(|&id| {
            let (raw, feats) = bench.detector.forward_with_features(params, &bench.scene(id).image)?;
            let dets = crate::detector::eval::detect_from_raw(
                &bench.detector,
                &raw,
                &cfg.inference,
                cfg.al.class_reduction,
            )?;
            Ok((dets, feats))
        })
        .collect()
}

/// Pool scores of the uncertainty-based methods.
pub fn uncertainty_scores(bench: &Benchmark, params: &ParamStore, pool: &[usize]) -> Result<PoolScores> {
    let cfg = &bench.config;
    let images = pool
        .par_iter()
        .map(|&id| {
            let dets = detect(
                &bench.detector,
                params,
                &bench.scene(id).image,
                &cfg.inference,
                cfg.al.class_reduction,
            )?;
            Ok(PoolImage {
                id,
                objects: dets.iter().map(|d| d.uncertainty).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(score_pool(&images))
}

/// Ranked selection of `budget` unlabeled ids, plus the pool scores when the
/// method is uncertainty based.
pub fn select(
    bench: &Benchmark,
    state: &ALState,
    params: &ParamStore,
    method: Method,
    budget: usize,
) -> Result<(Vec<usize>, Option<PoolScores>)> {
    let pool = &state.unlabeled;
    match method {
        Method::Random => {
            let seed = derive_seed(state.seed, &[TAG_AL, state.cycle as u64]);
            Ok((random_select(pool, budget, seed)?, None))
        }
        Method::Uncertainty(mode) => {
            if bench.config.network.head.is_mixture() {
                let scores = uncertainty_scores(bench, params, pool)?;
                Ok((scores.select(mode, budget)?, Some(scores)))
            } else {
                Err(MdalError::WrongHead {
                    expected: "full_gmm or efficient",
                })
            }
        }
        Method::Entropy => {
            let inferred = infer(bench, params, pool)?;
            let scores: Vec<(usize, Option<f64>)> = pool
                .iter()
                .zip(&inferred)
                .map(|(&id, (dets, _))| (id, entropy_score(dets)))
                .collect();
            Ok((select_top_k(&scores, budget)?, None))
        }
        Method::Coreset => {
            let inferred = infer(bench, params, pool)?;
            let pool_feats: Vec<(usize, Vec<f64>)> = pool
                .iter()
                .zip(inferred)
                .map(|(&id, (_, f))| (id, f))
                .collect();
            let labeled = infer(bench, params, &state.labeled)?
                .into_iter()
                .map(|(_, f)| f)
                .collect::<Vec<_>>();
            Ok((coreset_greedy(&pool_feats, &labeled, budget)?, None))
        }
    }
}

/// Everything produced by one cycle, for persistence.
pub struct CycleOutput {
    pub trained: TrainedCycle,
    pub scores: Option<PoolScores>,
}

/// One full cycle on `state`, reusing `trained` when the caller already has
/// this cycle's model.
pub fn run_cycle(
    bench: &Benchmark,
    state: &mut ALState,
    trained: Option<TrainedCycle>,
) -> Result<CycleOutput> {
    let budget = bench.config.al.budget;
    if state.unlabeled.len() < budget {
        return Err(MdalError::BudgetExceedsPool {
            budget,
            pool: state.unlabeled.len(),
        });
    }
    let trained = match trained {
        Some(t) => t,
        None => train_cycle(bench, state)?,
    };
    let (selection, scores) = select(bench, state, &trained.params, state.method, budget)?;
    state.records.push(CycleRecord {
        cycle: state.cycle + 1,
        labeled_count: state.labeled.len(),
        map50: trained.map.map50,
        map75: trained.map.map75,
        selection: selection.clone(),
        init_fingerprint: trained.init_fingerprint.clone(),
        trained_fingerprint: trained.params.fingerprint(),
        wall_sec: trained.wall_sec,
    });
    state.label(&selection);
    state.cycle += 1;
    Ok(CycleOutput { trained, scores })
}

/// Runs all configured cycles for one seed and method. `on_cycle` sees every
/// completed cycle. A failing cycle ends the run with `state.error` set.
pub fn run_active_learning(
    bench: &Benchmark,
    seed: u64,
    method: Method,
    first: Option<TrainedCycle>,
    mut on_cycle: impl FnMut(&ALState, &CycleOutput) -> Result<()>,
) -> Result<ALState> {
    let mut state = ALState::initial(bench, seed, method)?;
    let mut first = first;
    for _ in 0..bench.config.al.cycles {
        match run_cycle(bench, &mut state, first.take()) {
            Ok(out) => on_cycle(&state, &out)?,
            Err(e) => {
                log::error!("seed {seed} {method}: cycle {} aborted: {e}", state.cycle + 1);
                state.error = Some(e.to_string());
                break;
            }
        }
    }
    Ok(state)
}

/// Clones a trained cycle so that several methods can share it.
pub fn share(t: &TrainedCycle) -> TrainedCycle {
    TrainedCycle {
        params: t.params.clone(),
        curve: t.curve.clone(),
        map: t.map,
        init_fingerprint: t.init_fingerprint.clone(),
        wall_sec: t.wall_sec,
    }
}

/// Runs several methods for one seed. The first cycle depends only on the
/// seed, so it is trained once and shared.
pub fn run_methods(
    bench: &Benchmark,
    seed: u64,
    methods: &[Method],
    mut on_cycle: impl FnMut(&ALState, &CycleOutput) -> Result<()>,
) -> Result<Vec<ALState>> {
    let probe = ALState::initial(bench, seed, Method::Random)?;
    let first = train_cycle(bench, &probe)?;
    methods
        .iter()
        .map(|&m| run_active_learning(bench, seed, m, Some(share(&first)), &mut on_cycle))
        .collect()
}

/// 4×4 overlap of the single-type selections made by the first-cycle model.
pub fn overlap_analysis(bench: &Benchmark, seed: u64) -> Result<Vec<Vec<f64>>> {
    let state = ALState::initial(bench, seed, Method::Random)?;
    let trained = train_cycle(bench, &state)?;
    overlap_for_model(bench, &state, &trained.params)
}

pub fn overlap_for_model(
    bench: &Benchmark,
    state: &ALState,
    params: &ParamStore,
) -> Result<Vec<Vec<f64>>> {
    let scores = uncertainty_scores(bench, params, &state.unlabeled)?;
    let selections = AggregationMode::SINGLE
        .iter()
        .map(|&m| scores.select(m, bench.config.al.budget))
        .collect::<Result<Vec<_>>>()?;
    overlap_matrix(&selections)
}
