//! The `mdal` command line. [`run`] returns the process exit code: 0 on
//! success, 1 on runtime failure, 2 on usage or configuration errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mdal_autodiff::ParamStore;
use serde::{Deserialize, Serialize};

use crate::acquisition::AggregationMode;
use crate::bbox::BoundingBox;
use crate::detector::eval::{detect, evaluate_detections, MAP_THRESHOLDS};
use crate::detector::predict::Detection;
use crate::error::{MdalError, Result};
use crate::gradcheck::{run_gradient_suite, GRAD_TOLERANCE};
use crate::harness::report::{
    loss_curve_name, metric_rows, read_overlap, score_rows, selection_rows, summarize,
    timing_rows, write_loss_curve, write_overlap, write_rows, ScoreRow,
};
use crate::harness::{
    overlap_analysis, run_active_learning, run_methods, train_cycle, uncertainty_scores,
    ALState, Benchmark, ExperimentConfig, Method,
};
use crate::scenes::{generate_dataset, io::write_dataset};

#[derive(Debug, Parser)]
#[command(name = "mdal", version, about = "Mixture-density detection and uncertainty-based active learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and write it to disk.
    GenData(Common),
    /// Train one model on a seed's initial labeled set (or the whole train split).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        all: bool,
    },
    /// Score the unlabeled pool with a trained checkpoint.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the active-learning loop with the configured method.
    AlRun(Common),
    /// Compare every aggregation mode against random sampling.
    CompareAgg(Common),
    /// Overlap between the selections of the four uncertainty types.
    Overlap(Common),
    /// Test-set mAP of a checkpoint, or mAP of prediction/ground-truth CSVs.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with_all = ["predictions", "ground_truth"])]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "ground_truth")]
        predictions: Option<PathBuf>,
        #[arg(long, requires = "predictions")]
        ground_truth: Option<PathBuf>,
    },
    /// Finite-difference check of every loss gradient.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData(c) | Command::AlRun(c) | Command::CompareAgg(c) | Command::Overlap(c) => c,
            Command::Train { common, .. }
            | Command::Score { common, .. }
            | Command::Eval { common, .. }
            | Command::GradCheck { common, .. } => common,
        }
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let common = cli.command.common();
    let config = match load_config(common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("mdal: configuration error: {e}");
            return 2;
        }
    };
    if let Err(e) = std::fs::create_dir_all(&common.out) {
        eprintln!("mdal: cannot create {}: {e}", common.out.display());
        return 1;
    }
    match execute(&cli.command, config, &common.out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("mdal: error: {e}");
            1
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn snapshot(config: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::write(out.join("config.toml"), config.to_toml())?;
    Ok(())
}

fn execute(cmd: &Command, config: ExperimentConfig, out: &Path) -> Result<i32> {
    match cmd {
        Command::GenData(_) => {
            snapshot(&config, out)?;
            let scenes = generate_dataset(&config.dataset)?;
            write_dataset(&out.join("dataset"), &config.dataset, &scenes)?;
            println!("wrote {} scenes to {}", scenes.len(), out.join("dataset").display());
            Ok(0)
        }
        Command::Train { all, .. } => cmd_train(config, out, *all),
        Command::Score { checkpoint, .. } => cmd_score(config, out, checkpoint),
        Command::AlRun(_) => cmd_al_run(config, out),
        Command::CompareAgg(_) => cmd_compare(config, out),
        Command::Overlap(_) => cmd_overlap(config, out),
        Command::Eval {
            checkpoint,
            predictions,
            ground_truth,
            ..
        } => match (checkpoint, predictions, ground_truth) {
            (_, Some(p), Some(g)) => cmd_eval_files(out, p, g),
            (Some(c), _, _) => cmd_eval_checkpoint(config, out, c),
            _ => Err(MdalError::Config(
                "eval needs --checkpoint or --predictions with --ground-truth".into(),
            )),
        },
        Command::GradCheck { trials, .. } => {
            let seed = config.seeds[0];
            let rows = run_gradient_suite(*trials, seed)?;
            write_rows(&out.join("grad_check.csv"), &rows)?;
            for r in &rows {
                println!(
                    "{:<20} trials={:<4} max_rel_err={:.3e} {}",
                    r.loss,
                    r.trials,
                    r.max_rel_err,
                    if r.pass { "ok" } else { "FAIL" }
                );
            }
            let pass = rows.iter().all(|r| r.max_rel_err < GRAD_TOLERANCE);
            Ok(if pass { 0 } else { 1 })
        }
    }
}

#[derive(Debug, Serialize)]
struct TrainMetrics {
    seed: u64,
    labeled_count: usize,
    #[serde(rename = "mAP50")]
    map50: f64,
    #[serde(rename = "mAP75")]
    map75: f64,
}

fn cmd_train(config: ExperimentConfig, out: &Path, all: bool) -> Result<i32> {
    snapshot(&config, out)?;
    let bench = Benchmark::new(config)?;
    let mut rows = Vec::new();
    for &seed in &bench.config.seeds {
        let mut state = ALState::initial(&bench, seed, bench.config.al.method)?;
        if all {
            state.labeled = bench.train_ids.clone();
            state.unlabeled.clear();
        }
        let trained = train_cycle(&bench, &state)?;
        trained.params.save(&out.join(format!("model_seed{seed}.ckpt")))?;
        write_loss_curve(&out.join(format!("loss_seed{seed}.csv")), &trained.curve)?;
        println!(
            "seed {seed}: {} scenes, mAP50 {:.4}, mAP75 {:.4}",
            state.labeled.len(),
            trained.map.map50,
            trained.map.map75
        );
        rows.push(TrainMetrics {
            seed,
            labeled_count: state.labeled.len(),
            map50: trained.map.map50,
            map75: trained.map.map75,
        });
    }
    write_rows(&out.join("metrics.csv"), &rows)?;
    Ok(0)
}

#[derive(Debug, Serialize)]
struct DetectionRow {
    image_id: usize,
    detection_id: usize,
    class: usize,
    confidence: f64,
    al_b: f64,
    ep_b: f64,
    al_c: f64,
    ep_c: f64,
}

fn cmd_score(config: ExperimentConfig, out: &Path, checkpoint: &Path) -> Result<i32> {
    snapshot(&config, out)?;
    let params = ParamStore::load(checkpoint)?;
    let bench = Benchmark::new(config)?;
    let mode = match bench.config.al.method {
        Method::Uncertainty(m) => m,
        _ => AggregationMode::MaxAll,
    };
    let mut scores_out = Vec::new();
    let mut dets_out = Vec::new();
    for &seed in &bench.config.seeds {
        let state = ALState::initial(&bench, seed, Method::Uncertainty(mode))?;
        let scores = uncertainty_scores(&bench, &params, &state.unlabeled)?;
        let selected = scores.select(mode, bench.config.al.budget)?;
        scores_out.extend(score_rows(seed, &scores, mode, &selected));
        if seed == bench.config.seeds[0] {
            for &id in &state.unlabeled {
                let dets = detect(
                    &bench.detector,
                    &params,
                    &bench.scene(id).image,
                    &bench.config.inference,
                    bench.config.al.class_reduction,
                )?;
                dets_out.extend(dets.iter().enumerate().map(|(j, d)| detection_row(id, j, d)));
            }
        }
    }
    write_rows(&out.join("scores.csv"), &scores_out)?;
    write_rows(&out.join("detections.csv"), &dets_out)?;
    println!("scored {} pool images", scores_out.len());
    Ok(0)
}

fn detection_row(image_id: usize, detection_id: usize, d: &Detection) -> DetectionRow {
    DetectionRow {
        image_id,
        detection_id,
        class: d.class,
        confidence: d.confidence,
        al_b: d.uncertainty.al_b,
        ep_b: d.uncertainty.ep_b,
        al_c: d.uncertainty.al_c,
        ep_c: d.uncertainty.ep_c,
    }
}

fn cmd_al_run(config: ExperimentConfig, out: &Path) -> Result<i32> {
    snapshot(&config, out)?;
    let bench = Benchmark::new(config)?;
    let method = bench.config.al.method;
    let mut states = Vec::new();
    let mut scores: BTreeMap<usize, Vec<ScoreRow>> = BTreeMap::new();
    for &seed in &bench.config.seeds {
        let state = run_active_learning(&bench, seed, method, None, |st, o| {
            let rec = st.records.last().expect("cycle recorded");
            write_loss_curve(&out.join(loss_curve_name(seed, method, rec.cycle)), &o.trained.curve)?;
            if bench.config.save_checkpoints {
                o.trained
                    .params
                    .save(&out.join(format!("ckpt_seed{seed}_cycle{}.bin", rec.cycle)))?;
            }
            if let (Some(s), Method::Uncertainty(mode)) = (&o.scores, method) {
                scores
                    .entry(rec.cycle)
                    .or_default()
                    .extend(score_rows(seed, s, mode, &rec.selection));
            }
            log::info!(
                "seed {seed} cycle {} ({} labeled): mAP50 {:.4} mAP75 {:.4}",
                rec.cycle,
                rec.labeled_count,
                rec.map50,
                rec.map75
            );
            Ok(())
        })?;
        std::fs::write(
            out.join(format!("al_state_seed{seed}.json")),
            serde_json::to_string_pretty(&state)? + "\n",
        )?;
        states.push(state);
    }
    for (cycle, rows) in &scores {
        write_rows(&out.join(format!("scores_cycle{cycle}.csv")), rows)?;
    }
    finish_report(out, &states, "metrics.csv", "summary.csv")
}

fn finish_report(out: &Path, states: &[ALState], metrics: &str, summary: &str) -> Result<i32> {
    let rows = metric_rows(states);
    write_rows(&out.join(metrics), &rows)?;
    write_rows(&out.join("selections.csv"), &selection_rows(states))?;
    write_rows(&out.join("timing.csv"), &timing_rows(states))?;
    let summary_rows = summarize(&rows);
    write_rows(&out.join(summary), &summary_rows)?;
    for r in &summary_rows {
        println!(
            "{:<16} cycle {} ({:>4} labeled): mAP50 {:.4} ± {:.4}  mAP75 {:.4} ± {:.4}",
            r.method, r.cycle, r.labeled_count, r.map50_mean, r.map50_std, r.map75_mean, r.map75_std
        );
    }
    let failed: Vec<&ALState> = states.iter().filter(|s| s.error.is_some()).collect();
    for s in &failed {
        eprintln!(
            "mdal: incomplete: seed {} {} stopped after {} cycles: {}",
            s.seed,
            s.method,
            s.cycle,
            s.error.as_deref().unwrap_or_default()
        );
    }
    Ok(if failed.is_empty() { 0 } else { 1 })
}

fn cmd_compare(config: ExperimentConfig, out: &Path) -> Result<i32> {
    snapshot(&config, out)?;
    let bench = Benchmark::new(config)?;
    let methods = Method::comparison_set();
    let mut states = Vec::new();
    for &seed in &bench.config.seeds {
        states.extend(run_methods(&bench, seed, &methods, |st, _| {
            let rec = st.records.last().expect("cycle recorded");
            log::info!("seed {} {} cycle {}: mAP50 {:.4}", st.seed, st.method, rec.cycle, rec.map50);
            Ok(())
        })?);
    }
    finish_report(out, &states, "agg_runs.csv", "agg_table.csv")
}

fn cmd_overlap(config: ExperimentConfig, out: &Path) -> Result<i32> {
    snapshot(&config, out)?;
    let bench = Benchmark::new(config)?;
    let mut mean = vec![vec![0.0; 4]; 4];
    let n = bench.config.seeds.len() as f64;
    for &seed in &bench.config.seeds {
        let m = overlap_analysis(&bench, seed)?;
        write_overlap(&out.join(format!("overlap_seed{seed}.csv")), &m)?;
        for (acc, row) in mean.iter_mut().zip(&m) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v / n;
            }
        }
    }
    let path = out.join("overlap.csv");
    write_overlap(&path, &mean)?;
    for row in read_overlap(&path)? {
        println!("{}", row.iter().map(|v| format!("{v:6.1}")).collect::<String>());
    }
    Ok(0)
}

#[derive(Debug, Serialize)]
struct EvalRow {
    #[serde(rename = "mAP50")]
    map50: f64,
    #[serde(rename = "mAP75")]
    map75: f64,
}

fn cmd_eval_checkpoint(config: ExperimentConfig, out: &Path, checkpoint: &Path) -> Result<i32> {
    snapshot(&config, out)?;
    let params = ParamStore::load(checkpoint)?;
    let bench = Benchmark::new(config)?;
    let test = bench.scenes_for(&bench.test_ids);
    let m = crate::detector::eval::evaluate_map(&bench.detector, &params, &test, &bench.config.inference)?;
    write_rows(&out.join("eval.csv"), &[EvalRow { map50: m.map50, map75: m.map75 }])?;
    println!("mAP50 {:.6} mAP75 {:.6}", m.map50, m.map75);
    Ok(0)
}

/// Prediction rows for `eval --predictions`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: usize,
    pub class: usize,
    pub confidence: f64,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Ground-truth rows for `eval --ground-truth`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub image_id: usize,
    pub class: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

fn cmd_eval_files(out: &Path, preds: &Path, gts: &Path) -> Result<i32> {
    let preds: Vec<PredictionRecord> = crate::harness::report::read_rows(preds)?;
    let gts: Vec<GroundTruthRecord> = crate::harness::report::read_rows(gts)?;
    let n_images = preds
        .iter()
        .map(|p| p.image_id)
        .chain(gts.iter().map(|g| g.image_id))
        .max()
        .map_or(0, |m| m + 1);
    let num_classes = preds
        .iter()
        .map(|p| p.class)
        .chain(gts.iter().map(|g| g.class))
        .max()
        .unwrap_or(0);
    let mut p_img: Vec<Vec<Detection>> = vec![Vec::new(); n_images];
    for (i, p) in preds.iter().enumerate() {
        p_img[p.image_id].push(Detection {
            bbox: BoundingBox::new(p.x, p.y, p.w, p.h),
            class: p.class,
            confidence: p.confidence,
            anchor: i,
            class_probs: Vec::new(),
            uncertainty: Default::default(),
        });
    }
    let mut g_img: Vec<Vec<(usize, BoundingBox)>> = vec![Vec::new(); n_images];
    for g in &gts {
        g_img[g.image_id].push((g.class, BoundingBox::new(g.x, g.y, g.w, g.h)));
    }
    let m = evaluate_detections(&p_img, &g_img, num_classes, &MAP_THRESHOLDS)?;
    write_rows(&out.join("eval.csv"), &[EvalRow { map50: m[0], map75: m[1] }])?;
    println!("mAP50 {:.6} mAP75 {:.6}", m[0], m[1]);
    Ok(0)
}
