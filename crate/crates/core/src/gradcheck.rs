//! Finite-difference verification of every training loss on small random
//! head outputs, with the class-logit noise frozen by seed.

use mdal_autodiff::{finite_diff_check, Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::detector::anchors::MatchTable;
use crate::detector::{HeadVariant, NetworkConfig};
use crate::error::Result;
use crate::losses::{
    classification_loss_eff, classification_loss_full, cls_gmm_vars, default_epsilon,
    loc_gmm_vars, localization_loss,
};
use crate::seed::rng_for;

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub loss: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// A random raw-head instance: loc `[A, 12K]`, cls `[A, K + 2KC']` (full) or
/// `[A, K + KC']` (efficient), plus a random assignment.
#[derive(Clone, Debug)]
pub struct LossInstance {
    pub config: NetworkConfig,
    pub loc: Tensor,
    pub cls: Tensor,
    pub matches: MatchTable,
    pub noise_seed: u64,
}

pub fn random_instance(rng: &mut ChaCha8Rng, head: HeadVariant) -> LossInstance {
    let k = rng.gen_range(1..=3);
    let num_classes = rng.gen_range(2..=3);
    let anchors = rng.gen_range(4..=8);
    let config = NetworkConfig {
        head,
        components: k,
        num_classes,
        ..NetworkConfig::default()
    };
    let mut fill = |rows: usize, cols: usize, sd: f64| {
        let data = (0..rows * cols).map(|_| rng.gen_range(-sd..sd)).collect();
        Tensor::new(vec![rows, cols], data).expect("shape matches")
    };
    let loc = fill(anchors, config.loc_width(), 1.5);
    let cls = fill(anchors, config.cls_width(), 2.0);
    let n_pos = rng.gen_range(1..=anchors / 2);
    let mut positives: Vec<usize> = rand::seq::index::sample(rng, anchors, n_pos).into_vec();
    positives.sort_unstable();
    let mut assignment = vec![None; anchors];
    for (g, &a) in positives.iter().enumerate() {
        assignment[a] = Some(g);
    }
    let offsets = positives
        .iter()
        .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
        .collect();
    let classes = positives.iter().map(|_| rng.gen_range(1..=num_classes)).collect();
    LossInstance {
        config,
        loc,
        cls,
        matches: MatchTable {
            assignment,
            positives,
            offsets,
            classes,
        },
        noise_seed: rng.gen(),
    }
}

type Builder = fn(&mut Graph, &[Var], &LossInstance) -> Result<Var>;

fn loc_loss(g: &mut Graph, p: &[Var], inst: &LossInstance) -> Result<Var> {
    let lv = loc_gmm_vars(g, p[0], &inst.matches.positives, inst.config.components)?;
    localization_loss(g, &lv, &inst.matches.offsets, default_epsilon())
}

fn cls_terms(g: &mut Graph, p: &[Var], inst: &LossInstance) -> Result<(Var, Var)> {
    let cv = cls_gmm_vars(g, p[1], &inst.config)?;
    match inst.config.head {
        HeadVariant::FullGmm => classification_loss_full(g, &cv, &inst.matches, 3, inst.noise_seed),
        _ => classification_loss_eff(g, &cv, &inst.matches, 3),
    }
}

fn cls_pos(g: &mut Graph, p: &[Var], inst: &LossInstance) -> Result<Var> {
    Ok(cls_terms(g, p, inst)?.0)
}

fn cls_neg(g: &mut Graph, p: &[Var], inst: &LossInstance) -> Result<Var> {
    Ok(cls_terms(g, p, inst)?.1)
}

fn total(g: &mut Graph, p: &[Var], inst: &LossInstance) -> Result<Var> {
    let loc = loc_loss(g, p, inst)?;
    let (pos, neg) = cls_terms(g, p, inst)?;
    let s = g.add(loc, pos)?;
    let s = g.add(s, neg)?;
    let n = inst.matches.num_positives();
    Ok(g.scale(s, 1.0 / n as f64)?)
}

/// Max relative error of one loss on one instance.
pub fn check_instance(inst: &LossInstance, build: Builder) -> Result<f64> {
    let params = [inst.loc.clone(), inst.cls.clone()];
    let report = finite_diff_check(
        |g, p| build(g, p, inst).map_err(|e| match e {
            crate::MdalError::Autodiff(a) => a,
            other => mdal_autodiff::AutodiffError::Objective(other.to_string()),
        }),
        &params,
        FD_STEP,
        GRAD_TOLERANCE,
    )?;
    Ok(report.max_rel_err)
}

/// The suite behind `grad-check`: localization NLL, the full head's positive
/// and negative classification terms, the efficient head's terms, and the
/// normalized total of each head.
pub fn run_gradient_suite(trials: usize, seed: u64) -> Result<Vec<GradCheckRow>> {
    let cases: [(&'static str, HeadVariant, Builder); 7] = [
        ("localization", HeadVariant::FullGmm, loc_loss),
        ("cls_pos_full", HeadVariant::FullGmm, cls_pos),
        ("cls_neg_full", HeadVariant::FullGmm, cls_neg),
        ("cls_pos_efficient", HeadVariant::Efficient, cls_pos),
        ("cls_neg_efficient", HeadVariant::Efficient, cls_neg),
        ("total_full", HeadVariant::FullGmm, total),
        ("total_efficient", HeadVariant::Efficient, total),
    ];
    let mut rows = Vec::new();
    for (i, (name, head, build)) in cases.into_iter().enumerate() {
        let mut rng = rng_for(seed, &[100 + i as u64]);
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let inst = random_instance(&mut rng, head);
            worst = worst.max(check_instance(&inst, build)?);
        }
        rows.push(GradCheckRow {
            loss: name,
            trials,
            max_rel_err: worst,
            pass: worst <= GRAD_TOLERANCE,
        });
    }
    Ok(rows)
}
