//! Minibatch SGD with momentum over per-scene graphs.

use std::path::Path;

use mdal_autodiff::{AutodiffError, Gradients, Graph, ParamStore};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::anchors::{match_anchors, MatchTable};
use crate::detector::Detector;
use crate::error::{MdalError, Result};
use crate::losses::{scene_loss, LossBreakdown, LossConfig};
use crate::scenes::Scene;
use crate::seed::{derive_seed, rng_for, TAG_BATCH, TAG_NOISE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Fraction of steps over which the learning rate ramps up linearly.
    pub warmup_frac: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub loss: LossConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            learning_rate: 0.03,
            momentum: 0.9,
            batch_size: 32,
            warmup_frac: 0.05,
            grad_clip: 5.0,
            loss: LossConfig::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MdalError::Config(m.to_string()));
        if self.steps == 0 {
            return bad("optimizer.steps must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("optimizer.learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("optimizer.momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("optimizer.batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad("optimizer.warmup_frac must lie in [0, 1]");
        }
        if self.grad_clip < 0.0 {
            return bad("optimizer.grad_clip must be non-negative");
        }
        Ok(())
    }

    /// Step schedule: linear warmup, then ×0.1 at 2/3 and again at 5/6 of
    /// the run.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let warm = (self.warmup_frac * self.steps as f64).ceil() as usize;
        let base = if step < warm {
            self.learning_rate * (step + 1) as f64 / warm as f64
        } else {
            self.learning_rate
        };
        let t = step as f64 / self.steps as f64;
        if t >= 5.0 / 6.0 {
            base * 0.01
        } else if t >= 2.0 / 3.0 {
            base * 0.1
        } else {
            base
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub curve: Vec<StepRecord>,
}

/// Gradients and raw loss sums of one scene (sums, not yet divided by N).
pub struct SceneGradients {
    pub grads: Gradients,
    pub loc: f64,
    pub cls_pos: f64,
    pub cls_neg: f64,
    pub n: usize,
}

/// Differentiates the summed scene loss `L_loc + L_pos + L_neg`.
pub fn scene_gradients(
    detector: &Detector,
    params: &ParamStore,
    image: &[f64],
    matches: &MatchTable,
    loss_cfg: &LossConfig,
    noise_seed: u64,
) -> Result<SceneGradients> {
    let mut g = Graph::new();
    let vars = detector.bind(&mut g, params)?;
    let heads = detector.forward_graph(&mut g, &vars, image)?;
    let l = scene_loss(&mut g, detector.config(), &heads, matches, loss_cfg, noise_seed)?;
    let cls = g.add(l.cls_pos, l.cls_neg)?;
    let root = g.add(l.loc, cls)?;
    let grads = g.backward(root)?;
    let item = |v| g.value(v).data()[0];
    Ok(SceneGradients {
        loc: item(l.loc),
        cls_pos: item(l.cls_pos),
        cls_neg: item(l.cls_neg),
        n: l.n,
        grads,
    })
}

fn diverged(step: usize, e: MdalError) -> MdalError {
    match e {
        MdalError::Autodiff(AutodiffError::NonFinite { op }) => MdalError::Divergence {
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

fn batches(n: usize, batch: usize, steps: usize, seed: u64) -> Vec<Vec<usize>> {
    if n <= batch {
        return vec![(0..n).collect(); steps];
    }
    let mut rng = rng_for(seed, &[TAG_BATCH]);
    let mut order: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        if order.len() < batch {
            let mut epoch: Vec<usize> = (0..n).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        out.push(order.drain(..batch).collect());
    }
    out
}

/// Trains `init` on `scenes`. Each step averages the summed losses of a
/// minibatch over its total number of positive matches.
pub fn train(
    detector: &Detector,
    init: ParamStore,
    scenes: &[&Scene],
    cfg: &OptimizerConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(MdalError::NoTrainingData);
    }
    let matches = scenes
        .iter()
        .map(|s| match_anchors(detector.anchors(), &s.labels()))
        .collect::<Result<Vec<_>>>()?;
    let mut params = init;
    let mut velocity: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
    let mut curve = Vec::with_capacity(cfg.steps);

    for (step, batch) in batches(scenes.len(), cfg.batch_size, cfg.steps, seed)
        .into_iter()
        .enumerate()
    {
        let parts = batch
            .par_iter()
            .map(|&i| {
                let noise = derive_seed(seed, &[TAG_NOISE, step as u64, scenes[i].id as u64]);
                scene_gradients(detector, &params, &scenes[i].image, &matches[i], &cfg.loss, noise)
            })
            .collect::<Vec<_>>();
        let mut total = Gradients::default();
        let (mut loc, mut pos, mut neg, mut n) = (0.0, 0.0, 0.0, 0usize);
        for p in parts {
            let p = p.map_err(|e| diverged(step, e))?;
            total.accumulate(&p.grads);
            loc += p.loc;
            pos += p.cls_pos;
            neg += p.cls_neg;
            n += p.n;
        }
        let loss = LossBreakdown::new(loc, pos, neg, n);
        if !loss.total.is_finite() {
            return Err(MdalError::Divergence {
                step,
                detail: format!("loss {}", loss.total),
            });
        }
        let lr = cfg.learning_rate_at(step);
        curve.push(StepRecord { step, lr, loss });
        if n == 0 {
            continue;
        }
        total.scale(1.0 / n as f64);
        if cfg.grad_clip > 0.0 {
            let norm = total
                .iter()
                .flat_map(|(_, t)| t.data())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > cfg.grad_clip {
                total.scale(cfg.grad_clip / norm);
            }
        }
        for (id, v) in params.ids().collect::<Vec<_>>().into_iter().zip(velocity.iter_mut()) {
            let Some(grad) = total.get(id) else { continue };
            if !grad.is_finite() {
                return Err(MdalError::Divergence {
                    step,
                    detail: format!("non-finite gradient for {}", params.name(id)),
                });
            }
            let w = params.get_mut(id).data_mut();
            for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                *v = cfg.momentum * *v + g;
                *w -= lr * *v;
            }
        }
    }
    Ok(TrainOutcome { params, curve })
}

pub fn write_loss_curve(path: &Path, curve: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "lr", "total", "L_loc", "L_cl_pos", "L_cl_neg", "n"])?;
    for r in curve {
        w.write_record([
            r.step.to_string(),
            r.lr.to_string(),
            r.loss.total.to_string(),
            r.loss.loc.to_string(),
            r.loss.cls_pos.to_string(),
            r.loss.cls_neg.to_string(),
            r.loss.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let cfg = OptimizerConfig {
            steps: 120,
            learning_rate: 1.0,
            warmup_frac: 0.05,
            ..Default::default()
        };
        assert!((cfg.learning_rate_at(0) - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(cfg.learning_rate_at(10), 1.0);
        assert!((cfg.learning_rate_at(80) - 0.1).abs() < 1e-12);
        assert!((cfg.learning_rate_at(100) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn batches_cover_each_epoch() {
        let b = batches(10, 5, 4, 3);
        let mut first: Vec<usize> = b[0].iter().chain(&b[1]).copied().collect();
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert_eq!(batches(3, 5, 2, 0), vec![vec![0, 1, 2]; 2]);
    }
}
