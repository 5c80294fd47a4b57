use mdal::detector::anchors::MatchTable;
use mdal::detector::eval::evaluate_map;
use mdal::detector::predict::InferenceConfig;
use mdal::detector::{Detector, NetworkConfig};
use mdal::gradcheck::{run_gradient_suite, GRAD_TOLERANCE};
use mdal::losses::{
    class_nll_per_anchor, classification_loss_eff, classification_loss_full, default_epsilon,
    hard_negative_select, loc_gmm_vars, localization_loss, sample_class_logits, total_loss, ClsGmmVars,
    LocGmmVars,
};
use mdal::scenes::{generate_dataset, DatasetSpec};
use mdal::train::{train, OptimizerConfig};
use mdal_autodiff::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn constant(g: &mut Graph, shape: &[usize], data: Vec<f64>) -> Var {
    g.constant(Tensor::new(shape.to_vec(), data).unwrap()).unwrap()
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0]
}

/// Localization loss of one positive whose four coordinates share the same
/// mixture `(π, μ, Σ)`.
fn loc_loss_shared(target: [f64; 4], pi: &[f64], mu: &[f64], var: &[f64], eps: f64) -> f64 {
    let mut g = Graph::new();
    let k = pi.len();
    let rep = |v: &[f64]| v.iter().copied().cycle().take(4 * k).collect::<Vec<_>>();
    let lv = LocGmmVars {
        weights: constant(&mut g, &[4, k], rep(pi)),
        means: constant(&mut g, &[4, k], rep(mu)),
        variances: constant(&mut g, &[4, k], rep(var)),
    };
    let l = localization_loss(&mut g, &lv, &[target], eps).unwrap();
    scalar(&g, l)
}

fn gauss_pdf(x: f64, mu: f64, var: f64) -> f64 {
    (-(x - mu).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

#[test]
fn gradient_suite_passes() {
    let rows = run_gradient_suite(12, 99).unwrap();
    assert_eq!(rows.len(), 7);
    for r in rows {
        assert!(r.pass && r.max_rel_err <= GRAD_TOLERANCE, "{r:?}");
    }
}

#[test]
fn single_component_nll_is_closed_form() {
    let eps = default_epsilon();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let mu: f64 = rng.gen_range(-2.0..2.0);
        let var: f64 = rng.gen_range(0.01..0.99);
        let t: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
        let want: f64 = t.iter().map(|&x| -(gauss_pdf(x, mu, var) + eps).ln()).sum();
        let got = loc_loss_shared(t, &[1.0], &[mu], &[var], eps);
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn nll_at_the_mean_with_half_variance() {
    let eps = default_epsilon();
    let per_coord = -(1.0 / std::f64::consts::PI.sqrt() + eps).ln();
    let got = loc_loss_shared([0.3; 4], &[1.0], &[0.3], &[0.5], eps);
    assert!((got - 4.0 * per_coord).abs() < 1e-12);
}

#[test]
fn distant_target_hits_the_epsilon_floor() {
    let sd = 0.5f64.sqrt();
    let got = loc_loss_shared([50.0 * sd; 4], &[0.5, 0.5], &[0.0, -0.1], &[0.5, 0.4], default_epsilon());
    assert!((got / 4.0 - 9.0).abs() < 1e-9, "{got}");
}

#[test]
fn larger_epsilon_never_raises_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let t: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-20.0..20.0));
        let pi = [0.3, 0.7];
        let mu = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let var = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
        let e = default_epsilon();
        let a = loc_loss_shared(t, &pi, &mu, &var, e);
        let b = loc_loss_shared(t, &pi, &mu, &var, 2.0 * e);
        assert!(b <= a, "{b} > {a}");
    }
}

#[test]
fn loss_terms_stay_finite_for_extreme_outputs() {
    // Raw outputs far into the saturated range of every nonlinearity.
    let mut g = Graph::new();
    let k = 2;
    let raw: Vec<f64> = (0..4)
        .flat_map(|_| [30.0, -30.0, 1e3, -1e3, -30.0, 30.0])
        .collect();
    let raw = constant(&mut g, &[1, 4 * 3 * k], raw);
    let lv = loc_gmm_vars(&mut g, raw, &[0], k).unwrap();
    let l = localization_loss(&mut g, &lv, &[[-1e3, 5.0, 1e3, 0.0]], default_epsilon()).unwrap();
    assert!(scalar(&g, l).is_finite());
    let mut g = Graph::new();
    let logits = constant(&mut g, &[2, 3], vec![1e300, -1e300, 0.0, -1e300, 1e300, 0.0]);
    let l = class_nll_per_anchor(&mut g, None, logits, &[1, 1]).unwrap();
    assert!(g.value(l).data().iter().all(|v| v.is_finite()));
}

fn cls_vars(g: &mut Graph, a: usize, k: usize, c: usize, pi: &[f64], mu: &[f64], var: Option<&[f64]>) -> ClsGmmVars {
    ClsGmmVars {
        weights: constant(g, &[a, k], pi.to_vec()),
        means: constant(g, &[a * k, c], mu.to_vec()),
        variances: var.map(|v| constant(g, &[a * k, c], v.to_vec())),
    }
}

#[test]
fn zero_variance_logits_equal_the_means() {
    let mut g = Graph::new();
    let mu: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.0).collect();
    let cv = cls_vars(&mut g, 2, 2, 3, &[0.5; 4], &mu, Some(&[0.0; 12]));
    let c = sample_class_logits(&mut g, &cv, 17).unwrap();
    assert_eq!(g.value(c).data(), &mu[..]);
}

#[test]
fn sampled_logits_repeat_per_seed() {
    let run = |seed| {
        let mut g = Graph::new();
        let cv = cls_vars(&mut g, 1, 1, 4, &[1.0], &[0.0; 4], Some(&[0.5; 4]));
        let c = sample_class_logits(&mut g, &cv, seed).unwrap();
        g.value(c).data().to_vec()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
}

#[test]
fn sampled_logit_variance_matches_sigma() {
    let var = [0.05, 0.3, 0.6, 0.9];
    let mu = [1.0, -0.5, 0.0, 2.0];
    let n = 100_000;
    let mut sum = [0.0; 4];
    let mut sq = [0.0; 4];
    for seed in 0..n {
        let mut g = Graph::new();
        let cv = cls_vars(&mut g, 1, 1, 4, &[1.0], &mu, Some(&var));
        let c = sample_class_logits(&mut g, &cv, seed as u64).unwrap();
        for (p, v) in g.value(c).data().iter().enumerate() {
            sum[p] += v;
            sq[p] += v * v;
        }
    }
    for p in 0..4 {
        let mean = sum[p] / n as f64;
        let emp = sq[p] / n as f64 - mean * mean;
        assert!((emp / var[p] - 1.0).abs() < 0.02, "logit {p}: {emp} vs {}", var[p]);
        assert!((mean - mu[p]).abs() < 5.0 * (var[p] / n as f64).sqrt());
    }
}

#[test]
fn confident_correct_logits_cost_nothing() {
    let mut g = Graph::new();
    let logits = constant(&mut g, &[1, 4], vec![-30.0, 40.0, -30.0, -30.0]);
    let l = class_nll_per_anchor(&mut g, None, logits, &[1]).unwrap();
    assert!(scalar(&g, l) < 1e-12);
}

#[test]
fn uniform_logits_cost_log_classes() {
    for c in [3usize, 5, 11] {
        let mut g = Graph::new();
        let cv = cls_vars(&mut g, 3, 2, c, &[0.4, 0.6, 0.5, 0.5, 0.9, 0.1], &vec![0.7; 6 * c], None);
        let l = class_nll_per_anchor(&mut g, Some(cv.weights), cv.means, &[0, 1, c - 1]).unwrap();
        for v in g.value(l).data() {
            assert!((v - (c as f64).ln()).abs() < 1e-12);
        }
    }
}

#[test]
fn mixture_loss_is_linear_in_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let c = 5;
        let pi1: f64 = rng.gen_range(0.0..1.0);
        let comp: Vec<Vec<f64>> = (0..2).map(|_| (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let target = rng.gen_range(0..c);
        let mut g = Graph::new();
        let both = constant(&mut g, &[2, c], comp.concat());
        let w = constant(&mut g, &[1, 2], vec![pi1, 1.0 - pi1]);
        let l = class_nll_per_anchor(&mut g, Some(w), both, &[target]).unwrap();
        let single = |g: &mut Graph, k: usize| {
            let x = constant(g, &[1, c], comp[k].clone());
            let l = class_nll_per_anchor(g, None, x, &[target]).unwrap();
            scalar(g, l)
        };
        let want = pi1 * single(&mut g, 0) + (1.0 - pi1) * single(&mut g, 1);
        assert!((scalar(&g, l) - want).abs() < 1e-12);
    }
}

fn table(anchors: usize, positives: &[(usize, usize)]) -> MatchTable {
    let mut assignment = vec![None; anchors];
    for (g, (a, _)) in positives.iter().enumerate() {
        assignment[*a] = Some(g);
    }
    MatchTable {
        assignment,
        positives: positives.iter().map(|p| p.0).collect(),
        offsets: vec![[0.0; 4]; positives.len()],
        classes: positives.iter().map(|p| p.1).collect(),
    }
}

#[test]
fn efficient_equals_full_without_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a, k, c) = (12, 3, 4);
    let pi: Vec<f64> = (0..a)
        .flat_map(|_| {
            let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(move |v| v / s)
        })
        .collect();
    let mu: Vec<f64> = (0..a * k * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let m = table(a, &[(1, 2), (5, 1), (9, 3)]);
    let mut g = Graph::new();
    let full = cls_vars(&mut g, a, k, c, &pi, &mu, Some(&vec![0.0; a * k * c]));
    let (fp, fnn) = classification_loss_full(&mut g, &full, &m, 3, 5).unwrap();
    let eff = cls_vars(&mut g, a, k, c, &pi, &mu, None);
    let (ep, en) = classification_loss_eff(&mut g, &eff, &m, 3).unwrap();
    assert_eq!(scalar(&g, fp), scalar(&g, ep));
    assert_eq!(scalar(&g, fnn), scalar(&g, en));
    assert!(classification_loss_full(&mut g, &eff, &m, 3, 5).is_err());
}

#[test]
fn negatives_are_the_mined_hardest() {
    let (a, c) = (10, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mu: Vec<f64> = (0..a * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let m = table(a, &[(2, 1)]);
    let mut g = Graph::new();
    let cv = cls_vars(&mut g, a, 1, c, &[1.0; 10], &mu, None);
    let (pos, neg) = classification_loss_eff(&mut g, &cv, &m, 3).unwrap();
    let bg_loss = |i: usize| {
        let row = &mu[i * c..(i + 1) * c];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        lse - row[0]
    };
    let mut neg_losses: Vec<f64> = (0..a).filter(|&i| i != 2).map(bg_loss).collect();
    neg_losses.sort_by(|x, y| y.total_cmp(x));
    let want_neg: f64 = neg_losses[..3].iter().sum();
    let row = &mu[2 * c..3 * c];
    let want_pos = row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[1];
    assert!((scalar(&g, neg) - want_neg).abs() < 1e-12);
    assert!((scalar(&g, pos) - want_pos).abs() < 1e-12);
}

#[test]
fn total_loss_normalization() {
    assert_eq!(total_loss(2.0, 1.0, 1.0, 4), 1.0);
    assert_eq!(total_loss(5.0, 3.0, 1.0, 0), 0.0);
    assert!((total_loss(2.0, 1.0, 1.0, 8) - 0.5).abs() < 1e-15);
}

proptest! {
    #[test]
    fn hard_negatives_match_sort_oracle(
        losses in prop::collection::vec(0u8..20, 0..40),
        n_pos in 0usize..8,
        m in 1usize..5,
    ) {
        // Small integer losses force plenty of ties.
        let cands: Vec<(usize, f64)> = losses.iter().enumerate().map(|(i, &v)| (i * 2, v as f64)).collect();
        let got = hard_negative_select(&cands, m, n_pos);
        prop_assert_eq!(got.len(), (m * n_pos).min(cands.len()));
        let mut want = cands.clone();
        want.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let want: Vec<usize> = want.iter().take(got.len()).map(|c| c.0).collect();
        prop_assert_eq!(got, want);
    }
}

fn training_spec(n: usize) -> DatasetSpec {
    DatasetSpec {
        n_scenes: n,
        ..DatasetSpec::default()
    }
}

#[test]
fn overfits_a_single_scene() {
    let scenes = generate_dataset(&training_spec(1)).unwrap();
    let det = Detector::new(NetworkConfig::default()).unwrap();
    let cfg = OptimizerConfig {
        learning_rate: 0.01,
        ..OptimizerConfig::default()
    };
    let out = train(&det, det.init_params(0), &[&scenes[0]], &cfg, 0).unwrap();
    let first = out.curve[0].loss.total;
    let last = out.curve.last().unwrap().loss.total;
    assert!(first > 0.0);
    assert!(last < 0.1 * first, "{first} -> {last}");
}

#[test]
fn training_is_deterministic() {
    let scenes = generate_dataset(&training_spec(10)).unwrap();
    let refs: Vec<_> = scenes.iter().collect();
    let det = Detector::new(NetworkConfig::default()).unwrap();
    let cfg = OptimizerConfig {
        steps: 20,
        batch_size: 4,
        ..OptimizerConfig::default()
    };
    let a = train(&det, det.init_params(3), &refs, &cfg, 3).unwrap();
    let b = train(&det, det.init_params(3), &refs, &cfg, 3).unwrap();
    assert_eq!(a.params.fingerprint(), b.params.fingerprint());
    assert_eq!(a.curve, b.curve);
    let c = train(&det, det.init_params(3), &refs, &cfg, 4).unwrap();
    assert_ne!(a.params.fingerprint(), c.params.fingerprint());
}

#[test]
fn training_improves_held_out_map() {
    let scenes = generate_dataset(&training_spec(160)).unwrap();
    let (tr, te) = scenes.split_at(120);
    let tr: Vec<_> = tr.iter().collect();
    let te: Vec<_> = te.iter().collect();
    let det = Detector::new(NetworkConfig::default()).unwrap();
    let init = det.init_params(1);
    let inf = InferenceConfig::default();
    let before = evaluate_map(&det, &init, &te, &inf).unwrap();
    let cfg = OptimizerConfig {
        steps: 200,
        batch_size: 16,
        ..OptimizerConfig::default()
    };
    let out = train(&det, init, &tr, &cfg, 1).unwrap();
    let after = evaluate_map(&det, &out.params, &te, &inf).unwrap();
    assert!(after.map50 > before.map50 + 0.1, "{before:?} -> {after:?}");
}

#[test]
fn empty_training_set_is_an_error() {
    let det = Detector::new(NetworkConfig::default()).unwrap();
    assert!(train(&det, det.init_params(0), &[], &OptimizerConfig::default(), 0).is_err());
}
