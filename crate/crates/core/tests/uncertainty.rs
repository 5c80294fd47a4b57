use mdal::detector::gmm::{softmax, AnchorGmm, GmmParams};
use mdal::detector::HeadVariant;
use mdal::uncertainty::{anchor_uncertainty, efficient_cls_aleatoric, mixture_uncertainty, ClassReduction};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};

fn normalized(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

prop_compose! {
    fn arb_mixture(max_k: usize, dim: usize)(k in 1..=max_k)(
        w in prop::collection::vec(0.01f64..1.0, k),
        means in prop::collection::vec(-5.0f64..5.0, k * dim),
        vars in prop::collection::vec(0.001f64..0.999, k * dim),
    ) -> GmmParams {
        GmmParams { dim, weights: normalized(&w), means, variances: Some(vars) }
    }
}

#[test]
fn total_variance_matches_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = 200_000;
    for k in [1, 2, 4, 8] {
        for _ in 0..5 {
            let w = normalized(&(0..k).map(|_| rng.gen_range(0.05..1.0)).collect::<Vec<_>>());
            let mu: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let var: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..0.99)).collect();
            let g = GmmParams::scalar(w.clone(), mu.clone(), var.clone());
            let u = mixture_uncertainty(&g);
            let total = u.aleatoric[0] + u.epistemic;
            let pick = WeightedIndex::new(&w).unwrap();
            let xs: Vec<f64> = (0..n)
                .map(|_| {
                    let j = pick.sample(&mut rng);
                    Normal::new(mu[j], var[j].sqrt()).unwrap().sample(&mut rng)
                })
                .collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let dev2: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
            let emp = dev2.iter().sum::<f64>() / (n - 1) as f64;
            let m4 = dev2.iter().map(|d| d * d).sum::<f64>() / n as f64;
            let se = ((m4 - emp * emp) / n as f64).sqrt();
            assert!((emp - total).abs() <= 5.0 * se, "K={k}: {emp} vs {total} (se {se})");
        }
    }
}

#[test]
fn two_component_example() {
    let u = mixture_uncertainty(&GmmParams::scalar(vec![0.5, 0.5], vec![0.0, 2.0], vec![1.0, 1.0]));
    assert_eq!((u.aleatoric[0], u.epistemic), (1.0, 1.0));
}

proptest! {
    #[test]
    fn single_component_has_zero_epistemic(m in -10.0f64..10.0, v in 0.001f64..0.999) {
        let u = mixture_uncertainty(&GmmParams::scalar(vec![1.0], vec![m], vec![v]));
        prop_assert_eq!(u.epistemic, 0.0);
        prop_assert_eq!(u.aleatoric[0], v);
    }

    #[test]
    fn shifting_means_changes_nothing(g in arb_mixture(8, 3), shift in -50.0f64..50.0) {
        let base = mixture_uncertainty(&g);
        let moved = GmmParams { means: g.means.iter().map(|m| m + shift).collect(), ..g.clone() };
        let u = mixture_uncertainty(&moved);
        prop_assert!((u.epistemic - base.epistemic).abs() <= 1e-9 * (1.0 + base.epistemic + shift * shift));
        prop_assert_eq!(u.aleatoric, base.aleatoric);
    }

    #[test]
    fn component_order_is_irrelevant(g in arb_mixture(8, 2), seed in any::<u64>()) {
        let k = g.components();
        let mut perm: Vec<usize> = (0..k).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut ChaCha8Rng::seed_from_u64(seed));
        let pick = |v: &[f64], d: usize| perm.iter().flat_map(|&j| v[j * d..(j + 1) * d].to_vec()).collect::<Vec<_>>();
        let p = GmmParams {
            dim: g.dim,
            weights: pick(&g.weights, 1),
            means: pick(&g.means, g.dim),
            variances: g.variances.as_ref().map(|v| pick(v, g.dim)),
        };
        let (a, b) = (mixture_uncertainty(&g), mixture_uncertainty(&p));
        prop_assert!((a.epistemic - b.epistemic).abs() < 1e-10);
        for (x, y) in a.aleatoric.iter().zip(&b.aleatoric) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn uncertainties_are_non_negative(g in arb_mixture(8, 4)) {
        let u = mixture_uncertainty(&g);
        prop_assert!(u.epistemic >= 0.0);
        prop_assert!(u.aleatoric.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn efficient_covariance_is_psd_with_expected_diagonal(
        k in 1usize..5,
        c in 2usize..7,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = normalized(&(0..k).map(|_| rng.gen_range(0.05..1.0)).collect::<Vec<_>>());
        let probs: Vec<Vec<f64>> = (0..k)
            .map(|_| softmax(&(0..c).map(|_| rng.gen_range(-4.0..4.0)).collect::<Vec<_>>()))
            .collect();
        let m = efficient_cls_aleatoric(&w, &probs).unwrap();
        for p in 0..c {
            let want: f64 = w.iter().zip(&probs).map(|(pi, q)| pi * q[p] * (1.0 - q[p])).sum();
            prop_assert!((m[p * c + p] - want).abs() <= 1e-12);
            for q in 0..c {
                prop_assert!((m[p * c + q] - m[q * c + p]).abs() <= 1e-15);
            }
        }
        for _ in 0..20 {
            let x: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let quad: f64 = (0..c).flat_map(|i| (0..c).map(move |j| (i, j))).map(|(i, j)| x[i] * m[i * c + j] * x[j]).sum();
            prop_assert!(quad >= -1e-12, "xᵀMx = {}", quad);
        }
    }
}

#[test]
fn efficient_covariance_special_cases() {
    let one_hot = efficient_cls_aleatoric(&[0.3, 0.7], &[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
    assert!(one_hot.iter().all(|v| *v == 0.0));
    let half = efficient_cls_aleatoric(&[1.0], &[vec![0.5, 0.5]]).unwrap();
    assert_eq!(half[0], 0.25);
    assert_eq!(half[3], 0.25);
    assert!(efficient_cls_aleatoric(&[1.0], &[vec![0.6, 0.6]]).is_err());
    assert!(efficient_cls_aleatoric(&[0.5, 0.5], &[vec![1.0, 0.0]]).is_err());
}

fn random_anchor(rng: &mut ChaCha8Rng, k: usize, c: usize, full: bool) -> AnchorGmm {
    let mut scalar = || {
        GmmParams::scalar(
            normalized(&(0..k).map(|_| rng.gen_range(0.05..1.0)).collect::<Vec<_>>()),
            (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            (0..k).map(|_| rng.gen_range(0.01..0.99)).collect(),
        )
    };
    let loc = [scalar(), scalar(), scalar(), scalar()];
    let cls = GmmParams {
        dim: c,
        weights: normalized(&(0..k).map(|_| rng.gen_range(0.05..1.0)).collect::<Vec<_>>()),
        means: (0..k * c).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        variances: full.then(|| (0..k * c).map(|_| rng.gen_range(0.01..0.99)).collect()),
    };
    AnchorGmm { loc, cls }
}

/// Direct evaluation of the four per-object values, loop by loop.
fn quad_bruteforce(a: &AnchorGmm, class: usize, full: bool) -> [f64; 4] {
    let mut al_b = f64::MIN;
    let mut ep_b = f64::MIN;
    for g in &a.loc {
        let v = g.variances.as_ref().unwrap();
        let mbar: f64 = (0..g.components()).map(|k| g.weights[k] * g.means[k]).sum();
        al_b = al_b.max((0..g.components()).map(|k| g.weights[k] * v[k]).sum());
        ep_b = ep_b.max((0..g.components()).map(|k| g.weights[k] * (g.means[k] - mbar).powi(2)).sum());
    }
    let c = a.cls.dim;
    let k_n = a.cls.components();
    let vecs: Vec<Vec<f64>> = (0..k_n)
        .map(|k| {
            let m = a.cls.means[k * c..(k + 1) * c].to_vec();
            if full {
                m
            } else {
                let e: Vec<f64> = m.iter().map(|x| x.exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|x| x / s).collect()
            }
        })
        .collect();
    let pi = &a.cls.weights;
    let al_c = if full {
        let v = a.cls.variances.as_ref().unwrap();
        (0..k_n).map(|k| pi[k] * v[k * c + class]).sum()
    } else {
        (0..k_n).map(|k| pi[k] * vecs[k][class] * (1.0 - vecs[k][class])).sum()
    };
    let mbar: Vec<f64> = (0..c).map(|p| (0..k_n).map(|k| pi[k] * vecs[k][p]).sum()).collect();
    let ep_c = (0..k_n)
        .map(|k| pi[k] * (0..c).map(|p| (vecs[k][p] - mbar[p]).powi(2)).sum::<f64>())
        .sum();
    [al_b, ep_b, al_c, ep_c]
}

#[test]
fn object_uncertainties_match_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (head, full) in [(HeadVariant::FullGmm, true), (HeadVariant::Efficient, false)] {
        for _ in 0..300 {
            let k = rng.gen_range(1..=6);
            let c = rng.gen_range(2..=6);
            let a = random_anchor(&mut rng, k, c, full);
            let class = rng.gen_range(1..c);
            let got = anchor_uncertainty(&a, class, head, ClassReduction::PredictedClass).as_array();
            let want = quad_bruteforce(&a, class, full);
            for (x, y) in got.iter().zip(want) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{got:?} vs {want:?}");
            }
            let max = anchor_uncertainty(&a, class, head, ClassReduction::MaxOverClasses);
            let best = (1..c).chain([0]).map(|p| quad_bruteforce(&a, p, full)[2]).fold(f64::MIN, f64::max);
            assert!((max.al_c - best).abs() <= 1e-12);
        }
    }
}
