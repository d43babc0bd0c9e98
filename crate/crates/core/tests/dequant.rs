mod common;

use common::{quad_simplex2, quad_simplex3, trigamma_series};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use simplex_flow::dequant::*;
use simplex_flow::geometry::{aitchison_norm, ilr, Composition};
use simplex_flow::special::trigamma;

fn mix(lambda: f64, k: usize, eps: &[f64]) -> Vec<f64> {
    let mut x: Vec<f64> = eps.iter().map(|e| (1.0 - lambda) * e).collect();
    x[k] += lambda;
    x
}

#[test]
fn argmax_survives_adversarial_noise() {
    // x_k >= lambda > 1/2 >= 1 - lambda >= x_j for every eps in the closed
    // simplex; the worst cases put all the noise on one other vertex
    for parts in [2usize, 3, 5, 16] {
        let mut noises: Vec<Vec<f64>> = Vec::new();
        for j in 0..parts {
            let mut e = vec![0.0; parts];
            e[j] = 1.0;
            noises.push(e);
            for i in j + 1..parts {
                let mut e = vec![0.0; parts];
                e[i] = 0.5;
                e[j] = 0.5;
                noises.push(e);
            }
        }
        noises.push(vec![1.0 / parts as f64; parts]);
        for lambda in [0.5 + 1e-12, 0.500_001, 0.51, 0.75, 0.99] {
            for k in 0..parts {
                for eps in &noises {
                    let x = mix(lambda, k, eps);
                    assert_eq!(argmax_category(&x), k, "K={parts} lambda={lambda} eps={eps:?}");
                    let margin = x[k] - x.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, v)| *v).fold(0.0, f64::max);
                    assert!(margin >= 2.0 * lambda - 1.0 - 1e-15);
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn argmax_recovers_category_above_half(
        w in prop::collection::vec(0.0f64..1.0, 2..12),
        lambda in 0.500_001f64..0.999,
        pick in any::<prop::sample::Index>(),
    ) {
        let total: f64 = w.iter().sum();
        prop_assume!(total > 0.0);
        let eps: Vec<f64> = w.iter().map(|v| v / total).collect();
        let k = pick.index(eps.len());
        prop_assert_eq!(argmax_category(&mix(lambda, k, &eps)), k);
    }
}

#[test]
fn argmax_recovery_at_half_over_a_million_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let cfg = InterpolationConfig::new(0.5, 1.0).unwrap();
    let p = CategoricalDistribution::new(vec![0.2, 0.3, 0.5]).unwrap();
    let mut misses = 0usize;
    for _ in 0..1_000_000 {
        let k = p.sample(&mut rng);
        let x = interpolate(k, 3, &cfg, &mut rng).unwrap();
        misses += usize::from(argmax_category(x.values()) != k);
    }
    assert_eq!(misses, 0);
}

#[test]
fn special_functions_match_series() {
    for a in [0.3, 1.0, 2.5, 10.0, 100.0] {
        let oracle = trigamma_series(a, 20_000);
        assert!((trigamma(a) - oracle).abs() < 1e-10 * oracle.max(1.0), "a={a}");
    }
    assert!((trigamma(1.0) - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-12);
}

#[test]
fn ilr_noise_covariance_is_isotropic() {
    let n = 100_000;
    let parts = 4;
    let d = parts - 1;
    for (seed, alpha) in [(31u64, 1.0), (32, 10.0), (33, 100.0)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let eps = sample_symmetric_dirichlet(alpha, parts, &mut rng).unwrap();
                ilr(&eps).unwrap().0.into_inner()
            })
            .collect();
        let mean: Vec<f64> = (0..d).map(|i| zs.iter().map(|z| z[i]).sum::<f64>() / n as f64).collect();
        let target = trigamma_series(alpha, 20_000);
        for i in 0..d {
            for j in 0..d {
                let prods: Vec<f64> = zs.iter().map(|z| (z[i] - mean[i]) * (z[j] - mean[j])).collect();
                let cov = prods.iter().sum::<f64>() / (n - 1) as f64;
                let var = prods.iter().map(|p| (p - cov).powi(2)).sum::<f64>() / (n - 1) as f64;
                let sigma = (var / n as f64).sqrt();
                let want = if i == j { target } else { 0.0 };
                assert!((cov - want).abs() < 3.0 * sigma, "alpha={alpha} ({i},{j}): {cov} vs {want}, sigma {sigma}");
            }
        }
    }
}

#[test]
fn component_density_integrates_to_one() {
    for (lambda, alpha) in [(0.5, 1.0), (0.5, 10.0), (0.75, 2.0), (0.9, 5.0)] {
        for k in 0..2 {
            let mass = quad_simplex2(|x| component_logpdf_with(x, k, lambda, &[alpha; 2]).unwrap().exp(), 100_000);
            assert!((mass - 1.0).abs() < 1e-3, "K=2 lambda={lambda} alpha={alpha} k={k}: {mass}");
        }
    }
    // n is chosen so the support edge x_k = lambda falls on grid lines
    for (lambda, alpha) in [(0.5, 1.0), (0.5, 5.0), (0.75, 3.0)] {
        for k in 0..3 {
            let mass = quad_simplex3(|x| component_logpdf_with(x, k, lambda, &[alpha; 3]).unwrap().exp(), 1200);
            assert!((mass - 1.0).abs() < 1e-3, "K=3 lambda={lambda} alpha={alpha} k={k}: {mass}");
        }
    }
}

#[test]
fn mixture_density_splits_by_region() {
    let p = CategoricalDistribution::new(vec![0.2, 0.3, 0.5]).unwrap();
    let cfg = InterpolationConfig::new(0.6, 5.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..200 {
        let k = p.sample(&mut rng);
        let x = interpolate(k, 3, &cfg, &mut rng).unwrap();
        let direct = p.probs()[k].ln() + component_logpdf(&x, k, &cfg).unwrap();
        assert!((mixture_logpdf(&x, &p, &cfg).unwrap() - direct).abs() < 1e-12);
    }
}

#[test]
fn total_variation_is_bounded_by_density_distance() {
    let p = [0.2, 0.3, 0.5];
    let (lambda, alpha) = (0.5, 5.0);
    let n = 1000;
    let q = |x: &[f64]| -> f64 {
        (0..3).map(|k| p[k] * component_logpdf_with(x, k, lambda, &[alpha; 3]).unwrap().exp()).sum()
    };
    let bumps: [fn(&[f64]) -> f64; 2] =
        [|x| 0.4 * (7.0 * x[0]).sin() * (4.0 * x[1]).cos(), |x| if x[2] > 0.8 { 0.9 } else { -0.2 }];
    for bump in bumps {
        let z = quad_simplex3(|x| q(x) * (1.0 + bump(x)), n);
        let mut p_hat = [0.0; 3];
        for (k, slot) in p_hat.iter_mut().enumerate() {
            *slot = quad_simplex3(|x| if argmax_category(x) == k { q(x) * (1.0 + bump(x)) / z } else { 0.0 }, n);
        }
        let l1 = quad_simplex3(|x| (q(x) * (1.0 + bump(x)) / z - q(x)).abs(), n);
        let tv = 0.5 * p.iter().zip(&p_hat).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(tv > 1e-4);
        assert!(tv <= 0.5 * l1 + 1e-9, "tv {tv} vs half l1 {}", 0.5 * l1);
    }
}

#[test]
fn dirichlet_draws_have_the_right_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (alpha, parts, n) = (0.3, 5, 200_000);
    let mut first = Vec::with_capacity(n);
    for _ in 0..n {
        first.push(sample_symmetric_dirichlet(alpha, parts, &mut rng).unwrap().values()[0]);
    }
    let mean = common::mean(&first);
    let var = first.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let a0 = alpha * parts as f64;
    let want_var = (1.0 / parts as f64) * (1.0 - 1.0 / parts as f64) / (a0 + 1.0);
    assert!((mean - 0.2).abs() < 4.0 * (want_var / n as f64).sqrt());
    assert!((var / want_var - 1.0).abs() < 0.02);
    let lg: Vec<f64> = (0..n).map(|_| sample_ln_gamma(1e-3, &mut rng)).collect();
    assert!(lg.iter().all(|v| v.is_finite()));
}

#[test]
fn mean_norm_matches_direct_evaluation() {
    for parts in [2, 3, 8, 64] {
        for lambda in [0.5, 0.75, 0.99] {
            let mu = mean_composition(1 % parts, lambda, parts).unwrap();
            let want = aitchison_norm(&mu);
            assert!((mean_aitchison_norm(lambda, parts).unwrap() - want).abs() < 1e-12 * want.max(1.0));
        }
    }
    let mu = mean_composition(0, 0.5, 2).unwrap();
    assert_eq!(mu, Composition::new(vec![0.75, 0.25]).unwrap());
}

#[test]
fn degenerate_parameters_are_rejected() {
    let vertex = InterpolationConfig::new(1.0, 1.0).unwrap();
    assert!(interpolate(0, 3, &vertex, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    assert!(InterpolationConfig::new(0.0, 1.0).is_err());
    assert!(sample_symmetric_dirichlet(0.0, 3, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    assert!(mean_aitchison_norm(1.0, 3).is_err());
    let cfg = InterpolationConfig::deterministic(0.5).unwrap();
    assert!(component_logpdf(&Composition::uniform(3).unwrap(), 0, &cfg).is_err());
}
