use proptest::prelude::*;
use tte_core::certify::{acr, certified_curve, certify, certify_dataset, envelope, radius_grid, SmoothingConfig};
use tte_core::data::Dataset;
use tte_core::model::Linear;
use tte_core::stats::{clopper_pearson_lower, normal_cdf, normal_ppf};
use tte_core::{Architecture, Classifier, EnsembleModel, Tensor};

/// `P[Bin(n, p) ≥ k]` as an explicit sum of pmf terms in log space.
fn tail_by_sum(k: u64, n: u64, p: f64) -> f64 {
    let ln_choose = |j: u64| -> f64 { (1..=j).map(|i| ((n - j + i) as f64 / i as f64).ln()).sum() };
    (k..=n)
        .map(|j| (ln_choose(j) + j as f64 * p.ln() + (n - j) as f64 * (1.0 - p).ln()).exp())
        .sum()
}

fn bisect(mut lo: f64, mut hi: f64, mut below: impl FnMut(f64) -> bool) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if below(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn clopper_pearson_matches_binomial_sum_oracle() {
    for alpha in [0.05, 0.01, 0.001] {
        for n in 1..=40u64 {
            for k in 1..=n {
                let oracle = bisect(0.0, 1.0, |p| tail_by_sum(k, n, p) < alpha);
                let got = clopper_pearson_lower(k, n, alpha).unwrap();
                assert!((got - oracle).abs() < 1e-9, "k={k} n={n} alpha={alpha}: {got} vs {oracle}");
            }
            assert!((clopper_pearson_lower(n, n, alpha).unwrap() - alpha.powf(1.0 / n as f64)).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn ppf_inverts_the_cdf(p in 1e-12f64..1.0 - 1e-12) {
        let oracle = bisect(-40.0, 40.0, |z| normal_cdf(z) < p);
        prop_assert!((normal_ppf(p) - oracle).abs() < 1e-9 * oracle.abs().max(1.0));
    }
}

fn constant(class: usize, dims: usize) -> Linear {
    let mut bias = vec![0.0; 3];
    bias[class] = 1.0;
    Linear::new(Tensor::zeros(&[dims, 3]), Tensor::new(vec![3], bias).unwrap()).unwrap()
}

#[test]
fn constant_classifier_certifies_the_closed_form_radius() {
    let cfg = SmoothingConfig::new(0.5, 7);
    let x = Tensor::full(&[1, 1, 4, 4], 0.3);
    let r = certify(&constant(1, 16), &x, 1, 0, &cfg).unwrap();
    let pa = 0.001f64.powf(1.0 / 1000.0);
    let z = bisect(-40.0, 40.0, |z| normal_cdf(z) < pa);
    assert_eq!(r.prediction, Some(1));
    assert!((r.radius - 0.5 * z).abs() < 1e-6);
    assert!((r.radius - 1.231).abs() < 1e-3);
}

#[test]
fn certification_is_keyed_by_instance_not_order() {
    let m = Classifier::init(Architecture::new(1, 8, 8, 4), 2).unwrap();
    let images = Tensor::from_fn(&[3, 1, 8, 8], |i| ((i * 37) % 11) as f64 / 10.0);
    let ds = Dataset::new(images, vec![0, 1, 2], 4).unwrap();
    let cfg = SmoothingConfig { n: 100, ..SmoothingConfig::new(0.25, 3) };
    let all = certify_dataset(&m, &ds, &cfg).unwrap();
    let single = certify(&m, &ds.images.instance(2), 2, 2, &cfg).unwrap();
    assert_eq!(all[2], single);
}

#[test]
fn identity_wrapper_certifies_identically() {
    let m = Classifier::init(Architecture::new(1, 8, 8, 4), 6).unwrap();
    let images = Tensor::from_fn(&[4, 1, 8, 8], |i| ((i * 13) % 7) as f64 / 6.0);
    let ds = Dataset::new(images, vec![0, 1, 2, 3], 4).unwrap();
    let cfg = SmoothingConfig { n: 200, ..SmoothingConfig::new(0.5, 1) };
    let a = certify_dataset(&m, &ds, &cfg).unwrap();
    let b = certify_dataset(&EnsembleModel::wrap(&m, vec![]), &ds, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(acr(&a).unwrap().to_bits(), acr(&b).unwrap().to_bits());
}

#[test]
fn curves_are_non_increasing_and_bounded_by_their_envelope() {
    let m = Classifier::init(Architecture::new(1, 8, 8, 4), 8).unwrap();
    let images = Tensor::from_fn(&[6, 1, 8, 8], |i| ((i * 29) % 13) as f64 / 12.0);
    let ds = Dataset::new(images, vec![0, 1, 2, 3, 0, 1], 4).unwrap();
    let grid = radius_grid(1.0, 0.1);
    let curves: Vec<_> = [0.12, 0.25, 0.5]
        .iter()
        .map(|&s| {
            let cfg = SmoothingConfig { n: 100, ..SmoothingConfig::new(s, 0) };
            certified_curve(&certify_dataset(&m, &ds, &cfg).unwrap(), &grid).unwrap()
        })
        .collect();
    let env = envelope(&curves).unwrap();
    for c in &curves {
        assert!(c.windows(2).all(|w| w[1].1 <= w[0].1));
        for (p, e) in c.iter().zip(&env) {
            assert!(e.1 >= p.1);
        }
    }
    for (i, e) in env.iter().enumerate() {
        let direct = curves.iter().map(|c| c[i].1).fold(f64::MIN, f64::max);
        assert_eq!(e.1, direct);
    }
}
