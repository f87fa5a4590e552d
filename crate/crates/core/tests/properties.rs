mod support;

use ndarray::Array2;
use permweld_core::align::{apply_permutation, merge_interpolate, weight_matching, AlignConfig, PermutationSet};
use permweld_core::condense::{gradient_distance, GradDistance};
use permweld_core::data::{gen_blobs, mix, Dataset};
use permweld_core::landscape::{barrier, fisher_diagonal, spearman, sweep};
use permweld_core::nnet::{GradBundle, MlpParams, MlpSpec};
use permweld_core::train::evaluate;
use permweld_core::Permutation;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::all_permutations;

fn spec_strategy() -> impl Strategy<Value = MlpSpec> {
    (1usize..=6, proptest::collection::vec(1usize..=8, 1..=3), 2usize..=5, any::<bool>()).prop_map(|(d, hidden, c, bias)| {
        let mut sizes = vec![d];
        sizes.extend(hidden);
        sizes.push(c);
        MlpSpec::new(sizes, bias).unwrap()
    })
}

fn shuffled_set(spec: &MlpSpec, rng: &mut ChaCha8Rng) -> PermutationSet {
    PermutationSet {
        perms: spec
            .hidden_widths()
            .iter()
            .map(|&w| {
                let mut v: Vec<usize> = (0..w).collect();
                v.shuffle(rng);
                Permutation::new(v).unwrap()
            })
            .collect(),
    }
}

fn unit_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f32> {
    Array2::from_shape_fn((n, d), |_| rng.random_range(0.0..1.0))
}

fn labeled(rng: &mut ChaCha8Rng, n: usize, d: usize, c: usize, name: &str) -> Dataset<f32> {
    let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
    Dataset::new(name, unit_batch(rng, n, d), labels, c).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permutation_preserves_function(spec in spec_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = MlpParams::<f32>::init(&spec, seed);
        let pi = shuffled_set(&spec, &mut rng);
        let q = apply_permutation(&p, &pi).unwrap();
        let x = unit_batch(&mut rng, 4, spec.input_dim());
        let diff = (&p.forward(x.view()).unwrap() - &q.forward(x.view()).unwrap()).mapv(f32::abs);
        prop_assert!(diff.iter().all(|&d| d <= 1e-5));
    }

    #[test]
    fn flatten_is_a_bijection(spec in spec_strategy(), seed in any::<u64>()) {
        let p = MlpParams::<f32>::init(&spec, seed);
        let flat = p.flatten();
        prop_assert_eq!(flat.len(), spec.flat_len());
        prop_assert_eq!(MlpParams::unflatten(&spec, &flat).unwrap(), p);
    }

    #[test]
    fn mixture_loss_is_linear(spec in spec_strategy(), seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = MlpParams::<f32>::init(&spec, seed);
        let (d, c) = (spec.input_dim(), spec.num_classes());
        let a = labeled(&mut rng, 5, d, c, "a");
        let b = labeled(&mut rng, 9, d, c, "b");
        let (la, lb) = (evaluate(&p, &a).unwrap().loss, evaluate(&p, &b).unwrap().loss);
        let lab = evaluate(&p, &mix(&a, &b, alpha).unwrap()).unwrap().loss;
        prop_assert!((lab - ((1.0 - alpha) * la + alpha * lb)).abs() <= 1e-7);
    }

    #[test]
    fn spearman_ignores_monotone_transforms(
        xs in proptest::collection::vec(-100.0f64..100.0, 3..20),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ys: Vec<f64> = xs.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        prop_assume!(xs.iter().any(|&v| v != xs[0]));
        let base = spearman(&xs, &ys).unwrap();
        let tx: Vec<f64> = xs.iter().map(|v| (v / 50.0).exp()).collect();
        let ty: Vec<f64> = ys.iter().map(|v| v * v * v + 3.0).collect();
        prop_assert!((spearman(&tx, &ty).unwrap() - base).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&base));
    }

    #[test]
    fn fisher_is_nonnegative_and_aligned(spec in spec_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = MlpParams::<f32>::init(&spec, seed);
        let data = labeled(&mut rng, 6, spec.input_dim(), spec.num_classes(), "f");
        let f = fisher_diagonal(&p, &data, 4, seed).unwrap();
        prop_assert_eq!(f.values.len(), spec.flat_len());
        prop_assert!(f.values.values.iter().all(|&v| v >= 0.0));
        prop_assert_eq!(f.sample_count, 4);
    }

    #[test]
    fn gradient_distance_invariants(spec in spec_strategy(), seed in any::<u64>(), s1 in 0.1f64..10.0, s2 in 0.1f64..10.0) {
        let g = |k: u64| GradBundle { grads: MlpParams::<f64>::init(&spec, k), loss: 0.0, correct: 0 };
        let (a, b) = (g(seed), g(seed.wrapping_add(1)));
        let d = gradient_distance(&a, &b, GradDistance::LayerwiseCosine).unwrap();
        prop_assert!(d >= 0.0);
        let sa = GradBundle { grads: a.grads.map(|v| s1 * v), ..a.clone() };
        let sb = GradBundle { grads: b.grads.map(|v| s2 * v), ..b.clone() };
        let d2 = gradient_distance(&sa, &sb, GradDistance::LayerwiseCosine).unwrap();
        prop_assert!((d - d2).abs() < 1e-10);
        prop_assert!(gradient_distance(&a, &sa, GradDistance::LayerwiseCosine).unwrap() < 1e-10);
    }

    #[test]
    fn sweep_endpoints_and_barrier_identity(spec in spec_strategy(), seed in any::<u64>(), grid in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, c) = (spec.input_dim(), spec.num_classes());
        let a = MlpParams::<f32>::init(&spec, seed);
        let b = MlpParams::<f32>::init(&spec, seed ^ 1);
        let da = labeled(&mut rng, 7, d, c, "a");
        let db = labeled(&mut rng, 4, d, c, "b");
        let m = mix(&da, &db, 0.5).unwrap();
        let r = sweep(&a, &b, &m, grid).unwrap();
        prop_assert_eq!(r.lambdas.len(), grid);
        prop_assert_eq!(r.loss_a[0], evaluate(&a, &da).unwrap().loss);
        prop_assert_eq!(r.acc_b[0], evaluate(&a, &db).unwrap().accuracy);
        prop_assert_eq!(r.loss_b[grid - 1], evaluate(&b, &db).unwrap().loss);
        prop_assert_eq!(r.loss_ab[grid - 1], evaluate(&b, &m).unwrap().loss);
        prop_assert!(r.linearity_error() <= 1e-6);
        prop_assert_eq!(barrier(&a, &a, &m).unwrap(), evaluate(&a, &m).unwrap().loss);
        prop_assert_eq!(merge_interpolate(&a, &b, 0.0).unwrap(), a);
    }
}

/// Exhaustive minimum of `|a - pi(b)|^2` over all permutation sets.
fn exhaustive_min(a: &MlpParams<f64>, b: &MlpParams<f64>) -> f64 {
    let widths = a.spec().hidden_widths().to_vec();
    let p0 = all_permutations(widths[0]);
    let p1 = all_permutations(widths[1]);
    let fa = a.flatten();
    let mut best = f64::INFINITY;
    for x in &p0 {
        for y in &p1 {
            let pi = PermutationSet {
                perms: vec![Permutation::new(x.clone()).unwrap(), Permutation::new(y.clone()).unwrap()],
            };
            let d = apply_permutation(b, &pi).unwrap().flatten().sq_distance(&fa).unwrap();
            best = best.min(d);
        }
    }
    best
}

#[test]
fn weight_matching_is_usually_globally_optimal_on_tiny_nets() {
    let mut hits = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = vec![3, rng.random_range(2..=5), rng.random_range(2..=5), 2];
        let spec = MlpSpec::new(sizes, true).unwrap();
        let a = support::random_params(&spec, seed);
        let b = support::random_params(&spec, seed + 1000);
        let pi = weight_matching(&a, &b, &AlignConfig { seed, ..AlignConfig::default() }).unwrap();
        let got = apply_permutation(&b, &pi).unwrap().flatten().sq_distance(&a.flatten()).unwrap();
        let best = exhaustive_min(&a, &b);
        assert!(got >= best - 1e-12);
        if got <= best + 1e-12 {
            hits += 1;
        }

        let planted = shuffled_set(&spec, &mut rng);
        let pb = apply_permutation(&a, &planted).unwrap();
        let pi = weight_matching(&a, &pb, &AlignConfig { seed, ..AlignConfig::default() }).unwrap();
        let d = apply_permutation(&pb, &pi).unwrap().flatten().sq_distance(&a.flatten()).unwrap();
        assert!(d.sqrt() <= 1e-6, "planted case {seed} not recovered");
    }
    assert!(hits >= 95, "global optimum reached in {hits}/100 cases");
}

#[test]
fn fisher_estimate_concentrates() {
    let data = gen_blobs(4, 400, 2, 0.1, 3).unwrap();
    let spec = MlpSpec::new(vec![2, 8, 4], true).unwrap();
    let p = MlpParams::<f32>::init(&spec, 1);
    let small = fisher_diagonal(&p, &data, 800, 5).unwrap();
    let large = fisher_diagonal(&p, &data, 1600, 5).unwrap();
    let (s, l) = (&small.values.values, &large.values.values);
    let diff: f32 = s.iter().zip(l).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt();
    let norm: f32 = s.iter().map(|a| a * a).sum::<f32>().sqrt();
    assert!(diff <= 0.1 * norm, "relative change {}", diff / norm);
    // entries carrying at least 1% of the mass move by less than 10% each
    let max = s.iter().cloned().fold(0.0f32, f32::max);
    for (a, b) in s.iter().zip(l).filter(|(a, _)| **a >= 0.01 * max) {
        assert!((a - b).abs() <= 0.1 * a, "{a} vs {b}");
    }
}
