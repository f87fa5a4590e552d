//! Loss-landscape diagnostics for a pair of models.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{self, AlignConfig, PermutationSet};
use crate::data::{self, Dataset, EvalSet, MixedDataset};
use crate::error::{Error, Result};
use crate::nnet::{self, FlatVector, GradBundle, MlpParams};
use crate::scalar::Scalar;
use crate::train::evaluate;

const GRAD_CHUNK: usize = 2048;

/// Loss and accuracy along `(1 - lambda) * w_A + lambda * w_B`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub lambdas: Vec<f64>,
    pub loss_a: Vec<f64>,
    pub loss_b: Vec<f64>,
    pub loss_ab: Vec<f64>,
    pub acc_a: Vec<f64>,
    pub acc_b: Vec<f64>,
    pub acc_ab: Vec<f64>,
    pub alpha: f64,
}

impl SweepReport {
    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    pub fn peak_loss_ab(&self) -> f64 {
        self.loss_ab.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest `|L_AB - ((1 - alpha) L_A + alpha L_B)|` over the grid.
    pub fn linearity_error(&self) -> f64 {
        self.loss_ab
            .iter()
            .zip(self.loss_a.iter().zip(&self.loss_b))
            .map(|(ab, (a, b))| (ab - ((1.0 - self.alpha) * a + self.alpha * b)).abs())
            .fold(0.0, f64::max)
    }
}

/// `n` evenly spaced points with exact endpoints 0 and 1.
pub fn lambda_grid(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::invalid(format!("sweep grid needs at least 2 points, got {n}")));
    }
    Ok((0..n).map(|i| if i + 1 == n { 1.0 } else { i as f64 / (n - 1) as f64 }).collect())
}

pub fn sweep<T: Scalar>(
    params_a: &MlpParams<T>,
    params_b: &MlpParams<T>,
    mix: &MixedDataset<'_, T>,
    grid_size: usize,
) -> Result<SweepReport> {
    params_a.check_same_spec(params_b)?;
    let lambdas = lambda_grid(grid_size)?;
    let mut r = SweepReport {
        lambdas: lambdas.clone(),
        loss_a: Vec::new(),
        loss_b: Vec::new(),
        loss_ab: Vec::new(),
        acc_a: Vec::new(),
        acc_b: Vec::new(),
        acc_ab: Vec::new(),
        alpha: mix.alpha,
    };
    for &lambda in &lambdas {
        let merged = align::merge_interpolate(params_a, params_b, lambda)?;
        let (la, aa) = nnet::loss_and_accuracy(&merged, mix.part_a)?;
        let (lb, ab) = nnet::loss_and_accuracy(&merged, mix.part_b)?;
        r.loss_a.push(la);
        r.loss_b.push(lb);
        r.acc_a.push(aa);
        r.acc_b.push(ab);
        r.loss_ab.push((1.0 - mix.alpha) * la + mix.alpha * lb);
        r.acc_ab.push((1.0 - mix.alpha) * aa + mix.alpha * ab);
    }
    Ok(r)
}

/// Mixture loss at the midpoint `(w_A + w_B) / 2`.
pub fn barrier<T: Scalar>(params_a: &MlpParams<T>, params_b: &MlpParams<T>, mix: &MixedDataset<'_, T>) -> Result<f64> {
    let mid = align::merge_interpolate(params_a, params_b, 0.5)?;
    Ok(evaluate(&mid, mix)?.loss)
}

/// Mean-loss gradient over a whole dataset, accumulated chunk by chunk in
/// a fixed order.
pub fn full_gradient<T: Scalar>(params: &MlpParams<T>, dataset: &Dataset<T>) -> Result<GradBundle<T>> {
    nnet::check_dataset(params, dataset)?;
    let n = dataset.len();
    let mut acc = vec![0.0f64; params.spec().flat_len()];
    let (mut loss, mut correct) = (0.0, 0);
    for start in (0..n).step_by(GRAD_CHUNK) {
        let end = (start + GRAD_CHUNK).min(n);
        let x = dataset.features.slice(ndarray::s![start..end, ..]);
        let g = params.loss_and_grad(x, &dataset.labels[start..end])?;
        let w = (end - start) as f64 / n as f64;
        for (a, v) in acc.iter_mut().zip(g.grads.flatten().values) {
            *a += w * v.as_f64();
        }
        loss += w * g.loss;
        correct += g.correct;
    }
    let flat = FlatVector {
        values: acc.into_iter().map(T::of).collect(),
    };
    Ok(GradBundle {
        grads: MlpParams::unflatten(params.spec(), &flat)?,
        loss,
        correct,
    })
}

/// `((w_B - w_A) . g_A + (w_A - w_B) . g_B) / 2` on flat vectors.
pub fn sharpness_from_gradients<T: Scalar>(
    w_a: &FlatVector<T>,
    w_b: &FlatVector<T>,
    g_a: &FlatVector<T>,
    g_b: &FlatVector<T>,
) -> Result<f64> {
    let n = w_a.len();
    if w_b.len() != n || g_a.len() != n || g_b.len() != n {
        return Err(Error::dim("flat vectors of unequal length"));
    }
    let s: f64 = (0..n)
        .map(|i| {
            let d = w_b.values[i].as_f64() - w_a.values[i].as_f64();
            d * g_a.values[i].as_f64() - d * g_b.values[i].as_f64()
        })
        .sum();
    Ok(0.5 * s)
}

/// Directional derivative of each model's loss toward the other model,
/// averaged over the pair; gradients use the full datasets.
pub fn sharpness<T: Scalar>(
    params_a: &MlpParams<T>,
    params_b: &MlpParams<T>,
    data_a: &Dataset<T>,
    data_b: &Dataset<T>,
) -> Result<f64> {
    params_a.check_same_spec(params_b)?;
    let ga = full_gradient(params_a, data_a)?;
    let gb = full_gradient(params_b, data_b)?;
    sharpness_from_gradients(&params_a.flatten(), &params_b.flatten(), &ga.grads.flatten(), &gb.grads.flatten())
}

/// Squared Euclidean distance of the flat vectors and its per-parameter mean.
pub fn l2_distance<T: Scalar>(params_a: &MlpParams<T>, params_b: &MlpParams<T>) -> Result<(f64, f64)> {
    params_a.check_same_spec(params_b)?;
    let raw = params_a.flatten().sq_distance(&params_b.flatten())?;
    Ok((raw, raw / params_a.spec().flat_len() as f64))
}

/// Empirical diagonal Fisher information in the flat layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherDiagonal<T> {
    pub values: FlatVector<T>,
    pub source: String,
    pub sample_count: usize,
}

/// Mean over sampled examples of the squared per-example gradient of
/// `-log p(y|x)` at the true label. Each part of the set contributes its
/// first `max_samples` rows of a seeded shuffle, weighted by its mixture
/// weight.
pub fn fisher_diagonal<T: Scalar>(
    params: &MlpParams<T>,
    set: &impl EvalSet<T>,
    max_samples: usize,
    seed: u64,
) -> Result<FisherDiagonal<T>> {
    if max_samples == 0 {
        return Err(Error::invalid("max_samples must be at least 1"));
    }
    let mut acc = vec![0.0f64; params.spec().flat_len()];
    let mut names = Vec::new();
    let mut count = 0;
    for (p, (part, weight)) in set.parts().into_iter().enumerate() {
        nnet::check_dataset(params, part)?;
        let mut order: Vec<usize> = (0..part.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(p as u64)));
        order.truncate(max_samples);
        let k = order.len();
        let mut part_acc = vec![0.0f64; acc.len()];
        for chunk in order.chunks(GRAD_CHUNK) {
            let sub = part.select(chunk);
            let sq = params.squared_sample_gradients(sub.features.view(), &sub.labels)?;
            for (a, v) in part_acc.iter_mut().zip(sq.flatten().values) {
                *a += v.as_f64();
            }
        }
        for (a, v) in acc.iter_mut().zip(part_acc) {
            *a += weight * v / k as f64;
        }
        names.push(part.name.clone());
        count += k;
    }
    Ok(FisherDiagonal {
        values: FlatVector {
            values: acc.into_iter().map(T::of).collect(),
        },
        source: names.join("+"),
        sample_count: count,
    })
}

/// Cosine similarity of two Fisher diagonals.
pub fn importance_overlap<T: Scalar>(fa: &FisherDiagonal<T>, fb: &FisherDiagonal<T>) -> Result<f64> {
    fa.values.cosine(&fb.values)
}

/// Cosine similarity of two flattened weight vectors.
pub fn weight_overlap<T: Scalar>(params_a: &MlpParams<T>, params_b: &MlpParams<T>) -> Result<f64> {
    params_a.check_same_spec(params_b)?;
    params_a.flatten().cosine(&params_b.flatten())
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::dim(format!("sequences of length {} and {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("rank correlation needs at least 2 points"));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::invalid("rank correlation input contains NaN"));
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("rank correlation is undefined for a constant sequence"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeMetrics {
    pub l2_raw: f64,
    pub l2_per_param: f64,
    /// Training-mixture loss at the midpoint.
    pub barrier: f64,
    pub sharpness: f64,
    pub flipped_acc: f64,
    /// Best test-mixture accuracy over the sweep grid.
    pub best_lambda_acc: f64,
    /// Test-mixture accuracy at the midpoint.
    pub midpoint_acc: f64,
}

/// Metrics of merging `params_a` with the already permuted `params_b`; the
/// returned sweep runs over the test mixture.
pub fn merge_metrics<T: Scalar>(
    params_a: &MlpParams<T>,
    params_b: &MlpParams<T>,
    train: &MixedDataset<'_, T>,
    test: &MixedDataset<'_, T>,
    grid_size: usize,
) -> Result<(MergeMetrics, SweepReport)> {
    let (l2_raw, l2_per_param) = l2_distance(params_a, params_b)?;
    let report = sweep(params_a, params_b, test, grid_size)?;
    let mid = align::merge_interpolate(params_a, params_b, 0.5)?;
    let metrics = MergeMetrics {
        l2_raw,
        l2_per_param,
        barrier: barrier(params_a, params_b, train)?,
        sharpness: sharpness(params_a, params_b, train.part_a, train.part_b)?,
        flipped_acc: data::flipped_accuracy(params_a, params_b, test.part_a, test.part_b)?,
        best_lambda_acc: report.acc_ab.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        midpoint_acc: evaluate(&mid, test)?.accuracy,
    };
    Ok((metrics, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationConfig {
    pub betas: Vec<f64>,
    pub sweep_caps: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            betas: vec![0.0, 0.001, 0.01, 0.1, 0.5, 1.0],
            sweep_caps: vec![2, 5, 300],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationMember {
    pub permutation: PermutationSet,
    pub metrics: MergeMetrics,
    /// Test-mixture loss at the midpoint.
    pub test_loss: f64,
    /// Grid points `(beta, sweep cap, seed)` that produced this permutation.
    pub sources: Vec<(f64, usize, u64)>,
}

/// Runs flat weight matching over the `beta x sweep cap x seed` grid,
/// deduplicates the resulting permutation sets (first occurrence in grid
/// order wins) and evaluates each unique one.
pub fn generate_permutation_population<T: Scalar>(
    params_a: &MlpParams<T>,
    params_b: &MlpParams<T>,
    train: &MixedDataset<'_, T>,
    test: &MixedDataset<'_, T>,
    config: &PopulationConfig,
) -> Result<Vec<PopulationMember>> {
    if config.betas.is_empty() || config.sweep_caps.is_empty() || config.seeds.is_empty() {
        return Err(Error::invalid("population grids must be nonempty"));
    }
    let grad_b = full_gradient(params_b, train.part_b)?;
    let grid: Vec<(f64, usize, u64)> = config
        .betas
        .iter()
        .flat_map(|&b| config.sweep_caps.iter().flat_map(move |&c| config.seeds.iter().map(move |&s| (b, c, s))))
        .collect();
    let perms: Vec<PermutationSet> = grid
        .par_iter()
        .map(|&(beta, cap, seed)| {
            let cfg = AlignConfig {
                wm_max_sweeps: cap,
                fwm_beta: beta,
                seed,
                ..AlignConfig::default()
            };
            align::flat_weight_matching(params_a, params_b, &grad_b, &cfg)
        })
        .collect::<Result<_>>()?;

    let mut unique: Vec<(PermutationSet, Vec<(f64, usize, u64)>)> = Vec::new();
    for (pi, src) in perms.into_iter().zip(grid) {
        match unique.iter_mut().find(|(p, _)| *p == pi) {
            Some((_, sources)) => sources.push(src),
            None => unique.push((pi, vec![src])),
        }
    }
    unique
        .into_par_iter()
        .map(|(permutation, sources)| {
            let pb = align::apply_permutation(params_b, &permutation)?;
            let (metrics, _) = merge_metrics(params_a, &pb, train, test, 3)?;
            let mid = align::merge_interpolate(params_a, &pb, 0.5)?;
            Ok(PopulationMember {
                permutation,
                metrics,
                test_loss: evaluate(&mid, test)?.loss,
                sources,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{Layer, MlpSpec};
    use ndarray::array;

    #[test]
    fn quadratic_sharpness() {
        let f = |v: f64| FlatVector { values: vec![v] };
        let s = sharpness_from_gradients(&f(0.5), &f(1.5), &f(2.0 * 0.5), &f(2.0 * (1.5 - 2.0))).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_hand_example() {
        let spec = MlpSpec::new(vec![1, 1], true).unwrap();
        let p = |w: f64, b: f64| {
            MlpParams::from_layers(
                &spec,
                vec![Layer {
                    weight: array![[w]],
                    bias: Some(array![b]),
                }],
            )
            .unwrap()
        };
        assert_eq!(l2_distance(&p(1.0, 2.0), &p(2.0, 2.0)).unwrap(), (1.0, 0.5));
        assert_eq!(l2_distance(&p(1.0, 2.0), &p(1.0, 2.0)).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 8.0, 27.0, 64.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        // ties: ranks (1.5, 1.5, 3) vs (1, 2, 3)
        let r = spearman(&[5.0, 5.0, 7.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 0.8660254037844386).abs() < 1e-12);
    }

    #[test]
    fn grid_endpoints() {
        let g = lambda_grid(25).unwrap();
        assert_eq!(g.first(), Some(&0.0));
        assert_eq!(g.last(), Some(&1.0));
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(g[12], 0.5);
        assert!(lambda_grid(1).is_err());
    }

    #[test]
    fn fisher_logistic_closed_form() {
        // One weight, no bias, two classes with logits (w x, 0): the
        // gradient of -log p(y) w.r.t. w is (p - y) x.
        let spec = MlpSpec::new(vec![1, 2], false).unwrap();
        let params = MlpParams::from_layers(
            &spec,
            vec![Layer {
                weight: array![[0.7], [0.0]],
                bias: None,
            }],
        )
        .unwrap();
        let x = 0.6;
        let data = Dataset::new("one", array![[x]], vec![0], 2).unwrap();
        let f = fisher_diagonal(&params, &data, 10, 0).unwrap();
        let p = 1.0 / (1.0 + (-0.7f64 * x).exp());
        let expected = (p - 1.0).powi(2) * x * x;
        assert!((f.values.values[0] - expected).abs() < 1e-12);
        assert_eq!(f.sample_count, 1);
    }
}
