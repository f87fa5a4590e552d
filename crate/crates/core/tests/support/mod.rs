//! Reference implementations used as test oracles. Nothing here shares code
//! with the library's numeric paths.
#![allow(dead_code)]

use permweld_core::condense::GradDistance;
use permweld_core::nnet::{FlatVector, GradBundle, MlpParams, MlpSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain-loop network in `f64` over the canonical flat layout.
pub struct RefNet<'a> {
    pub sizes: &'a [usize],
    pub bias: bool,
}

impl RefNet<'_> {
    /// Logits and the hidden pre-activations of one example.
    pub fn forward(&self, flat: &[f64], x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut off = 0;
        let mut h = x.to_vec();
        let mut pres = Vec::new();
        let last = self.sizes.len() - 2;
        for l in 0..self.sizes.len() - 1 {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &flat[off..off + fan_in * fan_out];
            off += fan_in * fan_out;
            let mut z = vec![0.0; fan_out];
            for (i, zi) in z.iter_mut().enumerate() {
                for k in 0..fan_in {
                    *zi += w[i * fan_in + k] * h[k];
                }
            }
            if self.bias {
                for (i, zi) in z.iter_mut().enumerate() {
                    *zi += flat[off + i];
                }
                off += fan_out;
            }
            if l < last {
                pres.push(z.clone());
                h = z.iter().map(|&v| v.max(0.0)).collect();
            } else {
                h = z;
            }
        }
        (h, pres)
    }

    pub fn loss(&self, flat: &[f64], xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        let mut total = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let (z, _) = self.forward(flat, x);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - z[y];
        }
        total / xs.len() as f64
    }

    /// ReLU on/off pattern over the whole batch.
    pub fn pattern(&self, flat: &[f64], xs: &[Vec<f64>]) -> Vec<bool> {
        xs.iter()
            .flat_map(|x| self.forward(flat, x).1.into_iter().flatten().map(|v| v > 0.0))
            .collect()
    }

    /// Per-example gradient of the loss w.r.t. the flat parameters, by the
    /// chain rule written out with loops.
    pub fn grad(&self, flat: &[f64], xs: &[Vec<f64>], ys: &[usize]) -> Vec<f64> {
        let n = xs.len() as f64;
        let mut g = vec![0.0; flat.len()];
        let layers = self.sizes.len() - 1;
        let mut offsets = Vec::new();
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.sizes[l] * self.sizes[l + 1] + if self.bias { self.sizes[l + 1] } else { 0 };
        }
        for (x, &y) in xs.iter().zip(ys) {
            let (z, pres) = self.forward(flat, x);
            let mut acts = vec![x.clone()];
            for p in &pres {
                acts.push(p.iter().map(|&v| v.max(0.0)).collect());
            }
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
            let mut delta: Vec<f64> = z.iter().map(|v| (v - m).exp() / s).collect();
            delta[y] -= 1.0;
            for l in (0..layers).rev() {
                let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
                let o = offsets[l];
                for i in 0..fan_out {
                    for k in 0..fan_in {
                        g[o + i * fan_in + k] += delta[i] * acts[l][k] / n;
                    }
                    if self.bias {
                        g[o + fan_in * fan_out + i] += delta[i] / n;
                    }
                }
                if l > 0 {
                    let mut below = vec![0.0; fan_in];
                    for (k, b) in below.iter_mut().enumerate() {
                        if pres[l - 1][k] > 0.0 {
                            for i in 0..fan_out {
                                *b += flat[o + i * fan_in + k] * delta[i];
                            }
                        }
                    }
                    delta = below;
                }
            }
        }
        g
    }

    /// Per-layer flat index ranges (W then b).
    pub fn layer_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut off = 0;
        for l in 0..self.sizes.len() - 1 {
            let len = self.sizes[l] * self.sizes[l + 1] + if self.bias { self.sizes[l + 1] } else { 0 };
            out.push(off..off + len);
            off += len;
        }
        out
    }

    /// Layerwise cosine distance between two flat gradients.
    pub fn cosine_distance(&self, g: &[f64], r: &[f64]) -> f64 {
        self.layer_ranges()
            .into_iter()
            .map(|rg| {
                let (a, b) = (&g[rg.clone()], &r[rg]);
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
                }
            })
            .sum()
    }
}

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    d / na.max(nb).max(floor)
}

/// Random spec with every size in `1..=max_width`, at least one hidden layer
/// and two classes.
pub fn random_spec(rng: &mut ChaCha8Rng, max_width: usize, max_hidden: usize) -> MlpSpec {
    let hidden = rng.random_range(1..=max_hidden);
    let mut sizes = vec![rng.random_range(1..=max_width)];
    for _ in 0..hidden {
        sizes.push(rng.random_range(1..=max_width));
    }
    sizes.push(rng.random_range(2..=max_width.max(2)));
    MlpSpec::new(sizes, rng.random_bool(0.8)).unwrap()
}

/// Init with nonzero biases so that bias gradients are exercised.
pub fn random_params(spec: &MlpSpec, seed: u64) -> MlpParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    let mut flat = MlpParams::<f64>::init(spec, seed).flatten();
    for v in flat.values.iter_mut() {
        *v += 0.1 * rng.random_range(-1.0..1.0);
    }
    MlpParams::unflatten(spec, &flat).unwrap()
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, classes: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let xs = (0..n).map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let ys = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (xs, ys)
}

pub fn to_array(xs: &[Vec<f64>]) -> ndarray::Array2<f64> {
    let d = xs[0].len();
    ndarray::Array2::from_shape_fn((xs.len(), d), |(i, j)| xs[i][j])
}

/// Optimum of `sum_i m[i][p[i]]` over all permutations (maximize).
pub fn brute_force_max(m: &[Vec<f64>]) -> f64 {
    fn go(m: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == m.len() {
            *best = best.max(acc);
            return;
        }
        for j in 0..m.len() {
            if !used[j] {
                used[j] = true;
                go(m, row + 1, used, acc + m[row][j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::NEG_INFINITY;
    go(m, 0, &mut vec![false; m.len()], 0.0, &mut best);
    best
}

/// All permutations of `0..n` in lexicographic order.
pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for j in 0..n {
            if !prefix.contains(&j) {
                prefix.push(j);
                go(prefix, n, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), n, &mut out);
    out
}

pub const PARAM_STEP: f64 = 1e-3;
pub const INPUT_STEP: f64 = 1e-4;

/// Worst relative error of the analytic parameter gradient against central
/// differences of the reference loss, over `cases` random nets.
pub fn param_gradient_worst(cases: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let spec = random_spec(&mut rng, 8, 3);
        let params = random_params(&spec, case);
        let (xs, ys) = random_batch(&mut rng, 5, spec.input_dim(), spec.num_classes());
        let flat = params.flatten().values;
        let net = RefNet {
            sizes: &spec.layer_sizes,
            bias: spec.use_bias,
        };
        let analytic = params.loss_and_grad(to_array(&xs).view(), &ys).unwrap().grads.flatten().values;
        let (mut a, mut fd) = (Vec::new(), Vec::new());
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            let mut minus = flat.clone();
            plus[i] += PARAM_STEP;
            minus[i] -= PARAM_STEP;
            if net.pattern(&plus, &xs) != net.pattern(&minus, &xs) {
                continue;
            }
            a.push(analytic[i]);
            fd.push((net.loss(&plus, &xs, &ys) - net.loss(&minus, &xs, &ys)) / (2.0 * PARAM_STEP));
        }
        worst = worst.max(rel_err(&a, &fd, 1e-8));
    }
    worst
}

/// Worst relative error of the condensation input-gradient against central
/// differences of the reference distance objective.
pub fn input_gradient_worst(cases: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + case);
        let spec = random_spec(&mut rng, 8, 2);
        let params = random_params(&spec, case);
        let net = RefNet {
            sizes: &spec.layer_sizes,
            bias: spec.use_bias,
        };
        let flat = params.flatten().values;
        let (real_x, real_y) = random_batch(&mut rng, 6, spec.input_dim(), spec.num_classes());
        let (syn_x, syn_y) = random_batch(&mut rng, 3, spec.input_dim(), spec.num_classes());
        let target = net.grad(&flat, &real_x, &real_y);
        let target_bundle = GradBundle {
            grads: MlpParams::unflatten(&spec, &FlatVector { values: target.clone() }).unwrap(),
            loss: 0.0,
            correct: 0,
        };
        let (dist, g) = params
            .grad_of_grad_distance(to_array(&syn_x).view(), &syn_y, &target_bundle, GradDistance::LayerwiseCosine)
            .unwrap();
        let objective = |xs: &[Vec<f64>]| net.cosine_distance(&net.grad(&flat, xs, &syn_y), &target);
        assert!((dist - objective(&syn_x)).abs() < 1e-10);
        let (mut a, mut fd) = (Vec::new(), Vec::new());
        for r in 0..syn_x.len() {
            for c in 0..spec.input_dim() {
                let mut plus = syn_x.clone();
                let mut minus = syn_x.clone();
                plus[r][c] += INPUT_STEP;
                minus[r][c] -= INPUT_STEP;
                if net.pattern(&flat, &plus) != net.pattern(&flat, &minus) {
                    continue;
                }
                a.push(g[[r, c]]);
                fd.push((objective(&plus) - objective(&minus)) / (2.0 * INPUT_STEP));
            }
        }
        worst = worst.max(rel_err(&a, &fd, 1e-8));
    }
    worst
}

