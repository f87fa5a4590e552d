//! Merge operators: permutation application, interpolation, weight
//! matching (plain and gradient-regularised), straight-through permutation
//! learning and diagonal-Fisher merging.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{solve_lap, Permutation, Sense};
use crate::data::MixedDataset;
use crate::error::{Error, Result};
use crate::landscape::FisherDiagonal;
use crate::nnet::{FlatVector, GradBundle, Layer, MlpParams, MlpSpec};
use crate::scalar::Scalar;
use crate::train::{Optimizer, OptimizerState};

/// One permutation per hidden layer; input and output units never move.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PermutationSet {
    pub perms: Vec<Permutation>,
}

impl PermutationSet {
    pub fn identity(spec: &MlpSpec) -> Self {
        PermutationSet {
            perms: spec.hidden_widths().iter().map(|&w| Permutation::identity(w)).collect(),
        }
    }

    pub fn check(&self, spec: &MlpSpec) -> Result<()> {
        let widths = spec.hidden_widths();
        if self.perms.len() != widths.len() || self.perms.iter().zip(widths).any(|(p, &w)| p.len() != w) {
            return Err(Error::invalid(format!(
                "permutation sizes {:?} do not match hidden widths {widths:?}",
                self.perms.iter().map(Permutation::len).collect::<Vec<_>>()
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.perms.iter().all(Permutation::is_identity)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Interpolation weight of the permuted model inside the objective.
    pub lambda: f64,
}

impl Default for SteConfig {
    fn default() -> Self {
        SteConfig {
            learning_rate: 0.5,
            momentum: 0.9,
            epochs: 10,
            batch_size: 128,
            lambda: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub wm_max_sweeps: usize,
    /// Extra descents from seeded random starting permutations.
    pub wm_restarts: usize,
    pub fwm_beta: f64,
    pub ste: SteConfig,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            wm_max_sweeps: 100,
            wm_restarts: 8,
            fwm_beta: 0.01,
            ste: SteConfig::default(),
            seed: 0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fwm_beta) {
            return Err(Error::invalid("fwm_beta must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.ste.lambda) {
            return Err(Error::invalid("ste.lambda must lie in [0, 1]"));
        }
        if self.ste.batch_size == 0 {
            return Err(Error::invalid("ste.batch_size must be at least 1"));
        }
        if !(self.ste.learning_rate > 0.0) {
            return Err(Error::invalid("ste.learning_rate must be positive"));
        }
        Ok(())
    }
}

/// Reorders hidden units of `params`: rows of `W_l` and entries of `b_l`
/// by `P_l`, columns of `W_{l+1}` by the same permutation. The network
/// function is unchanged.
pub fn apply_permutation<T: Scalar>(params: &MlpParams<T>, pi: &PermutationSet) -> Result<MlpParams<T>> {
    let spec = params.spec();
    pi.check(spec)?;
    let num = spec.num_layers();
    let layers = params
        .layers()
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let mut weight = layer.weight.clone();
            let mut bias = layer.bias.clone();
            if l + 1 < num {
                let rows = pi.perms[l].as_slice();
                weight = weight.select(Axis(0), rows);
                bias = bias.map(|b| b.select(Axis(0), rows));
            }
            if l > 0 {
                weight = weight.select(Axis(1), pi.perms[l - 1].as_slice());
            }
            Layer { weight, bias }
        })
        .collect();
    MlpParams::from_layers(spec, layers)
}

/// `(1 - lambda) * a + lambda * b`, elementwise.
pub fn merge_interpolate<T: Scalar>(a: &MlpParams<T>, b: &MlpParams<T>, lambda: f64) -> Result<MlpParams<T>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let wa = T::of(1.0 - lambda);
    let wb = T::of(lambda);
    a.zip_map(b, |x, y| wa * x + wb * y)
}

/// Layer score `<A, pi(X)>` restricted to the terms that depend on the
/// permutation of hidden layer `h`, with the other permutations held fixed.
fn cross_score(a: &MlpParams<f64>, x: &MlpParams<f64>, perms: &[Permutation], h: usize, outgoing: bool) -> Array2<f64> {
    let al = &a.layers()[h];
    let xl = &x.layers()[h];
    let xw = if h > 0 {
        xl.weight.select(Axis(1), perms[h - 1].as_slice())
    } else {
        xl.weight.clone()
    };
    let mut s = al.weight.dot(&xw.t());
    if let (Some(ab), Some(xb)) = (&al.bias, &xl.bias) {
        for (i, mut row) in s.outer_iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += ab[i] * xb[j];
            }
        }
    }
    if !outgoing {
        return s;
    }
    let an = &a.layers()[h + 1];
    let xn = &x.layers()[h + 1];
    let xn = if h + 1 < perms.len() {
        xn.weight.select(Axis(0), perms[h + 1].as_slice())
    } else {
        xn.weight.clone()
    };
    s += &an.weight.t().dot(&xn);
    s
}

/// Coordinate descent over hidden layers for
/// `min_pi beta * |a - pi(b)|^2 + (1 - beta) * (a - pi(b)) . pi(g)`.
/// `beta = 1` (or no gradient) is plain weight matching.
struct Matcher<'a> {
    a: &'a MlpParams<f64>,
    b: &'a MlpParams<f64>,
    grad: Option<&'a MlpParams<f64>>,
    beta: f64,
}

impl Matcher<'_> {
    fn layer_score(&self, perms: &[Permutation], h: usize, outgoing: bool) -> Array2<f64> {
        let two_beta = 2.0 * self.beta;
        let mut s = cross_score(self.a, self.b, perms, h, outgoing).mapv(|v| two_beta * v);
        if let Some(g) = self.grad {
            let w = 1.0 - self.beta;
            if w > 0.0 {
                let sg = cross_score(self.a, g, perms, h, outgoing);
                s.zip_mut_with(&sg, |v, &gv| *v -= w * gv);
            }
        }
        s
    }

    fn objective(&self, pi: &PermutationSet) -> f64 {
        let pb = apply_permutation(self.b, pi).expect("sizes checked").flatten();
        let fa = self.a.flatten();
        let dist = fa.sq_distance(&pb).expect("same spec");
        match self.grad {
            Some(g) if self.beta < 1.0 => {
                let pg = apply_permutation(g, pi).expect("sizes checked").flatten();
                let lin: f64 = fa
                    .values
                    .iter()
                    .zip(&pb.values)
                    .zip(&pg.values)
                    .map(|((x, y), z)| (x - y) * z)
                    .sum();
                self.beta * dist + (1.0 - self.beta) * lin
            }
            _ => dist,
        }
    }

    /// Layers matched bottom-up on their incoming weights only.
    fn bottom_up(&self) -> PermutationSet {
        let mut pi = PermutationSet::identity(self.a.spec());
        for h in 0..pi.perms.len() {
            let score = self.layer_score(&pi.perms, h, false);
            pi.perms[h] = solve_lap(score.view(), Sense::Maximize).expect("finite square score").0;
        }
        pi
    }

    /// Coordinate descent from the identity, from [`Self::bottom_up`] and
    /// from `restarts` seeded random starts; the lowest final objective
    /// wins, earlier starts winning ties.
    fn solve(&self, max_sweeps: usize, restarts: usize, seed: u64) -> (PermutationSet, Vec<f64>) {
        let mut starts = vec![PermutationSet::identity(self.a.spec()), self.bottom_up()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57_a2d5);
        for _ in 0..restarts {
            let mut pi = PermutationSet::identity(self.a.spec());
            for p in &mut pi.perms {
                let mut v = p.as_slice().to_vec();
                v.shuffle(&mut rng);
                *p = Permutation::new(v).expect("shuffled identity");
            }
            starts.push(pi);
        }
        let mut best: Option<(PermutationSet, Vec<f64>)> = None;
        for start in starts {
            let mut trace = Vec::new();
            let pi = self.run(start, max_sweeps, seed, Some(&mut trace));
            if best.as_ref().is_none_or(|(_, t)| trace.last() < t.last()) {
                best = Some((pi, trace));
            }
        }
        best.expect("at least one start")
    }

    fn run(&self, init: PermutationSet, max_sweeps: usize, seed: u64, mut trace: Option<&mut Vec<f64>>) -> PermutationSet {
        let mut pi = init;
        let hidden = pi.perms.len();
        if let Some(t) = trace.as_deref_mut() {
            t.push(self.objective(&pi));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..hidden).collect();
        for _ in 0..max_sweeps {
            order.shuffle(&mut rng);
            let mut changed = false;
            for &h in &order {
                let score = self.layer_score(&pi.perms, h, true);
                let (candidate, new_value) = solve_lap(score.view(), Sense::Maximize).expect("finite square score");
                let old_value: f64 = pi.perms[h].as_slice().iter().enumerate().map(|(i, &j)| score[[i, j]]).sum();
                if candidate != pi.perms[h] && new_value > old_value + 1e-12 * old_value.abs().max(1.0) {
                    pi.perms[h] = candidate;
                    changed = true;
                    if let Some(t) = trace.as_deref_mut() {
                        t.push(self.objective(&pi));
                    }
                }
            }
            if !changed {
                break;
            }
        }
        pi
    }
}

/// Permutations of `b` minimising `|vec(a) - vec(pi(b))|^2`, found by
/// seeded coordinate descent over per-layer assignment problems. Descent
/// starts both from the identity and from a bottom-up matching of incoming
/// weights; the better end point is returned.
pub fn weight_matching<T: Scalar>(a: &MlpParams<T>, b: &MlpParams<T>, config: &AlignConfig) -> Result<PermutationSet> {
    weight_matching_traced(a, b, config).map(|(pi, _)| pi)
}

/// [`weight_matching`] plus the squared distance after the start and after
/// every accepted layer update of the winning descent.
pub fn weight_matching_traced<T: Scalar>(
    a: &MlpParams<T>,
    b: &MlpParams<T>,
    config: &AlignConfig,
) -> Result<(PermutationSet, Vec<f64>)> {
    a.check_same_spec(b)?;
    let (a64, b64) = (a.cast::<f64>(), b.cast::<f64>());
    let matcher = Matcher {
        a: &a64,
        b: &b64,
        grad: None,
        beta: 1.0,
    };
    Ok(matcher.solve(config.wm_max_sweeps, config.wm_restarts, config.seed))
}

/// Weight matching with a `(1 - beta)`-weighted first-order term built from
/// the loss gradient of `b` at `w_B`; the gradient at `pi(w_B)` is the
/// permuted gradient.
pub fn flat_weight_matching<T: Scalar>(
    a: &MlpParams<T>,
    b: &MlpParams<T>,
    grad_b: &GradBundle<T>,
    config: &AlignConfig,
) -> Result<PermutationSet> {
    flat_weight_matching_traced(a, b, grad_b, config).map(|(pi, _)| pi)
}

pub fn flat_weight_matching_traced<T: Scalar>(
    a: &MlpParams<T>,
    b: &MlpParams<T>,
    grad_b: &GradBundle<T>,
    config: &AlignConfig,
) -> Result<(PermutationSet, Vec<f64>)> {
    config.validate()?;
    a.check_same_spec(b)?;
    b.check_same_spec(&grad_b.grads)?;
    let (a64, b64, g64) = (a.cast::<f64>(), b.cast::<f64>(), grad_b.grads.cast::<f64>());
    let matcher = Matcher {
        a: &a64,
        b: &b64,
        grad: Some(&g64),
        beta: config.fwm_beta,
    };
    Ok(matcher.solve(config.wm_max_sweeps, config.wm_restarts, config.seed))
}

/// `beta * |a - pi(b)|^2 + (1 - beta) * (a - pi(b)) . pi(g)`.
pub fn fwm_objective<T: Scalar>(
    a: &MlpParams<T>,
    b: &MlpParams<T>,
    grad_b: &MlpParams<T>,
    beta: f64,
    pi: &PermutationSet,
) -> Result<f64> {
    a.check_same_spec(b)?;
    pi.check(a.spec())?;
    let (a64, b64, g64) = (a.cast::<f64>(), b.cast::<f64>(), grad_b.cast::<f64>());
    Ok(Matcher {
        a: &a64,
        b: &b64,
        grad: Some(&g64),
        beta,
    }
    .objective(pi))
}

/// The relaxed copy of model B and its current projection.
#[derive(Clone, Debug)]
pub struct SteState<T> {
    pub free_params: MlpParams<T>,
    pub projected: PermutationSet,
}

#[derive(Clone, Debug)]
pub struct SteOutcome<T> {
    pub permutation: PermutationSet,
    pub state: SteState<T>,
    /// Mean minibatch mixture loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

struct Cursor {
    order: Vec<usize>,
    pos: usize,
}

impl Cursor {
    fn new(n: usize) -> Self {
        Cursor {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Learns a permutation of `b` by straight-through optimisation of the
/// mixture loss at `(1 - lambda) * a + lambda * proj(w~_B)`, where `proj`
/// maps the relaxed weights to their nearest permutation of `b`.
///
/// Starts from the weight-matching solution. Each step half the minibatch
/// comes from each part of the mixture and the part losses are weighted by
/// the mixture's alpha.
pub fn ste_align<T: Scalar>(
    a: &MlpParams<T>,
    b: &MlpParams<T>,
    mix: &MixedDataset<'_, T>,
    config: &AlignConfig,
) -> Result<SteOutcome<T>> {
    config.validate()?;
    a.check_same_spec(b)?;
    let spec = a.spec();
    for part in [mix.part_a, mix.part_b] {
        if part.num_classes != spec.num_classes() {
            return Err(Error::invalid(format!(
                "mixture part {} has {} classes, network outputs {}",
                part.name,
                part.num_classes,
                spec.num_classes()
            )));
        }
    }
    let ste = &config.ste;
    let start = weight_matching(a, b, config)?;
    let mut free = apply_permutation(b, &start)?;
    let b64 = b.cast::<f64>();
    let mut projected = start;
    let mut opt = OptimizerState::new(spec, Optimizer::SgdMomentum { momentum: ste.momentum });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x57e0_57e0);
    let mut cursor_a = Cursor::new(mix.part_a.len());
    let mut cursor_b = Cursor::new(mix.part_b.len());
    let half_a = (ste.batch_size / 2).max(1);
    let half_b = (ste.batch_size - ste.batch_size / 2).max(1);
    let steps_per_epoch = (mix.part_a.len() + mix.part_b.len()).div_ceil(ste.batch_size);
    let (wa, wb) = (1.0 - mix.alpha, mix.alpha);
    let lambda = T::of(ste.lambda);
    let mut epoch_losses = Vec::with_capacity(ste.epochs);
    let mut step = 0usize;

    for epoch in 0..ste.epochs {
        let mut total = 0.0;
        for _ in 0..steps_per_epoch {
            projected = project(&free, &b64, projected, config, step as u64);
            let proj_params = apply_permutation(b, &projected)?;
            let merged = merge_interpolate(a, &proj_params, ste.lambda)?;

            let ia = cursor_a.take(half_a, &mut rng);
            let ib = cursor_b.take(half_b, &mut rng);
            let ga = batch_grad(&merged, mix.part_a, &ia)?;
            let gb = batch_grad(&merged, mix.part_b, &ib)?;
            let loss = wa * ga.loss + wb * gb.loss;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite mixture loss at epoch {epoch}, step {step} (part losses {} / {})",
                    ga.loss, gb.loss
                )));
            }
            total += loss;
            let (ta, tb) = (T::of(wa), T::of(wb));
            // d loss / d w~_B = lambda * d loss / d merged, passed straight
            // through the projection.
            let grad = ga.grads.zip_map(&gb.grads, |x, y| lambda * (ta * x + tb * y))?;
            opt.step(&mut free, &grad, ste.learning_rate, 0.0);
            if !free.all_finite() {
                return Err(Error::Numeric(format!("relaxed weights diverged at epoch {epoch}, step {step}")));
            }
            step += 1;
        }
        epoch_losses.push(total / steps_per_epoch as f64);
    }
    projected = project(&free, &b64, projected, config, step as u64);
    Ok(SteOutcome {
        permutation: projected.clone(),
        state: SteState {
            free_params: free,
            projected,
        },
        epoch_losses,
    })
}

/// Nearest permutation of `b` to `free`, warm-started from `previous`.
fn project<T: Scalar>(
    free: &MlpParams<T>,
    b64: &MlpParams<f64>,
    previous: PermutationSet,
    config: &AlignConfig,
    salt: u64,
) -> PermutationSet {
    let f64_free = free.cast::<f64>();
    Matcher {
        a: &f64_free,
        b: b64,
        grad: None,
        beta: 1.0,
    }
    .run(previous, config.wm_max_sweeps, config.seed.wrapping_add(salt), None)
}

fn batch_grad<T: Scalar>(params: &MlpParams<T>, data: &crate::data::Dataset<T>, idx: &[usize]) -> Result<GradBundle<T>> {
    let x = data.features.select(Axis(0), idx);
    let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
    params.loss_and_grad(x.view(), &y)
}

/// Elementwise `(F_A w_A + F_B w_B) / (F_A + F_B + damping)`; entries whose
/// denominator is exactly zero fall back to the midpoint.
pub fn fisher_merge<T: Scalar>(
    a: &MlpParams<T>,
    b_permuted: &MlpParams<T>,
    fisher_a: &FisherDiagonal<T>,
    fisher_b: &FisherDiagonal<T>,
    damping: f64,
) -> Result<MlpParams<T>> {
    a.check_same_spec(b_permuted)?;
    if !(damping >= 0.0 && damping.is_finite()) {
        return Err(Error::invalid("damping must be a finite non-negative number"));
    }
    let n = a.spec().flat_len();
    if fisher_a.values.len() != n || fisher_b.values.len() != n {
        return Err(Error::invalid(format!(
            "Fisher vectors of length {} / {} do not match flat size {n}",
            fisher_a.values.len(),
            fisher_b.values.len()
        )));
    }
    let (fa, fb) = (a.flatten(), b_permuted.flatten());
    let values = fa
        .values
        .iter()
        .zip(&fb.values)
        .zip(fisher_a.values.values.iter().zip(&fisher_b.values.values))
        .map(|((&wa, &wb), (&ca, &cb))| {
            let (wa, wb, ca, cb) = (wa.as_f64(), wb.as_f64(), ca.as_f64(), cb.as_f64());
            let denom = ca + cb + damping;
            T::of(if denom > 0.0 {
                (ca * wa + cb * wb) / denom
            } else {
                0.5 * (wa + wb)
            })
        })
        .collect();
    MlpParams::unflatten(a.spec(), &FlatVector { values })
}
