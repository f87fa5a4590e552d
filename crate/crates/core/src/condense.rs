//! Dataset condensation by per-class gradient matching.

use ndarray::{s, Array2};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{self, CondensedDataset, Dataset, MixedDataset};
use crate::error::{Error, Result};
use crate::nnet::{GradBundle, MlpParams, MlpSpec};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradDistance {
    /// `sum_l (1 - cos(g1_l, g2_l))`, with `W_l` and `b_l` forming one vector.
    #[default]
    LayerwiseCosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CondenseConfig {
    pub ipc: usize,
    pub outer_iterations: usize,
    pub net_reinit_period: usize,
    pub inner_net_steps: usize,
    pub lr_synthetic: f64,
    pub lr_net: f64,
    pub real_batch_per_class: usize,
    pub seed: u64,
}

impl Default for CondenseConfig {
    fn default() -> Self {
        CondenseConfig {
            ipc: 10,
            outer_iterations: 1000,
            net_reinit_period: 100,
            inner_net_steps: 10,
            lr_synthetic: 0.1,
            lr_net: 0.01,
            real_batch_per_class: 64,
            seed: 0,
        }
    }
}

impl CondenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ipc == 0 {
            return Err(Error::invalid("ipc must be at least 1"));
        }
        if self.net_reinit_period == 0 || self.real_batch_per_class == 0 {
            return Err(Error::invalid("net_reinit_period and real_batch_per_class must be at least 1"));
        }
        if !(self.lr_synthetic > 0.0 && self.lr_net > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        Ok(())
    }
}

/// Distance between two gradients of the same network.
pub fn gradient_distance<T: Scalar>(g1: &GradBundle<T>, g2: &GradBundle<T>, mode: GradDistance) -> Result<f64> {
    distance_with_adjoint(&g1.grads, &g2.grads, mode).map(|(d, _)| d)
}

fn layer_vector<T: Scalar>(params: &MlpParams<T>, l: usize) -> Vec<f64> {
    let layer = &params.layers()[l];
    let mut v: Vec<f64> = layer.weight.iter().map(|x| x.as_f64()).collect();
    if let Some(b) = &layer.bias {
        v.extend(b.iter().map(|x| x.as_f64()));
    }
    v
}

/// The distance and its derivative with respect to `g`.
pub(crate) fn distance_with_adjoint<T: Scalar>(
    g: &MlpParams<T>,
    r: &MlpParams<T>,
    mode: GradDistance,
) -> Result<(f64, MlpParams<T>)> {
    g.check_same_spec(r)?;
    let GradDistance::LayerwiseCosine = mode;
    let mut total = 0.0;
    let mut adjoint = MlpParams::zeros(g.spec());
    for l in 0..g.layers().len() {
        let gv = layer_vector(g, l);
        let rv = layer_vector(r, l);
        let gn = gv.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rn = rv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if gn == 0.0 || rn == 0.0 {
            total += 1.0;
            continue;
        }
        let cos = gv.iter().zip(&rv).map(|(a, b)| a * b).sum::<f64>() / (gn * rn);
        total += 1.0 - cos;
        let d: Vec<T> = gv
            .iter()
            .zip(&rv)
            .map(|(&gi, &ri)| T::of(-(ri / (gn * rn) - cos * gi / (gn * gn))))
            .collect();
        let layer = &mut adjoint.layers_mut()[l];
        let nw = layer.weight.len();
        for (dst, &v) in layer.weight.iter_mut().zip(&d[..nw]) {
            *dst = v;
        }
        if let Some(b) = layer.bias.as_mut() {
            for (dst, &v) in b.iter_mut().zip(&d[nw..]) {
                *dst = v;
            }
        }
    }
    Ok((total, adjoint))
}

/// Distils `dataset` into `config.ipc` synthetic rows per class whose
/// training gradients match those of the real class batches.
///
/// Rows are grouped by class (class 0 first). Features are left unclamped;
/// [`CondensedDataset::to_clamped_dataset`] clamps for export.
pub fn condense<T: Scalar>(dataset: &Dataset<T>, spec: &MlpSpec, config: &CondenseConfig) -> Result<CondensedDataset<T>> {
    config.validate()?;
    spec.validate()?;
    if dataset.num_classes != spec.num_classes() || dataset.dim() != spec.input_dim() {
        return Err(Error::invalid(format!(
            "dataset {} ({} classes, dim {}) does not fit a network with layer sizes {:?}",
            dataset.name,
            dataset.num_classes,
            dataset.dim(),
            spec.layer_sizes
        )));
    }
    let by_class = dataset.indices_by_class();
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::invalid(format!("class {c} has no rows in {}", dataset.name)));
    }
    let classes = dataset.num_classes;
    let ipc = config.ipc;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.5, 0.1).expect("valid normal");
    let mut syn = Array2::from_shape_simple_fn((classes * ipc, dataset.dim()), || T::of(noise.sample(&mut rng)));
    let syn_labels: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat_n(c, ipc)).collect();
    let class_labels: Vec<Vec<usize>> = (0..classes).map(|c| vec![c; ipc]).collect();
    let lr_syn = T::of(config.lr_synthetic);
    let lr_net = T::of(config.lr_net);

    let mut net = MlpParams::<T>::zeros(spec);
    for it in 0..config.outer_iterations {
        if it % config.net_reinit_period == 0 {
            net = MlpParams::init(spec, rng.random());
        }
        for c in 0..classes {
            let pool = &by_class[c];
            let take = config.real_batch_per_class.min(pool.len());
            let picked: Vec<usize> = index::sample(&mut rng, pool.len(), take).iter().map(|i| pool[i]).collect();
            let real = dataset.select(&picked);
            let target = net.loss_and_grad(real.features.view(), &real.labels)?;
            let rows = s![c * ipc..(c + 1) * ipc, ..];
            let (_, g) =
                net.grad_of_grad_distance(syn.slice(rows), &class_labels[c], &target, GradDistance::LayerwiseCosine)?;
            syn.slice_mut(rows).zip_mut_with(&g, |x, &d| *x -= lr_syn * d);
        }
        if syn.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("synthetic features became non-finite at iteration {it}")));
        }
        for _ in 0..config.inner_net_steps {
            let step = net.loss_and_grad(syn.view(), &syn_labels)?;
            net = net.zip_map(&step.grads, |w, g| w - lr_net * g)?;
        }
        if !net.all_finite() {
            return Err(Error::Numeric(format!("inner network diverged at iteration {it}")));
        }
    }
    let name = format!("{}-cond{ipc}", dataset.name);
    let data = Dataset::new_unbounded(name, syn, syn_labels, classes)?;
    CondensedDataset::new(dataset.name.clone(), ipc, data)
}

/// The equal-weight mixture of two condensed sets.
pub fn build_condensed_mix<'a, T: Scalar>(
    cond_a: &'a CondensedDataset<T>,
    cond_b: &'a CondensedDataset<T>,
) -> Result<MixedDataset<'a, T>> {
    data::mix(&cond_a.data, &cond_b.data, 0.5)
}
