//! Fully connected ReLU networks: parameters, forward pass, softmax
//! cross-entropy, analytic gradients and the flat weight layout.
//!
//! Weights of layer `l` have shape `(d_l, d_{l-1})`; a batch is an `N x d_0`
//! row-major matrix. The flat layout is layer by layer, each weight matrix
//! row-major followed by its bias.

use ndarray::{s, Array1, Array2, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condense::{self, GradDistance};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

/// Layer widths `[d_0, d_1, ..., d_L]`: input, hidden widths, class count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_bias")]
    pub use_bias: bool,
}

fn default_bias() -> bool {
    true
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, use_bias: bool) -> Result<Self> {
        let spec = MlpSpec {
            layer_sizes,
            activation: Activation::Relu,
            use_bias,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::invalid("an MLP needs at least an input and an output layer"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        Ok(())
    }

    /// Number of weight layers `L`.
    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.layer_sizes[1..self.layer_sizes.len() - 1]
    }

    /// `(rows, cols)` of the weight matrix of layer `l` (0-based).
    pub fn weight_shape(&self, l: usize) -> (usize, usize) {
        (self.layer_sizes[l + 1], self.layer_sizes[l])
    }

    pub fn flat_len(&self) -> usize {
        (0..self.num_layers())
            .map(|l| {
                let (r, c) = self.weight_shape(l);
                r * c + if self.use_bias { r } else { 0 }
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weight: Array2<T>,
    pub bias: Option<Array1<T>>,
}

impl<T: Scalar> Layer<T> {
    fn zeros(rows: usize, cols: usize, use_bias: bool) -> Self {
        Layer {
            weight: Array2::zeros((rows, cols)),
            bias: use_bias.then(|| Array1::zeros(rows)),
        }
    }
}

/// The weights of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T> {
    spec: MlpSpec,
    layers: Vec<Layer<T>>,
}

/// Gradient of the mean cross-entropy, laid out like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle<T> {
    pub grads: MlpParams<T>,
    pub loss: f64,
    /// Rows of the batch whose argmax prediction was correct.
    pub correct: usize,
}

/// A parameter object in the canonical flat order.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatVector<T> {
    pub values: Vec<T>,
}

struct Trace<T> {
    /// Post-activation outputs of the hidden layers, `h_1 .. h_{L-1}`.
    hidden: Vec<Array2<T>>,
    /// Pre-activations `z_1 .. z_L`; the last entry holds the logits.
    pre: Vec<Array2<T>>,
}

impl<T: Scalar> MlpParams<T> {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = (0..spec.num_layers())
            .map(|l| {
                let (r, c) = spec.weight_shape(l);
                Layer::zeros(r, c, spec.use_bias)
            })
            .collect();
        MlpParams {
            spec: spec.clone(),
            layers,
        }
    }

    /// Uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights, zero biases.
    pub fn init(spec: &MlpSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(spec);
        for layer in &mut params.layers {
            let bound = 1.0 / (layer.weight.ncols() as f64).sqrt();
            for w in layer.weight.iter_mut() {
                *w = T::of(rng.random_range(-bound..bound));
            }
        }
        params
    }

    pub fn from_layers(spec: &MlpSpec, layers: Vec<Layer<T>>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.num_layers() {
            return Err(Error::dim(format!(
                "expected {} layers, got {}",
                spec.num_layers(),
                layers.len()
            )));
        }
        for (l, layer) in layers.iter().enumerate() {
            let shape = spec.weight_shape(l);
            if layer.weight.dim() != shape {
                return Err(Error::dim(format!(
                    "layer {l}: weight shape {:?}, expected {shape:?}",
                    layer.weight.dim()
                )));
            }
            match (&layer.bias, spec.use_bias) {
                (Some(b), true) if b.len() == shape.0 => {}
                (None, false) => {}
                _ => return Err(Error::dim(format!("layer {l}: bias does not match spec"))),
            }
        }
        let params = MlpParams {
            spec: spec.clone(),
            layers,
        };
        if !params.all_finite() {
            return Err(Error::invalid("parameters contain non-finite values"));
        }
        Ok(params)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|layer| {
            layer.weight.iter().all(|v| v.is_finite())
                && layer.bias.iter().flatten().all(|v| v.is_finite())
        })
    }

    pub fn cast<U: Scalar>(&self) -> MlpParams<U> {
        MlpParams {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|layer| Layer {
                    weight: layer.weight.mapv(|v| U::of(v.as_f64())),
                    bias: layer.bias.as_ref().map(|b| b.mapv(|v| U::of(v.as_f64()))),
                })
                .collect(),
        }
    }

    pub fn check_same_spec(&self, other: &MlpParams<T>) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::invalid(format!(
                "spec mismatch: {:?} vs {:?}",
                self.spec.layer_sizes, other.spec.layer_sizes
            )));
        }
        Ok(())
    }

    /// Elementwise combination of two parameter objects with equal specs.
    pub fn zip_map(&self, other: &MlpParams<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_spec(other)?;
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| Layer {
                weight: Zip::from(&a.weight).and(&b.weight).map_collect(|&x, &y| f(x, y)),
                bias: match (&a.bias, &b.bias) {
                    (Some(x), Some(y)) => Some(Zip::from(x).and(y).map_collect(|&x, &y| f(x, y))),
                    _ => None,
                },
            })
            .collect();
        Ok(MlpParams {
            spec: self.spec.clone(),
            layers,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        MlpParams {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|layer| Layer {
                    weight: layer.weight.mapv(&f),
                    bias: layer.bias.as_ref().map(|b| b.mapv(&f)),
                })
                .collect(),
        }
    }

    pub fn flatten(&self) -> FlatVector<T> {
        let mut values = Vec::with_capacity(self.spec.flat_len());
        for layer in &self.layers {
            values.extend(layer.weight.iter().copied());
            if let Some(b) = &layer.bias {
                values.extend(b.iter().copied());
            }
        }
        FlatVector { values }
    }

    pub fn unflatten(spec: &MlpSpec, flat: &FlatVector<T>) -> Result<Self> {
        spec.validate()?;
        if flat.values.len() != spec.flat_len() {
            return Err(Error::invalid(format!(
                "flat vector has {} entries, spec needs {}",
                flat.values.len(),
                spec.flat_len()
            )));
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(spec.num_layers());
        for l in 0..spec.num_layers() {
            let (r, c) = spec.weight_shape(l);
            let weight = Array2::from_shape_vec((r, c), flat.values[offset..offset + r * c].to_vec())
                .expect("shape checked against flat_len");
            offset += r * c;
            let bias = if spec.use_bias {
                let b = Array1::from(flat.values[offset..offset + r].to_vec());
                offset += r;
                Some(b)
            } else {
                None
            };
            layers.push(Layer { weight, bias });
        }
        Ok(MlpParams {
            spec: spec.clone(),
            layers,
        })
    }

    fn check_batch(&self, x: &ArrayView2<T>) -> Result<()> {
        if x.ncols() != self.spec.input_dim() {
            return Err(Error::dim(format!(
                "batch width {} but network input is {}",
                x.ncols(),
                self.spec.input_dim()
            )));
        }
        Ok(())
    }

    fn check_labels(&self, x: &ArrayView2<T>, labels: &[usize]) -> Result<()> {
        if labels.len() != x.nrows() {
            return Err(Error::dim(format!(
                "{} labels for {} rows",
                labels.len(),
                x.nrows()
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let c = self.spec.num_classes();
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(format!("label {bad} outside 0..{c}")));
        }
        Ok(())
    }

    fn trace(&self, x: ArrayView2<T>) -> Trace<T> {
        let last = self.layers.len() - 1;
        let mut hidden: Vec<Array2<T>> = Vec::with_capacity(last);
        let mut pre = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = if l == 0 {
                x.dot(&layer.weight.t())
            } else {
                hidden[l - 1].dot(&layer.weight.t())
            };
            if let Some(b) = &layer.bias {
                z += &b.view();
            }
            if l < last {
                hidden.push(z.mapv(relu));
            }
            pre.push(z);
        }
        Trace { hidden, pre }
    }

    /// Logits for an `N x d_0` batch.
    pub fn forward(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_batch(&x)?;
        let mut trace = self.trace(x);
        Ok(trace.pre.pop().unwrap())
    }

    /// Hidden-layer pre-activations and logits; used by gradient checks to
    /// detect ReLU kink crossings.
    pub fn preactivations(&self, x: ArrayView2<T>) -> Result<Vec<Array2<T>>> {
        self.check_batch(&x)?;
        Ok(self.trace(x).pre)
    }

    /// Argmax class per row; ties go to the lowest index.
    pub fn predict(&self, x: ArrayView2<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(x)?))
    }

    /// Mean softmax cross-entropy.
    pub fn loss(&self, x: ArrayView2<T>, labels: &[usize]) -> Result<f64> {
        self.check_batch(&x)?;
        self.check_labels(&x, labels)?;
        let logits = self.forward(x)?;
        let total: f64 = logits
            .outer_iter()
            .zip(labels)
            .map(|(row, &y)| {
                let (lse, _) = log_sum_exp(row.iter().copied());
                lse - row[y].as_f64()
            })
            .sum();
        Ok(total / labels.len() as f64)
    }

    /// Mean cross-entropy and its exact gradient.
    pub fn loss_and_grad(&self, x: ArrayView2<T>, labels: &[usize]) -> Result<GradBundle<T>> {
        self.check_batch(&x)?;
        self.check_labels(&x, labels)?;
        let trace = self.trace(x);
        let n = labels.len();
        let logits = trace.pre.last().unwrap();
        let correct = argmax_rows(logits).iter().zip(labels).filter(|(p, y)| p == y).count();
        let (loss, probs) = softmax_xent(logits, labels);
        let mut delta = probs;
        let scale = T::of(1.0 / n as f64);
        for (row, &y) in delta.outer_iter_mut().zip(labels) {
            let mut row = row;
            row[y] -= T::one();
            row.mapv_inplace(|v| v * scale);
        }
        let (grads, _) = self.backward(x, &trace, delta);
        Ok(GradBundle { grads, loss, correct })
    }

    /// Sum over the batch of the elementwise square of each example's
    /// gradient of `-log p(y|x)`.
    pub fn squared_sample_gradients(&self, x: ArrayView2<T>, labels: &[usize]) -> Result<MlpParams<T>> {
        self.check_batch(&x)?;
        self.check_labels(&x, labels)?;
        let trace = self.trace(x);
        let (_, mut delta) = softmax_xent(trace.pre.last().unwrap(), labels);
        for (mut row, &y) in delta.outer_iter_mut().zip(labels) {
            row[y] -= T::one();
        }
        let mut out = MlpParams::zeros(&self.spec);
        for l in (0..self.layers.len()).rev() {
            let input = if l == 0 { x } else { trace.hidden[l - 1].view() };
            let d2 = delta.mapv(|v| v * v);
            let h2 = input.mapv(|v| v * v);
            out.layers[l].weight = d2.t().dot(&h2);
            if let Some(b) = out.layers[l].bias.as_mut() {
                *b = sum_rows(&d2);
            }
            if l > 0 {
                delta = self.propagate_delta(l, &delta, &trace.pre[l - 1]);
            }
        }
        Ok(out)
    }

    fn propagate_delta(&self, l: usize, delta: &Array2<T>, pre_below: &Array2<T>) -> Array2<T> {
        let mut g = delta.dot(&self.layers[l].weight);
        Zip::from(&mut g).and(pre_below).for_each(|g, &z| {
            if z <= T::zero() {
                *g = T::zero();
            }
        });
        g
    }

    /// Backpropagates `delta = dLoss/dlogits`; returns the parameter
    /// gradient and every layer's delta (index `l` holds `dLoss/dz_{l+1}`).
    fn backward(&self, x: ArrayView2<T>, trace: &Trace<T>, delta: Array2<T>) -> (MlpParams<T>, Vec<Array2<T>>) {
        let num = self.layers.len();
        let mut grads = MlpParams::zeros(&self.spec);
        let mut deltas: Vec<Array2<T>> = Vec::with_capacity(num);
        let mut delta = delta;
        for l in (0..num).rev() {
            let input = if l == 0 { x } else { trace.hidden[l - 1].view() };
            grads.layers[l].weight = delta.t().dot(&input);
            if let Some(b) = grads.layers[l].bias.as_mut() {
                *b = sum_rows(&delta);
            }
            if l > 0 {
                let next = self.propagate_delta(l, &delta, &trace.pre[l - 1]);
                deltas.push(std::mem::replace(&mut delta, next));
            } else {
                deltas.push(std::mem::take(&mut delta));
            }
        }
        deltas.reverse();
        (grads, deltas)
    }

    /// Distance between the gradient this network produces on a synthetic
    /// batch and `target`, plus the exact derivative of that distance with
    /// respect to the synthetic features.
    ///
    /// The gradient is itself a function of the inputs through the forward
    /// activations and the backward deltas; both paths are differentiated in
    /// closed form (ReLU masks are locally constant).
    pub fn grad_of_grad_distance(
        &self,
        x: ArrayView2<T>,
        labels: &[usize],
        target: &GradBundle<T>,
        distance: GradDistance,
    ) -> Result<(f64, Array2<T>)> {
        self.check_batch(&x)?;
        self.check_labels(&x, labels)?;
        self.check_same_spec(&target.grads)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("synthetic batch contains non-finite values"));
        }
        let num = self.layers.len();
        let n = labels.len();
        let trace = self.trace(x);
        let (_, probs) = softmax_xent(trace.pre.last().unwrap(), labels);
        let inv_n = T::of(1.0 / n as f64);
        let mut delta_top = probs.clone();
        for (mut row, &y) in delta_top.outer_iter_mut().zip(labels) {
            row[y] -= T::one();
            row.mapv_inplace(|v| v * inv_n);
        }
        let (grads, deltas) = self.backward(x, &trace, delta_top);
        let (dist, adjoint) = condense::distance_with_adjoint(&grads, &target.grads, distance)?;

        // Adjoints of the backward deltas, bottom layer first.
        let mut delta_bars: Vec<Array2<T>> = Vec::with_capacity(num);
        for l in 0..num {
            let input = if l == 0 { x } else { trace.hidden[l - 1].view() };
            let adj = &adjoint.layers[l];
            let mut bar = input.dot(&adj.weight.t());
            if let Some(db) = &adj.bias {
                bar += db;
            }
            if l > 0 {
                let mut below = delta_bars[l - 1].clone();
                mask_inplace(&mut below, &trace.pre[l - 1]);
                bar = bar + below.dot(&self.layers[l].weight.t());
            }
            delta_bars.push(bar);
        }

        // Through the softmax: delta_L = (p - y) / N.
        let top_bar = &delta_bars[num - 1];
        let mut z_bar = Array2::<T>::zeros(probs.dim());
        for ((mut zb, p), db) in z_bar.outer_iter_mut().zip(probs.outer_iter()).zip(top_bar.outer_iter()) {
            let pd: T = p.iter().zip(db.iter()).map(|(&a, &b)| a * b).sum();
            for ((z, &pk), &dk) in zb.iter_mut().zip(p.iter()).zip(db.iter()) {
                *z = inv_n * pk * (dk - pd);
            }
        }

        // Forward-path adjoints, top layer down to the input.
        for l in (0..num).rev() {
            let mut h_bar = z_bar.dot(&self.layers[l].weight);
            h_bar = h_bar + deltas[l].dot(&adjoint.layers[l].weight);
            if l == 0 {
                return Ok((dist, h_bar));
            }
            mask_inplace(&mut h_bar, &trace.pre[l - 1]);
            z_bar = h_bar;
        }
        unreachable!("network has at least one layer")
    }
}

impl<T: Scalar> FlatVector<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_len(&self, other: &FlatVector<T>) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(Error::dim(format!(
                "flat vectors of length {} and {}",
                self.values.len(),
                other.values.len()
            )));
        }
        Ok(())
    }

    pub fn dot(&self, other: &FlatVector<T>) -> Result<f64> {
        self.check_len(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a.as_f64() * b.as_f64()).sum())
    }

    pub fn sq_distance(&self, other: &FlatVector<T>) -> Result<f64> {
        self.check_len(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    }

    /// Cosine similarity; zero when either vector is zero.
    pub fn cosine(&self, other: &FlatVector<T>) -> Result<f64> {
        let dot = self.dot(other)?;
        let denom = self.norm() * other.norm();
        Ok(if denom > 0.0 { dot / denom } else { 0.0 })
    }
}

#[inline]
fn relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

fn mask_inplace<T: Scalar>(g: &mut Array2<T>, pre: &Array2<T>) {
    Zip::from(g).and(pre).for_each(|g, &z| {
        if z <= T::zero() {
            *g = T::zero();
        }
    });
}

/// Column sums accumulated in `f64`, rows visited in order.
fn sum_rows<T: Scalar>(m: &Array2<T>) -> Array1<T> {
    let mut acc = vec![0.0f64; m.ncols()];
    for row in m.outer_iter() {
        for (a, v) in acc.iter_mut().zip(row.iter()) {
            *a += v.as_f64();
        }
    }
    acc.into_iter().map(T::of).collect()
}

fn log_sum_exp<T: Scalar>(row: impl Iterator<Item = T> + Clone) -> (f64, f64) {
    let max = row.clone().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let sum: f64 = row.map(|v| (v.as_f64() - max).exp()).sum();
    (max + sum.ln(), max)
}

/// Mean cross-entropy and row-wise softmax probabilities.
fn softmax_xent<T: Scalar>(logits: &Array2<T>, labels: &[usize]) -> (f64, Array2<T>) {
    let mut probs = Array2::zeros(logits.dim());
    let mut total = 0.0f64;
    for ((row, mut prow), &y) in logits.outer_iter().zip(probs.outer_iter_mut()).zip(labels) {
        let (lse, _) = log_sum_exp(row.iter().copied());
        total += lse - row[y].as_f64();
        for (p, &z) in prow.iter_mut().zip(row.iter()) {
            *p = T::of((z.as_f64() - lse).exp());
        }
    }
    (total / labels.len() as f64, probs)
}

pub(crate) fn argmax_rows<T: Scalar>(logits: &Array2<T>) -> Vec<usize> {
    logits
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Softmax probabilities of a logit matrix.
pub fn softmax<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
    let mut probs = logits.clone();
    for mut row in probs.outer_iter_mut() {
        let (lse, _) = log_sum_exp(row.iter().copied());
        row.mapv_inplace(|z| T::of((z.as_f64() - lse).exp()));
    }
    probs
}

const EVAL_CHUNK: usize = 2048;

/// Argmax accuracy over a dataset, evaluated in fixed-size row chunks.
pub fn predict_accuracy<T: Scalar>(params: &MlpParams<T>, dataset: &Dataset<T>) -> Result<f64> {
    check_dataset(params, dataset)?;
    let n = dataset.len();
    let mut hits = 0usize;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let pred = params.predict(dataset.features.slice(s![start..end, ..]))?;
        hits += pred.iter().zip(&dataset.labels[start..end]).filter(|(p, y)| p == y).count();
    }
    Ok(hits as f64 / n as f64)
}

/// Mean loss and accuracy over a dataset, chunked like [`predict_accuracy`].
pub fn loss_and_accuracy<T: Scalar>(params: &MlpParams<T>, dataset: &Dataset<T>) -> Result<(f64, f64)> {
    check_dataset(params, dataset)?;
    let n = dataset.len();
    let mut total = 0.0f64;
    let mut hits = 0usize;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let labels = &dataset.labels[start..end];
        let logits = params.forward(dataset.features.slice(s![start..end, ..]))?;
        for (row, &y) in logits.outer_iter().zip(labels) {
            let (lse, _) = log_sum_exp(row.iter().copied());
            total += lse - row[y].as_f64();
        }
        hits += argmax_rows(&logits).iter().zip(labels).filter(|(p, y)| p == y).count();
    }
    Ok((total / n as f64, hits as f64 / n as f64))
}

pub(crate) fn check_dataset<T: Scalar>(params: &MlpParams<T>, dataset: &Dataset<T>) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::invalid(format!("dataset {} is empty", dataset.name)));
    }
    if dataset.num_classes != params.spec().num_classes() {
        return Err(Error::invalid(format!(
            "dataset {} has {} classes, network outputs {}",
            dataset.name,
            dataset.num_classes,
            params.spec().num_classes()
        )));
    }
    Ok(())
}
