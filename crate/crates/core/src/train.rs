//! Deterministic minibatch training, evaluation and PMCK1 checkpoints.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EvalSet};
use crate::error::{Error, Result};
use crate::nnet::{self, Layer, MlpParams, MlpSpec};
use crate::scalar::Scalar;

const PMCK_MAGIC: &[u8; 4] = b"PMCK";
const PMCK_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::SgdMomentum { momentum: 0.9 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::default(),
            learning_rate: 0.01,
            schedule: LrSchedule::Cosine,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// Per-parameter optimizer state.
pub struct OptimizerState<T> {
    kind: Optimizer,
    first: MlpParams<T>,
    second: Option<MlpParams<T>>,
    steps: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(spec: &MlpSpec, kind: Optimizer) -> Self {
        OptimizerState {
            kind,
            first: MlpParams::zeros(spec),
            second: matches!(kind, Optimizer::Adam { .. }).then(|| MlpParams::zeros(spec)),
            steps: 0,
        }
    }

    /// One update with coupled L2 weight decay.
    pub fn step(&mut self, params: &mut MlpParams<T>, grad: &MlpParams<T>, lr: f64, weight_decay: f64) {
        self.steps += 1;
        let wd = T::of(weight_decay);
        let lr_t = T::of(lr);
        match self.kind {
            Optimizer::SgdMomentum { momentum } => {
                let mu = T::of(momentum);
                let layers = params.layers_mut().iter_mut().zip(grad.layers()).zip(self.first.layers_mut());
                for ((p, g), v) in layers {
                    sgd_update(&mut p.weight, &g.weight, &mut v.weight, mu, lr_t, wd);
                    if let (Some(pb), Some(gb), Some(vb)) = (p.bias.as_mut(), g.bias.as_ref(), v.bias.as_mut()) {
                        sgd_update(pb, gb, vb, mu, lr_t, wd);
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.steps as i32);
                let c2 = 1.0 - beta2.powi(self.steps as i32);
                let step_size = T::of(lr * c2.sqrt() / c1);
                let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(eps * c2.sqrt()));
                let second = self.second.as_mut().expect("adam state");
                let layers = params
                    .layers_mut()
                    .iter_mut()
                    .zip(grad.layers())
                    .zip(self.first.layers_mut())
                    .zip(second.layers_mut());
                for (((p, g), m), v) in layers {
                    adam_update(&mut p.weight, &g.weight, &mut m.weight, &mut v.weight, b1, b2, eps, step_size, wd);
                    if let (Some(pb), Some(gb), Some(mb), Some(vb)) =
                        (p.bias.as_mut(), g.bias.as_ref(), m.bias.as_mut(), v.bias.as_mut())
                    {
                        adam_update(pb, gb, mb, vb, b1, b2, eps, step_size, wd);
                    }
                }
            }
        }
    }
}

fn sgd_update<T: Scalar, D: ndarray::Dimension>(
    p: &mut ndarray::Array<T, D>,
    g: &ndarray::Array<T, D>,
    v: &mut ndarray::Array<T, D>,
    mu: T,
    lr: T,
    wd: T,
) {
    ndarray::Zip::from(p).and(g).and(v).for_each(|p, &g, v| {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    });
}

#[allow(clippy::too_many_arguments)]
fn adam_update<T: Scalar, D: ndarray::Dimension>(
    p: &mut ndarray::Array<T, D>,
    g: &ndarray::Array<T, D>,
    m: &mut ndarray::Array<T, D>,
    v: &mut ndarray::Array<T, D>,
    b1: T,
    b2: T,
    eps: T,
    step: T,
    wd: T,
) {
    let one = T::one();
    ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        let g = g + wd * *p;
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        *p -= step * *m / (v.sqrt() + eps);
    });
}

pub(crate) fn scheduled_lr(base: f64, schedule: LrSchedule, step: usize, total: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine if total > 0 => {
            base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
        }
        LrSchedule::Cosine => base,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug)]
pub struct TrainRun<T> {
    pub params: MlpParams<T>,
    pub history: Vec<EpochStats>,
}

/// Trains from `init(spec, seed)`; epoch shuffling is driven by `config.seed`
/// alone. History holds the running minibatch loss/accuracy of each epoch.
pub fn train<T: Scalar>(dataset: &Dataset<T>, spec: &MlpSpec, config: &TrainConfig) -> Result<TrainRun<T>> {
    spec.validate()?;
    config.validate()?;
    if dataset.num_classes != spec.num_classes() {
        return Err(Error::invalid(format!(
            "dataset {} has {} classes, spec outputs {}",
            dataset.name,
            dataset.num_classes,
            spec.num_classes()
        )));
    }
    if dataset.dim() != spec.input_dim() {
        return Err(Error::dim(format!(
            "dataset {} has {} features, spec expects {}",
            dataset.name,
            dataset.dim(),
            spec.input_dim()
        )));
    }
    let mut params = MlpParams::<T>::init(spec, config.seed);
    let mut opt = OptimizerState::new(spec, config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed_5eed_5eed);
    let n = dataset.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        let mut lr = config.learning_rate;
        for chunk in order.chunks(config.batch_size) {
            let x = dataset.features.select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
            let bundle = params.loss_and_grad(x.view(), &y)?;
            if !bundle.loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss at epoch {epoch}, step {step}")));
            }
            loss_sum += bundle.loss * chunk.len() as f64;
            hits += bundle.correct;
            lr = scheduled_lr(config.learning_rate, config.schedule, step, total_steps);
            opt.step(&mut params, &bundle.grads, lr, config.weight_decay);
            step += 1;
        }
        history.push(EpochStats {
            epoch,
            loss: loss_sum / n as f64,
            accuracy: hits as f64 / n as f64,
            learning_rate: lr,
        });
    }
    Ok(TrainRun { params, history })
}

/// Concatenation of two datasets where the smaller one is resampled (with
/// replacement, seeded) up to the size of the larger one.
pub fn balanced_concat<T: Scalar>(a: &Dataset<T>, b: &Dataset<T>, seed: u64) -> Result<Dataset<T>> {
    if a.num_classes != b.num_classes || a.dim() != b.dim() {
        return Err(Error::invalid("datasets disagree on class count or feature dimension"));
    }
    let target = a.len().max(b.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut resample = |d: &Dataset<T>| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..d.len()).collect();
        while idx.len() < target {
            idx.push(rng.random_range(0..d.len()));
        }
        idx
    };
    let ia = resample(a);
    let ib = resample(b);
    let fa = a.features.select(Axis(0), &ia);
    let fb = b.features.select(Axis(0), &ib);
    let features = ndarray::concatenate(Axis(0), &[fa.view(), fb.view()]).map_err(|e| Error::dim(e.to_string()))?;
    let labels = ia.iter().map(|&i| a.labels[i]).chain(ib.iter().map(|&i| b.labels[i])).collect();
    Dataset::new_unbounded(format!("{}+{}", a.name, b.name), features, labels, a.num_classes)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// Loss and accuracy; on a mixture, the weighted combination of per-part
/// metrics.
pub fn evaluate<T: Scalar>(params: &MlpParams<T>, set: &impl EvalSet<T>) -> Result<Metrics> {
    let mut out = Metrics::default();
    for (part, weight) in set.parts() {
        let (loss, acc) = nnet::loss_and_accuracy(params, part)?;
        out.loss += weight * loss;
        out.accuracy += weight * acc;
    }
    Ok(out)
}

/// Accuracy of the argmax of the averaged softmax outputs of two models.
pub fn ensemble_accuracy<T: Scalar>(a: &MlpParams<T>, b: &MlpParams<T>, set: &impl EvalSet<T>) -> Result<f64> {
    a.check_same_spec(b)?;
    let mut acc = 0.0;
    for (part, weight) in set.parts() {
        nnet::check_dataset(a, part)?;
        let pa = nnet::softmax(&a.forward(part.features.view())?);
        let pb = nnet::softmax(&b.forward(part.features.view())?);
        let avg = (pa + pb).mapv(|v| v * T::of(0.5));
        let pred = nnet::argmax_rows(&avg);
        let hits = pred.iter().zip(&part.labels).filter(|(p, y)| p == y).count();
        acc += weight * hits as f64 / part.len() as f64;
    }
    Ok(acc)
}

/// A trained network plus free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: MlpSpec,
    pub params: MlpParams<f32>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(params: MlpParams<f32>, metadata: BTreeMap<String, serde_json::Value>) -> Self {
        Checkpoint {
            spec: params.spec().clone(),
            params,
            metadata,
        }
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&checkpoint_bytes(ckpt)?)?;
    w.flush()?;
    Ok(())
}

/// PMCK1 encoding of a checkpoint.
pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let spec = &ckpt.spec;
    let mut out = Vec::new();
    out.extend_from_slice(PMCK_MAGIC);
    out.extend_from_slice(&PMCK_VERSION.to_le_bytes());
    out.extend_from_slice(&(spec.layer_sizes.len() as u32).to_le_bytes());
    for &d in &spec.layer_sizes {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(spec.use_bias as u8);
    for layer in ckpt.params.layers() {
        for v in layer.weight.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in layer.bias.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = serde_json::to_vec(&ckpt.metadata).map_err(|e| Error::format(e.to_string()))?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PMCK_MAGIC {
        return Err(Error::format("not a PMCK checkpoint"));
    }
    let version = read_u32(&mut r)?;
    if version != PMCK_VERSION {
        return Err(Error::format(format!("unsupported PMCK version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    if !(2..=64).contains(&count) {
        return Err(Error::format(format!("implausible layer count {count}")));
    }
    let sizes = (0..count).map(|_| read_u32(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let use_bias = match flag[0] {
        0 => false,
        1 => true,
        other => return Err(Error::format(format!("bad use_bias byte {other}"))),
    };
    let spec = MlpSpec::new(sizes, use_bias).map_err(|e| Error::format(e.to_string()))?;
    let mut layers = Vec::with_capacity(spec.num_layers());
    for l in 0..spec.num_layers() {
        let (rows, cols) = spec.weight_shape(l);
        let weight = Array2::from_shape_vec((rows, cols), read_f32s(&mut r, rows * cols)?).expect("sized read");
        let bias = if use_bias {
            Some(Array1::from(read_f32s(&mut r, rows)?))
        } else {
            None
        };
        layers.push(Layer { weight, bias });
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let metadata = serde_json::from_slice(&meta).map_err(|e| Error::format(format!("metadata: {e}")))?;
    let params = MlpParams::from_layers(&spec, layers)?;
    Ok(Checkpoint {
        spec,
        params,
        metadata,
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;

    fn spec() -> MlpSpec {
        MlpSpec::new(vec![2, 16, 4], true).unwrap()
    }

    #[test]
    fn zero_epochs_returns_init() {
        let data = gen_blobs(4, 4, 2, 0.05, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = train::<f32>(&data, &spec(), &cfg).unwrap();
        assert_eq!(run.params, MlpParams::init(&spec(), 5));
        assert!(run.history.is_empty());
    }

    #[test]
    fn overfits_small_blobs_deterministically() {
        let data = gen_blobs(4, 16, 2, 0.05, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 16,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let a = train::<f32>(&data, &spec(), &cfg).unwrap();
        let b = train::<f32>(&data, &spec(), &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(nnet::predict_accuracy(&a.params, &data).unwrap(), 1.0);
        assert_eq!(evaluate(&a.params, &data).unwrap().accuracy, 1.0);
    }

    #[test]
    fn full_batch_sgd_loss_is_nonincreasing() {
        let data = gen_blobs(4, 16, 2, 0.05, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.01,
            schedule: LrSchedule::Constant,
            ..TrainConfig::default()
        };
        let run = train::<f64>(&data.cast(), &spec(), &cfg).unwrap();
        assert!(run.history.windows(2).all(|w| w[1].loss <= w[0].loss));
    }

    #[test]
    fn adam_trains_too() {
        let data = gen_blobs(4, 16, 2, 0.05, 1).unwrap();
        let cfg = TrainConfig {
            optimizer: Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            epochs: 60,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let run = train::<f32>(&data, &spec(), &cfg).unwrap();
        assert!(run.history.last().unwrap().loss < run.history[0].loss);
    }

    #[test]
    fn rejects_bad_config_and_class_mismatch() {
        let data = gen_blobs(3, 4, 2, 0.05, 0).unwrap();
        assert!(train::<f32>(&data, &spec(), &TrainConfig::default()).is_err());
        let data = gen_blobs(4, 4, 2, 0.05, 0).unwrap();
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(train::<f32>(&data, &spec(), &cfg).is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 0.1}"#).is_err());
        let cfg: TrainConfig = serde_json::from_str(r#"{"optimizer":{"kind":"adam","beta1":0.9,"beta2":0.99,"eps":1e-8}}"#).unwrap();
        assert!(matches!(cfg.optimizer, Optimizer::Adam { .. }));
    }

    #[test]
    fn ensemble_of_identical_models() {
        let data = gen_blobs(4, 8, 2, 0.1, 0).unwrap();
        let p = MlpParams::<f32>::init(&spec(), 1);
        let single = evaluate(&p, &data).unwrap().accuracy;
        assert_eq!(ensemble_accuracy(&p, &p, &data).unwrap(), single);
    }

    #[test]
    fn balanced_concat_equalises_parts() {
        let a = gen_blobs(4, 2, 2, 0.1, 0).unwrap();
        let b = gen_blobs(4, 5, 2, 0.1, 1).unwrap();
        let c = balanced_concat(&a, &b, 0).unwrap();
        assert_eq!(c.len(), 40);
        assert_eq!(c, balanced_concat(&a, &b, 0).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_blobs(4, 8, 2, 0.1, 0).unwrap();
        let p = MlpParams::<f32>::init(&spec(), 7);
        let m = evaluate(&p, &data).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("accuracy".to_string(), serde_json::json!(m.accuracy));
        meta.insert("loss".to_string(), serde_json::json!(m.loss));
        let ckpt = Checkpoint::new(p.clone(), meta);
        let path = dir.path().join("a.pmck");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        let again = evaluate(&back.params, &data).unwrap();
        assert!((again.loss - back.metadata["loss"].as_f64().unwrap()).abs() < 1e-6);

        let mut raw = std::fs::read(&path).unwrap();
        raw[1] = b'X';
        std::fs::write(&path, &raw).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
        raw[1] = b'M';
        raw[4] = 2;
        std::fs::write(&path, &raw).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
        raw[4] = 1;
        std::fs::write(&path, &raw[..raw.len() - 10]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(scheduled_lr(0.1, LrSchedule::Cosine, 0, 10), 0.1);
        assert!(scheduled_lr(0.1, LrSchedule::Cosine, 10, 10).abs() < 1e-15);
        assert_eq!(scheduled_lr(0.1, LrSchedule::Constant, 7, 10), 0.1);
    }
}
