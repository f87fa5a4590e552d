//! Datasets: IDX ingestion, synthetic generators, rotation and label
//! splits, alpha-weighted mixtures and the PMDS1 container.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::{Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nnet::{self, MlpParams};
use crate::scalar::Scalar;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const PMDS_MAGIC: &[u8; 4] = b"PMDS";
const PMDS_VERSION: u32 = 1;

/// Labeled examples, one row per example.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub name: String,
    pub features: Array2<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    /// Validates shape, label range and that features lie in `[0, 1]`.
    pub fn new(name: impl Into<String>, features: Array2<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let ds = Self::new_unbounded(name, features, labels, num_classes)?;
        if ds.features.iter().any(|&v| v < T::zero() || v > T::one()) {
            return Err(Error::invalid(format!("dataset {}: features outside [0, 1]", ds.name)));
        }
        Ok(ds)
    }

    /// Like [`Dataset::new`] but allows features outside `[0, 1]`
    /// (condensed sets during optimisation).
    pub(crate) fn new_unbounded(
        name: impl Into<String>,
        features: Array2<T>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let name = name.into();
        if features.nrows() == 0 {
            return Err(Error::invalid(format!("dataset {name} is empty")));
        }
        if features.nrows() != labels.len() {
            return Err(Error::dim(format!(
                "dataset {name}: {} rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!("dataset {name}: label {bad} outside 0..{num_classes}")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("dataset {name}: non-finite feature")));
        }
        Ok(Dataset {
            name,
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            name: self.name.clone(),
            features: self.features.mapv(|v| U::of(v.as_f64())),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset<T> {
        Dataset {
            name: self.name.clone(),
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// The first `n` rows (or all of them).
    pub fn head(&self, n: usize) -> Dataset<T> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Row indices grouped by class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }
}

/// Anything metrics can be evaluated on: a single dataset, or a weighted
/// union of datasets whose metric is the weighted sum of per-part metrics.
pub trait EvalSet<T> {
    fn parts(&self) -> Vec<(&Dataset<T>, f64)>;

    fn num_classes(&self) -> usize;
}

impl<T: Scalar> EvalSet<T> for Dataset<T> {
    fn parts(&self) -> Vec<(&Dataset<T>, f64)> {
        vec![(self, 1.0)]
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// The alpha-weighted union of two datasets. Its loss is
/// `(1 - alpha) * L_A + alpha * L_B` by definition, whatever the part sizes.
#[derive(Clone, Copy, Debug)]
pub struct MixedDataset<'a, T> {
    pub part_a: &'a Dataset<T>,
    pub part_b: &'a Dataset<T>,
    pub alpha: f64,
}

impl<T: Scalar> EvalSet<T> for MixedDataset<'_, T> {
    fn parts(&self) -> Vec<(&Dataset<T>, f64)> {
        vec![(self.part_a, 1.0 - self.alpha), (self.part_b, self.alpha)]
    }

    fn num_classes(&self) -> usize {
        self.part_a.num_classes
    }
}

impl<T: Scalar> EvalSet<T> for &Dataset<T> {
    fn parts(&self) -> Vec<(&Dataset<T>, f64)> {
        vec![(*self, 1.0)]
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// Synthetic examples distilled from a source dataset, `ipc` rows per class.
#[derive(Clone, Debug, PartialEq)]
pub struct CondensedDataset<T> {
    pub source_name: String,
    pub ipc: usize,
    pub data: Dataset<T>,
}

impl<T: Scalar> CondensedDataset<T> {
    pub fn new(source_name: impl Into<String>, ipc: usize, data: Dataset<T>) -> Result<Self> {
        if ipc == 0 {
            return Err(Error::invalid("ipc must be at least 1"));
        }
        if data.class_counts().iter().any(|&c| c != ipc) {
            return Err(Error::invalid(format!(
                "condensed set must hold exactly {ipc} rows per class, got {:?}",
                data.class_counts()
            )));
        }
        Ok(CondensedDataset {
            source_name: source_name.into(),
            ipc,
            data,
        })
    }

    /// `<source>-cond<ipc>`.
    pub fn file_name(&self) -> String {
        format!("{}-cond{}", self.source_name, self.ipc)
    }

    /// Copy with features clamped to `[0, 1]`, named `<source>-cond<ipc>`.
    pub fn to_clamped_dataset(&self) -> Dataset<T> {
        Dataset {
            name: self.file_name(),
            features: self.data.features.mapv(|v| v.max(T::zero()).min(T::one())),
            labels: self.data.labels.clone(),
            num_classes: self.data.num_classes,
        }
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        return Ok(out);
    }
    Ok(raw)
}

fn be_u32(buf: &[u8], at: usize) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Io(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "truncated IDX header")))
}

fn truncated(what: &str) -> Error {
    Error::Io(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, format!("truncated {what}")))
}

fn idx_stem(path: &Path) -> String {
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = name.strip_suffix(".gz").unwrap_or(&name);
    let name = name.strip_suffix("-images-idx3-ubyte").unwrap_or(name);
    let name = name.strip_suffix("-idx3-ubyte").unwrap_or(name);
    name.to_string()
}

/// Reads an IDX image/label file pair (optionally gzip-compressed); pixels
/// are scaled by 1/255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset<f32>> {
    let images_path = images_path.as_ref();
    let images = read_all(images_path)?;
    let labels = read_all(labels_path.as_ref())?;

    let magic = be_u32(&images, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!("image file magic {magic:#010x}, expected 0x00000803")));
    }
    let magic = be_u32(&labels, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!("label file magic {magic:#010x}, expected 0x00000801")));
    }
    let n = be_u32(&images, 4)? as usize;
    let rows = be_u32(&images, 8)? as usize;
    let cols = be_u32(&images, 12)? as usize;
    let n_labels = be_u32(&labels, 4)? as usize;
    if n != n_labels {
        return Err(Error::invalid(format!("{n} images but {n_labels} labels")));
    }
    let d = rows * cols;
    let pixels = images.get(16..16 + n * d).ok_or_else(|| truncated("image payload"))?;
    let label_bytes = labels.get(8..8 + n).ok_or_else(|| truncated("label payload"))?;

    let features = Array2::from_shape_vec((n, d), pixels.iter().map(|&p| p as f32 / 255.0).collect())
        .expect("payload length checked");
    let labels: Vec<usize> = label_bytes.iter().map(|&y| y as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(idx_stem(images_path), features, labels, num_classes)
}

/// Gaussian clusters whose centres sit on a circle in the first two
/// coordinates (the unit circle mapped onto `[0, 1]^2`); the remaining
/// coordinates are centred noise. Rows interleave classes.
pub fn gen_blobs(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset<f32>> {
    if classes < 2 || per_class < 1 || dim < 2 {
        return Err(Error::invalid("gen_blobs needs classes >= 2, per_class >= 1, dim >= 2"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid("spread must be a finite non-negative number"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = classes * per_class;
    let mut features = Array2::<f32>::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for i in 0..per_class {
        for k in 0..classes {
            let row = i * classes + k;
            let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
            for j in 0..dim {
                let centre = match j {
                    0 => 0.5 + 0.5 * angle.cos(),
                    1 => 0.5 + 0.5 * angle.sin(),
                    _ => 0.5,
                };
                let v = centre + spread * normal.sample(&mut rng);
                features[[row, j]] = v.clamp(0.0, 1.0) as f32;
            }
            labels.push(k);
        }
    }
    Dataset::new(format!("blobs{classes}x{per_class}"), features, labels, classes)
}

/// Rotates every `height x width` image counterclockwise about its centre.
/// Multiples of 90 degrees on square images are exact index permutations;
/// other angles use bilinear interpolation with zero fill.
pub fn rotate<T: Scalar>(dataset: &Dataset<T>, degrees: f64, height: usize, width: usize) -> Result<Dataset<T>> {
    if dataset.dim() != height * width {
        return Err(Error::invalid(format!(
            "feature dimension {} is not {height}x{width}",
            dataset.dim()
        )));
    }
    if !degrees.is_finite() {
        return Err(Error::invalid("rotation angle must be finite"));
    }
    let turns = degrees / 90.0;
    let quarter = turns.round();
    let exact = (turns - quarter).abs() == 0.0 && (height == width || (quarter as i64).rem_euclid(2) == 0);
    let mut out = dataset.features.clone();
    if exact {
        let q = (quarter as i64).rem_euclid(4) as u8;
        if q != 0 {
            let map = quarter_turn_map(q, height, width);
            for (mut dst, src) in out.outer_iter_mut().zip(dataset.features.outer_iter()) {
                for (o, &s) in dst.iter_mut().zip(&map) {
                    *o = src[s];
                }
            }
        }
    } else {
        for (mut dst, src) in out.outer_iter_mut().zip(dataset.features.outer_iter()) {
            rotate_bilinear(src, dst.as_slice_mut().expect("row-major"), degrees, height, width);
        }
    }
    let name = format!("{}-rot{}", dataset.name, degrees);
    Ok(Dataset {
        name,
        features: out,
        labels: dataset.labels.clone(),
        num_classes: dataset.num_classes,
    })
}

/// Source pixel index for each output pixel of a rotation by `q` quarter
/// turns counterclockwise.
fn quarter_turn_map(q: u8, h: usize, w: usize) -> Vec<usize> {
    let mut map = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = match q {
                1 => (c, w - 1 - r),
                2 => (h - 1 - r, w - 1 - c),
                3 => (h - 1 - c, r),
                _ => (r, c),
            };
            map.push(sr * w + sc);
        }
    }
    map
}

pub(crate) fn rotate_bilinear<T: Scalar>(src: ArrayView1<T>, dst: &mut [T], degrees: f64, h: usize, w: usize) {
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let at = |r: i64, c: i64| -> f64 {
        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
            0.0
        } else {
            src[r as usize * w + c as usize].as_f64()
        }
    };
    for r in 0..h {
        for c in 0..w {
            let x = c as f64 - cx;
            let y = r as f64 - cy;
            let sx = x * cos - y * sin + cx;
            let sy = x * sin + y * cos + cy;
            let r0 = sy.floor();
            let c0 = sx.floor();
            let fr = sy - r0;
            let fc = sx - c0;
            let (r0, c0) = (r0 as i64, c0 as i64);
            let v = (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c0 + 1))
                + fr * ((1.0 - fc) * at(r0 + 1, c0) + fc * at(r0 + 1, c0 + 1));
            dst[r * w + c] = T::of(v.clamp(0.0, 1.0));
        }
    }
}

/// Partitions a dataset by two disjoint label sets. Labels keep their
/// global indices so both halves share one class space.
pub fn split_by_label<T: Scalar>(
    dataset: &Dataset<T>,
    labels_a: &[usize],
    labels_b: &[usize],
) -> Result<(Dataset<T>, Dataset<T>)> {
    let set_a: BTreeSet<usize> = labels_a.iter().copied().collect();
    let set_b: BTreeSet<usize> = labels_b.iter().copied().collect();
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::invalid("both label sets must be non-empty"));
    }
    if let Some(shared) = set_a.intersection(&set_b).next() {
        return Err(Error::invalid(format!("label {shared} appears in both sets")));
    }
    let mut idx_a = Vec::new();
    let mut idx_b = Vec::new();
    for (i, y) in dataset.labels.iter().enumerate() {
        if set_a.contains(y) {
            idx_a.push(i);
        } else if set_b.contains(y) {
            idx_b.push(i);
        } else {
            return Err(Error::invalid(format!("label {y} is in neither set")));
        }
    }
    if idx_a.is_empty() || idx_b.is_empty() {
        return Err(Error::invalid("a split would be empty"));
    }
    let a = dataset.select(&idx_a).renamed(format!("{}-split-a", dataset.name));
    let b = dataset.select(&idx_b).renamed(format!("{}-split-b", dataset.name));
    Ok((a, b))
}

pub fn mix<'a, T: Scalar>(a: &'a Dataset<T>, b: &'a Dataset<T>, alpha: f64) -> Result<MixedDataset<'a, T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    if a.num_classes != b.num_classes {
        return Err(Error::invalid(format!(
            "class counts differ: {} vs {}",
            a.num_classes, b.num_classes
        )));
    }
    if a.dim() != b.dim() {
        return Err(Error::dim(format!("feature dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    Ok(MixedDataset {
        part_a: a,
        part_b: b,
        alpha,
    })
}

/// Mean of model A's accuracy on B and model B's accuracy on A.
pub fn flipped_accuracy<T: Scalar>(
    params_a: &MlpParams<T>,
    params_b: &MlpParams<T>,
    a: &Dataset<T>,
    b: &Dataset<T>,
) -> Result<f64> {
    let a_on_b = nnet::predict_accuracy(params_a, b)?;
    let b_on_a = nnet::predict_accuracy(params_b, a)?;
    Ok(0.5 * (a_on_b + b_on_a))
}

/// Writes the PMDS1 container; features are stored as `f32`.
pub fn save_dataset<T: Scalar>(dataset: &Dataset<T>, path: impl AsRef<Path>) -> Result<()> {
    if dataset.num_classes > u16::MAX as usize + 1 {
        return Err(Error::invalid("PMDS1 stores labels as u16"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PMDS_MAGIC)?;
    w.write_all(&PMDS_VERSION.to_le_bytes())?;
    for v in [dataset.len(), dataset.dim(), dataset.num_classes] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for v in dataset.features.iter() {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    for &y in &dataset.labels {
        w.write_all(&(y as u16).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a PMDS1 file; the dataset is named after the file stem.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset<f32>> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PMDS_MAGIC {
        return Err(Error::format("not a PMDS file"));
    }
    let mut word = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word))
    };
    let version = read_u32(&mut r)?;
    if version != PMDS_VERSION {
        return Err(Error::format(format!("unsupported PMDS version {version}")));
    }
    let n = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let c = read_u32(&mut r)? as usize;
    let mut buf = vec![0u8; n * d * 4];
    r.read_exact(&mut buf)?;
    let features: Vec<f32> = buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let mut buf = vec![0u8; n * 2];
    r.read_exact(&mut buf)?;
    let labels: Vec<usize> = buf.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]]) as usize).collect();
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let features = Array2::from_shape_vec((n, d), features).map_err(|e| Error::format(e.to_string()))?;
    Dataset::new_unbounded(name, features, labels, c)
}

/// Reads a condensed set saved with [`save_dataset`]; `ipc` is recovered from
/// the per-class row counts.
pub fn load_condensed(path: impl AsRef<Path>) -> Result<CondensedDataset<f32>> {
    let data = load_dataset(path)?;
    let counts = data.class_counts();
    let ipc = counts[0];
    let source = match data.name.rsplit_once("-cond") {
        Some((src, _)) => src.to_string(),
        None => data.name.clone(),
    };
    CondensedDataset::new(source, ipc, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::MlpSpec;
    use crate::train::evaluate;
    use ndarray::array;

    fn idx_pair(dir: &Path, pixels: &[u8], labels: &[u8], rows: u32, cols: u32) -> (std::path::PathBuf, std::path::PathBuf) {
        let n = labels.len() as u32;
        let mut img = Vec::new();
        img.extend(IDX_IMAGES_MAGIC.to_be_bytes());
        for v in [n, rows, cols] {
            img.extend(v.to_be_bytes());
        }
        img.extend(pixels);
        let mut lab = Vec::new();
        lab.extend(IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend(n.to_be_bytes());
        lab.extend(labels);
        let (pi, pl) = (dir.join("tiny-images-idx3-ubyte"), dir.join("tiny-labels-idx1-ubyte"));
        std::fs::write(&pi, img).unwrap();
        std::fs::write(&pl, lab).unwrap();
        (pi, pl)
    }

    #[test]
    fn idx_fixture_scaling_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let pixels = [255, 0, 0, 0, 0, 128, 0, 0, 0, 0, 0, 255];
        let (pi, pl) = idx_pair(dir.path(), &pixels, &[0, 2, 1], 2, 2);
        let ds = load_idx(&pi, &pl).unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.num_classes), (3, 4, 3));
        assert_eq!(ds.features[[0, 0]], 1.0);
        assert_eq!(ds.features[[1, 1]], 128.0 / 255.0);
        assert_eq!(ds.name, "tiny");
        // labels passed as images and vice versa
        assert!(matches!(load_idx(&pl, &pi), Err(Error::Format(_))));
        assert!(matches!(load_idx(&pi, &pi), Err(Error::Format(_))));
        // truncated payload
        let raw = std::fs::read(&pi).unwrap();
        std::fs::write(&pi, &raw[..raw.len() - 1]).unwrap();
        assert!(matches!(load_idx(&pi, &pl), Err(Error::Io(_))));
        // count mismatch
        let (pi, pl) = idx_pair(dir.path(), &pixels, &[0, 2, 1], 2, 2);
        let mut lab = std::fs::read(&pl).unwrap();
        lab[7] = 2;
        std::fs::write(&pl, lab).unwrap();
        assert!(matches!(load_idx(&pi, &pl), Err(Error::Validation(_))));
    }

    #[test]
    fn gzip_idx_is_detected() {
        use flate2::{write::GzEncoder, Compression};
        let dir = tempfile::tempdir().unwrap();
        let (pi, pl) = idx_pair(dir.path(), &[1, 2, 3, 4], &[1], 2, 2);
        let gz = dir.path().join("tiny-images-idx3-ubyte.gz");
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&std::fs::read(&pi).unwrap()).unwrap();
        std::fs::write(&gz, enc.finish().unwrap()).unwrap();
        assert_eq!(load_idx(&gz, &pl).unwrap(), load_idx(&pi, &pl).unwrap());
    }

    #[test]
    fn blobs_are_deterministic() {
        let a = gen_blobs(4, 10, 3, 0.05, 7).unwrap();
        assert_eq!(a, gen_blobs(4, 10, 3, 0.05, 7).unwrap());
        assert_ne!(a, gen_blobs(4, 10, 3, 0.05, 8).unwrap());
        assert_eq!(a.class_counts(), vec![10; 4]);
        let flat = gen_blobs(3, 5, 2, 0.0, 1).unwrap();
        for c in 0..3 {
            let rows: Vec<_> = flat.indices_by_class()[c].iter().map(|&i| flat.features.row(i).to_vec()).collect();
            assert!(rows.windows(2).all(|w| w[0] == w[1]));
        }
        assert!(gen_blobs(1, 5, 2, 0.1, 0).is_err());
    }

    #[test]
    fn rotation_conventions() {
        let mut img = Array2::<f32>::zeros((1, 16));
        img[[0, 0]] = 1.0;
        let ds = Dataset::new("px", img, vec![0], 1).unwrap();
        let r = rotate(&ds, 90.0, 4, 4).unwrap();
        assert_eq!(r.features[[0, 3 * 4]], 1.0);
        assert_eq!(r.features.sum(), 1.0);
        assert_eq!(rotate(&ds, 0.0, 4, 4).unwrap().features, ds.features);
        assert!(rotate(&ds, 90.0, 3, 5).is_err());
    }

    #[test]
    fn quarter_turns_compose_exactly() {
        let data = gen_blobs(2, 3, 30, 0.3, 4).unwrap();
        let once = rotate(&rotate(&data, 90.0, 5, 6).unwrap(), 270.0, 5, 6);
        // non-square 90 degree turns go through the bilinear path
        assert!(once.is_ok());
        let sq = gen_blobs(2, 3, 36, 0.3, 4).unwrap();
        let back = rotate(&rotate(&sq, 90.0, 6, 6).unwrap(), 270.0, 6, 6).unwrap();
        assert_eq!(back.features, sq.features);
        let mut cur = sq.clone();
        for _ in 0..4 {
            cur = rotate(&cur, 90.0, 6, 6).unwrap();
        }
        assert_eq!(cur.features, sq.features);
        assert_eq!(rotate(&sq, 180.0, 6, 6).unwrap().features, rotate(&sq, -180.0, 6, 6).unwrap().features);
    }

    #[test]
    fn bilinear_small_angle_stays_close() {
        let data = gen_blobs(2, 2, 64, 0.2, 1).unwrap();
        let r = rotate(&data, 1e-9, 8, 8).unwrap();
        let diff = (&r.features - &data.features).mapv(f32::abs).fold(0.0f32, |m, &v| m.max(v));
        assert!(diff < 1e-6);
        assert!(r.name.ends_with("-rot0.000000001"));
    }

    #[test]
    fn split_partitions() {
        let data = gen_blobs(4, 6, 2, 0.1, 0).unwrap();
        let (a, b) = split_by_label(&data, &[0, 1], &[2, 3]).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(b.len(), 12);
        assert!(a.labels.iter().all(|&y| y < 2));
        assert!(b.labels.iter().all(|&y| y >= 2));
        assert_eq!(a.num_classes, 4);
        assert!(split_by_label(&data, &[0, 1], &[]).is_err());
        assert!(split_by_label(&data, &[0, 1, 2], &[2, 3]).is_err());
        assert!(split_by_label(&data, &[0], &[2, 3]).is_err());
    }

    #[test]
    fn mixture_metrics_are_weighted() {
        let spec = MlpSpec::new(vec![2, 3, 4], true).unwrap();
        let p = MlpParams::<f32>::init(&spec, 1);
        let a = gen_blobs(4, 5, 2, 0.1, 0).unwrap();
        let b = gen_blobs(4, 7, 2, 0.2, 1).unwrap();
        let ma = evaluate(&p, &a).unwrap();
        let mb = evaluate(&p, &b).unwrap();
        let m0 = evaluate(&p, &mix(&a, &b, 0.0).unwrap()).unwrap();
        assert_eq!(m0, ma);
        let mh = evaluate(&p, &mix(&a, &b, 0.5).unwrap()).unwrap();
        assert!((mh.loss - 0.5 * (ma.loss + mb.loss)).abs() < 1e-7);
        assert!(mix(&a, &b, 1.5).is_err());
        let c3 = gen_blobs(3, 5, 2, 0.1, 0).unwrap();
        assert!(mix(&a, &c3, 0.5).is_err());
    }

    #[test]
    fn mixture_accuracy_example() {
        // constant predictor for class 0: perfect on an all-zero-label set,
        // 0.1 on a balanced 10-class set
        let spec = MlpSpec::new(vec![1, 10], true).unwrap();
        let p = MlpParams::<f32>::zeros(&spec);
        let a = Dataset::new("a", Array2::zeros((10, 1)), vec![0; 10], 10).unwrap();
        let b = Dataset::new("b", Array2::zeros((10, 1)), (0..10).collect(), 10).unwrap();
        let m = evaluate(&p, &mix(&a, &b, 0.5).unwrap()).unwrap();
        assert!((m.accuracy - 0.55).abs() < 1e-12);
    }

    #[test]
    fn flipped_accuracy_is_symmetric() {
        let spec = MlpSpec::new(vec![2, 4], true).unwrap();
        let p = MlpParams::<f32>::init(&spec, 3);
        let q = MlpParams::<f32>::init(&spec, 4);
        let a = gen_blobs(4, 5, 2, 0.1, 0).unwrap();
        let b = gen_blobs(4, 5, 2, 0.1, 1).unwrap();
        let f = flipped_accuracy(&p, &q, &a, &b).unwrap();
        assert_eq!(f, flipped_accuracy(&q, &p, &b, &a).unwrap());
        assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn pmds_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_blobs(3, 4, 5, 0.2, 2).unwrap();
        let path = dir.path().join("blobs.pmds");
        save_dataset(&data, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.features, data.features);
        assert_eq!(back.labels, data.labels);
        assert_eq!(back.name, "blobs");
        let raw = std::fs::read(&path).unwrap();
        std::fs::write(&path, &raw[..raw.len() - 3]).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Io(_))));
        let mut bad = raw.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format(_))));
        let mut bad = raw;
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format(_))));
    }

    #[test]
    fn condensed_round_trip_keeps_ipc() {
        let dir = tempfile::tempdir().unwrap();
        let feats = array![[1.5f32, -0.2], [0.3, 0.4], [0.1, 0.9], [0.5, 0.5]];
        let data = Dataset::new_unbounded("x", feats, vec![0, 1, 0, 1], 2).unwrap();
        let cond = CondensedDataset::new("src", 2, data).unwrap();
        let export = cond.to_clamped_dataset();
        assert_eq!(export.features[[0, 0]], 1.0);
        assert_eq!(export.features[[0, 1]], 0.0);
        let path = dir.path().join(format!("{}.pmds", cond.file_name()));
        save_dataset(&export, &path).unwrap();
        let back = load_condensed(&path).unwrap();
        assert_eq!(back.ipc, 2);
        assert_eq!(back.source_name, "src");
        assert_eq!(back.data.class_counts(), vec![2, 2]);
        let uneven = Dataset::<f32>::new("u", Array2::zeros((3, 1)), vec![0, 1, 1], 2).unwrap();
        assert!(CondensedDataset::new("u", 1, uneven).is_err());
    }
}
