//! Dataset ingestion and protocol splits.
//!
//! Multi-class IDX datasets (MNIST layout) are filtered down to a single
//! known class and arranged into one of two evaluation splits:
//!
//! - **Protocol 1**: 80% of the in-class pool trains the model (with a
//!   validation carve-out), the remaining 20% become test positives, and an
//!   equal number of seeded out-of-class negatives balance the test set.
//! - **Protocol 2**: the canonical train split filtered to the known class
//!   trains the model; the full canonical test split of all classes is the
//!   test set.
//!
//! Pixels are normalized to `[0,1]` by division by 255. Training inputs are
//! corrupted with zero-mean Gaussian noise; scoring never adds noise.

mod idx;

pub use idx::{parse_idx, serialize_idx};

use std::path::Path;

use ndarray::{Array1, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::rng;
use crate::Real;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed IDX data: {0}")]
    Format(String),
    #[error("truncated IDX data: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("unsupported IDX dtype 0x{0:02x} (only unsigned byte 0x08)")]
    UnsupportedDtype(u8),
    #[error("class {0} has no examples in the dataset")]
    EmptyClass(u8),
    #[error("not enough out-of-class examples: need {needed}, have {available}")]
    InsufficientNegatives { needed: usize, available: usize },
    #[error("test set must contain both in-class and out-of-class examples")]
    DegenerateTest,
    #[error("protocol 2 requires a separate canonical test dataset")]
    MissingTestSplit,
    #[error("images/labels count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// A multi-class pool of raw images, straight out of the IDX files.
#[derive(Debug, Clone)]
pub struct RawDataset {
    images: Array3<u8>,
    labels: Array1<u8>,
}

impl RawDataset {
    pub fn new(images: Array3<u8>, labels: Array1<u8>) -> Result<Self, DataError> {
        if images.len_of(Axis(0)) != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.len_of(Axis(0)),
                labels: labels.len(),
            });
        }
        Ok(Self { images, labels })
    }

    /// Load an (images, labels) IDX file pair.
    pub fn from_idx_files(images_path: &Path, labels_path: &Path) -> Result<Self, DataError> {
        let read = |p: &Path| {
            std::fs::read(p).map_err(|source| DataError::Io {
                context: format!("reading {}", p.display()),
                source,
            })
        };
        let images = parse_idx(&read(images_path)?)?;
        let labels = parse_idx(&read(labels_path)?)?;
        if images.ndim() != 3 {
            return Err(DataError::Format(format!(
                "expected rank-3 image tensor, got rank {}",
                images.ndim()
            )));
        }
        if labels.ndim() != 1 {
            return Err(DataError::Format(format!(
                "expected rank-1 label tensor, got rank {}",
                labels.ndim()
            )));
        }
        let images = images.into_dimensionality().expect("rank checked");
        let labels = labels.into_dimensionality().expect("rank checked");
        Self::new(images, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Array3<u8> {
        &self.images
    }

    pub fn labels(&self) -> &Array1<u8> {
        &self.labels
    }

    pub fn image_side(&self) -> (usize, usize) {
        (self.images.len_of(Axis(1)), self.images.len_of(Axis(2)))
    }

    /// Indices of all examples with the given label, in dataset order.
    pub fn class_indices(&self, class: u8) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Concatenate two pools (Protocol 1 draws from all available data).
    pub fn concat(&self, other: &RawDataset) -> Result<RawDataset, DataError> {
        if self.image_side() != other.image_side() {
            return Err(DataError::Format(
                "cannot concatenate datasets with different image sizes".into(),
            ));
        }
        let images = ndarray::concatenate(Axis(0), &[self.images.view(), other.images.view()])
            .expect("sides checked");
        let labels = ndarray::concatenate(Axis(0), &[self.labels.view(), other.labels.view()])
            .expect("1-d");
        RawDataset::new(images, labels)
    }

    /// Normalized `(n, 1, h, w)` batch of the selected examples.
    pub fn select<R: Real>(&self, indices: &[usize]) -> ImageBatch<R> {
        let (h, w) = self.image_side();
        let mut data = Array4::<R>::zeros((indices.len(), 1, h, w));
        for (row, &i) in indices.iter().enumerate() {
            let src = self.images.index_axis(Axis(0), i);
            let mut dst = data.index_axis_mut(Axis(0), row);
            for y in 0..h {
                for x in 0..w {
                    dst[[0, y, x]] = R::from_f64(src[[y, x]] as f64 / 255.0);
                }
            }
        }
        ImageBatch { data }
    }
}

/// Which split convention to follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Protocol {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Protocol::One => write!(f, "1"),
            Protocol::Two => write!(f, "2"),
        }
    }
}

/// Recipe for building an [`EvalSplit`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SplitPlan {
    pub protocol: Protocol,
    pub known_class: u8,
    pub seed: u64,
    pub val_fraction: f64,
}

impl SplitPlan {
    pub fn new(
        protocol: Protocol,
        known_class: u8,
        seed: u64,
        val_fraction: f64,
    ) -> Result<Self, DataError> {
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(DataError::InvalidParameter(format!(
                "val_fraction must lie strictly in (0,1), got {val_fraction}"
            )));
        }
        Ok(Self {
            protocol,
            known_class,
            seed,
            val_fraction,
        })
    }
}

/// Normalized image tensor `(batch, 1, h, w)` with entries in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch<R: Real> {
    data: Array4<R>,
}

impl<R: Real> ImageBatch<R> {
    /// Wrap a pre-normalized tensor, checking the `[0,1]` range.
    pub fn from_pixels(data: Array4<R>) -> Result<Self, DataError> {
        if data
            .iter()
            .any(|&v| !(v >= R::zero() && v <= R::one()))
        {
            return Err(DataError::InvalidParameter(
                "image batch entries must lie in [0,1]".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array4<R> {
        &self.data
    }

    pub fn into_data(self) -> Array4<R> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy out the `i`-th image as a single-element batch.
    pub fn single(&self, i: usize) -> ImageBatch<R> {
        let img = self.data.index_axis(Axis(0), i).insert_axis(Axis(0));
        ImageBatch {
            data: img.to_owned(),
        }
    }
}

/// One-class train/val/test arrangement.
#[derive(Debug, Clone)]
pub struct EvalSplit<R: Real> {
    pub train: ImageBatch<R>,
    pub val: ImageBatch<R>,
    pub test_images: ImageBatch<R>,
    /// 1 = in-class, 0 = out-of-class.
    pub test_labels: Vec<u8>,
}

/// Gaussian corruption applied to training inputs.
///
/// The variance is taken literally (standard deviation `sqrt(variance)`).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NoiseSpec {
    pub mean: f64,
    pub variance: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(mean: f64, variance: f64, seed: u64) -> Result<Self, DataError> {
        if !(variance > 0.0) {
            return Err(DataError::InvalidParameter(format!(
                "noise variance must be positive, got {variance}"
            )));
        }
        Ok(Self {
            mean,
            variance,
            seed,
        })
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            mean: 0.0,
            variance: 0.2,
            seed: 0,
        }
    }
}

fn carve_val(pool_len: usize, val_fraction: f64) -> usize {
    // Floor with a tiny epsilon so 0.1 * 80 lands on 8, not 7.999… artifacts.
    let n = ((pool_len as f64) * val_fraction + 1e-9).floor() as usize;
    if n == 0 && pool_len >= 2 {
        1
    } else {
        n
    }
}

/// Build the train/val/test arrangement for a plan.
///
/// Protocol 1 uses `pool` alone; Protocol 2 additionally needs the dataset's
/// canonical test split as `test_pool`.
pub fn build_split<R: Real>(
    pool: &RawDataset,
    test_pool: Option<&RawDataset>,
    plan: &SplitPlan,
) -> Result<EvalSplit<R>, DataError> {
    match plan.protocol {
        Protocol::One => {
            let mut known = pool.class_indices(plan.known_class);
            if known.is_empty() {
                return Err(DataError::EmptyClass(plan.known_class));
            }
            known.shuffle(&mut rng::stream(plan.seed, "split/p1-known"));
            let n = known.len();
            let n_train_pool = n * 4 / 5;
            let n_test_pos = n - n_train_pool;
            if n_test_pos == 0 || n_train_pool == 0 {
                return Err(DataError::DegenerateTest);
            }
            let n_val = carve_val(n_train_pool, plan.val_fraction);
            let train_idx = &known[..n_train_pool - n_val];
            let val_idx = &known[n_train_pool - n_val..n_train_pool];
            let pos_idx = &known[n_train_pool..];

            let mut others: Vec<usize> = (0..pool.len())
                .filter(|&i| pool.labels()[i] != plan.known_class)
                .collect();
            if others.len() < n_test_pos {
                return Err(DataError::InsufficientNegatives {
                    needed: n_test_pos,
                    available: others.len(),
                });
            }
            others.shuffle(&mut rng::stream(plan.seed, "split/p1-negatives"));
            let neg_idx = &others[..n_test_pos];

            let test_idx: Vec<usize> = pos_idx.iter().chain(neg_idx.iter()).copied().collect();
            let mut test_labels = vec![1u8; pos_idx.len()];
            test_labels.extend(std::iter::repeat(0u8).take(neg_idx.len()));

            Ok(EvalSplit {
                train: pool.select(train_idx),
                val: pool.select(val_idx),
                test_images: pool.select(&test_idx),
                test_labels,
            })
        }
        Protocol::Two => {
            let test_pool = test_pool.ok_or(DataError::MissingTestSplit)?;
            let mut known = pool.class_indices(plan.known_class);
            if known.is_empty() {
                return Err(DataError::EmptyClass(plan.known_class));
            }
            known.shuffle(&mut rng::stream(plan.seed, "split/p2-train"));
            let n_val = carve_val(known.len(), plan.val_fraction);
            let val_idx = &known[known.len() - n_val..];
            let train_idx = &known[..known.len() - n_val];

            let test_idx: Vec<usize> = (0..test_pool.len()).collect();
            let test_labels: Vec<u8> = test_pool
                .labels()
                .iter()
                .map(|&l| u8::from(l == plan.known_class))
                .collect();
            let n_pos: usize = test_labels.iter().map(|&l| l as usize).sum();
            if n_pos == 0 || n_pos == test_labels.len() {
                return Err(DataError::DegenerateTest);
            }

            Ok(EvalSplit {
                train: pool.select(train_idx),
                val: pool.select(val_idx),
                test_images: test_pool.select(&test_idx),
                test_labels,
            })
        }
    }
}

/// Corrupt a batch with seeded Gaussian noise. The result is intentionally
/// not clamped to `[0,1]`; the encoder consumes it raw.
pub fn inject_noise<R: Real>(batch: &ImageBatch<R>, spec: &NoiseSpec) -> Array4<R> {
    let mut stream = rng::stream(spec.seed, "noise");
    add_noise_with(batch.data(), spec.mean, spec.variance.sqrt(), &mut stream)
}

pub(crate) fn add_noise_with<R: Real>(
    data: &Array4<R>,
    mean: f64,
    std_dev: f64,
    stream: &mut rand_chacha::ChaCha8Rng,
) -> Array4<R> {
    let noise = rng::gaussian::<R>(stream, data.shape(), mean, std_dev)
        .into_dimensionality::<ndarray::Ix4>()
        .expect("same rank");
    data + &noise
}

/// Seeded shuffle followed by contiguous chunks; the final short chunk is
/// kept. An empty input yields an empty sequence.
pub fn batches<R: Real>(
    part: &ImageBatch<R>,
    batch_size: usize,
    shuffle_seed: u64,
) -> Vec<ImageBatch<R>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..part.len()).collect();
    order.shuffle(&mut rng::stream(shuffle_seed, "batches"));
    order
        .chunks(batch_size)
        .map(|chunk| {
            let mut data = Array4::<R>::zeros((
                chunk.len(),
                1,
                part.data().len_of(Axis(2)),
                part.data().len_of(Axis(3)),
            ));
            for (row, &i) in chunk.iter().enumerate() {
                data.index_axis_mut(Axis(0), row)
                    .assign(&part.data().index_axis(Axis(0), i));
            }
            ImageBatch { data }
        })
        .collect()
}

/// Load the canonical `(train, test)` IDX pair from a directory using the
/// MNIST/fMNIST file names.
pub fn load_canonical_dir(dir: &Path) -> Result<(RawDataset, RawDataset), DataError> {
    let train = RawDataset::from_idx_files(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = RawDataset::from_idx_files(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn toy_dataset(counts: &[usize]) -> RawDataset {
        // counts[c] examples of class c; pixel value encodes the class.
        let total: usize = counts.iter().sum();
        let mut images = Array3::<u8>::zeros((total, 4, 4));
        let mut labels = Array1::<u8>::zeros(total);
        let mut row = 0;
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                images
                    .index_axis_mut(Axis(0), row)
                    .fill((c * 20) as u8);
                labels[row] = c as u8;
                row += 1;
            }
        }
        RawDataset::new(images, labels).unwrap()
    }

    #[test]
    fn protocol1_split_sizes_match_contract() {
        // 100 known examples, val fraction 0.1 → 72 / 8 / 20+20.
        let data = toy_dataset(&[100, 50]);
        let plan = SplitPlan::new(Protocol::One, 0, 7, 0.1).unwrap();
        let split: EvalSplit<f32> = build_split(&data, None, &plan).unwrap();
        assert_eq!(split.train.len(), 72);
        assert_eq!(split.val.len(), 8);
        assert_eq!(split.test_images.len(), 40);
        let pos: usize = split.test_labels.iter().map(|&l| l as usize).sum();
        assert_eq!(pos, 20);
        assert_eq!(split.test_labels.len() - pos, 20);
    }

    #[test]
    fn protocol1_is_deterministic() {
        let data = toy_dataset(&[60, 33]);
        let plan = SplitPlan::new(Protocol::One, 0, 99, 0.1).unwrap();
        let a: EvalSplit<f32> = build_split(&data, None, &plan).unwrap();
        let b: EvalSplit<f32> = build_split(&data, None, &plan).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.test_images, b.test_images);
        assert_eq!(a.test_labels, b.test_labels);
    }

    #[test]
    fn protocol1_missing_class_errors() {
        let data = toy_dataset(&[10, 10]);
        let plan = SplitPlan::new(Protocol::One, 5, 0, 0.1).unwrap();
        assert!(matches!(
            build_split::<f32>(&data, None, &plan),
            Err(DataError::EmptyClass(5))
        ));
    }

    #[test]
    fn protocol1_insufficient_negatives_errors() {
        let data = toy_dataset(&[100, 2]);
        let plan = SplitPlan::new(Protocol::One, 0, 0, 0.1).unwrap();
        assert!(matches!(
            build_split::<f32>(&data, None, &plan),
            Err(DataError::InsufficientNegatives { needed: 20, available: 2 })
        ));
    }

    #[test]
    fn protocol2_uses_full_test_split() {
        let train = toy_dataset(&[30, 30]);
        let test = toy_dataset(&[11, 13]);
        let plan = SplitPlan::new(Protocol::Two, 1, 3, 0.1).unwrap();
        let split: EvalSplit<f32> = build_split(&train, Some(&test), &plan).unwrap();
        assert_eq!(split.test_images.len(), 24);
        let pos: usize = split.test_labels.iter().map(|&l| l as usize).sum();
        assert_eq!(pos, 13);
        assert_eq!(split.train.len() + split.val.len(), 30);
    }

    #[test]
    fn protocol2_without_test_pool_errors() {
        let train = toy_dataset(&[30, 30]);
        let plan = SplitPlan::new(Protocol::Two, 1, 3, 0.1).unwrap();
        assert!(matches!(
            build_split::<f32>(&train, None, &plan),
            Err(DataError::MissingTestSplit)
        ));
    }

    #[test]
    fn noise_injection_matches_spec_moments() {
        let data = Array4::<f64>::from_elem((10, 1, 28, 28), 0.5);
        let batch = ImageBatch::from_pixels(data).unwrap();
        let spec = NoiseSpec::new(0.0, 0.2, 11).unwrap();
        let noisy = inject_noise(&batch, &spec);
        let diff = &noisy - batch.data();
        let mean = diff.mean().unwrap();
        let var = diff.mapv(|x| (x - mean) * (x - mean)).mean().unwrap();
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 0.2).abs() < 0.01, "var {var}");
    }

    #[test]
    fn noise_degenerate_variance_is_identity() {
        let data = Array4::<f64>::from_elem((2, 1, 8, 8), 0.25);
        let batch = ImageBatch::from_pixels(data).unwrap();
        let spec = NoiseSpec::new(0.0, 1e-12, 3).unwrap();
        let noisy = inject_noise(&batch, &spec);
        for (&a, &b) in noisy.iter().zip(batch.data().iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let data = Array4::<f32>::from_elem((3, 1, 8, 8), 0.5);
        let batch = ImageBatch::from_pixels(data).unwrap();
        let spec = NoiseSpec::default();
        assert_eq!(inject_noise(&batch, &spec), inject_noise(&batch, &spec));
    }

    #[test]
    fn batches_chunking_and_determinism() {
        let data = toy_dataset(&[10]);
        let all: ImageBatch<f32> = data.select(&(0..10).collect::<Vec<_>>());
        let chunks = batches(&all, 4, 5);
        assert_eq!(
            chunks.iter().map(ImageBatch::len).collect::<Vec<_>>(),
            vec![4, 4, 2]
        );
        let again = batches(&all, 4, 5);
        assert_eq!(chunks.len(), again.len());
        for (a, b) in chunks.iter().zip(again.iter()) {
            assert_eq!(a.data(), b.data());
        }
        // batch_size >= count → single chunk
        assert_eq!(batches(&all, 64, 5).len(), 1);
        // empty input → empty sequence
        let empty: ImageBatch<f32> = data.select(&[]);
        assert!(batches(&empty, 4, 5).is_empty());
    }
}
