//! MNIST ingestion and task-stream generation.
//!
//! A [`LabeledSet`] shares its pixel buffer behind an `Arc` and optionally
//! carries a pixel permutation, so a permuted task stream costs one
//! permutation vector per task instead of a copy of the images.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{seeded_shuffle, Matrix, Rng};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;
pub const PIXELS: usize = 784;

/// The four standard MNIST file names.
pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Number of training images held out for validation.
pub const DEFAULT_VALIDATION_SIZE: usize = 10_000;

#[derive(Clone, Debug)]
pub struct LabeledSet {
    images: Arc<Matrix>,
    labels: Arc<Vec<u8>>,
    /// `permuted[:, j] = images[:, pixel_order[j]]`
    pixel_order: Option<Arc<Vec<usize>>>,
}

impl LabeledSet {
    pub fn new(images: Matrix, labels: Vec<u8>) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::contract(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::contract(format!("label {bad} out of range")));
        }
        if images.as_slice().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::contract("pixel intensity outside [0, 1]"));
        }
        Ok(LabeledSet {
            images: Arc::new(images),
            labels: Arc::new(labels),
            pixel_order: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.images.cols()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn pixel_order(&self) -> Option<&[usize]> {
        self.pixel_order.as_deref().map(Vec::as_slice)
    }

    /// Same data with pixels reordered by `order`, composed with any existing order.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.input_dim() {
            return Err(Error::contract(format!(
                "permutation of length {} for {} pixels",
                order.len(),
                self.input_dim()
            )));
        }
        let composed = match &self.pixel_order {
            Some(existing) => order.iter().map(|&j| existing[j]).collect(),
            None => order.to_vec(),
        };
        Ok(LabeledSet {
            images: Arc::clone(&self.images),
            labels: Arc::clone(&self.labels),
            pixel_order: Some(Arc::new(composed)),
        })
    }

    /// Rows `indices` as a dense matrix, with the pixel permutation applied.
    pub fn gather(&self, indices: &[usize]) -> Matrix {
        match &self.pixel_order {
            None => self.images.select_rows(indices),
            Some(order) => {
                let d = order.len();
                let mut out = Matrix::zeros(indices.len(), d);
                for (r, &i) in indices.iter().enumerate() {
                    let src = self.images.row(i);
                    let dst = out.row_mut(r);
                    for (x, &j) in dst.iter_mut().zip(order.iter()) {
                        *x = src[j];
                    }
                }
                out
            }
        }
    }

    pub fn gather_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i] as usize).collect()
    }

    /// All images, materialized.
    pub fn images(&self) -> Matrix {
        match self.pixel_order {
            None => (*self.images).clone(),
            Some(_) => self.gather(&(0..self.len()).collect::<Vec<_>>()),
        }
    }

    /// Materialized subset of the given rows.
    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            images: Arc::new(self.gather(indices)),
            labels: Arc::new(indices.iter().map(|&i| self.labels[i]).collect()),
            pixel_order: None,
        }
    }

    /// First `n` examples (or all of them if `n ≥ len`).
    pub fn take_first(&self, n: usize) -> LabeledSet {
        if n >= self.len() {
            return self.clone();
        }
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    /// Splits into `[0, len − n)` and the last `n` examples.
    pub fn split_tail(&self, n: usize) -> Result<(LabeledSet, LabeledSet)> {
        if n > self.len() {
            return Err(Error::contract(format!(
                "cannot hold out {n} of {} examples",
                self.len()
            )));
        }
        let cut = self.len() - n;
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        Ok((self.subset(&head), self.subset(&tail)))
    }

    /// Examples whose label satisfies `keep`.
    pub fn filter_labels(&self, keep: impl Fn(usize) -> bool) -> LabeledSet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.label(i))).collect();
        self.subset(&idx)
    }

    /// Concatenation, materializing each part's permutation.
    pub fn concat(parts: &[&LabeledSet]) -> Result<LabeledSet> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero sets"))?;
        let mut images = first.images();
        let mut labels = first.labels.to_vec();
        for p in &parts[1..] {
            images = images.vstack(&p.images())?;
            labels.extend_from_slice(&p.labels);
        }
        Ok(LabeledSet {
            images: Arc::new(images),
            labels: Arc::new(labels),
            pixel_order: None,
        })
    }

    /// Training set duplicated `k` times, used to check curvature scaling.
    pub fn repeated(&self, k: usize) -> LabeledSet {
        let idx: Vec<usize> = (0..k).flat_map(|_| 0..self.len()).collect();
        self.subset(&idx)
    }
}

/// A train/validation/test triple.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
}

impl Splits {
    /// Loads the four MNIST files from `dir` and holds out the last
    /// `validation_size` training images for validation.
    pub fn load_mnist_dir(dir: &Path, validation_size: usize) -> Result<Splits> {
        let train = load_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
        let test = load_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
        let (train, val) = train.split_tail(validation_size)?;
        Ok(Splits { train, val, test })
    }

    /// Restricts each split to its first examples (`None` keeps everything).
    pub fn truncated(&self, train: Option<usize>, val: Option<usize>, test: Option<usize>) -> Splits {
        let cut = |s: &LabeledSet, n: Option<usize>| n.map_or_else(|| s.clone(), |n| s.take_first(n));
        Splits {
            train: cut(&self.train, train),
            val: cut(&self.val, val),
            test: cut(&self.test, test),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Task {
    /// 1-based task index.
    pub id: usize,
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StreamKind {
    Permuted { seed: u64, identity_first: bool },
    Disjoint,
}

#[derive(Clone, Debug)]
pub struct TaskStream {
    pub kind: StreamKind,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Option<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn format_err(path: &Path, field: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        field,
        detail: detail.into(),
    }
}

/// Parses an IDX image file (magic 0x803, u8 pixels) into an `N × rows·cols`
/// matrix scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let magic = read_u32_be(bytes, 0).ok_or_else(|| format_err(path, "magic", "file shorter than 4 bytes"))?;
    if magic != IMAGE_MAGIC {
        return Err(format_err(path, "magic", format!("expected 0x{IMAGE_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let n = read_u32_be(bytes, 4).ok_or_else(|| format_err(path, "count", "missing"))? as usize;
    let rows = read_u32_be(bytes, 8).ok_or_else(|| format_err(path, "rows", "missing"))? as usize;
    let cols = read_u32_be(bytes, 12).ok_or_else(|| format_err(path, "cols", "missing"))? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            "pixel data",
            format!("header promises {n}x{rows}x{cols} ({expected} bytes), file has {}", bytes.len()),
        ));
    }
    let data = bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    Matrix::from_vec(n, rows * cols, data)
}

/// Parses an IDX label file (magic 0x801).
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0).ok_or_else(|| format_err(path, "magic", "file shorter than 4 bytes"))?;
    if magic != LABEL_MAGIC {
        return Err(format_err(path, "magic", format!("expected 0x{LABEL_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let n = read_u32_be(bytes, 4).ok_or_else(|| format_err(path, "count", "missing"))? as usize;
    if bytes.len() != 8 + n {
        return Err(format_err(
            path,
            "label data",
            format!("header promises {n} labels, file has {} bytes of data", bytes.len().saturating_sub(8)),
        ));
    }
    let labels = bytes[8..].to_vec();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(format_err(path, "label data", format!("label {bad} is not a digit")));
    }
    Ok(labels)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledSet> {
    let img_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let images = parse_idx_images(&img_bytes, images_path)?;
    let labels = parse_idx_labels(&lbl_bytes, labels_path)?;
    if images.rows() != labels.len() {
        return Err(format_err(
            labels_path,
            "count",
            format!("{} labels for {} images", labels.len(), images.rows()),
        ));
    }
    LabeledSet::new(images, labels)
}

/// Serializes images (values in `[0, 1]`, rounded to bytes) and labels as IDX.
pub fn encode_idx(images: &Matrix, side: (usize, usize), labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + images.as_slice().len());
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(images.rows() as u32).to_be_bytes());
    img.extend_from_slice(&(side.0 as u32).to_be_bytes());
    img.extend_from_slice(&(side.1 as u32).to_be_bytes());
    img.extend(images.as_slice().iter().map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lbl = Vec::with_capacity(8 + labels.len());
    lbl.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lbl.extend_from_slice(labels);
    (img, lbl)
}

/// Resolves the MNIST directory: explicit path, then `KFLAPLACE_DATA_DIR`.
pub fn resolve_data_dir(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os("KFLAPLACE_DATA_DIR").map(PathBuf::from))
}

/// Pixel permutation of task `t` (1-based) in a permuted stream.
pub fn task_permutation(seed: u64, t: usize, n_pixels: usize) -> Vec<usize> {
    seeded_shuffle(n_pixels, &mut Rng::with_stream(seed, t as u64))
}

/// `num_tasks` permuted copies of `base`; each task's permutation is drawn
/// from `(seed, t)` and applied to its train, validation and test sets alike.
pub fn make_permuted_tasks(base: &Splits, num_tasks: usize, seed: u64, identity_first: bool) -> Result<TaskStream> {
    if num_tasks == 0 {
        return Err(Error::contract("a permuted stream needs at least one task"));
    }
    let d = base.train.input_dim();
    let mut tasks = Vec::with_capacity(num_tasks);
    for t in 1..=num_tasks {
        let order = if t == 1 && identity_first {
            (0..d).collect()
        } else {
            task_permutation(seed, t, d)
        };
        tasks.push(Task {
            id: t,
            train: base.train.permuted(&order)?,
            val: base.val.permuted(&order)?,
            test: base.test.permuted(&order)?,
        });
    }
    Ok(TaskStream {
        kind: StreamKind::Permuted { seed, identity_first },
        tasks,
    })
}

/// Digits 0–4 then digits 5–9, keeping the original ten-way labels.
pub fn make_disjoint_tasks(base: &Splits) -> Result<TaskStream> {
    let mut seen = [false; NUM_CLASSES];
    base.train.labels().iter().for_each(|&l| seen[l as usize] = true);
    if !seen.iter().all(|&s| s) {
        return Err(Error::contract("disjoint split needs all ten classes in the training set"));
    }
    let part = |id: usize, keep: fn(usize) -> bool| Task {
        id,
        train: base.train.filter_labels(keep),
        val: base.val.filter_labels(keep),
        test: base.test.filter_labels(keep),
    };
    Ok(TaskStream {
        kind: StreamKind::Disjoint,
        tasks: vec![part(1, |l| l < 5), part(2, |l| l >= 5)],
    })
}

/// One epoch of shuffled minibatch index lists; the last batch may be short.
pub fn minibatches(n: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::contract("batch size must be at least 1"));
    }
    let order = seeded_shuffle(n, rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
