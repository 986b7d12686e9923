//! Datasets, batching and noise augmentation.

mod augment;
mod batch;
pub mod idx;
mod synth;

use std::io::Write;
use std::path::{Path, PathBuf};

pub use augment::{clip_unit, gaussian_augment};
pub use batch::BatchStream;
pub use idx::load_idx;
pub use synth::{synth_blobs, BLOB_STD};

use crate::{Error, Result, Tensor};

/// Labelled images with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if images.shape().is_empty() || images.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::InvalidConfig(format!(
                "label {y} out of range for {n_classes} classes"
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            n_classes,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one image.
    pub fn item_shape(&self) -> &[usize] {
        self.images.item_shape()
    }

    /// Copies of the listed examples.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (images, labels) = self.batch(indices);
        Self {
            images,
            labels,
            n_classes: self.n_classes,
        }
    }

    /// The first `n` examples (or all, if fewer).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images.slice_rows(0, n),
            labels: self.labels[..n].to_vec(),
            n_classes: self.n_classes,
        }
    }

    /// Writes one CSV row per example: pixel values, then the label.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let width = self.images.row_len();
        let header: Vec<String> = (0..width).map(|i| format!("x{i}")).chain(["label".into()]).collect();
        writeln!(w, "{}", header.join(","))?;
        for (i, &y) in self.labels.iter().enumerate() {
            let row: Vec<String> = self.images.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{y}", row.join(","))?;
        }
        Ok(())
    }
}

/// Train and test split of MNIST-format data.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

/// Directory holding the bundled 5 000-image MNIST subset (4 000 train,
/// 1 000 test) in IDX format.
pub fn bundled_mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k")
}

/// MNIST directory: `RBK_MNIST_DIR` when set, otherwise the bundled subset.
pub fn default_mnist_dir() -> PathBuf {
    std::env::var_os("RBK_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(bundled_mnist_dir)
}

/// Loads the standard four MNIST files from `dir`, accepting either the raw
/// or the gzipped file names.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<Split> {
    let dir = dir.as_ref();
    let find = |stem: &str| -> PathBuf {
        let raw = dir.join(stem);
        if raw.exists() {
            raw
        } else {
            dir.join(format!("{stem}.gz"))
        }
    };
    let mut train = load_idx(
        find("train-images-idx3-ubyte"),
        find("train-labels-idx1-ubyte"),
    )?;
    let mut test = load_idx(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"))?;
    train.n_classes = 10.max(train.n_classes);
    test.n_classes = 10.max(test.n_classes);
    Ok(Split { train, test })
}
