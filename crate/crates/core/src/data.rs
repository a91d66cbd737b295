//! Datasets and the IDX / CIFAR binary readers.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{FlabError, Result};
use crate::numerics::Matrix;

const IDX_IMAGES: u32 = 2051;
const IDX_LABELS: u32 = 2049;
const CIFAR_PIXELS: usize = 3072;

/// Inputs scaled to `[0, 1]`, one sample per row, with class-index labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(FlabError::CountMismatch {
                images: inputs.rows(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(FlabError::InvalidArgument(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Inputs and one-hot targets for the given sample indices.
    pub fn batch(&self, idx: &[usize]) -> Result<(Matrix, Matrix)> {
        let x = self.inputs.select_rows(idx)?;
        let mut y = Matrix::zeros(idx.len(), self.n_classes);
        for (r, &i) in idx.iter().enumerate() {
            y.set(r, self.labels[i], 1.0);
        }
        Ok((x, y))
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        Dataset::new(
            self.inputs.select_rows(&idx)?,
            self.labels[..n].to_vec(),
            self.n_classes,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| FlabError::io(path, e))
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(FlabError::Truncated {
                path: self.path.to_path_buf(),
                offset: self.pos,
                needed: n - (self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn be_u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn idx_header(path: &Path, bytes: &[u8], magic: u32) -> Result<(Vec<usize>, usize)> {
    let mut c = Cursor {
        path,
        bytes,
        pos: 0,
    };
    let found = c.be_u32()?;
    if found != magic {
        return Err(FlabError::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    let ndim = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(c.be_u32()? as usize);
    }
    let payload: usize = dims.iter().product();
    c.take(payload)?;
    Ok((dims, 4 + 4 * ndim))
}

/// Reads an IDX image file (magic 2051) and label file (magic 2049).
pub fn load_mnist_files(images: &Path, labels: &Path) -> Result<Dataset> {
    let ib = read(images)?;
    let lb = read(labels)?;
    let (idims, ioff) = idx_header(images, &ib, IDX_IMAGES)?;
    let (ldims, loff) = idx_header(labels, &lb, IDX_LABELS)?;
    let (n, pixels) = (idims[0], idims[1] * idims[2]);
    if ldims[0] != n {
        return Err(FlabError::CountMismatch {
            images: n,
            labels: ldims[0],
        });
    }
    if n == 0 {
        return Err(FlabError::InvalidArgument(format!(
            "{}: no images",
            images.display()
        )));
    }
    let data: Vec<f64> = ib[ioff..ioff + n * pixels]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels_v: Vec<usize> = lb[loff..loff + n].iter().map(|&b| b as usize).collect();
    Dataset::new(Matrix::new(n, pixels, data)?, labels_v, 10)
}

fn first_existing(dir: &Path, names: &[&str]) -> Result<PathBuf> {
    names
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            FlabError::io(
                dir.join(names[0]),
                std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
            )
        })
}

/// Loads a split from a directory holding the standard (uncompressed) file names.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = first_existing(
        dir,
        &[
            &format!("{prefix}-images-idx3-ubyte"),
            &format!("{prefix}-images.idx3-ubyte"),
        ],
    )?;
    let labels = first_existing(
        dir,
        &[
            &format!("{prefix}-labels-idx1-ubyte"),
            &format!("{prefix}-labels.idx1-ubyte"),
        ],
    )?;
    load_mnist_files(&images, &labels)
}

/// One CIFAR binary file. CIFAR-10 records carry one label byte; CIFAR-100
/// carries coarse then fine, and the fine label is used.
pub fn load_cifar_file(path: &Path, n_classes: usize) -> Result<Dataset> {
    let label_bytes = match n_classes {
        10 => 1,
        100 => 2,
        other => {
            return Err(FlabError::InvalidArgument(format!(
                "CIFAR has 10 or 100 classes, got {other}"
            )))
        }
    };
    let bytes = read(path)?;
    let record = label_bytes + CIFAR_PIXELS;
    if bytes.is_empty() {
        return Err(FlabError::Truncated {
            path: path.to_path_buf(),
            offset: 0,
            needed: record,
        });
    }
    if bytes.len() % record != 0 {
        let whole = bytes.len() / record;
        return Err(FlabError::Truncated {
            path: path.to_path_buf(),
            offset: whole * record,
            needed: record - bytes.len() % record,
        });
    }
    let n = bytes.len() / record;
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(record) {
        labels.push(rec[label_bytes - 1] as usize);
        data.extend(rec[label_bytes..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(Matrix::new(n, CIFAR_PIXELS, data)?, labels, n_classes)
}

/// Loads a split from the standard CIFAR binary distribution directory.
pub fn load_cifar(dir: &Path, n_classes: usize, split: Split) -> Result<Dataset> {
    let files: Vec<PathBuf> = match (n_classes, split) {
        (10, Split::Train) => (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .collect(),
        (10, Split::Test) => vec![dir.join("test_batch.bin")],
        (100, Split::Train) => vec![dir.join("train.bin")],
        (100, Split::Test) => vec![dir.join("test.bin")],
        (other, _) => {
            return Err(FlabError::InvalidArgument(format!(
                "CIFAR has 10 or 100 classes, got {other}"
            )))
        }
    };
    let parts = files
        .iter()
        .map(|f| load_cifar_file(f, n_classes))
        .collect::<Result<Vec<_>>>()?;
    concat(&parts)
}

fn concat(parts: &[Dataset]) -> Result<Dataset> {
    let cols = parts[0].input_dim();
    let rows: usize = parts.iter().map(Dataset::len).sum();
    let mut data = Vec::with_capacity(rows * cols);
    let mut labels = Vec::with_capacity(rows);
    for p in parts {
        data.extend_from_slice(p.inputs.data());
        labels.extend_from_slice(&p.labels);
    }
    Dataset::new(Matrix::new(rows, cols, data)?, labels, parts[0].n_classes)
}
