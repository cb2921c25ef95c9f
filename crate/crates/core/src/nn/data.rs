//! Datasets: IDX files and synthetic Gaussian blobs.
//!
//! IDX layout: two zero bytes, a type code, the rank, then `rank` big-endian
//! `u32` extents and a big-endian payload. Images are normalized by 255.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::NnError;
use crate::store::write_atomic;

/// Feature rows in `[0, 1]` with one-hot labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Array2<f64>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: &[usize], classes: usize) -> Result<Self, NnError> {
        if features.nrows() != labels.len() {
            return Err(NnError::Data(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(NnError::Data(format!("label {bad} outside {classes} classes")));
        }
        if features.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(NnError::Data("features must lie in [0, 1]".into()));
        }
        let mut onehot = Array2::zeros((labels.len(), classes));
        for (i, &l) in labels.iter().enumerate() {
            onehot[[i, l]] = 1.0;
        }
        Ok(Self { features, labels: onehot, classes })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels
            .axis_iter(Axis(0))
            .map(|row| row.iter().position(|&v| v == 1.0).unwrap_or(0))
            .collect()
    }

    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            features: self.features.slice(s![start..end, ..]).to_owned(),
            labels: self.labels.slice(s![start..end, ..]).to_owned(),
            classes: self.classes,
        }
    }

    /// First and second half; the first gets the extra row on odd lengths.
    pub fn halves(&self) -> (Dataset, Dataset) {
        let mid = self.len().div_ceil(2);
        (self.slice(0, mid), self.slice(mid, self.len()))
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), rows),
            labels: self.labels.select(Axis(0), rows),
            classes: self.classes,
        }
    }
}

/// Parameters for [`gaussian_blobs`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Standard deviation around each class center.
    pub spread: f64,
    /// When nonzero and below `dim`, within-class variation lives in a
    /// random `latent`-dimensional subspace instead of every coordinate.
    pub latent: usize,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self { classes: 4, dim: 32, per_class: 500, spread: 0.12, latent: 0, seed: 0 }
    }
}

/// Gaussian clusters around random centers in `[0.2, 0.8]^dim`, clipped to
/// `[0, 1]` and quantized to multiples of 1/255 so they survive an IDX
/// round-trip unchanged. Rows are shuffled.
pub fn gaussian_blobs(spec: &BlobSpec) -> Result<Dataset, NnError> {
    if spec.classes < 2 || spec.dim == 0 || spec.per_class == 0 {
        return Err(NnError::Data("blobs need >= 2 classes, dim >= 1, per_class >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.dim).map(|_| rng.random_range(0.2..0.8)).collect())
        .collect();
    let noise = Normal::new(0.0, spec.spread).map_err(|e| NnError::Data(e.to_string()))?;
    let latent = if spec.latent > 0 && spec.latent < spec.dim { spec.latent } else { 0 };
    let unit = Normal::new(0.0, 1.0 / (latent.max(1) as f64).sqrt()).expect("positive sd");
    let basis: Vec<Vec<f64>> = (0..latent).map(|_| (0..spec.dim).map(|_| unit.sample(&mut rng)).collect()).collect();
    let n = spec.classes * spec.per_class;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut features = Array2::zeros((n, spec.dim));
    let mut labels = vec![0; n];
    for (row, &k) in order.iter().enumerate() {
        let class = k % spec.classes;
        labels[row] = class;
        let z: Vec<f64> = (0..latent).map(|_| noise.sample(&mut rng)).collect();
        for j in 0..spec.dim {
            let offset = if latent == 0 {
                noise.sample(&mut rng)
            } else {
                z.iter().zip(&basis).map(|(zi, b)| zi * b[j]).sum()
            };
            let v = (centers[class][j] + offset).clamp(0.0, 1.0);
            features[[row, j]] = (v * 255.0).round() / 255.0;
        }
    }
    Dataset::new(features, &labels, spec.classes)
}

/// Decoded IDX array, values widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub type_code: u8,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub const IDX_U8: u8 = 0x08;
pub const IDX_I8: u8 = 0x09;
pub const IDX_I16: u8 = 0x0B;
pub const IDX_I32: u8 = 0x0C;
pub const IDX_F32: u8 = 0x0D;
pub const IDX_F64: u8 = 0x0E;

pub fn read_idx<R: Read>(r: &mut R) -> Result<IdxArray, NnError> {
    let mut head = [0u8; 4];
    r.read_exact(&mut head).map_err(|_| NnError::Idx("truncated header".into()))?;
    if head[0] != 0 || head[1] != 0 {
        return Err(NnError::Idx(format!("bad magic {:02x}{:02x}", head[0], head[1])));
    }
    let type_code = head[2];
    let rank = head[3] as usize;
    if rank == 0 {
        return Err(NnError::Idx("rank 0".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.read_u32::<BigEndian>().map_err(|_| NnError::Idx("truncated dims".into()))? as usize);
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    let trunc = |_| NnError::Idx("truncated payload".into());
    for _ in 0..n {
        let v = match type_code {
            IDX_U8 => r.read_u8().map_err(trunc)? as f64,
            IDX_I8 => r.read_i8().map_err(trunc)? as f64,
            IDX_I16 => r.read_i16::<BigEndian>().map_err(trunc)? as f64,
            IDX_I32 => r.read_i32::<BigEndian>().map_err(trunc)? as f64,
            IDX_F32 => r.read_f32::<BigEndian>().map_err(trunc)? as f64,
            IDX_F64 => r.read_f64::<BigEndian>().map_err(trunc)?,
            t => return Err(NnError::Idx(format!("unknown type code {t:#04x}"))),
        };
        data.push(v);
    }
    Ok(IdxArray { type_code, dims, data })
}

/// Writes an unsigned-byte IDX array.
pub fn write_idx_u8<W: Write>(w: &mut W, dims: &[usize], data: &[u8]) -> Result<(), NnError> {
    if dims.iter().product::<usize>() != data.len() || dims.is_empty() || dims.len() > 255 {
        return Err(NnError::Idx("dims do not match payload".into()));
    }
    w.write_all(&[0, 0, IDX_U8, dims.len() as u8])?;
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| NnError::Idx("extent exceeds u32".into()))?;
        w.write_u32::<BigEndian>(d)?;
    }
    w.write_all(data)?;
    Ok(())
}

pub fn read_idx_file(path: &Path) -> Result<IdxArray, NnError> {
    let mut r = BufReader::new(File::open(path).map_err(|e| NnError::Io(path.to_path_buf(), e))?);
    read_idx(&mut r)
}

/// Builds a dataset from an image array (first axis = samples, trailing axes
/// flattened) and a label vector. Byte images are divided by 255.
pub fn dataset_from_idx(images: &IdxArray, labels: &IdxArray, classes: Option<usize>) -> Result<Dataset, NnError> {
    let n = images.dims[0];
    if labels.dims.len() != 1 || labels.dims[0] != n {
        return Err(NnError::Data(format!("{n} images but label shape {:?}", labels.dims)));
    }
    let width: usize = images.dims[1..].iter().product();
    let scale = if images.type_code == IDX_U8 { 255.0 } else { 1.0 };
    let features = Array2::from_shape_vec((n, width.max(1)), images.data.iter().map(|v| v / scale).collect())
        .map_err(|e| NnError::Data(e.to_string()))?;
    let labels: Vec<usize> = labels.data.iter().map(|&v| v as usize).collect();
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(features, &labels, classes)
}

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

fn split_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    match split {
        Split::Train => (dir.join(TRAIN_IMAGES), dir.join(TRAIN_LABELS)),
        Split::Test => (dir.join(TEST_IMAGES), dir.join(TEST_LABELS)),
    }
}

/// Loads one split from a directory using the standard digit-data file names.
pub fn load_split(dir: &Path, split: Split, classes: Option<usize>) -> Result<Dataset, NnError> {
    let (img, lbl) = split_paths(dir, split);
    dataset_from_idx(&read_idx_file(&img)?, &read_idx_file(&lbl)?, classes)
}

/// Loads both splits, sharing the class count.
pub fn load_dir(dir: &Path) -> Result<(Dataset, Dataset), NnError> {
    let (ti, tl) = split_paths(dir, Split::Train);
    let (vi, vl) = split_paths(dir, Split::Test);
    let (ti, tl, vi, vl) = (read_idx_file(&ti)?, read_idx_file(&tl)?, read_idx_file(&vi)?, read_idx_file(&vl)?);
    let max = tl.data.iter().chain(&vl.data).fold(0.0f64, |m, &v| m.max(v));
    let classes = max as usize + 1;
    Ok((dataset_from_idx(&ti, &tl, Some(classes))?, dataset_from_idx(&vi, &vl, Some(classes))?))
}

fn dataset_bytes(data: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let img = data.features.iter().map(|v| (v * 255.0).round() as u8).collect();
    let lbl = data.label_indices().into_iter().map(|l| l as u8).collect();
    (img, lbl)
}

/// Writes both splits as byte IDX files (rank-2 images).
pub fn save_dir(dir: &Path, train: &Dataset, test: &Dataset) -> Result<(), NnError> {
    std::fs::create_dir_all(dir).map_err(|e| NnError::Io(dir.to_path_buf(), e))?;
    for (split, data) in [(Split::Train, train), (Split::Test, test)] {
        let (img_path, lbl_path) = split_paths(dir, split);
        let (img, lbl) = dataset_bytes(data);
        let mut buf = Vec::new();
        write_idx_u8(&mut buf, &[data.len(), data.dim()], &img)?;
        write_atomic(&img_path, &buf).map_err(|e| NnError::Io(img_path.clone(), e))?;
        let mut buf = Vec::new();
        write_idx_u8(&mut buf, &[data.len()], &lbl)?;
        write_atomic(&lbl_path, &buf).map_err(|e| NnError::Io(lbl_path.clone(), e))?;
    }
    Ok(())
}
