//! IDX image/label files (MNIST, Fashion-MNIST) and in-memory datasets.
//!
//! Pixels are kept as bytes and converted to `[0, 1]` reals (`p / 255`) when
//! a batch is materialized, so one dataset serves both precisions.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    Mnist,
    FashionMnist,
}

impl DatasetName {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion-mnist",
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetName::Mnist),
            "fashion-mnist" | "fashion_mnist" | "fashion" | "fmnist" => Ok(DatasetName::FashionMnist),
            other => Err(Error::Argument(format!("unknown dataset `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn file_prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split `{other}`"))),
        }
    }
}

/// Raw contents of an image IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(std::fs::File::create(path)?, flate2::Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        std::fs::write(path, bytes)?;
    }
    Ok(())
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Length {
            expected: at + 4,
            found: bytes.len(),
        })
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!("image IDX magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!("image dimensions {rows}x{cols}")));
    }
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Length {
            expected,
            found: bytes.len(),
        });
    }
    Ok(IdxImages {
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!("label IDX magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Length {
            expected: 8 + n,
            found: bytes.len(),
        });
    }
    let labels = bytes[8..].to_vec();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::Domain(format!("label {bad} outside 0..{NUM_CLASSES}")));
    }
    Ok(labels)
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGE_MAGIC, images.count() as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Reads an image IDX file (gzip detected from the content).
pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    parse_idx_images(&read_maybe_gz(path)?)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    parse_idx_labels(&read_maybe_gz(path)?)
}

/// Images as an `N x 1 x rows x cols` tensor with values `p / 255`.
pub fn load_idx_images<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let raw = read_idx_images(path)?;
    let n = raw.count();
    Tensor::new(vec![n, 1, raw.rows, raw.cols], raw.pixels.iter().map(|&p| to_unit(p)).collect())
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    Ok(read_idx_labels(path)?.into_iter().map(usize::from).collect())
}

/// Writes gzip-compressed when the path ends in `.gz`.
pub fn write_idx_images(path: &Path, images: &IdxImages) -> Result<()> {
    write_maybe_gz(path, &encode_idx_images(images))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    write_maybe_gz(path, &encode_idx_labels(labels))
}

#[inline]
fn to_unit<T: Scalar>(p: u8) -> T {
    T::of(p as f64 / 255.0)
}

/// Labelled grayscale images held as bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    rows: usize,
    cols: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, split: Split, images: IdxImages, labels: Vec<u8>) -> Result<Self> {
        if images.count() != labels.len() || images.pixels.len() != labels.len() * images.rows * images.cols {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.count(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Argument("empty dataset".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Domain(format!("label {bad} outside 0..{NUM_CLASSES}")));
        }
        Ok(Self {
            name: name.into(),
            split,
            rows: images.rows,
            cols: images.cols,
            pixels: images.pixels,
            labels,
        })
    }

    /// Canonical file paths of one split under `dir`.
    pub fn files(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
        let p = split.file_prefix();
        let pick = |stem: String| {
            let gz = dir.join(format!("{stem}.gz"));
            if gz.exists() {
                gz
            } else {
                dir.join(stem)
            }
        };
        (
            pick(format!("{p}-images-idx3-ubyte")),
            pick(format!("{p}-labels-idx1-ubyte")),
        )
    }

    /// Loads `root/<name>/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]`.
    pub fn load(root: &Path, name: DatasetName, split: Split) -> Result<Self> {
        let dir = root.join(name.as_str());
        let (img, lab) = Self::files(&dir, split);
        for f in [&img, &lab] {
            if !f.exists() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("missing dataset file {}", f.display()),
                )));
            }
        }
        Self::new(name.as_str(), split, read_idx_images(&img)?, read_idx_labels(&lab)?)
    }

    /// Writes this dataset as the canonical pair of IDX files in `dir`.
    pub fn save(&self, dir: &Path, gzip: bool) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let (img, lab) = Self::files(dir, self.split);
        let suffix = |p: PathBuf| {
            let s = p.to_string_lossy().trim_end_matches(".gz").to_string();
            PathBuf::from(if gzip { format!("{s}.gz") } else { s })
        };
        write_idx_images(&suffix(img), &self.raw_images())?;
        write_idx_labels(&suffix(lab), &self.labels)
    }

    pub fn raw_images(&self) -> IdxImages {
        IdxImages {
            rows: self.rows,
            cols: self.cols,
            pixels: self.pixels.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [1, self.rows, self.cols]
    }

    pub fn image_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn pixels(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    /// `B x 1 x rows x cols` tensor of the selected images and their labels.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.pixels(i).iter().map(|&p| to_unit::<T>(p)));
        }
        let labels = indices.iter().map(|&i| self.label(i)).collect();
        (
            Tensor::new(vec![indices.len(), 1, self.rows, self.cols], data).expect("non-empty batch"),
            labels,
        )
    }

    /// Every image, in order.
    pub fn images<T: Scalar>(&self) -> Tensor<T> {
        self.batch((0..self.len()).collect::<Vec<_>>().as_slice()).0
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Argument(format!("index {i} out of range {}", self.len())));
            }
            pixels.extend_from_slice(self.pixels(i));
        }
        Self::new(
            self.name.clone(),
            self.split,
            IdxImages {
                rows: self.rows,
                cols: self.cols,
                pixels,
            },
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Contiguous index batches covering the dataset once, shuffled when a seed is given.
    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
        batch_indices(self.len(), batch_size, shuffle_seed.map(RngStream::new).as_mut())
    }
}

/// Splits `0..len` into batches of `batch_size` (last may be short), in the
/// order of a permutation drawn from `rng` when given.
pub fn batch_indices(len: usize, batch_size: usize, rng: Option<&mut RngStream>) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    let order = match rng {
        Some(r) => r.permutation(len),
        None => (0..len).collect(),
    };
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Exactly `per_class` random members of every class, in shuffled order.
pub fn balanced_subset(ds: &Dataset, per_class: usize, rng: &mut RngStream) -> Result<Dataset> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for i in 0..ds.len() {
        by_class[ds.label(i)].push(i);
    }
    let mut chosen = Vec::with_capacity(per_class * NUM_CLASSES);
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.len() < per_class {
            return Err(Error::Argument(format!(
                "class {c} has {} members, {per_class} requested",
                members.len()
            )));
        }
        rng.shuffle(members);
        chosen.extend_from_slice(&members[..per_class]);
    }
    rng.shuffle(&mut chosen);
    ds.subset(&chosen)
}

/// Small learnable stand-in for MNIST: class `c` lights a 4x4 block whose
/// position depends on `c`, over uniform background noise.
pub fn synthetic(n: usize, side: usize, split: Split, rng: &mut RngStream) -> Result<Dataset> {
    if side < 8 {
        return Err(Error::Argument("synthetic images need side >= 8".into()));
    }
    let mut pixels = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    let slots = side - 4;
    for i in 0..n {
        let c = i % NUM_CLASSES;
        let (oy, ox) = ((c / 5) * slots / 2 + slots / 4, (c % 5) * slots / 5);
        for y in 0..side {
            for x in 0..side {
                let inside = (oy..oy + 4).contains(&y) && (ox..ox + 4).contains(&x);
                let noise = (rng.uniform() * 60.0) as u8;
                pixels.push(if inside { 255 - noise } else { noise });
            }
        }
        labels.push(c as u8);
    }
    Dataset::new(
        "synthetic",
        split,
        IdxImages {
            rows: side,
            cols: side,
            pixels,
        },
        labels,
    )
}
