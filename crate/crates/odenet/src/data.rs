//! Datasets: deterministic synthetic 2-D classification problems and an IDX
//! image/label reader (the classic big-endian format used by MNIST-style
//! corpora).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic number in {path}: got {got:#010x}, expected {expected:#010x}")]
    BadMagic { path: String, got: u32, expected: u32 },
    #[error("image file has {images} items but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("truncated payload in {path}: need {need} bytes, have {have}")]
    Truncated { path: String, need: usize, have: usize },
    #[error("invalid dataset parameter: {0}")]
    Invalid(String),
}

/// A labeled classification dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// N x input_dim feature matrix.
    pub features: Tensor,
    /// N labels in [0, num_classes).
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Rows `range` of the dataset as a new dataset (for train/val splits).
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let d = self.input_dim();
        let data = self.features.data()[start * d..end * d].to_vec();
        Dataset {
            features: Tensor::from_vec(vec![end - start, d], data).expect("sized slice"),
            labels: self.labels[start..end].to_vec(),
            num_classes: self.num_classes,
        }
    }

    /// Deterministically shuffle rows with the given generator.
    pub fn shuffled(&self, rng: &mut impl Rng) -> Dataset {
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        // Fisher-Yates.
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        self.select(&order)
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            data.extend_from_slice(&self.features.data()[r * d..(r + 1) * d]);
            labels.push(self.labels[r]);
        }
        Dataset {
            features: Tensor::from_vec(vec![rows.len(), d], data).expect("sized select"),
            labels,
            num_classes: self.num_classes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    TwoSpirals,
    Circles,
    Blobs,
}

impl FromStr for SyntheticKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "two_spirals" | "spirals" => Ok(SyntheticKind::TwoSpirals),
            "circles" => Ok(SyntheticKind::Circles),
            "blobs" => Ok(SyntheticKind::Blobs),
            other => Err(format!("unknown synthetic dataset: {other}")),
        }
    }
}

fn draw_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Deterministic, class-balanced 2-D synthetic datasets.
///
/// TwoSpirals: point i of class c sits at radius r = t on the spiral
/// angle t + c*pi with t uniform in [0.25, 3.5*pi], scaled into roughly
/// [-1, 1] and perturbed by Gaussian noise of the given standard deviation.
pub fn make_synthetic(kind: SyntheticKind, n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_classes = 2;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    let t_max = 3.5 * std::f64::consts::PI;
    for i in 0..n {
        let class = i % num_classes;
        let (mut x, mut y) = match kind {
            SyntheticKind::TwoSpirals => {
                let t = 0.25 + (t_max - 0.25) * rng.gen::<f64>();
                let angle = t + class as f64 * std::f64::consts::PI;
                (t * angle.cos() / t_max, t * angle.sin() / t_max)
            }
            SyntheticKind::Circles => {
                let angle = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
                let r = if class == 0 { 0.5 } else { 1.0 };
                (r * angle.cos(), r * angle.sin())
            }
            SyntheticKind::Blobs => {
                let c = if class == 0 { -0.7 } else { 0.7 };
                (c + 0.2 * draw_normal(&mut rng), c + 0.2 * draw_normal(&mut rng))
            }
        };
        x += noise * draw_normal(&mut rng);
        y += noise * draw_normal(&mut rng);
        data.push(x);
        data.push(y);
        labels.push(class);
    }
    Dataset {
        features: Tensor::from_vec(vec![n, 2], data).expect("sized synthetic"),
        labels,
        num_classes,
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    Ok(buf)
}

fn be_u32(buf: &[u8], off: usize, path: &Path) -> Result<u32, DataError> {
    let bytes: [u8; 4] = buf
        .get(off..off + 4)
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| DataError::Truncated {
            path: path.display().to_string(),
            need: off + 4,
            have: buf.len(),
        })?;
    Ok(u32::from_be_bytes(bytes))
}

/// Read an IDX image/label pair. Pixels are scaled to [0, 1]; with
/// `pool2`, images are 2x2 mean-pooled (784 -> 196 for 28x28 inputs).
/// `limit` truncates to the first samples in file order.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    limit: Option<usize>,
    pool2: bool,
) -> Result<Dataset, DataError> {
    let img_buf = read_file(images_path)?;
    let magic = be_u32(&img_buf, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.display().to_string(),
            got: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n_img = be_u32(&img_buf, 4, images_path)? as usize;
    let rows = be_u32(&img_buf, 8, images_path)? as usize;
    let cols = be_u32(&img_buf, 12, images_path)? as usize;

    let lbl_buf = read_file(labels_path)?;
    let magic = be_u32(&lbl_buf, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.display().to_string(),
            got: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n_lbl = be_u32(&lbl_buf, 4, labels_path)? as usize;
    if n_img != n_lbl {
        return Err(DataError::CountMismatch {
            images: n_img,
            labels: n_lbl,
        });
    }

    let n = limit.map_or(n_img, |l| l.min(n_img));
    let px = rows * cols;
    let need = 16 + n * px;
    if img_buf.len() < need {
        return Err(DataError::Truncated {
            path: images_path.display().to_string(),
            need,
            have: img_buf.len(),
        });
    }
    if lbl_buf.len() < 8 + n {
        return Err(DataError::Truncated {
            path: labels_path.display().to_string(),
            need: 8 + n,
            have: lbl_buf.len(),
        });
    }

    let (out_rows, out_cols) = if pool2 {
        if rows % 2 != 0 || cols % 2 != 0 {
            return Err(DataError::Invalid(format!(
                "cannot 2x2 pool odd image dims {rows}x{cols}"
            )));
        }
        (rows / 2, cols / 2)
    } else {
        (rows, cols)
    };
    let d = out_rows * out_cols;
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let img = &img_buf[16 + i * px..16 + (i + 1) * px];
        if pool2 {
            for r in 0..out_rows {
                for c in 0..out_cols {
                    let sum = img[2 * r * cols + 2 * c] as f64
                        + img[2 * r * cols + 2 * c + 1] as f64
                        + img[(2 * r + 1) * cols + 2 * c] as f64
                        + img[(2 * r + 1) * cols + 2 * c + 1] as f64;
                    data.push(sum / (4.0 * 255.0));
                }
            }
        } else {
            data.extend(img.iter().map(|p| *p as f64 / 255.0));
        }
    }
    let labels: Vec<usize> = lbl_buf[8..8 + n].iter().map(|l| *l as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(Dataset {
        features: Tensor::from_vec(vec![n, d], data).expect("sized idx"),
        labels,
        num_classes,
    })
}

/// Write an IDX image/label pair (used for fixtures and generated corpora).
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    images: &[u8],
    labels: &[u8],
    rows: usize,
    cols: usize,
) -> Result<(), DataError> {
    let n = labels.len();
    assert_eq!(images.len(), n * rows * cols, "image payload size");
    fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DataError {
        let path = path.display().to_string();
        move |source| DataError::Io {
            path: path.clone(),
            source,
        }
    }
    let mut img = fs::File::create(images_path).map_err(io_err(images_path))?;
    img.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())
        .and_then(|_| img.write_all(&(n as u32).to_be_bytes()))
        .and_then(|_| img.write_all(&(rows as u32).to_be_bytes()))
        .and_then(|_| img.write_all(&(cols as u32).to_be_bytes()))
        .and_then(|_| img.write_all(images))
        .map_err(io_err(images_path))?;
    let mut lbl = fs::File::create(labels_path).map_err(io_err(labels_path))?;
    lbl.write_all(&IDX_LABELS_MAGIC.to_be_bytes())
        .and_then(|_| lbl.write_all(&(n as u32).to_be_bytes()))
        .and_then(|_| lbl.write_all(labels))
        .map_err(io_err(labels_path))?;
    Ok(())
}
