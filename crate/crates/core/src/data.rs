//! Synthetic image datasets and the `DWDS` binary format.
//!
//! Layout (all little-endian): magic `DWDS`, then u32 version, count, C, H, W,
//! classes (28 bytes), then `count * C * H * W` f32 pixels, then `count` u32
//! labels.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DWDS";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 28;
pub const PIXEL_NOISE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (n, _, _, _) = images.dims4()?;
        if labels.len() != n {
            return Err(Error::dim("dataset labels", n, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.gather_batch(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    /// First `round(frac * len)` samples and the rest.
    pub fn split(&self, frac: f64) -> Result<(Dataset, Dataset)> {
        let k = ((self.len() as f64) * frac).round() as usize;
        if k == 0 || k >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "split fraction {frac} leaves an empty part of {} samples",
                self.len()
            )));
        }
        let a: Vec<usize> = (0..k).collect();
        let b: Vec<usize> = (k..self.len()).collect();
        Ok((self.subset(&a)?, self.subset(&b)?))
    }

    /// Images and labels at the given indices.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        Ok((
            self.images.gather_batch(idx)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    /// Shuffled mini-batches of indices covering the dataset once. A trailing
    /// batch smaller than 2 is merged into its predecessor so batch norm
    /// always sees at least two samples.
    pub fn epoch_batches<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let mut out: Vec<Vec<usize>> = idx.chunks(batch_size.max(2)).map(<[usize]>::to_vec).collect();
        if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
            let tail = out.pop().expect("non-empty");
            out.last_mut().expect("non-empty").extend(tail);
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let [c, h, w] = self.image_shape();
        let mut out = Vec::with_capacity(HEADER_BYTES + 4 * self.len() * (c * h * w + 1));
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.len() as u32, c as u32, h as u32, w as u32, self.classes as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.images.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        out
    }

    /// Parses a `DWDS` buffer; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Dataset> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Truncated {
                path: path.into(),
                expected: HEADER_BYTES as u64,
                actual: bytes.len() as u64,
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!(
                "{}: bad magic {:?}, expected \"DWDS\"",
                path.display(),
                String::from_utf8_lossy(&bytes[..4])
            )));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        let (version, count, c, h, w, classes) = (u(0), u(1), u(2), u(3), u(4), u(5));
        if version != VERSION as usize {
            return Err(Error::Format(format!(
                "{}: unsupported dataset version {version}",
                path.display()
            )));
        }
        let per = c * h * w;
        let expected = HEADER_BYTES + 4 * count * (per + 1);
        if bytes.len() != expected {
            return Err(Error::Truncated {
                path: path.into(),
                expected: expected as u64,
                actual: bytes.len() as u64,
            });
        }
        let body = &bytes[HEADER_BYTES..];
        let pixels: Vec<f32> = body[..4 * count * per]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let labels: Vec<usize> = body[4 * count * per..]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
            .collect();
        let images = Tensor::new(&[count, c, h, w], pixels)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Dataset::new(images, labels, classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::from_bytes(&read_file(path)?, path)
    }
}

/// Reads a file, mapping "not found" to a missing-artifact error.
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.into()),
        _ => Error::Io(e),
    })
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Per-class pattern parameters: stripe orientation (horizontal or vertical,
/// both unchanged by a horizontal flip), spatial frequency in cycles per image
/// and a colour tint.
fn class_pattern(k: usize, channels: usize) -> (bool, f64, Vec<f64>) {
    let vertical = k % 2 == 1;
    let freq = 1.0 + (k / 2) as f64;
    let tint = (0..channels)
        .map(|c| 0.6 + 0.4 * (2.0 * PI * (k as f64 / 10.0 + c as f64 / 3.0)).cos())
        .collect();
    (vertical, freq, tint)
}

/// Class-conditional stripe images with random phase and amplitude plus
/// Gaussian pixel noise of standard deviation 0.1. Labels are balanced
/// (counts differ by at most one) and shuffled.
pub fn synth_dataset(seed: u64, classes: usize, count: usize, c: usize, h: usize, w: usize) -> Result<Dataset> {
    if classes == 0 || count == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument("dataset dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid sigma");
    let mut pixels = Vec::with_capacity(count * c * h * w);
    for &k in &labels {
        let (vertical, freq, tint) = class_pattern(k, c);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let amp = rng.gen_range(0.8..1.2);
        for t in &tint {
            for y in 0..h {
                for x in 0..w {
                    let pos = if vertical { x as f64 / w as f64 } else { y as f64 / h as f64 };
                    let v = amp * t * (2.0 * PI * freq * pos + phase).sin() + noise.sample(&mut rng);
                    pixels.push(v as f32);
                }
            }
        }
    }
    Dataset::new(Tensor::new(&[count, c, h, w], pixels)?, labels, classes)
}

/// Mirrors every image left to right.
pub fn hflip(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, _, _, w) = x.dims4()?;
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(w) {
        row.reverse();
    }
    Tensor::new(x.shape(), out)
}

/// Flips each image of the batch independently with probability 1/2.
pub fn random_hflip<R: Rng + ?Sized>(x: &Tensor<f32>, rng: &mut R) -> Result<Tensor<f32>> {
    let (n, c, h, w) = x.dims4()?;
    let per = c * h * w;
    let mut out = x.data().to_vec();
    for i in 0..n {
        if rng.gen::<bool>() {
            for row in out[i * per..(i + 1) * per].chunks_exact_mut(w) {
                row.reverse();
            }
        }
    }
    Tensor::new(x.shape(), out)
}
