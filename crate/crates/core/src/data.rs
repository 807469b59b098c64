//! Synthetic phantom images, client sharding, and the `CFT1` tensor file
//! and 16-bit PGM formats.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::tensor::{numel, ImageTensor, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"CFT1";
const MAX_RANK: usize = 8;
const MAX_ELEMENTS: usize = 1 << 30;

/// Parameters of the soft-ellipse phantom generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub image_size: usize,
    /// Inclusive range of inner blobs per image.
    pub blobs: (usize, usize),
    /// Range of blob intensities added on top of the head region.
    pub intensity: (f32, f32),
    pub background: f32,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            blobs: (2, 5),
            intensity: (0.25, 0.9),
            background: -1.0,
            seed: 0,
        }
    }
}

struct Ellipse {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    cos: f32,
    sin: f32,
    level: f32,
}

impl Ellipse {
    fn random(rng: &mut ChaCha8Rng, center: (f32, f32), spread: f32, radius: (f32, f32), level: f32) -> Self {
        let angle = rng.random_range(0.0..std::f32::consts::PI);
        Self {
            cx: center.0 + rng.random_range(-spread..=spread),
            cy: center.1 + rng.random_range(-spread..=spread),
            rx: rng.random_range(radius.0..=radius.1),
            ry: rng.random_range(radius.0..=radius.1),
            cos: angle.cos(),
            sin: angle.sin(),
            level,
        }
    }

    /// 1 inside, 0 outside, smooth over roughly one pixel at the rim.
    fn coverage(&self, x: f32, y: f32) -> f32 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.rx;
        let v = (-dx * self.sin + dy * self.cos) / self.ry;
        let r = (u * u + v * v).sqrt();
        let edge = 1.0 / self.rx.min(self.ry);
        (((1.0 - r) / edge) * 0.5 + 0.5).clamp(0.0, 1.0)
    }
}

fn phantom(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = cfg.image_size as f32;
    let mid = (s - 1.0) / 2.0;
    let head = Ellipse::random(rng, (mid, mid), 0.05 * s, (0.32 * s, 0.44 * s), 0.9);
    let n_blobs = rng.random_range(cfg.blobs.0..=cfg.blobs.1.max(cfg.blobs.0));
    let blobs: Vec<Ellipse> = (0..n_blobs)
        .map(|_| {
            let level = rng.random_range(cfg.intensity.0..=cfg.intensity.1.max(cfg.intensity.0));
            let sign = if rng.random_bool(0.3) { -1.0 } else { 1.0 };
            Ellipse::random(rng, (mid, mid), 0.2 * s, (0.06 * s, 0.16 * s), sign * level)
        })
        .collect();
    let mut out = Vec::with_capacity(cfg.image_size * cfg.image_size);
    for y in 0..cfg.image_size {
        for x in 0..cfg.image_size {
            let (fx, fy) = (x as f32, y as f32);
            let inside = head.coverage(fx, fy);
            let mut v = cfg.background + head.level * inside;
            for b in &blobs {
                v += b.level * b.coverage(fx, fy) * inside;
            }
            out.push(v.clamp(-1.0, 1.0));
        }
    }
    out
}

/// `n` one-channel phantoms shaped `[n, 1, size, size]`, values in `[-1, 1]`.
pub fn generate_phantoms(cfg: &PhantomConfig, n: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data = Vec::with_capacity(n * cfg.image_size * cfg.image_size);
    for _ in 0..n {
        data.extend(phantom(cfg, &mut rng));
    }
    Tensor::new(vec![n, 1, cfg.image_size, cfg.image_size], data).expect("length matches shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: u32,
    pub seed: u64,
    pub images: ImageTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shards: Vec<ClientShard>,
    pub holdout: ImageTensor,
    pub holdout_seed: u64,
}

/// One shard per client plus a hold-out set, each from its own seed
/// derived from `root_seed`. `cfg.seed` is ignored.
pub fn make_shards(cfg: &PhantomConfig, n_clients: usize, per_client: usize, holdout: usize, root_seed: u64) -> Dataset {
    let shards = (0..n_clients)
        .map(|k| {
            let seed = derive_seed(root_seed, "shard", k as u64);
            ClientShard {
                client_id: k as u32,
                seed,
                images: generate_phantoms(&PhantomConfig { seed, ..*cfg }, per_client),
            }
        })
        .collect();
    let holdout_seed = derive_seed(root_seed, "holdout", 0);
    Dataset {
        shards,
        holdout: generate_phantoms(&PhantomConfig { seed: holdout_seed, ..*cfg }, holdout),
        holdout_seed,
    }
}

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"CFT1\"")]
    BadMagic([u8; 4]),
    #[error("file truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("extents {0:?} exceed the supported size")]
    ExtentOverflow(Vec<usize>),
    #[error("{0} unexpected bytes after the tensor data")]
    TrailingBytes(usize),
}

impl TensorFileError {
    pub fn code(&self) -> u16 {
        match self {
            TensorFileError::Io(_) => 1,
            TensorFileError::BadMagic(_) => 2,
            TensorFileError::Truncated { .. } => 3,
            TensorFileError::ExtentOverflow(_) => 4,
            TensorFileError::TrailingBytes(_) => 5,
        }
    }
}

pub fn tensor_to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out.extend(t.to_le_bytes());
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor<f32>, TensorFileError> {
    let need = |needed: usize| {
        if bytes.len() < needed {
            Err(TensorFileError::Truncated {
                needed,
                available: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    need(4)?;
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != TENSOR_MAGIC {
        return Err(TensorFileError::BadMagic(magic));
    }
    need(8)?;
    let rank = u32_at(4);
    if rank > MAX_RANK {
        return Err(TensorFileError::ExtentOverflow(vec![rank]));
    }
    need(8 + 4 * rank)?;
    let shape: Vec<usize> = (0..rank).map(|i| u32_at(8 + 4 * i)).collect();
    let count = numel(&shape)
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| TensorFileError::ExtentOverflow(shape.clone()))?;
    let start = 8 + 4 * rank;
    let end = start + 4 * count;
    need(end)?;
    if bytes.len() > end {
        return Err(TensorFileError::TrailingBytes(bytes.len() - end));
    }
    let data = bytes[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor::new(shape, data).expect("count matches shape"))
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<(), TensorFileError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&tensor_to_bytes(t))?;
    f.sync_all()?;
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor<f32>, TensorFileError> {
    tensor_from_bytes(&fs::read(path)?)
}

/// Binary 16-bit PGM of a `height × width` grayscale image, mapping
/// `[-1, 1]` linearly onto `0..=65535` (values outside are clipped).
pub fn pgm_bytes(pixels: &[f32], width: usize, height: usize) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count must equal width × height");
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in pixels {
        let level = ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 65535.0).round() as u16;
        out.extend_from_slice(&level.to_be_bytes());
    }
    out
}

/// Item `index` of a `[N, 1, H, W]` stack as PGM.
pub fn image_pgm(images: &ImageTensor, index: usize) -> Vec<u8> {
    let s = images.shape();
    pgm_bytes(images.item(index), s[3], s[2])
}

pub fn write_pgm(path: impl AsRef<Path>, images: &ImageTensor, index: usize) -> io::Result<()> {
    fs::write(path, image_pgm(images, index))
}

/// Tile `rows` (each a `[N, 1, H, W]` stack with equal `N`) into one image:
/// row `r` of the sheet is stack `r`, with a one-pixel mid-gray gutter.
pub fn contact_sheet(rows: &[&ImageTensor]) -> (Vec<f32>, usize, usize) {
    let s = rows[0].shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let width = n * w + n.saturating_sub(1);
    let height = rows.len() * h + rows.len().saturating_sub(1);
    let mut sheet = vec![0.0f32; width * height];
    for (r, stack) in rows.iter().enumerate() {
        for i in 0..n {
            let item = stack.item(i);
            for y in 0..h {
                let row = (r * (h + 1) + y) * width + i * (w + 1);
                sheet[row..row + w].copy_from_slice(&item[y * w..(y + 1) * w]);
            }
        }
    }
    (sheet, width, height)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantoms_deterministic_and_in_range() {
        let cfg = PhantomConfig { seed: 3, ..Default::default() };
        let a = generate_phantoms(&cfg, 5);
        assert_eq!(a, generate_phantoms(&cfg, 5));
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a.shape(), &[5, 1, 32, 32]);
    }

    #[test]
    fn pgm_header_and_levels() {
        let b = pgm_bytes(&[-1.0, 0.0, 1.0, 2.0], 2, 2);
        let header = b"P5\n2 2\n65535\n";
        assert_eq!(&b[..header.len()], header);
        assert_eq!(&b[header.len()..], &[0, 0, 0x80, 0x00, 0xff, 0xff, 0xff, 0xff]);
    }

    #[test]
    fn sheet_layout() {
        let a = Tensor::full(&[2, 1, 2, 2], 1.0f32);
        let b = Tensor::full(&[2, 1, 2, 2], -1.0f32);
        let (px, w, h) = contact_sheet(&[&a, &b]);
        assert_eq!((w, h), (5, 5));
        assert_eq!(px[0], 1.0);
        assert_eq!(px[2], 0.0);
        assert_eq!(px[3 * 5], -1.0);
    }
}
