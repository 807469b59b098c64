//! Fidelity (KID over random conv features), disclosure at the split
//! boundary, and FLOP/byte accounting.

use std::ops::AddAssign;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autograd::{Tape, TapeError};
use crate::net::NetConfig;
use crate::tensor::{ImageTensor, Tensor};

pub const DEFAULT_FEATURE_DIM: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("KID needs at least 2 samples per set, got {real} real and {generated} generated")]
    TooFewSamples { real: usize, generated: usize },
    #[error("feature dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("image shape {got:?} does not match expected {expected:?}")]
    ImageShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("empty image set")]
    Empty,
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Row-major `n × d` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * dim, data.len(), "feature matrix size");
        Self { rows, dim, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Fixed random-weight convolutional feature map: three 3×3 conv + ReLU
/// stages with 2× average pooling in between, then global average pooling.
/// Never trained.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    seed: u64,
    image_size: usize,
    channels: usize,
    layers: Vec<(Tensor<f32>, Tensor<f32>)>,
}

impl FeatureExtractor {
    pub fn new(seed: u64, image_channels: usize, image_size: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [image_channels, dim / 4, dim / 2, dim];
        let layers = widths
            .windows(2)
            .map(|w| {
                let (cin, cout) = (w[0], w[1].max(1));
                let normal = Normal::new(0.0f64, (2.0 / (9 * cin) as f64).sqrt()).expect("positive std");
                let weight = Tensor::from_fn(&[cout, cin, 3, 3], |_| normal.sample(&mut rng) as f32);
                let bias = Tensor::from_fn(&[cout], |_| 0.1 * normal.sample(&mut rng) as f32);
                (weight, bias)
            })
            .collect();
        Self {
            seed,
            image_size,
            channels: image_channels,
            layers,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.layers.last().map_or(0, |(w, _)| w.shape()[0])
    }

    pub fn extract(&self, images: &ImageTensor) -> Result<Features, MetricsError> {
        let (n, c, h, w) = images.dims4().map_err(|_| MetricsError::ImageShape {
            expected: vec![0, self.channels, self.image_size, self.image_size],
            got: images.shape().to_vec(),
        })?;
        if c != self.channels || h != self.image_size || w != self.image_size {
            return Err(MetricsError::ImageShape {
                expected: vec![n, self.channels, self.image_size, self.image_size],
                got: images.shape().to_vec(),
            });
        }
        let mut tape = Tape::<f32>::new();
        let mut x = tape.leaf(images.clone(), false);
        for (i, (wt, b)) in self.layers.iter().enumerate() {
            if i > 0 && tape.value(x).shape()[2] % 2 == 0 {
                x = tape.avg_pool2(x)?;
            }
            let wv = tape.leaf(wt.clone(), false);
            let bv = tape.leaf(b.clone(), false);
            let y = tape.conv2d(x, wv, 1)?;
            let y = tape.add_bias(y, bv)?;
            x = tape.relu(y);
        }
        let out = tape.value(x);
        let (_, d, oh, ow) = out.dims4().expect("rank 4");
        let plane = oh * ow;
        let data = out
            .data()
            .chunks(plane)
            .map(|p| p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64)
            .collect();
        Ok(Features::new(n, d, data))
    }
}

/// Unbiased squared MMD under `k(x, y) = (xᵀy/d + 1)³`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KidScore {
    pub value: f64,
    pub n_real: usize,
    pub n_gen: usize,
}

fn poly_kernel(a: &[f64], b: &[f64]) -> f64 {
    let d = a.len() as f64;
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / d + 1.0).powi(3)
}

fn mean_off_diagonal(f: &Features) -> f64 {
    let n = f.rows;
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += poly_kernel(f.row(i), f.row(j));
        }
    }
    2.0 * sum / (n * (n - 1)) as f64
}

pub fn kid(real: &Features, generated: &Features) -> Result<KidScore, MetricsError> {
    if real.rows < 2 || generated.rows < 2 {
        return Err(MetricsError::TooFewSamples {
            real: real.rows,
            generated: generated.rows,
        });
    }
    if real.dim != generated.dim {
        return Err(MetricsError::DimMismatch(real.dim, generated.dim));
    }
    let mut cross = 0.0;
    for i in 0..real.rows {
        for j in 0..generated.rows {
            cross += poly_kernel(real.row(i), generated.row(j));
        }
    }
    let cross = cross / (real.rows * generated.rows) as f64;
    Ok(KidScore {
        value: mean_off_diagonal(real) + mean_off_diagonal(generated) - 2.0 * cross,
        n_real: real.rows,
        n_gen: generated.rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisclosureReport {
    /// For each boundary image, the smallest per-pixel MSE to any real image.
    pub nearest_mse: Vec<f64>,
    pub mean_mse: f64,
    /// `None` when either set has fewer than two images.
    pub kid: Option<KidScore>,
    pub extractor_seed: u64,
    pub cut: Option<f64>,
}

fn pixel_mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64
}

pub fn disclosure(
    boundary: &ImageTensor,
    real: &ImageTensor,
    extractor: &FeatureExtractor,
) -> Result<DisclosureReport, MetricsError> {
    let (nb, ..) = boundary.dims4().map_err(|_| MetricsError::ImageShape {
        expected: vec![],
        got: boundary.shape().to_vec(),
    })?;
    if boundary.shape()[1..] != real.shape()[1..] || real.rank() != 4 {
        return Err(MetricsError::ImageShape {
            expected: boundary.shape().to_vec(),
            got: real.shape().to_vec(),
        });
    }
    let nr = real.batch();
    if nb == 0 || nr == 0 {
        return Err(MetricsError::Empty);
    }
    let nearest_mse: Vec<f64> = (0..nb)
        .map(|i| {
            (0..nr)
                .map(|j| pixel_mse(boundary.item(i), real.item(j)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mean_mse = nearest_mse.iter().sum::<f64>() / nb as f64;
    let kid = if nb >= 2 && nr >= 2 {
        Some(kid(&extractor.extract(real)?, &extractor.extract(boundary)?)?)
    } else {
        None
    };
    Ok(DisclosureReport {
        nearest_mse,
        mean_mse,
        kid,
        extractor_seed: extractor.seed(),
        cut: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    /// Counted as twice the forward cost.
    Backward,
}

/// Closed-form FLOPs of one pass of the noise predictor over `batch` images.
pub fn flop_account(net: &NetConfig, batch: usize, direction: Direction) -> u64 {
    let forward: u64 = net
        .layout()
        .iter()
        .map(|(_, spec)| spec.forward_flops(batch as u64))
        .sum();
    match direction {
        Direction::Forward => forward,
        Direction::Backward => 2 * forward,
    }
}

/// Forward + backward FLOPs of one training step over `batch` pairs.
pub fn training_flops(net: &NetConfig, batch: usize) -> u64 {
    flop_account(net, batch, Direction::Forward) + flop_account(net, batch, Direction::Backward)
}

/// Cumulative compute and traffic of one entity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EnergyProxy {
    pub forward_flops: u64,
    pub backward_flops: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

impl EnergyProxy {
    pub fn record_training(&mut self, net: &NetConfig, batch: usize) {
        self.forward_flops += flop_account(net, batch, Direction::Forward);
        self.backward_flops += flop_account(net, batch, Direction::Backward);
    }

    pub fn total_flops(&self) -> u64 {
        self.forward_flops + self.backward_flops
    }

    pub fn bytes(&self) -> u64 {
        self.bytes_sent + self.bytes_received
    }

    /// Component-wise difference `self − earlier`.
    pub fn since(&self, earlier: &Self) -> Self {
        Self {
            forward_flops: self.forward_flops - earlier.forward_flops,
            backward_flops: self.backward_flops - earlier.backward_flops,
            bytes_sent: self.bytes_sent - earlier.bytes_sent,
            bytes_received: self.bytes_received - earlier.bytes_received,
        }
    }
}

impl AddAssign for EnergyProxy {
    fn add_assign(&mut self, rhs: Self) {
        self.forward_flops += rhs.forward_flops;
        self.backward_flops += rhs.backward_flops;
        self.bytes_sent += rhs.bytes_sent;
        self.bytes_received += rhs.bytes_received;
    }
}
