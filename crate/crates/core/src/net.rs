//! UNet-lite noise predictor `ε_θ(x_t, t)` with its Adam optimizer and
//! checkpoint format.
//!
//! Layout for `depth = D`: a stem convolution, `D` encoder stages (residual
//! block, 2× average pool, channel-doubling convolution), a bottleneck
//! block, `D` decoder stages (channel-halving convolution, 2× nearest
//! upsample, additive skip, residual block) and a zero-initialized output
//! convolution. Every residual block receives a per-channel projection of
//! the sinusoidal timestep embedding.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, TapeError, Var};
use crate::tensor::{ImageTensor, Scalar, ShapeError, Tensor};

const ADAM_BETA1: f32 = 0.9;
const ADAM_BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("timestep embedding dimension must be even, got {0}")]
    OddEmbeddingDim(usize),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("non-finite values in {stage} pass at {layer}")]
    NonFinite { stage: &'static str, layer: String },
    #[error("learning rate must be finite and >= 0, got {0}")]
    InvalidLearningRate(f32),
    #[error("parameters do not match the network layout: {0}")]
    LayoutMismatch(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("parameter name is not valid UTF-8")]
    BadName,
    #[error("checkpoint extents overflow")]
    ExtentOverflow,
    #[error("duplicate parameter name {0:?}")]
    DuplicateName(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub timestep_embed_dim: usize,
    pub image_channels: usize,
    pub image_size: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            depth: 2,
            timestep_embed_dim: 32,
            image_channels: 1,
            image_size: 32,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::InvalidConfig(m));
        if self.base_channels == 0 || self.image_channels == 0 || self.image_size == 0 {
            return bad("base_channels, image_channels and image_size must be positive".into());
        }
        if self.timestep_embed_dim == 0 || self.timestep_embed_dim % 2 != 0 {
            return bad(format!(
                "timestep_embed_dim must be positive and even, got {}",
                self.timestep_embed_dim
            ));
        }
        let Some(factor) = 1usize.checked_shl(self.depth as u32) else {
            return bad(format!("depth {} is too large", self.depth));
        };
        if self.image_size % factor != 0 {
            return bad(format!(
                "image_size {} is not divisible by 2^depth = {factor}",
                self.image_size
            ));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn resolution(&self, level: usize) -> usize {
        self.image_size >> level
    }

    /// Every parameterized layer in execution order.
    pub fn layout(&self) -> Vec<(String, LayerSpec)> {
        let e = self.timestep_embed_dim;
        let mut out = vec![(
            "temb".to_string(),
            LayerSpec::Linear {
                fan_in: e,
                fan_out: e,
            },
        )];
        let conv = |cin, cout, res| LayerSpec::Conv {
            cin,
            cout,
            kernel: 3,
            height: res,
            width: res,
        };
        out.push((
            "stem".into(),
            conv(self.image_channels, self.channels(0), self.image_size),
        ));
        let block = |out: &mut Vec<(String, LayerSpec)>, name: String, ch, res| {
            out.push((format!("{name}.conv"), conv(ch, ch, res)));
            out.push((format!("{name}.temb"), LayerSpec::Linear { fan_in: e, fan_out: ch }));
            out.push((format!("{name}.norm"), LayerSpec::Norm { channels: ch }));
        };
        for level in 0..self.depth {
            block(&mut out, format!("enc{level}"), self.channels(level), self.resolution(level));
            out.push((
                format!("down{level}"),
                conv(self.channels(level), self.channels(level + 1), self.resolution(level + 1)),
            ));
        }
        block(&mut out, "mid".into(), self.channels(self.depth), self.resolution(self.depth));
        for level in (0..self.depth).rev() {
            out.push((
                format!("up{level}"),
                conv(self.channels(level + 1), self.channels(level), self.resolution(level + 1)),
            ));
            block(&mut out, format!("dec{level}"), self.channels(level), self.resolution(level));
        }
        out.push((
            "out".into(),
            conv(self.channels(0), self.image_channels, self.image_size),
        ));
        out
    }

    /// Parameter names and shapes in layout order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        for (name, spec) in self.layout() {
            match spec {
                LayerSpec::Conv { cin, cout, kernel, .. } => {
                    shapes.push((format!("{name}.w"), vec![cout, cin, kernel, kernel]));
                    shapes.push((format!("{name}.b"), vec![cout]));
                }
                LayerSpec::Linear { fan_in, fan_out } => {
                    shapes.push((format!("{name}.w"), vec![fan_out, fan_in]));
                    shapes.push((format!("{name}.b"), vec![fan_out]));
                }
                LayerSpec::Norm { channels } => {
                    shapes.push((format!("{name}.g"), vec![channels]));
                    shapes.push((format!("{name}.b"), vec![channels]));
                }
            }
        }
        shapes
    }

    pub fn image_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.image_channels, self.image_size, self.image_size]
    }
}

/// Dimensions of one parameterized layer; the basis of FLOP accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// Stride-1, same-padded convolution over a `height × width` map.
    Conv {
        cin: usize,
        cout: usize,
        kernel: usize,
        height: usize,
        width: usize,
    },
    Linear { fan_in: usize, fan_out: usize },
    Norm { channels: usize },
}

impl LayerSpec {
    /// Forward FLOPs for `batch` inputs, one multiply-accumulate = 2 FLOPs.
    /// Normalization layers carry no multiply-accumulates and count as 0.
    pub fn forward_flops(&self, batch: u64) -> u64 {
        let macs = match *self {
            LayerSpec::Conv {
                cin,
                cout,
                kernel,
                height,
                width,
            } => (kernel * kernel * cin * cout * height * width) as u64,
            LayerSpec::Linear { fan_in, fan_out } => (fan_in * fan_out) as u64,
            LayerSpec::Norm { .. } => 0,
        };
        2 * macs * batch
    }
}

/// Named parameter tensors of the noise predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor<f32>)>,
}

impl ModelParams {
    pub fn new(entries: Vec<(String, Tensor<f32>)>) -> Result<Self, CheckpointError> {
        let mut seen = std::collections::HashSet::new();
        for (name, _) in &entries {
            if !seen.insert(name.as_str()) {
                return Err(CheckpointError::DuplicateName(name.clone()));
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<f32>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// True when both hold the same names with the same shapes, so they can
    /// be combined element-wise.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    /// Serialize as a `CFW1` checkpoint.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        let mut buf = Vec::with_capacity(8 + self.param_count() * 4);
        buf.extend_from_slice(b"CFW1");
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            buf.extend_from_slice(&t.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
        if &magic != b"CFW1" {
            return Err(CheckpointError::BadMagic(magic));
        }
        let count = cur.u32()? as usize;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| CheckpointError::BadName)?
                .to_string();
            let rank = cur.u32()? as usize;
            let mut shape = Vec::new();
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let n = crate::tensor::numel(&shape)
                .and_then(|n| n.checked_mul(4))
                .ok_or(CheckpointError::ExtentOverflow)?;
            let raw = cur.take(n)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|_| CheckpointError::ExtentOverflow)?;
            entries.push((name, t));
        }
        if cur.pos != bytes.len() {
            return Err(CheckpointError::Truncated(cur.pos));
        }
        Self::new(entries)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Sinusoidal embedding of a timestep: `dim/2` sines followed by `dim/2`
/// cosines at frequencies spaced geometrically from 1 down to 1/10000.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Tensor<f32>, NetError> {
    if dim % 2 != 0 {
        return Err(NetError::OddEmbeddingDim(dim));
    }
    Ok(Tensor::new(vec![dim], embedding_row(t, dim))?)
}

fn embedding_row(t: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let freq = |i: usize| {
        if half <= 1 {
            1.0
        } else {
            10000f64.powf(-(i as f64) / (half - 1) as f64)
        }
    };
    let mut row = Vec::with_capacity(dim);
    row.extend((0..half).map(|i| (t as f64 * freq(i)).sin() as f32));
    row.extend((0..half).map(|i| (t as f64 * freq(i)).cos() as f32));
    row
}

/// Deterministic He-initialized parameters for `config`.
pub fn build_unet(config: &NetConfig, seed: u64) -> Result<ModelParams, NetError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (name, shape) in config.param_shapes() {
        let tensor = if name.starts_with("out.") || name.ends_with(".b") {
            Tensor::zeros(&shape)
        } else if name.ends_with(".g") {
            Tensor::full(&shape, 1.0)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt())
                .expect("positive standard deviation");
            Tensor::from_fn(&shape, |_| normal.sample(&mut rng) as f32)
        };
        entries.push((name, tensor));
    }
    Ok(ModelParams::new(entries).expect("layout names are unique"))
}

struct Graph<'a> {
    config: &'a NetConfig,
    params: &'a [Var],
    next: usize,
}

impl Graph<'_> {
    fn take(&mut self) -> Var {
        let v = self.params[self.next];
        self.next += 1;
        v
    }

    fn conv<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var, name: &str) -> Result<Var, NetError> {
        let (w, b) = (self.take(), self.take());
        let y = tape.conv2d(x, w, 1)?;
        let y = tape.add_bias(y, b)?;
        tape.set_label(y, name);
        Ok(y)
    }

    fn block<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        emb: Var,
        name: &str,
    ) -> Result<Var, NetError> {
        let h = self.conv(tape, x, &format!("{name}.conv"))?;
        let (tw, tb) = (self.take(), self.take());
        let proj = tape.linear(emb, tw, tb)?;
        let (g, b) = (self.take(), self.take());
        // the norm removes per-plane constants, so the timestep goes in after it
        let h = tape.channel_norm(h, g, b)?;
        let h = tape.add_bias(h, proj)?;
        let h = tape.silu(h);
        let out = tape.add(x, h)?;
        tape.set_label(out, name);
        Ok(out)
    }

    fn forward<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        timesteps: &[usize],
    ) -> Result<Var, NetError> {
        let cfg = self.config;
        let e = cfg.timestep_embed_dim;
        let sin = Tensor::new(
            vec![timesteps.len(), e],
            timesteps
                .iter()
                .flat_map(|&t| embedding_row(t, e))
                .map(|v| T::from_f64(v as f64))
                .collect(),
        )?;
        let sin = tape.leaf(sin, false);
        let (w, b) = (self.take(), self.take());
        let emb = tape.linear(sin, w, b)?;
        let emb = tape.silu(emb);
        tape.set_label(emb, "temb");

        let mut h = self.conv(tape, x, "stem")?;
        let mut skips = Vec::with_capacity(cfg.depth);
        for level in 0..cfg.depth {
            h = self.block(tape, h, emb, &format!("enc{level}"))?;
            skips.push(h);
            let pooled = tape.avg_pool2(h)?;
            h = self.conv(tape, pooled, &format!("down{level}"))?;
        }
        h = self.block(tape, h, emb, "mid")?;
        for level in (0..cfg.depth).rev() {
            let narrowed = self.conv(tape, h, &format!("up{level}"))?;
            let up = tape.upsample2(narrowed)?;
            let joined = tape.add(up, skips[level])?;
            h = self.block(tape, joined, emb, &format!("dec{level}"))?;
        }
        let out = self.conv(tape, h, "out")?;
        debug_assert_eq!(self.next, self.params.len());
        Ok(out)
    }
}

/// Record the full noise-prediction graph on `tape`. `params` are the
/// parameter leaves in [`NetConfig::param_shapes`] order.
pub fn record_forward<T: Scalar>(
    config: &NetConfig,
    tape: &mut Tape<T>,
    params: &[Var],
    x: Var,
    timesteps: &[usize],
) -> Result<Var, NetError> {
    Graph {
        config,
        params,
        next: 0,
    }
    .forward(tape, x, timesteps)
}

#[derive(Debug, Clone, PartialEq)]
struct AdamState {
    step: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

/// Result of one optimizer step.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub loss: f32,
    /// Noise prediction before the update.
    pub prediction: ImageTensor,
}

/// Noise predictor parameters plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: NetConfig,
    params: ModelParams,
    adam: AdamState,
}

impl Model {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self, NetError> {
        let params = build_unet(&config, seed)?;
        Self::from_params(config, params)
    }

    /// Wrap existing parameters; optimizer state starts fresh.
    pub fn from_params(config: NetConfig, params: ModelParams) -> Result<Self, NetError> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len()
            || expected
                .iter()
                .zip(params.iter())
                .any(|((n, s), (pn, pt))| n != pn || s.as_slice() != pt.shape())
        {
            return Err(NetError::LayoutMismatch(format!(
                "expected {} tensors for {config:?}",
                expected.len()
            )));
        }
        let zeros = || params.tensors().map(|t| vec![0.0; t.len()]).collect();
        Ok(Self {
            config,
            adam: AdamState {
                step: 0,
                m: zeros(),
                v: zeros(),
            },
            params,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    fn check_input(&self, x_t: &ImageTensor, timesteps: &[usize]) -> Result<(), NetError> {
        let (n, c, h, w) = x_t.dims4()?;
        let cfg = &self.config;
        if c != cfg.image_channels || h != cfg.image_size || w != cfg.image_size || n == 0 {
            return Err(ShapeError::Mismatch {
                op: "predict_noise",
                expected: format!("{:?} with N >= 1", cfg.image_shape(n)),
                actual: x_t.shape().to_vec(),
            }
            .into());
        }
        if timesteps.len() != n {
            return Err(ShapeError::Mismatch {
                op: "predict_noise",
                expected: format!("{n} timesteps"),
                actual: vec![timesteps.len()],
            }
            .into());
        }
        Ok(())
    }

    /// `ε_θ(x_t, t)` for a batch; output has the input's shape.
    pub fn predict_noise(&self, x_t: &ImageTensor, timesteps: &[usize]) -> Result<ImageTensor, NetError> {
        self.check_input(x_t, timesteps)?;
        let mut tape = Tape::<f32>::new();
        let vars: Vec<Var> = self.params.tensors().map(|t| tape.leaf(t.clone(), false)).collect();
        let x = tape.leaf(x_t.clone(), false);
        let out = record_forward(&self.config, &mut tape, &vars, x, timesteps)?;
        if !tape.value(out).all_finite() {
            return Err(NetError::NonFinite {
                stage: "forward",
                layer: tape.first_non_finite().unwrap_or_default(),
            });
        }
        Ok(tape.into_value(out))
    }

    /// One Adam step on the mean squared error between predicted and true
    /// noise. On a non-finite loss or gradient the parameters are left
    /// untouched.
    pub fn train_step(
        &mut self,
        x_t: &ImageTensor,
        timesteps: &[usize],
        true_noise: &ImageTensor,
        lr: f32,
    ) -> Result<TrainOutcome, NetError> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(NetError::InvalidLearningRate(lr));
        }
        self.check_input(x_t, timesteps)?;
        if true_noise.shape() != x_t.shape() {
            return Err(ShapeError::Mismatch {
                op: "train_step",
                expected: format!("noise shaped {:?}", x_t.shape()),
                actual: true_noise.shape().to_vec(),
            }
            .into());
        }
        let mut tape = Tape::<f32>::new();
        let vars: Vec<Var> = self.params.tensors().map(|t| tape.leaf(t.clone(), true)).collect();
        let x = tape.leaf(x_t.clone(), false);
        let pred = record_forward(&self.config, &mut tape, &vars, x, timesteps)?;
        let target = tape.leaf(true_noise.clone(), false);
        let loss_var = tape.mse(pred, target)?;
        let loss = tape.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(NetError::NonFinite {
                stage: "forward",
                layer: tape.first_non_finite().unwrap_or_else(|| "loss".into()),
            });
        }
        let mut grads = tape.backward(loss_var)?;
        let grads: Vec<Tensor<f32>> = vars
            .iter()
            .map(|&v| grads.take(v).expect("parameter leaves require grad"))
            .collect();
        if let Some((name, _)) = self
            .params
            .iter()
            .zip(&grads)
            .find(|(_, g)| !g.all_finite())
            .map(|(p, g)| (p.0, g))
        {
            return Err(NetError::NonFinite {
                stage: "backward",
                layer: name.to_string(),
            });
        }
        self.adam_update(&grads, lr);
        Ok(TrainOutcome {
            loss,
            prediction: tape.into_value(pred),
        })
    }

    fn adam_update(&mut self, grads: &[Tensor<f32>], lr: f32) {
        let adam = &mut self.adam;
        adam.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(adam.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(adam.step as i32);
        for (((_, p), g), (m, v)) in self
            .params
            .entries
            .iter_mut()
            .zip(grads)
            .zip(adam.m.iter_mut().zip(adam.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}
