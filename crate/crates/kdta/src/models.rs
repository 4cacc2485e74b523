//! The parametric CNN family indexed by size `n` (number of
//! convolutional cells): teacher at n = 10, assistants at 8/7/6/5/4, a
//! student at 2.
//!
//! Geometry: each cell is a 3x3 same-padded convolution followed by
//! ReLU, with constant channel width. A 2x2 max pool follows every
//! second cell while the spatial size stays above 4, and pooling
//! continues after the last cell until the spatial size is at most 4, so
//! the flattened feature width feeding the final dense layer is the same
//! at every depth and the parameter count grows strictly with `n`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::rng;
use crate::tensor::{ops, ParamId, Parameter, Tape, Tensor, ValueId};
use crate::{Error, Result};

/// Declarative description of one network in the family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    /// Number of convolutional cells.
    pub size_n: usize,
    pub num_classes: usize,
    /// (channels, height, width) of one input example.
    pub input_shape: (usize, usize, usize),
    /// Output channels of every cell.
    pub base_channels: usize,
    pub seed: u64,
}

impl NetworkSpec {
    pub fn new(
        size_n: usize,
        num_classes: usize,
        input_shape: (usize, usize, usize),
        base_channels: usize,
        seed: u64,
    ) -> Self {
        NetworkSpec { size_n, num_classes, input_shape, base_channels, seed }
    }
}

/// One layer of a built network.
#[derive(Debug, Clone)]
pub enum Layer {
    /// 3x3 convolution plus ReLU.
    ConvCell { kernel: ParamId, bias: ParamId },
    MaxPool,
    Flatten,
    Dense { weight: ParamId, bias: ParamId },
}

/// A built network: layer plan plus owned parameters.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    params: Vec<Parameter>,
}

/// Constructs the network described by `spec` with seeded uniform
/// initialization scaled by `1/sqrt(fan_in)`.
pub fn build_network(spec: &NetworkSpec) -> Result<Network> {
    if spec.size_n < 1 {
        return Err(Error::Config("size_n must be at least 1".into()));
    }
    if spec.num_classes < 2 {
        return Err(Error::Config("num_classes must be at least 2".into()));
    }
    if spec.base_channels < 1 {
        return Err(Error::Config("base_channels must be at least 1".into()));
    }
    let (c_in, mut h, mut w) = spec.input_shape;
    if c_in < 1 || h < 4 || w < 4 {
        return Err(Error::Config(format!(
            "input shape {:?} too small: spatial size must be at least 4",
            spec.input_shape
        )));
    }

    let mut rng = rng::rng_from(spec.seed);
    let mut params = Vec::new();
    let mut layers = Vec::new();
    let ch = spec.base_channels;

    // Uniform(-b, b) with b = sqrt(6/fan_in) has variance 2/fan_in,
    // which keeps ReLU activation magnitudes flat across arbitrary
    // depth; a plain 10-cell stack underflows to zero logits otherwise.
    let push_param = |shape: &[usize], fan_in: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let bound = (6.0 / fan_in as f64).sqrt();
        let len: usize = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
        Parameter::new(Tensor::from_vec(shape, data).expect("shape/data length agree"))
    };

    let mut channels = c_in;
    for cell in 1..=spec.size_n {
        let fan_in = channels * 9;
        let kernel = push_param(&[ch, channels, 3, 3], fan_in, &mut rng);
        let bias = push_param(&[ch], fan_in, &mut rng);
        params.push(kernel);
        let kernel_id = ParamId::new(params.len() - 1);
        params.push(bias);
        let bias_id = ParamId::new(params.len() - 1);
        layers.push(Layer::ConvCell { kernel: kernel_id, bias: bias_id });
        channels = ch;
        if cell % 2 == 0 && h.min(w) > 4 {
            layers.push(Layer::MaxPool);
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
    }
    while h.min(w) > 4 {
        layers.push(Layer::MaxPool);
        h = h.div_ceil(2);
        w = w.div_ceil(2);
    }
    if h == 0 || w == 0 {
        return Err(Error::Config("spatial size collapsed below 1".into()));
    }
    layers.push(Layer::Flatten);

    let flat = channels * h * w;
    let weight = push_param(&[flat, spec.num_classes], flat, &mut rng);
    let bias = push_param(&[spec.num_classes], flat, &mut rng);
    params.push(weight);
    let weight_id = ParamId::new(params.len() - 1);
    params.push(bias);
    let bias_id = ParamId::new(params.len() - 1);
    layers.push(Layer::Dense { weight: weight_id, bias: bias_id });

    Ok(Network { spec: spec.clone(), layers, params })
}

impl Network {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_gradients(&mut self) {
        for p in &mut self.params {
            p.zero_gradients();
        }
    }

    /// Stable identifier used to tag artifacts produced by this network.
    pub fn source_id(&self) -> String {
        format!(
            "cnn-n{}-c{}-seed{}",
            self.spec.size_n, self.spec.base_channels, self.spec.seed
        )
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let (c, h, w) = self.spec.input_shape;
        match batch.shape() {
            &[_, bc, bh, bw] if (bc, bh, bw) == (c, h, w) => Ok(()),
            s => Err(Error::Dimension(format!(
                "batch shape {s:?} does not match input shape ({c}, {h}, {w})"
            ))),
        }
    }

    /// Tape-free forward pass producing raw logits (no softmax).
    pub fn predict_logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::ConvCell { kernel, bias } => {
                    let y = ops::conv2d_forward(
                        &x,
                        &self.params[kernel.index()].value,
                        &self.params[bias.index()].value,
                    )?;
                    ops::relu(&y)
                }
                Layer::MaxPool => ops::maxpool2d_forward(&x)?.0,
                Layer::Flatten => {
                    let n = x.shape()[0];
                    x.reshape(&[n, x.len() / n])?
                }
                Layer::Dense { weight, bias } => ops::dense_forward(
                    &x,
                    &self.params[weight.index()].value,
                    &self.params[bias.index()].value,
                )?,
            };
        }
        Ok(x)
    }

    /// Training-mode forward pass recorded on `tape`; returns the logits
    /// value handle.
    pub fn forward_on_tape(&self, batch: &Tensor, tape: &mut Tape) -> Result<ValueId> {
        self.check_batch(batch)?;
        let mut x = tape.constant(batch.clone());
        for layer in &self.layers {
            x = match layer {
                Layer::ConvCell { kernel, bias } => {
                    let k = tape.param(*kernel, &self.params)?;
                    let b = tape.param(*bias, &self.params)?;
                    let y = tape.conv2d(x, k, b)?;
                    tape.relu(y)
                }
                Layer::MaxPool => tape.max_pool2d(x)?,
                Layer::Flatten => {
                    let shape = tape.value(x).shape();
                    let n = shape[0];
                    let flat = shape.iter().product::<usize>() / n;
                    tape.reshape(x, &[n, flat])?
                }
                Layer::Dense { weight, bias } => {
                    let w = tape.param(*weight, &self.params)?;
                    let b = tape.param(*bias, &self.params)?;
                    tape.dense(x, w, b)?
                }
            };
        }
        Ok(x)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"KDTA";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes a checkpoint: little-endian header (magic `KDTA`, version,
/// spec fields) followed by every parameter's values in construction
/// order as raw `f64`.
pub fn save_checkpoint(network: &Network, path: &Path) -> Result<()> {
    let spec = &network.spec;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for field in [
        spec.size_n as u32,
        spec.num_classes as u32,
        spec.input_shape.0 as u32,
        spec.input_shape.1 as u32,
        spec.input_shape.2 as u32,
        spec.base_channels as u32,
    ] {
        buf.extend_from_slice(&field.to_le_bytes());
    }
    buf.extend_from_slice(&spec.seed.to_le_bytes());
    let total: u64 = network.parameter_count() as u64;
    buf.extend_from_slice(&total.to_le_bytes());
    for p in &network.params {
        for &v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`], validating magic,
/// version, and total parameter count.
pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} of {}",
                *off,
                bytes.len()
            )));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let magic = take(&mut off, 4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic: expected {CHECKPOINT_MAGIC:?}, found {magic:?}"
        )));
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut fields = [0u32; 6];
    for f in &mut fields {
        *f = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    }
    let seed = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
    let spec = NetworkSpec {
        size_n: fields[0] as usize,
        num_classes: fields[1] as usize,
        input_shape: (fields[2] as usize, fields[3] as usize, fields[4] as usize),
        base_channels: fields[5] as usize,
        seed,
    };
    let total = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
    let mut network = build_network(&spec)?;
    if network.parameter_count() != total {
        return Err(Error::Format(format!(
            "checkpoint declares {total} parameters but spec implies {}",
            network.parameter_count()
        )));
    }
    let payload = take(&mut off, total * 8)?;
    if off != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - off
        )));
    }
    let mut chunks = payload.chunks_exact(8);
    for p in network.params.iter_mut() {
        for v in p.value.data_mut() {
            let c = chunks.next().expect("length checked");
            *v = f64::from_le_bytes(c.try_into().unwrap());
        }
    }
    Ok(network)
}

/// Convenience gradient check over a whole network with a softmax
/// cross-entropy head. Returns the max relative error over parameters.
pub fn gradient_check_network(
    network: &mut Network,
    batch: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    let spec = network.spec.clone();
    let layers = network.layers.clone();
    let batch = batch.clone();
    let labels = labels.to_vec();
    crate::tensor::gradient_check(&mut network.params, move |tape, params| {
        let net = Network {
            spec: spec.clone(),
            layers: layers.clone(),
            params: params.to_vec(),
        };
        let logits = net.forward_on_tape(&batch, tape)?;
        tape.softmax_cross_entropy(logits, &labels)
    })
}
