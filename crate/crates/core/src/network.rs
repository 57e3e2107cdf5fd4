//! Runnable network: learned parameters bound to an [`ArchSpec`], forward
//! passes with feature taps, weight (de)serialization, and random init.
//!
//! The weight file starts with magic `CNNW`, a format version, and the
//! parameterized-layer count, then per layer its index, a kind tag, the dim
//! list, and little-endian f32 data. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::{layer_inputs, ArchSpec, LayerKind};
use crate::error::{Error, Result};
use crate::layers::{
    conv_forward, dropout_forward, fc_forward, lrn_forward, maxpool_forward, relu_forward, softmax,
    ConvParams, FcParams,
};
use crate::tensor::{flatten, Tensor};

const WEIGHTS_MAGIC: &[u8; 4] = b"CNNW";
const WEIGHTS_VERSION: u32 = 1;
const KIND_CONV: u8 = 1;
const KIND_FC: u8 = 2;

/// Standard deviation of fresh weight init.
pub const INIT_STDDEV: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv(ConvParams),
    Fc(FcParams),
    /// Layer without learned parameters.
    Stateless,
}

/// Activation vector read from a tap point, with provenance segments of
/// (layer index, segment length).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f32>,
    pub provenance: Vec<(usize, usize)>,
}

impl FeatureVector {
    pub fn from_layer(index: usize, values: Vec<f32>) -> FeatureVector {
        let len = values.len();
        FeatureVector {
            values,
            provenance: vec![(index, len)],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Concatenate tap vectors end to end, in the given order.
pub fn concat_features(parts: &[FeatureVector]) -> Result<FeatureVector> {
    if parts.is_empty() {
        return Err(Error::Data(
            "cannot concatenate an empty feature list".into(),
        ));
    }
    let mut values = Vec::with_capacity(parts.iter().map(FeatureVector::len).sum());
    let mut provenance = Vec::new();
    for p in parts {
        values.extend_from_slice(&p.values);
        provenance.extend_from_slice(&p.provenance);
    }
    Ok(FeatureVector { values, provenance })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Result of a forward pass: final fc output, softmax probabilities when the
/// architecture ends in softmax, and the requested taps.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Vec<f32>,
    pub probs: Option<Vec<f32>>,
    pub taps: BTreeMap<usize, FeatureVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: ArchSpec,
    params: Vec<LayerParams>,
}

impl Network {
    /// Bind parameters to a spec; lengths and dims are validated.
    pub fn new(spec: ArchSpec, params: Vec<LayerParams>) -> Result<Network> {
        if params.len() != spec.layers.len() {
            return Err(Error::Config(format!(
                "expected {} parameter slots, got {}",
                spec.layers.len(),
                params.len()
            )));
        }
        let inputs = layer_inputs(&spec)?;
        for (layer, (input, param)) in spec.layers.iter().zip(inputs.iter().zip(&params)) {
            match (&layer.kind, param) {
                (
                    LayerKind::Conv {
                        out,
                        kernel,
                        stride,
                        pad,
                    },
                    LayerParams::Conv(p),
                ) => {
                    let want_in = input.dims()[0];
                    if p.in_channels != want_in
                        || p.out_channels != *out
                        || p.kernel != *kernel
                        || p.stride != *stride
                        || p.pad != *pad
                    {
                        return Err(Error::Shape(format!(
                            "layer {}: conv params disagree with spec",
                            layer.index
                        )));
                    }
                }
                (LayerKind::Fc { out }, LayerParams::Fc(p)) => {
                    if p.out_dim != *out || p.in_dim != input.len() {
                        return Err(Error::Shape(format!(
                            "layer {}: fc params are {}x{}, spec wants {}x{}",
                            layer.index,
                            p.out_dim,
                            p.in_dim,
                            out,
                            input.len()
                        )));
                    }
                }
                (LayerKind::Conv { .. }, _) | (LayerKind::Fc { .. }, _) => {
                    return Err(Error::Config(format!(
                        "layer {}: missing parameters for {}",
                        layer.index,
                        layer.kind.name()
                    )));
                }
                (_, LayerParams::Stateless) => {}
                (_, _) => {
                    return Err(Error::Config(format!(
                        "layer {}: unexpected parameters for {}",
                        layer.index,
                        layer.kind.name()
                    )));
                }
            }
        }
        Ok(Network { spec, params })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn layer_params(&self, index: usize) -> Option<&LayerParams> {
        self.params.get(index.checked_sub(1)?)
    }

    pub(crate) fn layer_params_mut(&mut self, index: usize) -> Option<&mut LayerParams> {
        self.params.get_mut(index.checked_sub(1)?)
    }

    /// Run the network. Taps record each requested fc output after the affine
    /// map and before any following ReLU or dropout. In train mode dropout
    /// draws from `rng`; inference never touches it.
    pub fn forward(
        &self,
        input: &Tensor,
        mode: Mode,
        mut rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<ForwardPass> {
        if input.shape() != &self.spec.input {
            return Err(Error::Shape(format!(
                "input shape {} does not match spec input {}",
                input.shape(),
                self.spec.input
            )));
        }
        let mut cur = input.clone();
        let mut taps = BTreeMap::new();
        let mut logits: Option<Vec<f32>> = None;
        let mut probs: Option<Vec<f32>> = None;
        for (layer, param) in self.spec.layers.iter().zip(&self.params) {
            cur = match (&layer.kind, param) {
                (LayerKind::Conv { .. }, LayerParams::Conv(p)) => conv_forward(&cur, p)?,
                (LayerKind::Relu, _) => relu_forward(&cur),
                (LayerKind::MaxPool { kernel, stride }, _) => {
                    maxpool_forward(&cur, *kernel, *stride)?
                }
                (LayerKind::Lrn(p), _) => lrn_forward(&cur, p)?,
                (LayerKind::Fc { .. }, LayerParams::Fc(p)) => {
                    let flat = if cur.shape().rank() == 1 {
                        cur
                    } else {
                        flatten(&cur)
                    };
                    let out = fc_forward(flat.data(), p)?;
                    if self.spec.taps.contains(&layer.index) {
                        taps.insert(
                            layer.index,
                            FeatureVector::from_layer(layer.index, out.clone()),
                        );
                    }
                    logits = Some(out.clone());
                    Tensor::from_slice(&out)?
                }
                (LayerKind::Dropout { rate }, _) => {
                    if mode == Mode::Infer || *rate == 0.0 {
                        cur
                    } else {
                        let rng = rng.as_deref_mut().ok_or_else(|| {
                            Error::Config("train-mode forward with dropout needs an rng".into())
                        })?;
                        let (out, _) = dropout_forward(cur.data(), *rate, true, rng)?;
                        Tensor::from_vec(cur.shape().clone(), out)?
                    }
                }
                (LayerKind::Softmax, _) => {
                    let out = softmax(cur.data());
                    probs = Some(out.clone());
                    Tensor::from_slice(&out)?
                }
                _ => unreachable!("Network::new validated params"),
            };
        }
        let logits = logits
            .ok_or_else(|| Error::Config("architecture has no fully connected layer".into()))?;
        Ok(ForwardPass {
            logits,
            probs,
            taps,
        })
    }

    /// Run only the layers below the first fc layer and flatten the result.
    /// This is the frozen-backbone feature used by head fine-tuning.
    pub fn forward_frozen(&self, input: &Tensor) -> Result<Vec<f32>> {
        let Some(first_fc) = self.spec.first_fc_index() else {
            return Err(Error::Config(
                "architecture has no fully connected layer".into(),
            ));
        };
        if input.shape() != &self.spec.input {
            return Err(Error::Shape(format!(
                "input shape {} does not match spec input {}",
                input.shape(),
                self.spec.input
            )));
        }
        let mut cur = input.clone();
        for (layer, param) in self.spec.layers.iter().zip(&self.params) {
            if layer.index >= first_fc {
                break;
            }
            cur = match (&layer.kind, param) {
                (LayerKind::Conv { .. }, LayerParams::Conv(p)) => conv_forward(&cur, p)?,
                (LayerKind::Relu, _) => relu_forward(&cur),
                (LayerKind::MaxPool { kernel, stride }, _) => {
                    maxpool_forward(&cur, *kernel, *stride)?
                }
                (LayerKind::Lrn(p), _) => lrn_forward(&cur, p)?,
                (LayerKind::Dropout { .. }, _) => cur, // inert below the head
                _ => {
                    return Err(Error::Config(format!(
                        "unexpected layer {} below the first fc layer",
                        layer.index
                    )))
                }
            };
        }
        Ok(if cur.shape().rank() == 1 {
            cur.into_data()
        } else {
            flatten(&cur).into_data()
        })
    }
}

/// Fresh network with Gaussian(0, 0.01^2) weights and zero biases.
pub fn init_weights(spec: &ArchSpec, rng: &mut impl Rng) -> Result<Network> {
    let inputs = layer_inputs(spec)?;
    let normal = Normal::new(0.0, INIT_STDDEV).expect("valid stddev");
    let mut params = Vec::with_capacity(spec.layers.len());
    for (layer, input) in spec.layers.iter().zip(&inputs) {
        let p = match &layer.kind {
            LayerKind::Conv {
                out,
                kernel,
                stride,
                pad,
            } => {
                let c_in = input.dims()[0];
                let n = out * c_in * kernel * kernel;
                let weights: Vec<f32> = (0..n).map(|_| normal.sample(rng) as f32).collect();
                LayerParams::Conv(ConvParams::new(
                    c_in,
                    *out,
                    *kernel,
                    *stride,
                    *pad,
                    weights,
                    vec![0.0; *out],
                )?)
            }
            LayerKind::Fc { out } => {
                let in_dim = input.len();
                let weights: Vec<f32> = (0..out * in_dim)
                    .map(|_| normal.sample(rng) as f32)
                    .collect();
                LayerParams::Fc(FcParams::new(*out, in_dim, weights, vec![0.0; *out])?)
            }
            _ => LayerParams::Stateless,
        };
        params.push(p);
    }
    Network::new(spec.clone(), params)
}

/// Write the network's learned parameters. Bit-exact with [`load_weights`].
pub fn save_weights(net: &Network, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_u32::<LittleEndian>(WEIGHTS_VERSION)?;
    let learned: Vec<(&crate::arch::LayerSpec, &LayerParams)> = net
        .spec
        .layers
        .iter()
        .zip(&net.params)
        .filter(|(_, p)| !matches!(p, LayerParams::Stateless))
        .collect();
    w.write_u32::<LittleEndian>(learned.len() as u32)?;
    for (layer, param) in learned {
        w.write_u32::<LittleEndian>(layer.index as u32)?;
        match param {
            LayerParams::Conv(p) => {
                w.write_u8(KIND_CONV)?;
                for dim in [p.out_channels, p.in_channels, p.kernel, p.kernel] {
                    w.write_u32::<LittleEndian>(dim as u32)?;
                }
                for &v in &p.weights {
                    w.write_f32::<LittleEndian>(v)?;
                }
                for &v in &p.bias {
                    w.write_f32::<LittleEndian>(v)?;
                }
            }
            LayerParams::Fc(p) => {
                w.write_u8(KIND_FC)?;
                for dim in [p.out_dim, p.in_dim] {
                    w.write_u32::<LittleEndian>(dim as u32)?;
                }
                for &v in &p.weights {
                    w.write_f32::<LittleEndian>(v)?;
                }
                for &v in &p.bias {
                    w.write_f32::<LittleEndian>(v)?;
                }
            }
            LayerParams::Stateless => unreachable!(),
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(format!("while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact_or_truncated(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32_vec(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    read_exact_or_truncated(r, &mut bytes, what)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Load weights saved by [`save_weights`] and bind them to `spec`. Every
/// layer's dims must match the spec exactly.
pub fn load_weights(spec: &ArchSpec, path: &Path) -> Result<Network> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic, "magic")?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::BadMagic {
            expected: "CNNW",
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let version = read_u32(&mut r, "version")?;
    if version != WEIGHTS_VERSION {
        return Err(Error::BadVersion {
            expected: WEIGHTS_VERSION,
            found: version,
        });
    }
    let count = read_u32(&mut r, "layer count")? as usize;

    let inputs = layer_inputs(spec)?;
    let mut params: Vec<LayerParams> = spec
        .layers
        .iter()
        .map(|l| match l.kind {
            LayerKind::Conv { .. } | LayerKind::Fc { .. } => None,
            _ => Some(LayerParams::Stateless),
        })
        .map(|p| p.unwrap_or(LayerParams::Stateless))
        .collect();
    let mut filled = vec![false; spec.layers.len()];

    for _ in 0..count {
        let index = read_u32(&mut r, "layer index")? as usize;
        let kind = {
            let mut b = [0u8; 1];
            read_exact_or_truncated(&mut r, &mut b, "kind tag")?;
            b[0]
        };
        let layer = spec
            .layer(index)
            .ok_or_else(|| Error::Shape(format!("layer {index}: not present in spec")))?;
        let input = &inputs[index - 1];
        match (kind, &layer.kind) {
            (
                KIND_CONV,
                LayerKind::Conv {
                    out,
                    kernel,
                    stride,
                    pad,
                },
            ) => {
                let dims: Vec<usize> = (0..4)
                    .map(|_| read_u32(&mut r, "conv dims").map(|v| v as usize))
                    .collect::<Result<_>>()?;
                let want = [*out, input.dims()[0], *kernel, *kernel];
                if dims != want {
                    return Err(Error::Shape(format!(
                        "layer {index}: stored conv dims {dims:?} disagree with spec {want:?}"
                    )));
                }
                let weights = read_f32_vec(&mut r, dims.iter().product(), "conv weights")?;
                let bias = read_f32_vec(&mut r, *out, "conv bias")?;
                params[index - 1] = LayerParams::Conv(ConvParams::new(
                    input.dims()[0],
                    *out,
                    *kernel,
                    *stride,
                    *pad,
                    weights,
                    bias,
                )?);
            }
            (KIND_FC, LayerKind::Fc { out }) => {
                let stored_out = read_u32(&mut r, "fc dims")? as usize;
                let stored_in = read_u32(&mut r, "fc dims")? as usize;
                if stored_out != *out || stored_in != input.len() {
                    return Err(Error::Shape(format!(
                        "layer {index}: stored fc dims {stored_out}x{stored_in} disagree with spec {}x{}",
                        out,
                        input.len()
                    )));
                }
                let weights = read_f32_vec(&mut r, stored_out * stored_in, "fc weights")?;
                let bias = read_f32_vec(&mut r, stored_out, "fc bias")?;
                params[index - 1] =
                    LayerParams::Fc(FcParams::new(stored_out, stored_in, weights, bias)?);
            }
            _ => {
                return Err(Error::Shape(format!(
                    "layer {index}: stored kind tag {kind} disagrees with spec {}",
                    layer.kind.name()
                )));
            }
        }
        filled[index - 1] = true;
    }
    for (layer, done) in spec.layers.iter().zip(&filled) {
        let needs = matches!(layer.kind, LayerKind::Conv { .. } | LayerKind::Fc { .. });
        if needs && !done {
            return Err(Error::Truncated(format!(
                "no stored parameters for layer {}",
                layer.index
            )));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Data("trailing bytes after final layer".into()));
    }
    Network::new(spec.clone(), params)
}
