//! Binary checkpoints for networks and policies.
//!
//! Layout (all integers little-endian u32 unless noted):
//! magic `GNAK`, format version, record kind, then the kind's payload.
//! Network payload: input rank + dims, layer count, one spec entry per layer
//! (kind tag plus its dimensions and a bias flag byte), then every parameter
//! tensor's raw f64 bits in declaration order. Policy payload: the three
//! policy dimensions followed by its five tensors the same way. Parameters
//! round-trip bit-exactly; malformed files are rejected with a byte offset.

use crate::error::{Error, Result};
use crate::network::{LayerSpec, Network};
use crate::policy::PolicyNetwork;
use crate::tensor::Tensor;
use std::path::Path;

const MAGIC: &[u8; 4] = b"GNAK";
const VERSION: u32 = 1;

const KIND_NETWORK: u32 = 0;
const KIND_POLICY: u32 = 100;

const SPEC_DENSE: u32 = 0;
const SPEC_CONV2D: u32 = 1;
const SPEC_RELU: u32 = 2;
const SPEC_SOFTMAX: u32 = 3;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(kind: u32) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&kind.to_le_bytes());
        Writer { buf }
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| {
            Error::BadConfig(format!("value {v} does not fit a checkpoint field"))
        })?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn byte(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn tensor(&mut self, t: &Tensor) {
        for &v in t.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bad(&self, detail: impl Into<String>, offset: usize) -> Error {
        Error::BadFormat {
            path: self.path.display().to_string(),
            detail: detail.into(),
            offset,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.bad(
                format!("truncated while reading {what}"),
                self.bytes.len(),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let raw = self.take(4, what)?;
        Ok(u32::from_le_bytes(raw.try_into().expect("4 bytes")) as usize)
    }

    fn byte(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(8 * n, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn header(&mut self, expected_kind: u32) -> Result<()> {
        let magic = self.take(4, "magic")?;
        if magic != MAGIC {
            return Err(self.bad(format!("bad magic {magic:02x?}"), 0));
        }
        let version = self.u32("version")?;
        if version != VERSION as usize {
            return Err(self.bad(
                format!("unsupported format version {version} (reader supports {VERSION})"),
                4,
            ));
        }
        let kind = self.u32("record kind")?;
        if kind != expected_kind as usize {
            return Err(self.bad(
                format!("record kind {kind}, expected {expected_kind}"),
                8,
            ));
        }
        Ok(())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.bad(
                format!("{} trailing bytes", self.bytes.len() - self.pos),
                self.pos,
            ));
        }
        Ok(())
    }
}

fn encode_network(net: &Network) -> Result<Vec<u8>> {
    let mut w = Writer::new(KIND_NETWORK);
    w.u32(net.input_shape().len())?;
    for &d in net.input_shape() {
        w.u32(d)?;
    }
    w.u32(net.num_layers())?;
    for spec in net.specs() {
        match spec {
            LayerSpec::Dense {
                in_dim,
                out_dim,
                has_bias,
            } => {
                w.u32(SPEC_DENSE as usize)?;
                w.u32(*in_dim)?;
                w.u32(*out_dim)?;
                w.byte(u8::from(*has_bias));
            }
            LayerSpec::Conv2d {
                in_shape,
                filters,
                kernel,
                stride,
                has_bias,
            } => {
                w.u32(SPEC_CONV2D as usize)?;
                for &d in in_shape {
                    w.u32(d)?;
                }
                w.u32(*filters)?;
                w.u32(*kernel)?;
                w.u32(*stride)?;
                w.byte(u8::from(*has_bias));
            }
            LayerSpec::Relu => w.u32(SPEC_RELU as usize)?,
            LayerSpec::Softmax => w.u32(SPEC_SOFTMAX as usize)?,
        }
    }
    for params in net.params() {
        if let Some(t) = &params.weight {
            w.tensor(t);
        }
        if let Some(t) = &params.bias {
            w.tensor(t);
        }
    }
    Ok(w.buf)
}

fn decode_network(path: &Path, bytes: &[u8]) -> Result<Network> {
    let mut r = Reader {
        path,
        bytes,
        pos: 0,
    };
    r.header(KIND_NETWORK)?;
    let rank = r.u32("input rank")?;
    let mut input_shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        input_shape.push(r.u32("input dimension")?);
    }
    let layers = r.u32("layer count")?;
    let mut specs = Vec::with_capacity(layers);
    for l in 0..layers {
        let tag_offset = r.pos;
        let tag = r.u32("layer kind")?;
        let spec = match tag as u32 {
            SPEC_DENSE => {
                let in_dim = r.u32("dense input size")?;
                let out_dim = r.u32("dense output size")?;
                let has_bias = r.byte("dense bias flag")? != 0;
                LayerSpec::Dense {
                    in_dim,
                    out_dim,
                    has_bias,
                }
            }
            SPEC_CONV2D => {
                let mut in_shape = [0usize; 3];
                for d in &mut in_shape {
                    *d = r.u32("conv input shape")?;
                }
                let filters = r.u32("conv filters")?;
                let kernel = r.u32("conv kernel")?;
                let stride = r.u32("conv stride")?;
                let has_bias = r.byte("conv bias flag")? != 0;
                LayerSpec::Conv2d {
                    in_shape,
                    filters,
                    kernel,
                    stride,
                    has_bias,
                }
            }
            SPEC_RELU => LayerSpec::Relu,
            SPEC_SOFTMAX => LayerSpec::Softmax,
            other => {
                return Err(r.bad(format!("unknown layer kind {other} at layer {l}"), tag_offset))
            }
        };
        specs.push(spec);
    }
    // Rebuild parameter tensors from the spec shapes, then let the network
    // constructor re-validate the whole chain.
    let mut params = Vec::with_capacity(layers);
    for spec in &specs {
        let entry = match spec {
            LayerSpec::Dense {
                in_dim,
                out_dim,
                has_bias,
            } => {
                let weight = Tensor::new(
                    vec![*out_dim, *in_dim],
                    r.f64s(out_dim * in_dim, "dense weights")?,
                )?;
                let bias = if *has_bias {
                    Some(Tensor::new(vec![*out_dim], r.f64s(*out_dim, "dense bias")?)?)
                } else {
                    None
                };
                crate::network::LayerParams {
                    weight: Some(weight),
                    bias,
                }
            }
            LayerSpec::Conv2d {
                in_shape,
                filters,
                kernel,
                stride: _,
                has_bias,
            } => {
                let count = filters * kernel * kernel * in_shape[2];
                let weight = Tensor::new(
                    vec![*filters, *kernel, *kernel, in_shape[2]],
                    r.f64s(count, "conv weights")?,
                )?;
                let bias = if *has_bias {
                    Some(Tensor::new(vec![*filters], r.f64s(*filters, "conv bias")?)?)
                } else {
                    None
                };
                crate::network::LayerParams {
                    weight: Some(weight),
                    bias,
                }
            }
            LayerSpec::Relu | LayerSpec::Softmax => crate::network::LayerParams {
                weight: None,
                bias: None,
            },
        };
        params.push(entry);
    }
    r.done()?;
    Network::with_params(input_shape, specs, params)
}

fn encode_policy(policy: &PolicyNetwork) -> Result<Vec<u8>> {
    let mut w = Writer::new(KIND_POLICY);
    w.u32(policy.input_dim())?;
    w.u32(policy.hidden_dim())?;
    w.u32(policy.num_actions())?;
    for t in policy.tensors() {
        w.tensor(t);
    }
    Ok(w.buf)
}

fn decode_policy(path: &Path, bytes: &[u8]) -> Result<PolicyNetwork> {
    let mut r = Reader {
        path,
        bytes,
        pos: 0,
    };
    r.header(KIND_POLICY)?;
    let input_dim = r.u32("policy input size")?;
    let hidden = r.u32("policy hidden size")?;
    let actions = r.u32("policy action count")?;
    if input_dim == 0 || hidden == 0 || actions == 0 {
        return Err(r.bad("zero policy dimension", 12));
    }
    let w_x = Tensor::new(
        vec![4 * hidden, input_dim],
        r.f64s(4 * hidden * input_dim, "input weights")?,
    )?;
    let w_h = Tensor::new(
        vec![4 * hidden, hidden],
        r.f64s(4 * hidden * hidden, "recurrent weights")?,
    )?;
    let b = Tensor::new(vec![4 * hidden], r.f64s(4 * hidden, "gate bias")?)?;
    let w_out = Tensor::new(
        vec![actions, hidden],
        r.f64s(actions * hidden, "head weights")?,
    )?;
    let b_out = Tensor::new(vec![actions], r.f64s(actions, "head bias")?)?;
    r.done()?;
    PolicyNetwork::from_parts(input_dim, hidden, actions, w_x, w_h, b, w_out, b_out)
}

pub fn save_network(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_network(net)?).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_network(path, &bytes)
}

pub fn save_policy(policy: &PolicyNetwork, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_policy(policy)?).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_policy(path: impl AsRef<Path>) -> Result<PolicyNetwork> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_policy(path, &bytes)
}
