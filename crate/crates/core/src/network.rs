//! Feedforward conv/pool stacks and their on-disk weight format.
//!
//! The format is a JSON manifest plus a raw payload of little-endian f32.
//! Conv weights are stored [out][in][row][col], and each layer's biases
//! follow its weights. Offsets in the manifest are byte offsets into the
//! payload.

use crate::error::{Error, Result};
use crate::graph::{Graph, PoolKind, Var};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Square,
    None,
}

impl Activation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "square" => Ok(Activation::Square),
            "none" | "linear" | "identity" => Ok(Activation::None),
            other => Err(Error::Manifest(format!("unsupported activation '{other}'"))),
        }
    }

    fn apply(self, g: &mut Graph, v: Var) -> Var {
        match self {
            Activation::Relu => g.relu(v),
            Activation::Square => g.square(v),
            Activation::None => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// [out, in, kh, kw]
    pub weight: Tensor,
    /// [out]
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
}

impl ConvLayer {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize, activation: Activation) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 4 {
            return Err(Error::Manifest(format!("conv weight must be 4-d, got {ws:?}")));
        }
        if bias.shape() != [ws[0]] {
            return Err(Error::Manifest(format!("bias shape {:?} does not match {} output channels", bias.shape(), ws[0])));
        }
        if stride == 0 {
            return Err(Error::Manifest("conv stride must be positive".into()));
        }
        Ok(ConvLayer { weight, bias, stride, padding, activation })
    }

    /// Conv layer with zero weights of the given geometry.
    pub fn zeros(out: usize, inp: usize, k: usize, activation: Activation) -> Self {
        ConvLayer {
            weight: Tensor::zeros(&[out, inp, k, k]),
            bias: Tensor::zeros(&[out]),
            stride: 1,
            padding: 0,
            activation,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1..].iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolLayer {
    pub kind: PoolKind,
    pub size: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Pool(PoolLayer),
}

impl Layer {
    fn geometry(&self) -> ((usize, usize), usize, usize) {
        match self {
            Layer::Conv(c) => (c.kernel(), c.stride, c.padding),
            Layer::Pool(p) => ((p.size, p.size), p.stride, 0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub layers: Vec<Layer>,
}

fn out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if n + 2 * pad < k {
        None
    } else {
        Some((n + 2 * pad - k) / stride + 1)
    }
}

impl NetworkSpec {
    pub fn new(input_channels: usize, layers: Vec<Layer>) -> Result<Self> {
        let net = NetworkSpec { input_channels, layers };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        let mut c = self.input_channels;
        for (i, l) in self.layers.iter().enumerate() {
            if let Layer::Conv(conv) = l {
                if conv.in_channels() != c {
                    return Err(Error::Manifest(format!("layer {i} expects {} input channels but receives {c}", conv.in_channels())));
                }
                c = conv.out_channels();
            }
            if let Layer::Pool(p) = l {
                if p.size == 0 || p.stride == 0 {
                    return Err(Error::Manifest(format!("layer {i}: pool size and stride must be positive")));
                }
            }
        }
        Ok(())
    }

    /// Channel count after `layer`.
    pub fn channels_after(&self, layer: usize) -> usize {
        let mut c = self.input_channels;
        for l in &self.layers[..=layer] {
            if let Layer::Conv(conv) = l {
                c = conv.out_channels();
            }
        }
        c
    }

    /// Spatial output of `layer` for an `h` x `w` input, if every layer fits.
    pub fn output_size(&self, layer: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        let (mut h, mut w) = (h, w);
        for l in &self.layers[..=layer] {
            let ((kh, kw), s, p) = l.geometry();
            h = out_len(h, kh, s, p)?;
            w = out_len(w, kw, s, p)?;
        }
        Some((h, w))
    }

    /// Receptive field (rows, cols) of one output position of `layer`.
    pub fn receptive_field(&self, layer: usize) -> (usize, usize) {
        let (mut rh, mut rw, mut jump) = (1, 1, 1);
        for l in &self.layers[..=layer] {
            let ((kh, kw), s, _) = l.geometry();
            rh += (kh - 1) * jump;
            rw += (kw - 1) * jump;
            jump *= s;
        }
        (rh, rw)
    }

    /// Smallest input size whose `layer` output is 1x1.
    pub fn input_size_for(&self, layer: usize) -> Result<(usize, usize)> {
        let find = |rows: bool| {
            (1..=4096).find(|&n| {
                let (h, w) = if rows { (n, 1_000_000) } else { (1_000_000, n) };
                self.output_size(layer, h, w).map(|(a, b)| if rows { a } else { b }) == Some(1)
            })
        };
        match (find(true), find(false)) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(Error::Invalid(format!("no input size yields a 1x1 output at layer {layer}"))),
        }
    }

    /// Forward pass of a [B,C,H,W] batch; returns every layer's output.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        self.forward_to(g, x, self.layers.len().saturating_sub(1))
    }

    /// Outputs of layers 0..=last only.
    pub fn forward_to(&self, g: &mut Graph, x: Var, last: usize) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(last + 1);
        let mut h = x;
        for l in self.layers.iter().take(last + 1) {
            h = match l {
                Layer::Conv(c) => {
                    let w = g.constant(c.weight.clone());
                    let b = g.constant(c.bias.clone());
                    let y = g.conv2d(h, w, Some(b), c.stride, c.padding)?;
                    c.activation.apply(g, y)
                }
                Layer::Pool(p) => g.pool2d(h, p.kind, p.size, p.stride)?,
            };
            outs.push(h);
        }
        Ok(outs)
    }

    /// Evaluate `layer` on one [C,H,W] image without gradient tracking.
    pub fn eval(&self, image: &Tensor, layer: usize) -> Result<Tensor> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let mut g = Graph::new();
        let x = g.constant(image.reshape(&shape)?);
        let outs = self.forward_to(&mut g, x, layer)?;
        Ok(g.value(outs[layer]).clone())
    }
}

/// Same architecture with weights drawn from N(0, (scale/sqrt(fan_in))^2)
/// and zero biases.
pub fn random_network(spec: &NetworkSpec, seed: u64, init_scale: f64) -> NetworkSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layers
        .iter()
        .map(|l| match l {
            Layer::Conv(c) => {
                let std = init_scale / (c.fan_in() as f64).sqrt();
                let weight = Tensor::randn(c.weight.shape(), &mut rng).scaled(std);
                Layer::Conv(ConvLayer { weight, bias: Tensor::zeros(c.bias.shape()), ..c.clone() })
            }
            Layer::Pool(p) => Layer::Pool(p.clone()),
        })
        .collect();
    NetworkSpec { input_channels: spec.input_channels, layers }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerRecord {
    Conv {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        weight_shape: [usize; 4],
        stride: usize,
        padding: usize,
        activation: String,
        weight_offset: usize,
        bias_offset: usize,
    },
    Pool {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        pool: String,
        size: usize,
        stride: usize,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub input_channels: usize,
    pub layers: Vec<LayerRecord>,
    /// SHA-256 of the payload, lowercase hex. Verified when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn read_f32s(payload: &[u8], offset: usize, count: usize, what: &str) -> Result<Vec<f64>> {
    let end = offset + count * 4;
    if !offset.is_multiple_of(4) || end > payload.len() {
        return Err(Error::Manifest(format!(
            "{what}: {count} floats at byte {offset} exceed the {}-byte payload",
            payload.len()
        )));
    }
    Ok(payload[offset..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Build a network from a parsed manifest and its payload.
pub fn network_from_parts(manifest: &Manifest, payload: &[u8]) -> Result<NetworkSpec> {
    if let Some(sum) = &manifest.checksum {
        let actual = sha256_hex(payload);
        if !actual.eq_ignore_ascii_case(sum) {
            return Err(Error::Manifest(format!("payload checksum mismatch: manifest {sum}, payload {actual}")));
        }
    }
    let mut layers = Vec::new();
    let mut expected_bytes = 0;
    let mut cursor = 0;
    for (i, rec) in manifest.layers.iter().enumerate() {
        match rec {
            LayerRecord::Conv { weight_shape, stride, padding, activation, weight_offset, bias_offset, .. } => {
                let count: usize = weight_shape.iter().product();
                if *weight_offset < cursor || *bias_offset < weight_offset + count * 4 {
                    return Err(Error::Manifest(format!("layer {i}: offsets overlap or are out of order")));
                }
                let w = read_f32s(payload, *weight_offset, count, &format!("layer {i} weights"))?;
                let b = read_f32s(payload, *bias_offset, weight_shape[0], &format!("layer {i} biases"))?;
                cursor = bias_offset + weight_shape[0] * 4;
                expected_bytes += (count + weight_shape[0]) * 4;
                let layer = ConvLayer::new(
                    Tensor::new(weight_shape, w)?,
                    Tensor::from_vec(b),
                    *stride,
                    *padding,
                    Activation::parse(activation)?,
                )?;
                layers.push(Layer::Conv(layer));
            }
            LayerRecord::Pool { pool, size, stride, .. } => {
                let kind = match pool.as_str() {
                    "max" => PoolKind::Max,
                    "avg" | "mean" => PoolKind::Avg,
                    other => return Err(Error::Manifest(format!("layer {i}: unsupported pool kind '{other}'"))),
                };
                layers.push(Layer::Pool(PoolLayer { kind, size: *size, stride: *stride }));
            }
        }
    }
    if expected_bytes != payload.len() {
        return Err(Error::Manifest(format!(
            "payload is {} bytes but the manifest declares {expected_bytes}",
            payload.len()
        )));
    }
    NetworkSpec::new(manifest.input_channels, layers)
}

pub fn load_network(manifest_path: &Path, weights_path: &Path) -> Result<NetworkSpec> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", manifest_path.display())))?;
    let payload = std::fs::read(weights_path)?;
    network_from_parts(&manifest, &payload)
}

/// Serialize to manifest and payload; weights are narrowed to f32.
pub fn network_to_parts(net: &NetworkSpec, source: Option<&str>) -> (Manifest, Vec<u8>) {
    let mut payload = Vec::new();
    let mut records = Vec::new();
    for l in &net.layers {
        match l {
            Layer::Conv(c) => {
                let weight_offset = payload.len();
                for v in c.weight.data() {
                    payload.extend_from_slice(&(*v as f32).to_le_bytes());
                }
                let bias_offset = payload.len();
                for v in c.bias.data() {
                    payload.extend_from_slice(&(*v as f32).to_le_bytes());
                }
                let ws = c.weight.shape();
                records.push(LayerRecord::Conv {
                    name: None,
                    weight_shape: [ws[0], ws[1], ws[2], ws[3]],
                    stride: c.stride,
                    padding: c.padding,
                    activation: serde_json::to_value(c.activation)
                        .ok()
                        .and_then(|v| v.as_str().map(str::to_owned))
                        .unwrap_or_default(),
                    weight_offset,
                    bias_offset,
                });
            }
            Layer::Pool(p) => records.push(LayerRecord::Pool {
                name: None,
                pool: match p.kind {
                    PoolKind::Max => "max".into(),
                    PoolKind::Avg => "avg".into(),
                },
                size: p.size,
                stride: p.stride,
            }),
        }
    }
    let manifest = Manifest {
        source: source.map(str::to_owned),
        input_channels: net.input_channels,
        layers: records,
        checksum: Some(sha256_hex(&payload)),
    };
    (manifest, payload)
}

pub fn save_network(net: &NetworkSpec, manifest_path: &Path, weights_path: &Path) -> Result<()> {
    let (manifest, payload) = network_to_parts(net, None);
    std::fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    std::fs::write(weights_path, payload)?;
    Ok(())
}
