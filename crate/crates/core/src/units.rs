//! Differentiable scalar units: Gabor toy cells and CNN channels.
//!
//! Every unit consumes a [B,C,H,W] batch and yields per-image activations
//! [B] and diversity features [B,F]. Toy cells use pixel space as their
//! feature space.

use crate::error::{shape_err, Error, Result};
use crate::gabor::{gabor, GaborParams};
use crate::graph::{Graph, Var};
use crate::network::{Activation, ConvLayer, Layer, NetworkSpec};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Debug;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnitKind {
    Simple,
    Energy,
    HubelWiesel,
    CornerToy,
    Cnn,
}

pub struct UnitOutput {
    pub activation: Var,
    pub features: Var,
}

pub trait Unit: Send + Sync + Debug {
    fn kind(&self) -> UnitKind;
    /// Input geometry [C, H, W].
    fn input_shape(&self) -> [usize; 3];
    fn forward(&self, g: &mut Graph, x: Var) -> Result<UnitOutput>;

    fn receptive_field(&self) -> usize {
        self.input_shape()[1]
    }
}

pub type UnitModel = Arc<dyn Unit>;

fn check_batch(unit: &dyn Unit, g: &Graph, x: Var) -> Result<usize> {
    let s = g.shape(x);
    let want = unit.input_shape();
    if s.len() != 4 || s[1..] != want {
        return shape_err("unit input", format!("expected [B,{},{},{}], got {s:?}", want[0], want[1], want[2]));
    }
    Ok(s[0])
}

fn batch_of(images: &[Tensor]) -> Result<Tensor> {
    Tensor::stack(images)
}

/// Activations of `unit` on [C,H,W] images.
pub fn activations(unit: &dyn Unit, images: &[Tensor]) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let x = g.constant(batch_of(images)?);
    let out = unit.forward(&mut g, x)?;
    Ok(g.value(out.activation).data().to_vec())
}

pub fn activation(unit: &dyn Unit, image: &Tensor) -> Result<f64> {
    Ok(activations(unit, std::slice::from_ref(image))?[0])
}

/// Diversity feature vectors of [C,H,W] images.
pub fn features(unit: &dyn Unit, images: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let x = g.constant(batch_of(images)?);
    let out = unit.forward(&mut g, x)?;
    Ok(g.value(out.features).unstack())
}

fn pixel_features(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    g.reshape(x, &[s[0], s[1] * s[2] * s[3]])
}

/// Filter responses <w_k, x> as a [B,K,1,1] tensor.
fn project(g: &mut Graph, x: Var, bank: &Tensor) -> Result<Var> {
    let w = g.constant(bank.clone());
    g.conv2d(x, w, None, 1, 0)
}

fn bank(filters: &[Tensor]) -> Result<Tensor> {
    let n = filters[0].shape()[0];
    Tensor::stack(filters)?.reshape(&[filters.len(), 1, n, n])
}

#[derive(Debug, Clone)]
pub struct SimpleCell {
    pub params: GaborParams,
    filter: Tensor,
}

impl SimpleCell {
    pub fn new(params: GaborParams) -> Result<Self> {
        Ok(SimpleCell { params, filter: bank(&[gabor(&params)?])? })
    }

    pub fn filter(&self) -> Tensor {
        let n = self.params.size;
        self.filter.reshape(&[n, n]).expect("square filter")
    }
}

impl Unit for SimpleCell {
    fn kind(&self) -> UnitKind {
        UnitKind::Simple
    }
    fn input_shape(&self) -> [usize; 3] {
        [1, self.params.size, self.params.size]
    }
    fn forward(&self, g: &mut Graph, x: Var) -> Result<UnitOutput> {
        let b = check_batch(self, g, x)?;
        let r = project(g, x, &self.filter)?;
        let a = g.relu(r);
        let activation = g.reshape(a, &[b])?;
        Ok(UnitOutput { activation, features: pixel_features(g, x)? })
    }
}

#[derive(Debug, Clone)]
pub struct EnergyCell {
    pub params: GaborParams,
    pair: Tensor,
}

impl EnergyCell {
    pub fn new(params: GaborParams) -> Result<Self> {
        let even = gabor(&params)?;
        let odd = gabor(&params.with_phase(params.phase + 90.0))?;
        Ok(EnergyCell { params, pair: bank(&[even, odd])? })
    }
}

impl Unit for EnergyCell {
    fn kind(&self) -> UnitKind {
        UnitKind::Energy
    }
    fn input_shape(&self) -> [usize; 3] {
        [1, self.params.size, self.params.size]
    }
    fn forward(&self, g: &mut Graph, x: Var) -> Result<UnitOutput> {
        check_batch(self, g, x)?;
        let r = project(g, x, &self.pair)?;
        let sq = g.square(r);
        let activation = g.sum_items(sq)?;
        Ok(UnitOutput { activation, features: pixel_features(g, x)? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HubelWieselParams {
    pub gabor: GaborParams,
    pub k: usize,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for HubelWieselParams {
    fn default() -> Self {
        HubelWieselParams { gabor: GaborParams::default(), k: 256, jitter: 0.2, seed: 25 }
    }
}

/// Phase-pooling complex cell: (pi/K) * sum_k a_k relu(<w_k, x>) with
/// w_k at phases 360k/K and a_k = 1 + jitter * N(0,1). The pi/K factor
/// makes an optimal stimulus of norm r evoke about r, as for a simple cell.
#[derive(Debug, Clone)]
pub struct HubelWieselCell {
    pub params: HubelWieselParams,
    pub weights: Vec<f64>,
    filters: Tensor,
    pool: Tensor,
}

impl HubelWieselCell {
    pub fn new(params: HubelWieselParams) -> Result<Self> {
        if params.k < 2 {
            return Err(Error::Invalid(format!("Hubel-Wiesel cell needs K >= 2, got {}", params.k)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let eps = Tensor::randn(&[params.k], &mut rng);
        let weights: Vec<f64> = eps.data().iter().map(|e| 1.0 + params.jitter * e).collect();
        let filters: Vec<Tensor> = (0..params.k)
            .map(|i| gabor(&params.gabor.with_phase(params.gabor.phase + 360.0 * i as f64 / params.k as f64)))
            .collect::<Result<_>>()?;
        let gain = std::f64::consts::PI / params.k as f64;
        let pool = Tensor::new(&[1, params.k, 1, 1], weights.iter().map(|a| a * gain).collect())?;
        Ok(HubelWieselCell { params, weights, filters: bank(&filters)?, pool })
    }
}

impl Unit for HubelWieselCell {
    fn kind(&self) -> UnitKind {
        UnitKind::HubelWiesel
    }
    fn input_shape(&self) -> [usize; 3] {
        [1, self.params.gabor.size, self.params.gabor.size]
    }
    fn forward(&self, g: &mut Graph, x: Var) -> Result<UnitOutput> {
        let b = check_batch(self, g, x)?;
        let r = project(g, x, &self.filters)?;
        let a = g.relu(r);
        let w = g.constant(self.pool.clone());
        let s = g.conv2d(a, w, None, 1, 0)?;
        let activation = g.reshape(s, &[b])?;
        Ok(UnitOutput { activation, features: pixel_features(g, x)? })
    }
}

/// Geometry of the top-left corner detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerParams {
    pub size: usize,
    pub frequency: f64,
    pub sigma: f64,
    /// Center of the horizontal-edge pair (x, y).
    pub horizontal_center: (f64, f64),
    /// Center of the vertical-edge pair (x, y).
    pub vertical_center: (f64, f64),
}

impl Default for CornerParams {
    fn default() -> Self {
        CornerParams { size: 24, frequency: 0.125, sigma: 2.5, horizontal_center: (12.0, 7.0), vertical_center: (7.0, 12.0) }
    }
}

impl CornerParams {
    /// Gabor of the horizontal edge component (grating varies along y).
    pub fn horizontal(&self) -> GaborParams {
        GaborParams { theta: 90.0, frequency: self.frequency, phase: 0.0, sigma: self.sigma, center: self.horizontal_center, size: self.size }
    }

    pub fn vertical(&self) -> GaborParams {
        GaborParams { theta: 0.0, frequency: self.frequency, phase: 0.0, sigma: self.sigma, center: self.vertical_center, size: self.size }
    }
}

/// Sum of two energy cells: a horizontal edge above and a vertical edge to
/// the left of the patch center.
#[derive(Debug, Clone)]
pub struct CornerToy {
    pub params: CornerParams,
    filters: Tensor,
}

impl CornerToy {
    pub fn new(params: CornerParams) -> Result<Self> {
        let (h, v) = (params.horizontal(), params.vertical());
        let fs = [gabor(&h)?, gabor(&h.with_phase(90.0))?, gabor(&v)?, gabor(&v.with_phase(90.0))?];
        Ok(CornerToy { params, filters: bank(&fs)? })
    }

    /// Energies of the (horizontal, vertical) components for each image.
    pub fn component_energies(&self, images: &[Tensor]) -> Result<Vec<(f64, f64)>> {
        let mut g = Graph::new();
        let x = g.constant(batch_of(images)?);
        check_batch(self, &g, x)?;
        let r = project(&mut g, x, &self.filters)?;
        let v = g.value(r).data();
        Ok(v.chunks(4).map(|c| (c[0] * c[0] + c[1] * c[1], c[2] * c[2] + c[3] * c[3])).collect())
    }
}

impl Default for CornerToy {
    fn default() -> Self {
        CornerToy::new(CornerParams::default()).expect("default corner geometry is valid")
    }
}

impl Unit for CornerToy {
    fn kind(&self) -> UnitKind {
        UnitKind::CornerToy
    }
    fn input_shape(&self) -> [usize; 3] {
        [1, self.params.size, self.params.size]
    }
    fn forward(&self, g: &mut Graph, x: Var) -> Result<UnitOutput> {
        check_batch(self, g, x)?;
        let r = project(g, x, &self.filters)?;
        let sq = g.square(r);
        let activation = g.sum_items(sq)?;
        Ok(UnitOutput { activation, features: pixel_features(g, x)? })
    }
}

/// One channel of one layer of a network, with the input sized so that the
/// layer's output is 1x1. Features are the preceding layer's activations.
#[derive(Debug, Clone)]
pub struct CnnUnit {
    pub net: Arc<NetworkSpec>,
    pub layer: usize,
    pub channel: usize,
    input: [usize; 3],
}

impl CnnUnit {
    pub fn new(net: Arc<NetworkSpec>, layer: usize, channel: usize) -> Result<Self> {
        if layer >= net.layers.len() {
            return Err(Error::Invalid(format!("layer {layer} out of range for a {}-layer network", net.layers.len())));
        }
        let c = net.channels_after(layer);
        if channel >= c {
            return Err(Error::Invalid(format!("channel {channel} out of range, layer {layer} has {c} channels")));
        }
        let (h, w) = net.input_size_for(layer)?;
        Ok(CnnUnit { input: [net.input_channels, h, w], net, layer, channel })
    }
}

impl Unit for CnnUnit {
    fn kind(&self) -> UnitKind {
        UnitKind::Cnn
    }
    fn input_shape(&self) -> [usize; 3] {
        self.input
    }
    fn forward(&self, g: &mut Graph, x: Var) -> Result<UnitOutput> {
        let b = check_batch(self, g, x)?;
        let outs = self.net.forward_to(g, x, self.layer)?;
        let ch = g.channel(outs[self.layer], self.channel)?;
        let activation = g.reshape(ch, &[b])?;
        let features = if self.layer == 0 {
            pixel_features(g, x)?
        } else {
            pixel_features(g, outs[self.layer - 1])?
        };
        Ok(UnitOutput { activation, features })
    }
}

/// A unit whose activation is multiplied by a constant factor.
#[derive(Debug, Clone)]
pub struct Scaled {
    pub inner: UnitModel,
    pub factor: f64,
}

impl Unit for Scaled {
    fn kind(&self) -> UnitKind {
        self.inner.kind()
    }
    fn input_shape(&self) -> [usize; 3] {
        self.inner.input_shape()
    }
    fn forward(&self, g: &mut Graph, x: Var) -> Result<UnitOutput> {
        let out = self.inner.forward(g, x)?;
        let activation = g.scale(out.activation, self.factor);
        Ok(UnitOutput { activation, features: out.features })
    }
}

/// Layers of the grid-texture detector and its random control.
pub const TEXTURE_CHANNELS: usize = 8;

fn texture_geometry(rf: usize, k: usize) -> Vec<Layer> {
    let c = TEXTURE_CHANNELS;
    let m = rf - k + 1;
    vec![
        Layer::Conv(ConvLayer::zeros(c, 1, k, Activation::Square)),
        Layer::Conv(ConvLayer::zeros(c, c, 1, Activation::Relu)),
        Layer::Conv(ConvLayer::zeros(1, c, 1, Activation::Relu)),
        Layer::Conv(ConvLayer::zeros(1, 1, m, Activation::None)),
    ]
}

/// Parameters of the hand-wired plaid texture detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureParams {
    pub rf: usize,
    pub kernel: usize,
    pub frequency: f64,
    pub sigma: f64,
    /// Penalty on orientation imbalance; larger values demand both
    /// orientations at every position.
    pub gamma: f64,
    /// Extra pooling weight at the center of the map, relative to the rim.
    pub center_bias: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        TextureParams { rf: 16, kernel: 9, frequency: 0.125, sigma: 2.5, gamma: 1.0, center_bias: 0.0 }
    }
}

/// Architecture of the texture detector with all weights zero.
pub fn texture_architecture(p: &TextureParams) -> NetworkSpec {
    NetworkSpec { input_channels: 1, layers: texture_geometry(p.rf, p.kernel) }
}

/// Hand-wired shift-invariant texture detector. Layer 0 squares the
/// responses of quadrature pairs at 0 and 90 degrees. Layer 1 forms the
/// vertical energy v and both rectified differences of v and the
/// horizontal energy h, and layer 2 computes relu(min(v, h) - gamma |v - h|),
/// so a position only counts when both orientations are present (a plaid).
/// Layer 3 averages over positions, optionally favouring the center.
pub fn texture_network(p: &TextureParams) -> Result<NetworkSpec> {
    let mut layers = texture_geometry(p.rf, p.kernel);
    let k = p.kernel;
    let c = TEXTURE_CHANNELS;
    let filters = [(0.0, 0.0), (0.0, 90.0), (90.0, 0.0), (90.0, 90.0)]
        .iter()
        .map(|&(theta, phase)| gabor(&GaborParams::centered(k, theta, p.frequency, phase, p.sigma)))
        .collect::<Result<Vec<_>>>()?;
    if let Layer::Conv(l0) = &mut layers[0] {
        let w = l0.weight.data_mut();
        for (i, f) in filters.iter().enumerate() {
            w[i * k * k..(i + 1) * k * k].copy_from_slice(f.data());
        }
    }
    if let Layer::Conv(l1) = &mut layers[1] {
        let w = l1.weight.data_mut();
        let rows = [[1.0, 1.0, 0.0, 0.0], [1.0, 1.0, -1.0, -1.0], [-1.0, -1.0, 1.0, 1.0]];
        for (o, row) in rows.iter().enumerate() {
            w[o * c..o * c + 4].copy_from_slice(row);
        }
    }
    if let Layer::Conv(l2) = &mut layers[2] {
        let w = l2.weight.data_mut();
        w[0] = 1.0;
        w[1] = -(1.0 + p.gamma);
        w[2] = -p.gamma;
    }
    let m = p.rf - k + 1;
    if let Layer::Conv(l3) = &mut layers[3] {
        let c = (m as f64 - 1.0) / 2.0;
        let s2 = 2.0 * (m as f64 / 4.0).powi(2);
        let w: Vec<f64> = (0..m * m)
            .map(|i| {
                let (y, x) = ((i / m) as f64 - c, (i % m) as f64 - c);
                1.0 + p.center_bias * (-(x * x + y * y) / s2).exp()
            })
            .collect();
        let total: f64 = w.iter().sum();
        l3.weight.data_mut().iter_mut().zip(&w).for_each(|(v, wi)| *v = wi / total);
    }
    NetworkSpec::new(1, layers)
}
