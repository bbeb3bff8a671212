//! Diverse activation maximization and the lambda sweep.

use crate::error::{Error, Result};
use crate::fft::{bin_frequency, irfft2, rfft2};
use crate::graph::{pair_indices, Graph, Var};
use crate::prior::PriorModel;
use crate::tensor::Tensor;
use crate::units::{features, Unit};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiversityMode {
    /// Smallest pairwise distance.
    Min,
    /// Mean pairwise distance.
    Average,
    /// Mean squared pairwise distance.
    AverageSquared,
}

impl DiversityMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "min" => Some(DiversityMode::Min),
            "average" | "avg" | "mean" => Some(DiversityMode::Average),
            "average-squared" | "avgsq" => Some(DiversityMode::AverageSquared),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DiversityMode::Min => "min",
            DiversityMode::Average => "average",
            DiversityMode::AverageSquared => "average-squared",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub n: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub window: usize,
    pub tolerance: f64,
    pub radius: f64,
    pub threshold: f64,
    pub mode: DiversityMode,
    pub precondition: bool,
    /// Remove the radial gradient component before the Adam update.
    pub tangent_projection: bool,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            n: 6,
            lambda: 0.0,
            alpha: 0.0005,
            learning_rate: 0.1,
            max_steps: 1000,
            window: 50,
            tolerance: 1e-6,
            radius: 10.0,
            threshold: 0.8,
            mode: DiversityMode::Min,
            precondition: true,
            tangent_projection: true,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.n < 2 {
            return bad(format!("batch size n must be at least 2, got {}", self.n));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be a finite value >= 0, got {}", self.lambda));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha must be a finite value >= 0, got {}", self.alpha));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return bad(format!("norm radius must be positive, got {}", self.radius));
        }
        if self.threshold.is_nan() || self.threshold <= 0.0 || self.threshold > 1.0 {
            return bad(format!("threshold must lie in (0, 1], got {}", self.threshold));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.max_steps == 0 || self.window == 0 {
            return bad("max steps and convergence window must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    #[serde(skip)]
    pub images: Vec<Tensor>,
    pub activations: Vec<f64>,
    pub min_distance: f64,
    pub distances: Vec<Vec<f64>>,
    pub trace: Vec<f64>,
    pub steps: usize,
    pub converged: bool,
}

impl SynthesisResult {
    pub fn mean_activation(&self) -> f64 {
        self.activations.iter().sum::<f64>() / self.activations.len() as f64
    }
}

/// Distance between the diversity features of two [C,H,W] images.
pub fn feature_distance(g: &mut Graph, unit: &dyn Unit, xi: Var, xj: Var) -> Result<Var> {
    let mut fs = Vec::with_capacity(2);
    for x in [xi, xj] {
        let mut shape = vec![1];
        shape.extend_from_slice(g.shape(x));
        let b = g.reshape(x, &shape)?;
        let out = unit.forward(g, b)?;
        fs.push(g.row(out.features, 0)?);
    }
    let d = g.sub(fs[0], fs[1])?;
    Ok(g.l2norm(d))
}

/// Diversity of a [B,F] feature batch.
pub fn diversity_term(g: &mut Graph, feats: Var, mode: DiversityMode) -> Result<Var> {
    let d = g.pairwise_distances(feats)?;
    Ok(match mode {
        DiversityMode::Min => g.min(d)?,
        DiversityMode::Average => g.mean(d),
        DiversityMode::AverageSquared => {
            let sq = g.square(d);
            g.mean(sq)
        }
    })
}

/// Per-bin divisor sqrt(f) for an H x W half spectrum; DC uses the smallest
/// nonzero value.
fn precondition_scale(h: usize, w: usize) -> Vec<f64> {
    let cols = w / 2 + 1;
    let mut s = Vec::with_capacity(h * cols);
    for y in 0..h {
        for x in 0..cols {
            let (fy, fx) = (bin_frequency(y, h), bin_frequency(x, w));
            s.push((fy * fy + fx * fx).sqrt().sqrt());
        }
    }
    let smallest = s.iter().copied().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
    s[0] = if smallest.is_finite() { smallest } else { 1.0 };
    s
}

/// Divide each frequency component of every channel of a [C,H,W] gradient
/// by sqrt(f).
pub fn precondition_gradient(grad: &Tensor) -> Tensor {
    let s = grad.shape();
    let (c, h, w) = match s {
        [c, h, w] => (*c, *h, *w),
        [h, w] => (1, *h, *w),
        _ => panic!("precondition_gradient expects [C,H,W], got {s:?}"),
    };
    let scale = precondition_scale(h, w);
    let mut out = Vec::with_capacity(grad.len());
    for ch in 0..c {
        let plane = Tensor::new(&[h, w], grad.data()[ch * h * w..(ch + 1) * h * w].to_vec()).expect("plane size");
        let mut spec = rfft2(&plane);
        spec.bins.iter_mut().zip(&scale).for_each(|(b, s)| *b /= *s);
        out.extend(irfft2(&spec, h, w).into_data());
    }
    Tensor::new(s, out).expect("same shape")
}

/// Rescale to the given L2 norm. A zero image is replaced by seeded noise.
pub fn project_norm(x: &Tensor, radius: f64, fallback_seed: u64) -> Tensor {
    let n = x.norm();
    if n > 0.0 && n.is_finite() {
        return x.scaled(radius / n);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fallback_seed);
    let noise = Tensor::randn(x.shape(), &mut rng);
    let m = noise.norm();
    noise.scaled(radius / m)
}

/// Mixes a base seed with sweep coordinates (splitmix64 finalizer).
pub fn derive_seed(base: u64, lambda_index: usize, repeat: usize) -> u64 {
    let mut z = base
        ^ (lambda_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (repeat as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub(crate) fn new(len: usize, lr: f64) -> Self {
        Adam { m: vec![0.0; len], v: vec![0.0; len], t: 0, lr }
    }

    /// Ascent step on `x` along `g`.
    pub(crate) fn step(&mut self, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g[i] * g[i];
            x[i] += self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Gradient post-processing shared by image and texture optimization.
pub(crate) fn shape_gradient(grad: &Tensor, x: &Tensor, precondition: bool, tangent: bool) -> Tensor {
    let mut g = if precondition { precondition_gradient(grad) } else { grad.clone() };
    if tangent {
        let xx = x.dot(x);
        if xx > 0.0 {
            let c = g.dot(x) / xx;
            g.data_mut().iter_mut().zip(x.data()).for_each(|(gi, xi)| *gi -= c * xi);
        }
    }
    g
}

pub(crate) fn converged(trace: &[f64], window: usize, tol: f64) -> bool {
    let n = trace.len();
    if n <= window {
        return false;
    }
    let (old, new) = (trace[n - 1 - window], trace[n - 1]);
    (new - old).abs() <= tol * old.abs().max(1e-12)
}

fn distance_matrix(feats: &[Tensor]) -> Vec<Vec<f64>> {
    let n = feats.len();
    let mut d = vec![vec![0.0; n]; n];
    for (i, j) in pair_indices(n) {
        let v = feats[i].zip_with(&feats[j], |a, b| (a - b) * (a - b)).expect("equal feature length");
        let dist = v.data().iter().sum::<f64>().sqrt();
        d[i][j] = dist;
        d[j][i] = dist;
    }
    d
}

/// Evaluate a finished batch: activations, distance matrix and its minimum.
pub fn summarize(unit: &dyn Unit, images: &[Tensor]) -> Result<(Vec<f64>, Vec<Vec<f64>>, f64)> {
    let acts = crate::units::activations(unit, images)?;
    let d = distance_matrix(&features(unit, images)?);
    let min = pair_indices(images.len()).iter().map(|&(i, j)| d[i][j]).fold(f64::INFINITY, f64::min);
    Ok((acts, d, min))
}

fn initial_batch(shape: [usize; 3], cfg: &SynthesisConfig) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n)
        .map(|i| {
            let t = Tensor::randn(&shape, &mut rng);
            project_norm(&t, cfg.radius, derive_seed(cfg.seed, usize::MAX, i))
        })
        .collect()
}

/// Maximize sum of activations + alpha * sum log P + lambda * diversity over
/// a batch of n images on the norm sphere.
pub fn synthesize(unit: &dyn Unit, prior: PriorModel, cfg: &SynthesisConfig) -> Result<SynthesisResult> {
    cfg.validate()?;
    let shape = unit.input_shape();
    let per = shape.iter().product::<usize>();
    let mut images = initial_batch(shape, cfg);
    let mut adams: Vec<Adam> = (0..cfg.n).map(|_| Adam::new(per, cfg.learning_rate)).collect();
    let mut trace = Vec::with_capacity(cfg.max_steps);
    let mut done = false;
    let mut steps = 0;
    while steps < cfg.max_steps {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::stack(&images)?);
        let out = unit.forward(&mut g, x)?;
        let mut loss = g.sum(out.activation);
        if cfg.alpha > 0.0 {
            let lp = prior.log_prob_batch(&mut g, x)?;
            let lp = g.scale(lp, cfg.alpha);
            loss = g.add(loss, lp)?;
        }
        if cfg.lambda > 0.0 {
            let div = diversity_term(&mut g, out.features, cfg.mode)?;
            let div = g.scale(div, cfg.lambda);
            loss = g.add(loss, div)?;
        }
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { step: steps });
        }
        trace.push(value);
        g.backward(loss)?;
        let grad = g.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(x)));
        for (i, (img, gi)) in images.iter_mut().zip(grad.unstack()).enumerate() {
            let shaped = shape_gradient(&gi, img, cfg.precondition, cfg.tangent_projection);
            adams[i].step(img.data_mut(), shaped.data());
            *img = project_norm(img, cfg.radius, derive_seed(cfg.seed, steps, i));
        }
        steps += 1;
        if converged(&trace, cfg.window, cfg.tolerance) {
            done = true;
            break;
        }
    }
    let (activations, distances, min_distance) = summarize(unit, &images)?;
    Ok(SynthesisResult { images, activations, min_distance, distances, trace, steps, converged: done })
}

/// The swept grid: 0 followed by 0.02 * 2^k for k = 0..=10.
pub fn default_lambdas() -> Vec<f64> {
    std::iter::once(0.0).chain((0..=10).map(|k| 0.02 * 2f64.powi(k))).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub mean_activation: f64,
    pub min_distance: f64,
    pub runs: Vec<SynthesisResult>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepCurve {
    pub points: Vec<SweepPoint>,
    pub threshold: f64,
    pub optimal_index: usize,
}

impl SweepCurve {
    pub fn optimal_lambda(&self) -> f64 {
        self.points[self.optimal_index].lambda
    }

    pub fn optimal(&self) -> &SweepPoint {
        &self.points[self.optimal_index]
    }

    pub fn reference(&self) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.lambda == 0.0)
    }

    /// (activation, distance) of each point relative to the lambda = 0 point.
    pub fn normalized(&self) -> Vec<(f64, f64)> {
        let Some(r) = self.reference() else {
            return vec![(f64::NAN, f64::NAN); self.points.len()];
        };
        self.points
            .iter()
            .map(|p| (p.mean_activation / r.mean_activation, p.min_distance / r.min_distance))
            .collect()
    }
}

/// Largest lambda whose mean activation stays at or above
/// `threshold` times the lambda = 0 mean.
pub fn select_optimal(lambdas: &[f64], means: &[f64], threshold: f64) -> Result<usize> {
    let r = lambdas
        .iter()
        .position(|&l| l == 0.0)
        .ok_or_else(|| Error::Invalid("lambda list must include 0 as the reference".into()))?;
    let floor = threshold * means[r];
    let mut best = r;
    for (i, (&l, &m)) in lambdas.iter().zip(means).enumerate() {
        if m >= floor && l > lambdas[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Run `repeats` syntheses per lambda and pick the optimal lambda. Runs are
/// spread over `jobs` threads; each run's seed depends only on its
/// coordinates, so results do not depend on `jobs`.
pub fn lambda_sweep(
    unit: &dyn Unit,
    prior: PriorModel,
    base: &SynthesisConfig,
    lambdas: &[f64],
    repeats: usize,
    jobs: usize,
) -> Result<SweepCurve> {
    if lambdas.is_empty() {
        return Err(Error::Invalid("lambda list is empty".into()));
    }
    if repeats == 0 {
        return Err(Error::Invalid("repeats must be at least 1".into()));
    }
    if !lambdas.contains(&0.0) {
        return Err(Error::Invalid("lambda list must include 0 as the reference".into()));
    }
    base.validate()?;
    let tasks: Vec<(usize, usize)> = (0..lambdas.len()).flat_map(|l| (0..repeats).map(move |r| (l, r))).collect();
    let slots: Mutex<Vec<Option<Result<SynthesisResult>>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= tasks.len() {
            break;
        }
        let (l, r) = tasks[i];
        let cfg = SynthesisConfig { lambda: lambdas[l], seed: derive_seed(base.seed, l, r), ..base.clone() };
        let res = synthesize(unit, prior, &cfg).map_err(|e| match e {
            Error::NonFinite { step } => Error::Invalid(format!("lambda {}: objective became non-finite at step {step}", lambdas[l])),
            other => other,
        });
        slots.lock().expect("no panics while holding the lock")[i] = Some(res);
    };
    let jobs = jobs.max(1).min(tasks.len());
    if jobs == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(work);
            }
        });
    }
    let mut results = slots.into_inner().expect("workers finished").into_iter();
    let mut points = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut runs = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            runs.push(results.next().flatten().expect("every task ran")?);
        }
        let mean_activation = runs.iter().map(|r| r.mean_activation()).sum::<f64>() / repeats as f64;
        let min_distance = runs.iter().map(|r| r.min_distance).sum::<f64>() / repeats as f64;
        points.push(SweepPoint { lambda, mean_activation, min_distance, runs });
    }
    let means: Vec<f64> = points.iter().map(|p| p.mean_activation).collect();
    let optimal_index = select_optimal(lambdas, &means, base.threshold)?;
    Ok(SweepCurve { points, threshold: base.threshold, optimal_index })
}
