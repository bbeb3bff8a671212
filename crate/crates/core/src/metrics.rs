//! Shift-invariance and linear-combination indices and the invariance score.

use crate::error::{Error, Result};
use crate::graph::{pair_indices, Graph};
use crate::prior::PriorModel;
use crate::synthesis::{converged, lambda_sweep, project_norm, shape_gradient, Adam, SweepCurve, SynthesisConfig};
use crate::tensor::Tensor;
use crate::units::{activations, Unit};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Receptive field to mask sigma ratio.
pub const RF_SIGMA_RATIO: f64 = 2.5;

/// exp(-(r/sigma)^4) around the patch center.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowMask {
    pub size: usize,
    pub sigma: f64,
    pub values: Tensor,
}

impl WindowMask {
    pub fn new(size: usize, sigma: f64) -> Self {
        let c = (size as f64 - 1.0) / 2.0;
        let mut data = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let r = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
                data.push(Self::profile(r, sigma));
            }
        }
        WindowMask { size, sigma, values: Tensor::new(&[size, size], data).expect("square mask") }
    }

    pub fn for_rf(rf: usize, ratio: f64) -> Self {
        WindowMask::new(rf, rf as f64 / ratio)
    }

    pub fn profile(r: f64, sigma: f64) -> f64 {
        (-(r / sigma).powi(4)).exp()
    }

    /// Multiply each channel of a [C,H,W] image by the mask.
    pub fn apply(&self, image: &Tensor) -> Tensor {
        let m = self.values.data();
        let data = image.data().iter().enumerate().map(|(i, v)| v * m[i % m.len()]).collect();
        Tensor::new(image.shape(), data).expect("same shape")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextureResult {
    pub texture: Tensor,
    pub mean_activation: f64,
    pub trace: Vec<f64>,
    pub steps: usize,
}

fn square_rf(unit: &dyn Unit) -> Result<(usize, usize)> {
    let [c, h, w] = unit.input_shape();
    if h != w {
        return Err(Error::Invalid(format!("texture optimization needs a square receptive field, got {h}x{w}")));
    }
    Ok((c, h))
}

/// All windowed RF-sized crops of a [C,2RF,2RF] texture.
pub fn windowed_crops(texture: &Tensor, rf: usize, stride: usize, mask: &WindowMask) -> Result<Vec<Tensor>> {
    let mut shape = vec![1];
    shape.extend_from_slice(texture.shape());
    let mut g = Graph::new();
    let x = g.constant(texture.reshape(&shape)?);
    let crops = g.unfold(x, rf, stride)?;
    Ok(g.value(crops).unstack().iter().map(|c| mask.apply(c)).collect())
}

/// Default crop stride: 1 up to a 16-pixel field, else ceil(rf/16).
pub fn default_stride(rf: usize) -> usize {
    if rf <= 16 {
        1
    } else {
        rf.div_ceil(16)
    }
}

/// Optimize an image twice the receptive field so that the mean activation
/// over its windowed crops is maximal. The texture norm is twice the
/// template radius, which puts each crop near the template norm.
pub fn optimize_texture(
    unit: &dyn Unit,
    prior: PriorModel,
    cfg: &SynthesisConfig,
    stride: usize,
    mask: &WindowMask,
) -> Result<TextureResult> {
    cfg.validate()?;
    let (c, rf) = square_rf(unit)?;
    if stride == 0 {
        return Err(Error::Invalid("crop stride must be at least 1".into()));
    }
    let s = 2 * rf;
    let radius = 2.0 * cfg.radius;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tex = project_norm(&Tensor::randn(&[c, s, s], &mut rng), radius, cfg.seed);
    let mut adam = Adam::new(tex.len(), cfg.learning_rate);
    let mut trace = Vec::new();
    let mut steps = 0;
    while steps < cfg.max_steps {
        let mut g = Graph::new();
        let x = g.leaf(tex.reshape(&[1, c, s, s])?);
        let crops = g.unfold(x, rf, stride)?;
        let m = g.constant(mask.values.clone());
        let windowed = g.mul(crops, m)?;
        let out = unit.forward(&mut g, windowed)?;
        let mut loss = g.mean(out.activation);
        if cfg.alpha > 0.0 {
            let lp = prior.log_prob_batch(&mut g, x)?;
            let lp = g.scale(lp, cfg.alpha);
            loss = g.add(loss, lp)?;
        }
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { step: steps });
        }
        trace.push(value);
        g.backward(loss)?;
        let grad = g.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(&[1, c, s, s])).reshape(&[c, s, s])?;
        let shaped = shape_gradient(&grad, &tex, cfg.precondition, cfg.tangent_projection);
        adam.step(tex.data_mut(), shaped.data());
        tex = project_norm(&tex, radius, cfg.seed.wrapping_add(steps as u64));
        steps += 1;
        if converged(&trace, cfg.window, cfg.tolerance) {
            break;
        }
    }
    let crops = windowed_crops(&tex, rf, stride, mask)?;
    let acts = activations(unit, &crops)?;
    let mean_activation = acts.iter().sum::<f64>() / acts.len() as f64;
    Ok(TextureResult { texture: tex, mean_activation, trace, steps })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean activation over windowed texture crops divided by the mean over
/// windowed templates.
pub fn shift_invariance_index(
    unit: &dyn Unit,
    texture: &Tensor,
    templates: &[Tensor],
    stride: usize,
    mask: &WindowMask,
) -> Result<f64> {
    let (_, rf) = square_rf(unit)?;
    let windowed: Vec<Tensor> = templates.iter().map(|t| mask.apply(t)).collect();
    let den = mean(&activations(unit, &windowed)?);
    if den.is_nan() || den <= 0.0 {
        return Err(Error::ZeroDenominator("unit is silent on its windowed templates".into()));
    }
    let num = mean(&activations(unit, &windowed_crops(texture, rf, stride, mask)?)?);
    Ok(num / den)
}

/// Pixel averages of every template pair, rescaled to the mean template norm.
pub fn pair_averages(templates: &[Tensor]) -> Vec<Tensor> {
    let norm = mean(&templates.iter().map(Tensor::norm).collect::<Vec<_>>());
    pair_indices(templates.len())
        .into_iter()
        .map(|(i, j)| {
            let avg = templates[i].zip_with(&templates[j], |a, b| 0.5 * (a + b)).expect("templates share a shape");
            let n = avg.norm();
            if n > 0.0 {
                avg.scaled(norm / n)
            } else {
                avg
            }
        })
        .collect()
}

/// Mean activation of renormalized template-pair averages divided by the
/// mean template activation.
pub fn linear_combination_index(unit: &dyn Unit, templates: &[Tensor]) -> Result<f64> {
    if templates.len() < 2 {
        return Err(Error::Invalid("linear-combination index needs at least 2 templates".into()));
    }
    let den = mean(&activations(unit, templates)?);
    if den.is_nan() || den <= 0.0 {
        return Err(Error::ZeroDenominator("unit is silent on its templates".into()));
    }
    Ok(mean(&activations(unit, &pair_averages(templates))?) / den)
}

/// Mean min distance at the optimal lambda over the same at lambda = 0.
pub fn invariance_score(sweep: &SweepCurve) -> Result<f64> {
    let r = sweep.reference().ok_or_else(|| Error::Invalid("sweep lacks the lambda = 0 reference".into()))?;
    if r.min_distance.is_nan() || r.min_distance <= 0.0 {
        return Err(Error::ZeroDenominator("minimum distance at lambda = 0 is zero".into()));
    }
    Ok(sweep.optimal().min_distance / r.min_distance)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub unit: String,
    pub shift_invariance_index: f64,
    pub linear_combination_index: f64,
    pub optimal_lambda: f64,
    pub normalized_min_distance: f64,
}

/// Full pipeline for one unit: sweep, templates at the optimal lambda,
/// texture optimization and both indices.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_unit(
    name: &str,
    unit: &dyn Unit,
    prior: PriorModel,
    cfg: &SynthesisConfig,
    lambdas: &[f64],
    repeats: usize,
    stride: usize,
    jobs: usize,
) -> Result<(InvarianceReport, SweepCurve, TextureResult)> {
    let sweep = lambda_sweep(unit, prior, cfg, lambdas, repeats, jobs)?;
    let templates = &sweep.optimal().runs[0].images;
    let mask = WindowMask::for_rf(unit.receptive_field(), RF_SIGMA_RATIO);
    let tex = optimize_texture(unit, prior, cfg, stride, &mask)?;
    let si = shift_invariance_index(unit, &tex.texture, templates, stride, &mask)?;
    let lc = linear_combination_index(unit, templates)?;
    let d0 = sweep.reference().map(|r| r.min_distance).unwrap_or(f64::NAN);
    let report = InvarianceReport {
        unit: name.to_owned(),
        shift_invariance_index: si,
        linear_combination_index: lc,
        optimal_lambda: sweep.optimal_lambda(),
        normalized_min_distance: sweep.optimal().min_distance / d0,
    };
    Ok((report, sweep, tex))
}
