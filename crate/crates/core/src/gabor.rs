use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Gabor geometry. Angles in degrees, frequency in cycles per pixel.
/// The grating varies along the direction (cos θ, sin θ) and the phase is
/// measured at `center`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaborParams {
    pub theta: f64,
    pub frequency: f64,
    pub phase: f64,
    pub sigma: f64,
    pub center: (f64, f64),
    pub size: usize,
}

impl GaborParams {
    /// Centered patch.
    pub fn centered(size: usize, theta: f64, frequency: f64, phase: f64, sigma: f64) -> Self {
        let c = (size as f64 - 1.0) / 2.0;
        GaborParams { theta, frequency, phase, sigma, center: (c, c), size }
    }

    pub fn with_phase(mut self, phase: f64) -> Self {
        self.phase = phase;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frequency > 0.0 && self.frequency <= 0.5) {
            return Err(Error::Invalid(format!("gabor frequency {} outside (0, 0.5]", self.frequency)));
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 || self.size == 0 {
            return Err(Error::Invalid(format!("gabor needs sigma > 0 and size > 0, got {} and {}", self.sigma, self.size)));
        }
        Ok(())
    }
}

impl Default for GaborParams {
    fn default() -> Self {
        GaborParams::centered(16, 0.0, 0.125, 0.0, 4.0)
    }
}

/// Unit-norm Gabor patch of shape [size, size].
pub fn gabor(p: &GaborParams) -> Result<Tensor> {
    p.validate()?;
    let n = p.size;
    let (ct, st) = (p.theta.to_radians().cos(), p.theta.to_radians().sin());
    let ph = p.phase.to_radians();
    let mut data = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let dx = x as f64 - p.center.0;
            let dy = y as f64 - p.center.1;
            let u = dx * ct + dy * st;
            let env = (-(dx * dx + dy * dy) / (2.0 * p.sigma * p.sigma)).exp();
            data.push(env * (2.0 * std::f64::consts::PI * p.frequency * u + ph).cos());
        }
    }
    let t = Tensor::new(&[n, n], data)?;
    let norm = t.norm();
    if norm == 0.0 {
        return Err(Error::Invalid("gabor parameters produce an all-zero patch".into()));
    }
    Ok(t.scaled(1.0 / norm))
}
