//! Tuning curves, phase recovery and circular statistics for Gabor patches.

use crate::error::{Error, Result};
use crate::gabor::{gabor, GaborParams};
use crate::tensor::Tensor;
use crate::units::{activations, Unit};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseEstimate {
    /// Degrees in [0, 360).
    pub phase: f64,
    /// Fraction of patch energy captured by the quadrature pair.
    pub confidence: f64,
}

/// Activations to Gabor stimuli of norm `norm` at phases 360k/n.
pub fn tuning_curve(unit: &dyn Unit, params: &GaborParams, n_phases: usize, norm: f64) -> Result<Vec<(f64, f64)>> {
    if n_phases < 4 {
        return Err(Error::Invalid(format!("tuning curve needs at least 4 phases, got {n_phases}")));
    }
    let phases: Vec<f64> = (0..n_phases).map(|k| 360.0 * k as f64 / n_phases as f64).collect();
    let s = params.size;
    let stimuli = phases
        .iter()
        .map(|&p| gabor(&params.with_phase(p))?.scaled(norm).reshape(&[1, s, s]))
        .collect::<Result<Vec<_>>>()?;
    let acts = activations(unit, &stimuli)?;
    Ok(phases.into_iter().zip(acts).collect())
}

/// Project onto the unit-norm (0 deg, 90 deg) pair with the geometry of
/// `params`; its own phase is ignored.
pub fn estimate_phase(patch: &Tensor, params: &GaborParams) -> Result<PhaseEstimate> {
    let s = params.size;
    if patch.len() != s * s {
        return Err(Error::Shape { op: "estimate_phase", detail: format!("patch {:?} vs {s}x{s} template", patch.shape()) });
    }
    let flat = patch.reshape(&[s, s])?;
    let c0 = flat.dot(&gabor(&params.with_phase(0.0))?);
    let c90 = flat.dot(&gabor(&params.with_phase(90.0))?);
    let e = flat.dot(&flat);
    if e == 0.0 {
        return Ok(PhaseEstimate { phase: 0.0, confidence: 0.0 });
    }
    Ok(PhaseEstimate { phase: wrap(c90.atan2(c0).to_degrees()), confidence: (c0 * c0 + c90 * c90) / e })
}

pub fn wrap(deg: f64) -> f64 {
    let w = deg.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub min_gap: f64,
    pub resultant_length: f64,
}

fn sorted(phases: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = phases.iter().map(|&x| wrap(x)).collect();
    p.sort_by(f64::total_cmp);
    p
}

/// Circular gaps between consecutive sorted phases, wrapping around.
fn gaps(p: &[f64]) -> Vec<f64> {
    let n = p.len();
    (0..n)
        .map(|i| if i + 1 < n { p[i + 1] - p[i] } else { p[0] + 360.0 - p[n - 1] })
        .collect()
}

pub fn circular_coverage(phases: &[f64]) -> Result<Coverage> {
    if phases.len() < 2 {
        return Err(Error::Invalid("circular coverage needs at least 2 phases".into()));
    }
    let p = sorted(phases);
    let min_gap = gaps(&p).into_iter().fold(f64::INFINITY, f64::min);
    let (mut c, mut s) = (0.0, 0.0);
    for x in phases {
        c += x.to_radians().cos();
        s += x.to_radians().sin();
    }
    let n = phases.len() as f64;
    Ok(Coverage { min_gap, resultant_length: (c * c + s * s).sqrt() / n })
}

/// Number of groups after joining neighbours closer than `width` degrees.
pub fn cluster_count(phases: &[f64], width: f64) -> usize {
    if phases.is_empty() {
        return 0;
    }
    let breaks = gaps(&sorted(phases)).into_iter().filter(|&g| g > width).count();
    breaks.max(1)
}

/// Most phases that fit in one arc of `width` degrees.
pub fn largest_cluster(phases: &[f64], width: f64) -> usize {
    let p = sorted(phases);
    p.iter()
        .map(|&start| p.iter().filter(|&&x| (x - start).rem_euclid(360.0) <= width + 1e-9).count())
        .max()
        .unwrap_or(0)
}

/// Counts per bin of `bin_width` degrees starting at 0.
pub fn phase_histogram(phases: &[f64], bin_width: f64) -> Result<Vec<(f64, usize)>> {
    if !(bin_width > 0.0 && bin_width <= 360.0) {
        return Err(Error::Invalid(format!("histogram bin width must lie in (0, 360], got {bin_width}")));
    }
    let bins = (360.0 / bin_width).ceil() as usize;
    let mut counts = vec![0; bins];
    for &x in phases {
        let b = ((wrap(x) / bin_width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(counts.into_iter().enumerate().map(|(i, c)| (i as f64 * bin_width, c)).collect())
}
