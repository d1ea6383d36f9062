//! Confidence bounds that fold in the model-error spread, and the inverse
//! problem of finding the image size that reaches a target tolerance.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::estimator::{variance_from_cls, VarianceEstimate};
use crate::image::PhaseFraction;

pub const QUADRATURE_NODES: usize = 200;
const BISECTION_TOL: f64 = 1e-10;
/// Half-width of the quadrature window, in standard deviations of f_σ.
const WINDOW_SDS: f64 = 10.0;
const MAX_GROWTH: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub dim: usize,
    pub fit: String,
    pub a: f64,
    pub b: f64,
    pub support: [f64; 2],
    pub provenance: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaMod {
    pub value: f64,
    pub extrapolated: bool,
}

const DEFAULT_2D: &str = include_str!("../calibration/default_2d.json");
const DEFAULT_3D: &str = include_str!("../calibration/default_3d.json");

impl CalibrationModel {
    pub fn power(dim: usize, a: f64, b: f64, support: [f64; 2], provenance: impl Into<String>) -> Self {
        Self {
            dim,
            fit: "power".into(),
            a,
            b,
            support,
            provenance: provenance.into(),
        }
    }

    /// A model with σ_mod ≡ 0: bounds reduce to the plain normal interval.
    pub fn zero(dim: usize) -> Self {
        Self::power(dim, 0.0, 0.0, [1.0, f64::MAX], "no model error")
    }

    /// Shipped defaults, produced by the `calibrate` command on synthetic Boolean ensembles.
    pub fn builtin(dim: usize) -> Result<Self> {
        let text = match dim {
            2 => DEFAULT_2D,
            3 => DEFAULT_3D,
            d => return Err(Error::InvalidArgument(format!("no built-in calibration for {d}D"))),
        };
        Self::from_json(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: CalibrationModel = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::InvalidArgument(format!("calibration dim {} must be 2 or 3", self.dim)));
        }
        if self.fit != "power" {
            return Err(Error::InvalidArgument(format!("unknown calibration fit '{}'", self.fit)));
        }
        if !(self.a.is_finite() && self.a >= 0.0 && self.b.is_finite() && self.b >= 0.0) {
            return Err(Error::InvalidArgument("calibration coefficients must be finite and non-negative".into()));
        }
        if !(self.support[0] > 0.0 && self.support[0] <= self.support[1]) {
            return Err(Error::InvalidArgument("calibration support must be an increasing positive range".into()));
        }
        Ok(())
    }

    pub fn sigma_mod(&self, volume: f64) -> SigmaMod {
        SigmaMod {
            value: self.a * volume.powf(-self.b),
            extrapolated: volume < self.support[0] || volume > self.support[1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBound {
    pub confidence: f64,
    pub half_width: f64,
    pub interval: [f64; 2],
    pub relative_pct: f64,
}

fn check_confidence(c: f64) -> Result<()> {
    if !(c > 0.5 && c < 0.9999) {
        return Err(Error::InvalidConfidence(c));
    }
    Ok(())
}

fn two_sided_z(c: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.5 + c / 2.0)
}

/// P(|φ − Φ| ≤ h) when σ ~ N(σ̃, σ_mod·σ̃) truncated to [0, 2σ̃].
pub fn coverage_probability(h: f64, sigma_tilde: f64, sigma_mod: f64) -> f64 {
    if sigma_tilde <= 0.0 {
        return 1.0;
    }
    if sigma_mod <= 0.0 {
        return erf(h / (sigma_tilde * std::f64::consts::SQRT_2));
    }
    let sd = sigma_mod * sigma_tilde;
    let lo = (sigma_tilde - WINDOW_SDS * sd).max(0.0);
    let hi = (sigma_tilde + WINDOW_SDS * sd).min(2.0 * sigma_tilde);
    let step = (hi - lo) / (QUADRATURE_NODES - 1) as f64;
    let (mut mass, mut acc) = (0.0, 0.0);
    for i in 0..QUADRATURE_NODES {
        let x = lo + step * i as f64;
        let w = if i == 0 || i == QUADRATURE_NODES - 1 { 0.5 } else { 1.0 };
        let z = (x - sigma_tilde) / sd;
        let density = w * (-0.5 * z * z).exp();
        let p = if x > 0.0 {
            erf(h / (x * std::f64::consts::SQRT_2))
        } else {
            1.0
        };
        mass += density;
        acc += density * p;
    }
    acc / mass
}

fn solve_half_width(sigma_tilde: f64, sigma_mod: f64, c: f64) -> f64 {
    if sigma_tilde <= 0.0 {
        return 0.0;
    }
    let z = two_sided_z(c);
    if sigma_mod <= 0.0 {
        return z * sigma_tilde;
    }
    // Every conditional width is at most 2σ̃, so z·2σ̃ already covers c.
    let (mut lo, mut hi) = (0.0, 2.0 * z * sigma_tilde);
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if coverage_probability(mid, sigma_tilde, sigma_mod) < c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn bound(phi: f64, confidence: f64, half_width: f64) -> ConfidenceBound {
    ConfidenceBound {
        confidence,
        half_width,
        interval: [(phi - half_width).max(0.0), (phi + half_width).min(1.0)],
        relative_pct: 100.0 * half_width / phi,
    }
}

pub fn confidence_bounds(
    phi_obs: PhaseFraction,
    sigma_tilde: f64,
    sigma_mod: f64,
    confidence: f64,
) -> Result<ConfidenceBound> {
    check_confidence(confidence)?;
    if !(sigma_tilde >= 0.0 && sigma_mod >= 0.0) {
        return Err(Error::InvalidArgument("standard deviations must be non-negative".into()));
    }
    let h = solve_half_width(sigma_tilde, sigma_mod, confidence);
    Ok(bound(phi_obs.value(), confidence, h))
}

/// Deviation D with P(|φ − Φ| > D) = `tail`.
pub fn unrepresentativeness(phi_obs: PhaseFraction, sigma_tilde: f64, sigma_mod: f64, tail: f64) -> Result<f64> {
    let _ = phi_obs;
    if !(tail > 0.0 && tail < 1.0) {
        return Err(Error::InvalidConfidence(tail));
    }
    Ok(solve_half_width(sigma_tilde, sigma_mod, 1.0 - tail))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeRecommendation {
    pub target_relative_pct: f64,
    pub confidence: f64,
    pub required_volume: f64,
    pub required_edge: usize,
    pub growth_factor: f64,
}

/// Relative half-width at a hypothetical volume, with σ scaled by the CLS.
pub fn relative_pct_at(cls: f64, ndim: usize, phi: f64, volume: f64, confidence: f64, model: &CalibrationModel) -> f64 {
    let sigma = variance_from_cls(cls, phi, volume, ndim).sqrt();
    let sm = model.sigma_mod(volume).value;
    100.0 * solve_half_width(sigma, sm, confidence) / phi
}

pub fn required_size(
    est: &VarianceEstimate,
    phi_obs: PhaseFraction,
    confidence: f64,
    target_pct: f64,
    model: &CalibrationModel,
) -> Result<SizeRecommendation> {
    required_size_for(est.cls, est.ndim, est.volume as f64, phi_obs, confidence, target_pct, model)
}

pub fn required_size_for(
    cls: f64,
    ndim: usize,
    volume: f64,
    phi_obs: PhaseFraction,
    confidence: f64,
    target_pct: f64,
    model: &CalibrationModel,
) -> Result<SizeRecommendation> {
    check_confidence(confidence)?;
    if !(target_pct > 0.0 && target_pct.is_finite()) {
        return Err(Error::InvalidArgument(format!("target {target_pct}% must be positive")));
    }
    if !(cls > 0.0 && cls.is_finite()) {
        return Err(Error::InvalidArgument("characteristic length must be positive".into()));
    }
    let phi = phi_obs.value();
    if !(phi > 0.0 && phi < 1.0) {
        return Err(Error::DegeneratePhaseFraction(phi));
    }
    let pct = |v: f64| relative_pct_at(cls, ndim, phi, v, confidence, model);
    let max_volume = MAX_GROWTH * volume;
    let best = pct(max_volume);
    if best > target_pct {
        return Err(Error::TargetUnreachable {
            target_pct,
            max_volume,
            best_pct: best,
        });
    }
    let (mut lo, mut hi) = (0.0f64, max_volume.ln());
    if pct(1.0) <= target_pct {
        hi = 0.0;
    }
    while hi - lo > 1e-5 {
        let mid = 0.5 * (lo + hi);
        if pct(mid.exp()) > target_pct {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let required_volume = hi.exp();
    Ok(SizeRecommendation {
        target_relative_pct: target_pct,
        confidence,
        required_volume,
        required_edge: (required_volume.powf(1.0 / ndim as f64) - 1e-9).ceil() as usize,
        growth_factor: required_volume / volume,
    })
}
