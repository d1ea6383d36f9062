//! Phase-fraction variance from a single periodic TPC map.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::ImageDomain;
use crate::tpc::{check_phase_fraction, displacement_of, norm, select_r0, R0Policy, R0Selection, TpcMap};

/// Lattice sums over the ball S = {r on the centered grid : |r| ≤ r0}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationConstants {
    /// Σ_{|r|>r0} |X_r|/|X|, written as |X| − Σ_S |X_r|/|X|.
    pub c_r0: f64,
    /// Periodic constant |X| − |S|; makes Ψ^p unbiased under macro-homogeneity.
    pub c_p_r0: f64,
    /// c_r0 + Σ_S (|X| − |X_r|)/|X|, kept only for comparison.
    pub c_p_r0_literal: f64,
    /// |X| − |S|/2, the constant matching the ring-mean reference (Φ² + T̃)/2.
    pub c_stabilized: f64,
    /// |S|.
    pub ball_count: usize,
}

pub fn normalization_constants(domain: &ImageDomain, r0: f64) -> NormalizationConstants {
    normalization_constants_for_dims(domain.dims(), r0)
}

/// Same as [`normalization_constants`] but accepts any dimensionality, including 1D.
pub fn normalization_constants_for_dims(dims: &[usize], r0: f64) -> NormalizationConstants {
    let volume: f64 = dims.iter().map(|&l| l as f64).product();
    let total: usize = dims.iter().product();
    let mut ball = 0usize;
    let mut overlap_sum = 0.0;
    let mut missing_sum = 0.0;
    for idx in 0..total {
        let r = displacement_of(idx, dims);
        if norm(&r) <= r0 {
            ball += 1;
            let ov: f64 = dims
                .iter()
                .zip(&r)
                .map(|(&l, &ri)| (l as f64 - ri.abs() as f64).max(0.0))
                .product();
            overlap_sum += ov / volume;
            missing_sum += (volume - ov) / volume;
        }
    }
    let c_r0 = volume - overlap_sum;
    NormalizationConstants {
        c_r0,
        c_p_r0: volume - ball as f64,
        c_p_r0_literal: c_r0 + missing_sum,
        c_stabilized: volume - ball as f64 / 2.0,
        ball_count: ball,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiValue {
    /// max(raw, 0).
    pub value: f64,
    pub raw: f64,
    pub floored: bool,
}

pub fn psi_periodic(
    tpc: &TpcMap,
    r0sel: &R0Selection,
    consts: &NormalizationConstants,
    stabilize: bool,
) -> PsiValue {
    let phi = tpc.phase_fraction().value();
    let phi2 = phi * phi;
    let (reference, constant) = if stabilize {
        ((phi2 + r0sel.ring_mean) / 2.0, consts.c_stabilized)
    } else {
        (phi2, consts.c_p_r0)
    };
    let sum: f64 = tpc
        .values()
        .iter()
        .enumerate()
        .filter(|(idx, _)| norm(&tpc.displacement(*idx)) <= r0sel.r0)
        .map(|(_, &v)| v - reference)
        .sum();
    let raw = sum / constant;
    PsiValue {
        value: raw.max(0.0),
        raw,
        floored: raw < 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClampResult {
    pub sigma: f64,
    pub clamped: bool,
}

/// Keeps σ̃ within a factor of three of the subdivision estimate.
pub fn subdivision_clamp(sigma_tilde: f64, sigma_sub: f64) -> ClampResult {
    if sigma_sub <= 0.0 {
        return ClampResult {
            sigma: sigma_tilde,
            clamped: false,
        };
    }
    let sigma = sigma_tilde.max(sigma_sub / 3.0).min(3.0 * sigma_sub);
    ClampResult {
        sigma,
        clamped: sigma != sigma_tilde,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Correction {
    RingNormalization,
    SubdivisionClamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    pub r0_policy: R0Policy,
    pub stabilize: bool,
    /// Subdivision std of the same image; enables the factor-of-three clamp.
    pub sigma_sub: Option<f64>,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            r0_policy: R0Policy::default(),
            stabilize: true,
            sigma_sub: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    /// Final variance, σ̃².
    pub psi: f64,
    /// Ψ^p before any clamp.
    pub psi_tpc: f64,
    pub psi_raw: f64,
    pub sigma_tilde: f64,
    pub cls: f64,
    pub r0_selection: R0Selection,
    pub constants: NormalizationConstants,
    pub corrections_applied: Vec<Correction>,
    pub phi: f64,
    pub floored: bool,
    pub ndim: usize,
    pub volume: usize,
}

/// CLS a_n from Var[Φ] = a_nⁿ φ(1 − φ)/|X|.
pub fn cls_from_variance(variance: f64, phi: f64, volume: f64, ndim: usize) -> f64 {
    let bern = phi * (1.0 - phi);
    if bern <= 0.0 || variance <= 0.0 {
        return 0.0;
    }
    (volume * variance / bern).powf(1.0 / ndim as f64)
}

/// Inverse of [`cls_from_variance`].
pub fn variance_from_cls(cls: f64, phi: f64, volume: f64, ndim: usize) -> f64 {
    cls.powi(ndim as i32) * phi * (1.0 - phi) / volume
}

pub fn predict(tpc: &TpcMap, options: &PredictOptions) -> Result<VarianceEstimate> {
    let phi = tpc.phase_fraction();
    check_phase_fraction(phi)?;
    let sel = select_r0(tpc, &options.r0_policy)?;
    let consts = normalization_constants(tpc.domain(), sel.r0);
    let psi = psi_periodic(tpc, &sel, &consts, options.stabilize);

    let mut corrections = Vec::new();
    if options.stabilize {
        corrections.push(Correction::RingNormalization);
    }
    let mut sigma = psi.value.sqrt();
    if let Some(sub) = options.sigma_sub {
        let c = subdivision_clamp(sigma, sub);
        if c.clamped {
            corrections.push(Correction::SubdivisionClamp);
        }
        sigma = c.sigma;
    }
    let variance = sigma * sigma;
    let domain = tpc.domain();
    Ok(VarianceEstimate {
        psi: variance,
        psi_tpc: psi.value,
        psi_raw: psi.raw,
        sigma_tilde: sigma,
        cls: cls_from_variance(variance, phi.value(), domain.volume() as f64, domain.ndim()),
        r0_selection: sel,
        constants: consts,
        corrections_applied: corrections,
        phi: phi.value(),
        floored: psi.floored,
        ndim: domain.ndim(),
        volume: domain.volume(),
    })
}
