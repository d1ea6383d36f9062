//! The end-to-end pipeline shared by the command line, the HTTP service,
//! the validation harness and calibration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{predict, Correction, PredictOptions, VarianceEstimate};
use crate::image::{binarize, phase_fraction, BinaryImage, PhaseFraction, SegmentedImage};
use crate::subdivision::{subdivision_estimate, SubdivisionFit};
use crate::tpc::{check_phase_fraction, periodic_tpc};
use crate::uncertainty::{confidence_bounds, required_size_for, CalibrationModel, ConfidenceBound, SizeRecommendation};

/// TPC estimate of one binary image, clamped against its own subdivision
/// estimate unless `options.sigma_sub` is already given.
pub fn predict_image(img: &BinaryImage, options: &PredictOptions) -> Result<VarianceEstimate> {
    predict_with_subdivision(img, options).map(|(est, _)| est)
}

pub fn predict_with_subdivision(
    img: &BinaryImage,
    options: &PredictOptions,
) -> Result<(VarianceEstimate, Option<SubdivisionFit>)> {
    img.domain().ensure_analysable()?;
    check_phase_fraction(phase_fraction(img))?;
    let sub = subdivision_estimate(img).ok();
    let mut opts = options.clone();
    if opts.sigma_sub.is_none() {
        opts.sigma_sub = sub.as_ref().map(|s| s.sigma_sub);
    }
    let tpc = periodic_tpc(img)?;
    Ok((predict(&tpc, &opts)?, sub))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AnalysisMethod {
    #[default]
    Imagerep,
    Subdivision,
}

impl std::str::FromStr for AnalysisMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "imagerep" => Ok(Self::Imagerep),
            "subdivision" => Ok(Self::Subdivision),
            other => Err(Error::InvalidArgument(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    /// Label to analyse; the largest label present when absent.
    pub phase: Option<u8>,
    pub confidence: f64,
    pub target_pct: Option<f64>,
    pub method: AnalysisMethod,
    pub predict: PredictOptions,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            phase: None,
            confidence: 0.95,
            target_pct: None,
            method: AnalysisMethod::Imagerep,
            predict: PredictOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentativityReport {
    pub method: AnalysisMethod,
    pub dims: Vec<usize>,
    pub phases: Vec<u8>,
    pub phase: u8,
    pub phi_obs: f64,
    pub sigma_tilde: f64,
    pub cls: f64,
    pub r0: Option<f64>,
    pub r0_capped: bool,
    pub sigma_mod: f64,
    pub sigma_mod_extrapolated: bool,
    pub bounds: ConfidenceBound,
    pub required_size: Option<SizeRecommendation>,
    pub statement: String,
    pub corrections_applied: Vec<Correction>,
    pub calibration: String,
    pub warnings: Vec<String>,
}

pub fn statement(phi: f64, bounds: &ConfidenceBound) -> String {
    format!(
        "Observed phase fraction: {phi:.3}. Assuming perfect segmentation, the material's phase fraction \
         lies within {pct:.1}% of this value ({phi:.3} ± {h:.3}) with {c:.1}% confidence.",
        pct = bounds.relative_pct,
        h = bounds.half_width,
        c = bounds.confidence * 100.0,
    )
}

pub fn default_phase(img: &SegmentedImage) -> u8 {
    *img.phases().last().expect("images are never empty")
}

pub fn analyze(img: &SegmentedImage, options: &AnalysisOptions, model: &CalibrationModel) -> Result<RepresentativityReport> {
    let phase = options.phase.unwrap_or_else(|| default_phase(img));
    let bin = binarize(img, phase)?;
    let mut report = analyze_binary(&bin, options, model)?;
    report.phases = img.phases().to_vec();
    Ok(report)
}

pub fn analyze_binary(img: &BinaryImage, options: &AnalysisOptions, model: &CalibrationModel) -> Result<RepresentativityReport> {
    let domain = img.domain();
    domain.ensure_analysable()?;
    if model.dim != domain.ndim() {
        return Err(Error::InvalidArgument(format!(
            "calibration is for {}D images but the image is {}D",
            model.dim,
            domain.ndim()
        )));
    }
    let phi = phase_fraction(img);
    check_phase_fraction(phi)?;
    // Fail fast on a bad confidence before the expensive part.
    confidence_bounds(phi, 0.0, 0.0, options.confidence)?;
    let volume = domain.volume() as f64;
    let mut warnings = Vec::new();

    let (sigma, cls, sigma_mod, r0, capped, corrections) = match options.method {
        AnalysisMethod::Imagerep => {
            let est = predict_image(img, &options.predict)?;
            let sm = model.sigma_mod(volume);
            if est.r0_selection.capped {
                warnings.push(format!(
                    "no uncorrelated ring was found; r0 was capped at {}, so the estimate is low-confidence",
                    est.r0_selection.r0
                ));
            }
            if est.floored {
                warnings.push("the variance estimate was negative and has been floored at zero".into());
            }
            if est.corrections_applied.contains(&Correction::SubdivisionClamp) {
                warnings.push("the TPC estimate was clamped to within a factor of three of the subdivision estimate".into());
            }
            if sm.extrapolated {
                warnings.push(format!(
                    "image volume {volume} lies outside the calibration support [{}, {}]",
                    model.support[0], model.support[1]
                ));
            }
            (
                est.sigma_tilde,
                est.cls,
                sm,
                Some(est.r0_selection.r0),
                est.r0_selection.capped,
                est.corrections_applied,
            )
        }
        AnalysisMethod::Subdivision => {
            let fit = subdivision_estimate(img)?;
            let zero = crate::uncertainty::SigmaMod {
                value: 0.0,
                extrapolated: false,
            };
            (fit.sigma_sub, fit.fitted_cls, zero, None, false, Vec::new())
        }
    };

    let bounds = confidence_bounds(phi, sigma, sigma_mod.value, options.confidence)?;
    let required_size = match options.target_pct {
        Some(d) => match required_size_for(cls, domain.ndim(), volume, phi, options.confidence, d, effective_model(options.method, model)) {
            Ok(r) => Some(r),
            Err(e @ (Error::TargetUnreachable { .. } | Error::InvalidArgument(_))) => {
                warnings.push(format!("required size unavailable: {e}"));
                None
            }
            Err(e) => return Err(e),
        },
        None => None,
    };

    Ok(RepresentativityReport {
        method: options.method,
        dims: domain.dims().to_vec(),
        phases: vec![img.selected_phase()],
        phase: img.selected_phase(),
        phi_obs: phi.value(),
        sigma_tilde: sigma,
        cls,
        r0,
        r0_capped: capped,
        sigma_mod: sigma_mod.value,
        sigma_mod_extrapolated: sigma_mod.extrapolated,
        statement: statement(phi.value(), &bounds),
        bounds,
        required_size,
        corrections_applied: corrections,
        calibration: model.provenance.clone(),
        warnings,
    })
}

/// The error model a method's bounds use: subdivision has none.
pub fn effective_model<'a>(method: AnalysisMethod, model: &'a CalibrationModel) -> &'a CalibrationModel {
    static ZERO_2D: std::sync::OnceLock<CalibrationModel> = std::sync::OnceLock::new();
    static ZERO_3D: std::sync::OnceLock<CalibrationModel> = std::sync::OnceLock::new();
    match method {
        AnalysisMethod::Imagerep => model,
        AnalysisMethod::Subdivision if model.dim == 2 => ZERO_2D.get_or_init(|| CalibrationModel::zero(2)),
        AnalysisMethod::Subdivision => ZERO_3D.get_or_init(|| CalibrationModel::zero(3)),
    }
}

/// Required size for an already computed estimate, for the service endpoint.
pub fn required_size_from_report(
    report: &RepresentativityReport,
    confidence: f64,
    target_pct: f64,
    model: &CalibrationModel,
) -> Result<SizeRecommendation> {
    let volume = report.dims.iter().product::<usize>() as f64;
    required_size_for(
        report.cls,
        report.dims.len(),
        volume,
        PhaseFraction::new(report.phi_obs)?,
        confidence,
        target_pct,
        effective_model(report.method, model),
    )
}
