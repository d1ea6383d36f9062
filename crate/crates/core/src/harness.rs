//! Coverage validation: how often the true phase fraction falls inside the
//! predicted bounds, per method and image size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::predict_with_subdivision;
use crate::error::{Error, Result};
use crate::estimator::PredictOptions;
use crate::image::{phase_fraction, BinaryImage};
use crate::synthgen::{generate, BooleanSpec};
use crate::uncertainty::{confidence_bounds, CalibrationModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Imagerep,
    ImagerepNoCorrection,
    Subdivision,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Imagerep => "imagerep",
            Method::ImagerepNoCorrection => "imagerep-no-correction",
            Method::Subdivision => "subdivision",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "imagerep" => Ok(Method::Imagerep),
            "imagerep-no-correction" => Ok(Method::ImagerepNoCorrection),
            "subdivision" => Ok(Method::Subdivision),
            other => Err(Error::InvalidArgument(format!("unknown method '{other}'"))),
        }
    }
}

pub enum MaterialSource {
    /// Generated samples; sample i uses template i mod len with truth = its target φ.
    Synthetic { templates: Vec<BooleanSpec> },
    /// Random crops of one large image whose own phase fraction is taken as the truth.
    LargeImage { image: BinaryImage, name: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub sizes: Vec<usize>,
    pub samples_per_size: usize,
    pub methods: Vec<Method>,
    pub confidence: f64,
    pub seed: u64,
    /// Minimum Chebyshev distance between crop origins of one size.
    pub min_spacing: Option<usize>,
    pub predict: PredictOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample: usize,
    pub method: Method,
    pub edge: usize,
    pub seed: u64,
    pub origin: Option<Vec<usize>>,
    pub truth: f64,
    pub phi_obs: f64,
    pub sigma: Option<f64>,
    pub sigma_mod: f64,
    pub half_width: Option<f64>,
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeCoverage {
    pub edge: usize,
    pub total: usize,
    pub hits: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageResult {
    pub method: Method,
    pub total: usize,
    pub hits: usize,
    pub rate: f64,
    pub confidence_target: f64,
    pub per_size: Vec<SizeCoverage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub source: String,
    pub truth: String,
    pub config: CoverageConfig,
    pub calibration: String,
    pub results: Vec<CoverageResult>,
    pub records: Vec<SampleRecord>,
    pub warnings: Vec<String>,
}

struct Sample {
    index: usize,
    edge: usize,
    seed: u64,
    origin: Option<Vec<usize>>,
    template: usize,
}

fn plan_samples(source: &MaterialSource, config: &CoverageConfig, warnings: &mut Vec<String>) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (si, &edge) in config.sizes.iter().enumerate() {
        let mut origins: Vec<Vec<usize>> = Vec::new();
        for j in 0..config.samples_per_size {
            let index = si * config.samples_per_size + j;
            let seed = config.seed.wrapping_add(index as u64);
            let (origin, template) = match source {
                MaterialSource::Synthetic { templates } => (None, index % templates.len()),
                MaterialSource::LargeImage { image, .. } => {
                    let dims = image.domain().dims();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let mut chosen = None;
                    for _ in 0..1000 {
                        let o: Vec<usize> = dims.iter().map(|&l| rng.gen_range(0..=l - edge)).collect();
                        let far = config.min_spacing.map_or(true, |s| {
                            origins.iter().all(|p| p.iter().zip(&o).any(|(a, b)| a.abs_diff(*b) >= s))
                        });
                        if far {
                            chosen = Some(o);
                            break;
                        }
                    }
                    match chosen {
                        Some(o) => {
                            origins.push(o.clone());
                            (Some(o), 0)
                        }
                        None => {
                            warnings.push(format!(
                                "size {edge}: only {} crops satisfy the minimum spacing",
                                origins.len()
                            ));
                            break;
                        }
                    }
                }
            };
            out.push(Sample { index, edge, seed, origin, template });
        }
    }
    Ok(out)
}

pub fn run_coverage(source: &MaterialSource, config: &CoverageConfig, model: &CalibrationModel) -> Result<CoverageReport> {
    if config.sizes.is_empty() || config.samples_per_size == 0 || config.methods.is_empty() {
        return Err(Error::InvalidArgument("coverage needs sizes, samples and methods".into()));
    }
    confidence_bounds(crate::image::PhaseFraction::new(0.5)?, 0.0, 0.0, config.confidence)?;
    let (source_name, truth_note, whole_phi) = match source {
        MaterialSource::Synthetic { templates } => {
            if templates.is_empty() {
                return Err(Error::InvalidArgument("no synthetic templates".into()));
            }
            ("synthetic".to_string(), "analytic target phase fraction".to_string(), None)
        }
        MaterialSource::LargeImage { image, name } => {
            let min_edge = image.domain().min_edge();
            let largest = *config.sizes.iter().max().unwrap();
            if min_edge < 3 * largest {
                return Err(Error::SourceTooSmall {
                    source_edge: min_edge,
                    sample_edge: largest,
                });
            }
            if model.dim != image.domain().ndim() {
                return Err(Error::InvalidArgument("calibration dimension does not match the source".into()));
            }
            (
                name.clone(),
                "whole-image phase fraction (approximation of the bulk value)".to_string(),
                Some(phase_fraction(image).value()),
            )
        }
    };

    let mut warnings = Vec::new();
    let samples = plan_samples(source, config, &mut warnings)?;
    let per_sample: Vec<Vec<SampleRecord>> = samples
        .par_iter()
        .map(|s| evaluate(source, config, model, s, whole_phi))
        .collect::<Result<_>>()?;
    let records: Vec<SampleRecord> = per_sample.into_iter().flatten().collect();
    let results = recount(&records, &config.methods, &config.sizes, config.confidence);
    Ok(CoverageReport {
        source: source_name,
        truth: truth_note,
        config: config.clone(),
        calibration: model.provenance.clone(),
        results,
        records,
        warnings,
    })
}

fn evaluate(
    source: &MaterialSource,
    config: &CoverageConfig,
    model: &CalibrationModel,
    s: &Sample,
    whole_phi: Option<f64>,
) -> Result<Vec<SampleRecord>> {
    let (img, truth) = match source {
        MaterialSource::Synthetic { templates } => {
            let spec = templates[s.template].with_edge(s.edge).with_seed(s.seed);
            (generate(&spec)?, spec.target_phi)
        }
        MaterialSource::LargeImage { image, .. } => {
            let origin = s.origin.as_ref().expect("crops always carry an origin");
            let dims = vec![s.edge; image.domain().ndim()];
            (image.crop(origin, &dims)?, whole_phi.unwrap())
        }
    };
    let phi = phase_fraction(&img);
    let volume = img.domain().volume() as f64;
    let estimate = match predict_with_subdivision(&img, &config.predict) {
        Ok(v) => Some(v),
        Err(Error::DegeneratePhaseFraction(_)) => None,
        Err(e) => return Err(e),
    };
    let sm = model.sigma_mod(volume).value;
    config
        .methods
        .iter()
        .map(|&method| {
            let (sigma, sigma_mod) = match (&estimate, method) {
                (Some((est, _)), Method::Imagerep) => (Some(est.sigma_tilde), sm),
                (Some((est, _)), Method::ImagerepNoCorrection) => (Some(est.sigma_tilde), 0.0),
                (Some((_, sub)), Method::Subdivision) => (sub.as_ref().map(|f| f.sigma_sub), 0.0),
                (None, _) => (None, 0.0),
            };
            let half_width = match sigma {
                Some(sg) => Some(confidence_bounds(phi, sg, sigma_mod, config.confidence)?.half_width),
                None => None,
            };
            Ok(SampleRecord {
                sample: s.index,
                method,
                edge: s.edge,
                seed: s.seed,
                origin: s.origin.clone(),
                truth,
                phi_obs: phi.value(),
                sigma,
                sigma_mod,
                half_width,
                hit: half_width.is_some_and(|h| (truth - phi.value()).abs() <= h),
            })
        })
        .collect()
}

/// Summary tables rebuilt from per-sample rows.
pub fn recount(records: &[SampleRecord], methods: &[Method], sizes: &[usize], confidence: f64) -> Vec<CoverageResult> {
    let rate = |h: usize, t: usize| if t == 0 { 0.0 } else { h as f64 / t as f64 };
    methods
        .iter()
        .map(|&m| {
            let rows: Vec<&SampleRecord> = records.iter().filter(|r| r.method == m).collect();
            let hits = rows.iter().filter(|r| r.hit).count();
            let per_size = sizes
                .iter()
                .map(|&edge| {
                    let total = rows.iter().filter(|r| r.edge == edge).count();
                    let hits = rows.iter().filter(|r| r.edge == edge && r.hit).count();
                    SizeCoverage { edge, total, hits, rate: rate(hits, total) }
                })
                .collect();
            CoverageResult {
                method: m,
                total: rows.len(),
                hits,
                rate: rate(hits, rows.len()),
                confidence_target: confidence,
                per_size,
            }
        })
        .collect()
}

/// Percentile bootstrap interval for a hit rate.
pub fn bootstrap_ci(hits: &[bool], resamples: usize, level: f64, seed: u64) -> (f64, f64) {
    if hits.is_empty() || resamples == 0 {
        return (0.0, 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = hits.len();
    let mut rates: Vec<f64> = (0..resamples)
        .map(|_| (0..n).filter(|_| hits[rng.gen_range(0..n)]).count() as f64 / n as f64)
        .collect();
    rates.sort_by(|a, b| a.total_cmp(b));
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| rates[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    (at(tail), at(1.0 - tail))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(Error::InvalidArgument(format!("unknown report format '{other}'"))),
        }
    }
}

pub fn emit_report(report: &CoverageReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)? + "\n"),
        ReportFormat::Csv => {
            let mut out = String::from("method,edge,total,hits,rate,confidence\n");
            for r in &report.results {
                out += &format!("{},all,{},{},{},{}\n", r.method.name(), r.total, r.hits, r.rate, r.confidence_target);
                for s in &r.per_size {
                    out += &format!("{},{},{},{},{},{}\n", r.method.name(), s.edge, s.total, s.hits, s.rate, r.confidence_target);
                }
            }
            out += "\nsample,method,edge,seed,truth,phi_obs,sigma,sigma_mod,half_width,hit\n";
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            for r in &report.records {
                out += &format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    r.sample,
                    r.method.name(),
                    r.edge,
                    r.seed,
                    r.truth,
                    r.phi_obs,
                    opt(r.sigma),
                    r.sigma_mod,
                    opt(r.half_width),
                    r.hit
                );
            }
            Ok(out)
        }
    }
}

pub fn parse_report(json: &str) -> Result<CoverageReport> {
    Ok(serde_json::from_str(json)?)
}
