//! Boolean-model microstructures on the pixel lattice and the calibration
//! of the model-error decay.
//!
//! Grains are fixed discrete shapes stamped at independently selected
//! centres. With V the grain's pixel count, a centre probability of
//! p = 1 − (1 − φ)^(1/V) gives E[Φ] = φ exactly, since a pixel stays
//! empty only when none of the V positions that would cover it is a centre.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::predict_image;
use crate::error::{Error, Result};
use crate::estimator::PredictOptions;
use crate::fft::periodic_autocorrelation;
use crate::image::{phase_fraction, BinaryImage};
use crate::uncertainty::CalibrationModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Grain {
    /// Pixels with |o| ≤ radius.
    Ball { radius: f64 },
    /// Axis-aligned ellipse or ellipsoid, one semi-axis per dimension.
    Ellipse { semi_axes: Vec<f64> },
}

impl Grain {
    fn extent(&self) -> f64 {
        match self {
            Grain::Ball { radius } => *radius,
            Grain::Ellipse { semi_axes } => semi_axes.iter().cloned().fold(0.0, f64::max),
        }
    }

    /// Offsets of the stamped shape, each component in [−R, R] with R = ceil(extent).
    pub fn offsets(&self, dim: usize) -> Vec<[isize; 3]> {
        let reach = self.extent().ceil() as isize;
        let span = 2 * reach + 1;
        let count = (span as usize).pow(dim as u32);
        let mut out = Vec::new();
        for idx in 0..count {
            let mut o = [0isize; 3];
            let mut rem = idx;
            for a in 0..dim {
                o[a] = (rem % span as usize) as isize - reach;
                rem /= span as usize;
            }
            let inside = match self {
                Grain::Ball { radius } => {
                    ((o[0] * o[0] + o[1] * o[1] + o[2] * o[2]) as f64) <= radius * radius
                }
                Grain::Ellipse { semi_axes } => {
                    (0..dim).map(|a| (o[a] as f64 / semi_axes[a]).powi(2)).sum::<f64>() <= 1.0
                }
            };
            if inside {
                out.push(o);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BooleanSpec {
    pub dim: usize,
    pub edge: usize,
    pub grain: Grain,
    pub target_phi: f64,
    pub seed: u64,
}

impl BooleanSpec {
    pub fn circles(dim: usize, edge: usize, radius: f64, target_phi: f64, seed: u64) -> Self {
        Self {
            dim,
            edge,
            grain: Grain::Ball { radius },
            target_phi,
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn with_edge(&self, edge: usize) -> Self {
        Self { edge, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::InvalidArgument(format!("dim {} must be 2 or 3", self.dim)));
        }
        if !(0.0..=1.0).contains(&self.target_phi) {
            return Err(Error::InvalidArgument(format!("target phase fraction {} outside [0, 1]", self.target_phi)));
        }
        if let Grain::Ellipse { semi_axes } = &self.grain {
            if semi_axes.len() != self.dim || semi_axes.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::InvalidArgument("ellipse needs one positive semi-axis per dimension".into()));
            }
        }
        let extent = self.grain.extent();
        if extent < 1.0 {
            return Err(Error::InvalidArgument(format!("grain extent {extent} must be at least 1")));
        }
        if (self.edge as f64) < 2.0 * extent {
            return Err(Error::InvalidArgument(format!(
                "edge {} is smaller than the grain diameter {}",
                self.edge,
                2.0 * extent
            )));
        }
        Ok(())
    }

    pub fn center_probability(&self) -> f64 {
        let v = self.grain.offsets(self.dim).len() as f64;
        1.0 - (1.0 - self.target_phi).powf(1.0 / v)
    }
}

pub fn generate(spec: &BooleanSpec) -> Result<BinaryImage> {
    spec.validate()?;
    let n = spec.dim;
    let l = spec.edge;
    let offsets = spec.grain.offsets(n);
    let reach = spec.grain.extent().ceil() as usize;
    let padded = l + 2 * reach;
    let p = 1.0 - (1.0 - spec.target_phi).powf(1.0 / offsets.len() as f64);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = padded.pow(n as u32);
    let mut bits = vec![0u8; l.pow(n as u32)];
    let mut c = [0usize; 3];
    for _ in 0..total {
        let u: f64 = rng.gen();
        if u < p {
            for o in &offsets {
                let mut flat = 0usize;
                let mut inside = true;
                for a in 0..n {
                    // Padded coordinate c + o, shifted by the padding into crop coordinates.
                    let y = c[a] as isize + o[a] - reach as isize;
                    if y < 0 || y as usize >= l {
                        inside = false;
                        break;
                    }
                    flat = flat * l + y as usize;
                }
                if inside {
                    bits[flat] = 1;
                }
            }
        }
        for a in (0..n).rev() {
            c[a] += 1;
            if c[a] < padded {
                break;
            }
            c[a] = 0;
        }
    }
    BinaryImage::from_bits(&vec![l; n], bits)
}

/// Exact Var[Φ] of the lattice Boolean model on an edgeⁿ window:
/// (1/|X|²) Σ_r |X_r| (1−φ)² ((1−p)^(−γ(r)) − 1), with γ the grain covariogram.
pub fn boolean_variance(spec: &BooleanSpec) -> Result<f64> {
    spec.validate()?;
    let n = spec.dim;
    let l = spec.edge;
    let phi = spec.target_phi;
    if phi <= 0.0 || phi >= 1.0 {
        return Ok(0.0);
    }
    let offsets = spec.grain.offsets(n);
    let reach = spec.grain.extent().ceil() as usize;
    let p = 1.0 - (1.0 - phi).powf(1.0 / offsets.len() as f64);

    // Covariogram by autocorrelation of the mask padded enough that nothing wraps.
    let side = 4 * reach + 2;
    let dims = vec![side; n];
    let mut mask = vec![0.0; side.pow(n as u32)];
    for o in &offsets {
        let flat = (0..n).fold(0usize, |acc, a| acc * side + (o[a] + reach as isize) as usize);
        mask[flat] = 1.0;
    }
    let gamma = periodic_autocorrelation(&mask, &dims)?;
    let log_q = (1.0 - p).ln();
    let volume = (l as f64).powi(n as i32);
    let mut sum = 0.0;
    for (idx, &g) in gamma.iter().enumerate() {
        let g = g.round();
        if g <= 0.0 {
            continue;
        }
        let mut rem = idx;
        let mut overlap = 1.0;
        for _ in 0..n {
            let k = rem % side;
            rem /= side;
            let r = if k <= side / 2 { k } else { side - k };
            if r >= l {
                overlap = 0.0;
                break;
            }
            overlap *= (l - r) as f64;
        }
        if overlap > 0.0 {
            sum += overlap * (1.0 - phi).powi(2) * (-g * log_q).exp_m1();
        }
    }
    Ok(sum / (volume * volume))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub std: f64,
    pub phase_fractions: Vec<f64>,
    pub histogram: Histogram,
}

const HISTOGRAM_BINS: usize = 20;

/// Statistics over `count` images seeded `spec.seed + i`.
pub fn ensemble_stats(spec: &BooleanSpec, count: usize) -> Result<EnsembleStats> {
    if count < 2 {
        return Err(Error::InvalidArgument("an ensemble needs at least 2 images".into()));
    }
    let seeds: Vec<u64> = (0..count as u64).map(|i| spec.seed.wrapping_add(i)).collect();
    ensemble_stats_with_seeds(spec, &seeds)
}

pub fn ensemble_stats_with_seeds(spec: &BooleanSpec, seeds: &[u64]) -> Result<EnsembleStats> {
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument("an ensemble needs at least 2 images".into()));
    }
    let fractions = seeds
        .par_iter()
        .map(|&s| generate(&spec.with_seed(s)).map(|img| phase_fraction(&img).value()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(summarize(fractions))
}

fn summarize(fractions: Vec<f64>) -> EnsembleStats {
    let n = fractions.len() as f64;
    let mean = fractions.iter().sum::<f64>() / n;
    let var = fractions.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let lo = fractions.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = fractions.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / HISTOGRAM_BINS as f64 } else { 1.0 };
    let edges: Vec<f64> = (0..=HISTOGRAM_BINS).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0usize; HISTOGRAM_BINS];
    for &f in &fractions {
        let k = (((f - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
        counts[k] += 1;
    }
    EnsembleStats {
        mean,
        std: var.sqrt(),
        phase_fractions: fractions,
        histogram: Histogram { edges, counts },
    }
}

/// Where the true σ_n of a calibration cell comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "count", rename_all = "lowercase")]
pub enum TruthSource {
    /// Closed-form Boolean-model variance.
    Exact,
    /// Sample std over this many generated images.
    Ensemble(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub dim: usize,
    /// Image edge lengths of the size ladder.
    pub sizes: Vec<usize>,
    /// Material templates; their edge and seed fields are overwritten per cell.
    pub templates: Vec<BooleanSpec>,
    pub per_cell: usize,
    pub base_seed: u64,
    pub truth: TruthSource,
}

impl CalibrationConfig {
    pub fn default_for(dim: usize) -> Result<Self> {
        let sizes = match dim {
            2 => vec![200, 300, 400, 500, 600, 800, 1000, 1200],
            3 => vec![40, 50, 60, 70, 80, 100, 120, 140],
            d => return Err(Error::InvalidArgument(format!("dim {d} must be 2 or 3"))),
        };
        Ok(Self {
            dim,
            sizes,
            templates: default_templates(dim),
            per_cell: 20,
            base_seed: 1,
            truth: TruthSource::Exact,
        })
    }
}

/// Circles and axis-aligned ellipses at five radii and two phase fractions.
/// Radii are small enough that the larger sizes of the default ladder pass
/// the ring test while the smaller ones often do not.
pub fn default_templates(dim: usize) -> Vec<BooleanSpec> {
    let radii = [2.0, 3.0, 4.0, 5.0, 6.0];
    let aspect: &[f64] = if dim == 2 { &[1.0, 0.5] } else { &[1.0, 0.75, 0.5] };
    let mut out = Vec::new();
    for &phi in &[0.3, 0.5] {
        for &r in &radii {
            out.push(BooleanSpec::circles(dim, 0, r, phi, 0));
            out.push(BooleanSpec {
                dim,
                edge: 0,
                grain: Grain::Ellipse {
                    semi_axes: aspect.iter().map(|f| (f * r).max(1.0)).collect(),
                },
                target_phi: phi,
                seed: 0,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSummary {
    pub edge: usize,
    pub volume: f64,
    pub samples: usize,
    pub pe_mean: f64,
    pub pe_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub model: CalibrationModel,
    pub per_size: Vec<SizeSummary>,
}

/// First generator seed of the (size, template) cell; image i uses this plus i.
pub fn cell_seed(config: &CalibrationConfig, size_index: usize, template_index: usize) -> u64 {
    config
        .base_seed
        .wrapping_add(((size_index * config.templates.len() + template_index) as u64) << 32)
}

/// Pools PE = (σ_n − σ̃)/σ̃ over templates per size, takes its spread as
/// σ_mod for that size and fits σ_mod = a·|X|^(−b) in log-log space.
pub fn calibrate_error_model(config: &CalibrationConfig) -> Result<CalibrationReport> {
    if config.sizes.len() < 4 {
        return Err(Error::InvalidArgument("calibration needs at least 4 sizes".into()));
    }
    if config.templates.len() < 5 {
        return Err(Error::InvalidArgument("calibration needs at least 5 template materials".into()));
    }
    if config.per_cell < 10 {
        return Err(Error::InvalidArgument("calibration needs at least 10 images per cell".into()));
    }
    let options = PredictOptions::default();
    let mut per_size = Vec::new();
    for (si, &edge) in config.sizes.iter().enumerate() {
        let mut errors = Vec::new();
        for (ti, template) in config.templates.iter().enumerate() {
            let mut spec = template.with_edge(edge);
            spec.dim = config.dim;
            let cell_seed = cell_seed(config, si, ti);
            let truth = match config.truth {
                TruthSource::Exact => boolean_variance(&spec)?.sqrt(),
                TruthSource::Ensemble(count) => {
                    ensemble_stats(&spec.with_seed(cell_seed.wrapping_add(1 << 31)), count)?.std
                }
            };
            let predictions = (0..config.per_cell as u64)
                .into_par_iter()
                .map(|i| {
                    let img = generate(&spec.with_seed(cell_seed.wrapping_add(i)))?;
                    match predict_image(&img, &options) {
                        Ok(est) => Ok(Some(est.sigma_tilde)),
                        Err(Error::DegeneratePhaseFraction(_)) => Ok(None),
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            errors.extend(
                predictions
                    .into_iter()
                    .flatten()
                    .filter(|&s| s > 0.0)
                    .map(|s| (truth - s) / s),
            );
        }
        let n = errors.len() as f64;
        if errors.len() < 2 {
            return Err(Error::InsufficientSpread);
        }
        let mean = errors.iter().sum::<f64>() / n;
        let std = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        per_size.push(SizeSummary {
            edge,
            volume: (edge as f64).powi(config.dim as i32),
            samples: errors.len(),
            pe_mean: mean,
            pe_std: std,
        });
    }
    let model = fit_power_law(config, &per_size)?;
    Ok(CalibrationReport { model, per_size })
}

fn fit_power_law(config: &CalibrationConfig, per_size: &[SizeSummary]) -> Result<CalibrationModel> {
    if per_size.iter().any(|s| !(s.pe_std > 1e-12)) {
        return Err(Error::InsufficientSpread);
    }
    let xs: Vec<f64> = per_size.iter().map(|s| s.volume.ln()).collect();
    let ys: Vec<f64> = per_size.iter().map(|s| s.pe_std.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let b = (-sxy / sxx).max(0.0);
    let a = (my + b * mx).exp();
    let lo = per_size.iter().map(|s| s.volume).fold(f64::INFINITY, f64::min);
    let hi = per_size.iter().map(|s| s.volume).fold(0.0, f64::max);
    let truth = match config.truth {
        TruthSource::Exact => "exact Boolean-model variance".to_string(),
        TruthSource::Ensemble(c) => format!("{c}-image ensembles"),
    };
    Ok(CalibrationModel::power(
        config.dim,
        a,
        b,
        [lo, hi],
        format!(
            "synthetic Boolean calibration: {} templates, {} sizes, {} images per cell, seed {}, truth from {truth}",
            config.templates.len(),
            per_size.len(),
            config.per_cell,
            config.base_seed
        ),
    ))
}
