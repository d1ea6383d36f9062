//! Subdivision baseline: block phase-fraction spread at several scales,
//! fitted to Var = aⁿ φ(1 − φ)/V.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::variance_from_cls;
use crate::image::{BinaryImage, ImageDomain};

pub const MIN_BLOCK_EDGE: usize = 4;
pub const MIN_SUBDIVISION_EDGE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubdivisionPoint {
    pub ratio: usize,
    pub volume: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubdivisionFit {
    pub ratios_used: Vec<usize>,
    pub points: Vec<SubdivisionPoint>,
    pub fitted_cls: f64,
    pub sigma_sub: f64,
}

/// Population std of block phase fractions for ratios 2, 4, 8, ... while
/// blocks stay at least four pixels wide. Remainder pixels are dropped.
pub fn subdivide_std(img: &BinaryImage) -> Result<Vec<SubdivisionPoint>> {
    let domain = img.domain();
    if domain.min_edge() < MIN_SUBDIVISION_EDGE {
        return Err(Error::ImageTooSmall(format!(
            "subdivision needs an edge of at least {MIN_SUBDIVISION_EDGE}, got {}",
            domain.min_edge()
        )));
    }
    let dims = domain.dims();
    let n = dims.len();
    let bits = img.bits();
    let mut points = Vec::new();
    let mut ratio = 2;
    while domain.min_edge() / ratio >= MIN_BLOCK_EDGE {
        let block: Vec<usize> = dims.iter().map(|&l| l / ratio).collect();
        let blocks = ratio.pow(n as u32);
        let mut counts = vec![0u64; blocks];
        let mut coord = vec![0usize; n];
        for &b in bits {
            let mut inside = true;
            let mut id = 0usize;
            for a in 0..n {
                let k = coord[a] / block[a];
                if k >= ratio {
                    inside = false;
                    break;
                }
                id = id * ratio + k;
            }
            if inside {
                counts[id] += b as u64;
            }
            for a in (0..n).rev() {
                coord[a] += 1;
                if coord[a] < dims[a] {
                    break;
                }
                coord[a] = 0;
            }
        }
        let vol: usize = block.iter().product();
        let fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / vol as f64).collect();
        let mean = fractions.iter().sum::<f64>() / blocks as f64;
        let var = fractions.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / blocks as f64;
        points.push(SubdivisionPoint {
            ratio,
            volume: vol as f64,
            std: var.sqrt(),
        });
        ratio *= 2;
    }
    Ok(points)
}

/// Fits the CLS with the slope in log-log space fixed at −1. Zero-std points are skipped.
pub fn fit_integral_range(points: &[SubdivisionPoint], phi: f64, domain: &ImageDomain) -> Result<SubdivisionFit> {
    let n = domain.ndim();
    if points.len() < 2 {
        return Err(Error::DegenerateFit(format!("need at least 2 points, got {}", points.len())));
    }
    let bern = phi * (1.0 - phi);
    if bern <= 0.0 {
        return Err(Error::DegeneratePhaseFraction(phi));
    }
    let usable: Vec<&SubdivisionPoint> = points.iter().filter(|p| p.std > 0.0).collect();
    if usable.is_empty() {
        return Err(Error::DegenerateFit("every subsample std is zero".into()));
    }
    let intercept = usable
        .iter()
        .map(|p| (p.std * p.std).ln() + p.volume.ln())
        .sum::<f64>()
        / usable.len() as f64;
    let cls = (intercept.exp() / bern).powf(1.0 / n as f64);
    Ok(SubdivisionFit {
        ratios_used: points.iter().map(|p| p.ratio).collect(),
        points: points.to_vec(),
        fitted_cls: cls,
        sigma_sub: variance_from_cls(cls, phi, domain.volume() as f64, n).sqrt(),
    })
}

pub fn subdivision_estimate(img: &BinaryImage) -> Result<SubdivisionFit> {
    let points = subdivide_std(img)?;
    let phi = crate::image::phase_fraction(img).value();
    fit_integral_range(&points, phi, img.domain())
}
