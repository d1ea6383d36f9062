//! Two-point correlation maps and the uncorrelated-distance threshold r0.
//!
//! Maps are stored on a centered displacement grid: along an axis of length
//! `l`, index `i` holds displacement `i - (l - 1) / 2`, so components range
//! over `(-l/2, l/2]`.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::periodic_autocorrelation;
use crate::image::{phase_fraction, BinaryImage, ImageDomain, PhaseFraction};

/// Phase fractions closer than this to 0 or 1 make the ring band collapse.
pub const DEGENERATE_PHI: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct TpcMap {
    domain: ImageDomain,
    shape: Vec<usize>,
    values: Vec<f64>,
    phase_fraction: PhaseFraction,
    periodic: bool,
}

impl TpcMap {
    /// Domain of the source image.
    pub fn domain(&self) -> &ImageDomain {
        &self.domain
    }

    /// Shape of the displacement grid.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn phase_fraction(&self) -> PhaseFraction {
        self.phase_fraction
    }

    pub fn is_periodic(&self) -> bool {
        self.periodic
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn center(&self, axis: usize) -> isize {
        ((self.shape[axis] - 1) / 2) as isize
    }

    /// Displacement held at flat index `idx`; unused trailing axes are zero.
    pub fn displacement(&self, idx: usize) -> [isize; 3] {
        displacement_of(idx, &self.shape)
    }

    pub fn get(&self, r: &[isize]) -> Option<f64> {
        let mut idx = 0usize;
        for (axis, &ri) in r.iter().enumerate() {
            let i = ri + self.center(axis);
            if i < 0 || i as usize >= self.shape[axis] {
                return None;
            }
            idx = idx * self.shape[axis] + i as usize;
        }
        Some(self.values[idx])
    }

    /// |X_r| = Π (l_i − |r_i|), the number of pixels x with x + r inside the image.
    pub fn overlap(&self, r: &[isize]) -> u64 {
        overlap_volume(self.domain.dims(), r)
    }

    pub fn overlap_grid(&self) -> Vec<u64> {
        (0..self.len())
            .map(|i| {
                let r = self.displacement(i);
                self.overlap(&r[..self.shape.len()])
            })
            .collect()
    }
}

pub(crate) fn displacement_of(mut idx: usize, shape: &[usize]) -> [isize; 3] {
    let mut r = [0isize; 3];
    for axis in (0..shape.len()).rev() {
        let l = shape[axis];
        r[axis] = (idx % l) as isize - ((l - 1) / 2) as isize;
        idx /= l;
    }
    r
}

pub(crate) fn norm(r: &[isize; 3]) -> f64 {
    ((r[0] * r[0] + r[1] * r[1] + r[2] * r[2]) as f64).sqrt()
}

pub fn overlap_volume(dims: &[usize], r: &[isize]) -> u64 {
    dims.iter()
        .zip(r)
        .map(|(&l, &ri)| (l as i64 - ri.abs() as i64).max(0) as u64)
        .product()
}

/// Periodic TPC via the power spectrum of the binary image.
pub fn periodic_tpc(img: &BinaryImage) -> Result<TpcMap> {
    let domain = img.domain().clone();
    let dims = domain.dims().to_vec();
    let volume = domain.volume() as f64;
    let data: Vec<f64> = img.bits().iter().map(|&b| b as f64).collect();
    let raw = periodic_autocorrelation(&data, &dims)?;

    // Map each centered index back to its unshifted FFT index, axis by axis.
    let source_index: Vec<Vec<usize>> = dims
        .iter()
        .map(|&l| {
            let c = ((l - 1) / 2) as isize;
            (0..l)
                .map(|i| (i as isize - c).rem_euclid(l as isize) as usize)
                .collect()
        })
        .collect();
    let last = *dims.last().unwrap();
    let mut values = vec![0.0; raw.len()];
    values
        .par_chunks_mut(last)
        .enumerate()
        .for_each(|(row, out)| {
            let mut rem = row;
            let mut base = 0usize;
            let mut stride = last;
            for axis in (0..dims.len() - 1).rev() {
                let i = rem % dims[axis];
                rem /= dims[axis];
                base += source_index[axis][i] * stride;
                stride *= dims[axis];
            }
            let map = &source_index[dims.len() - 1];
            for (j, v) in out.iter_mut().enumerate() {
                *v = (raw[base + map[j]] / volume).clamp(0.0, 1.0);
            }
        });

    Ok(TpcMap {
        domain,
        shape: dims,
        values,
        phase_fraction: phase_fraction(img),
        periodic: true,
    })
}

fn for_each_coord(dims: &[usize], mut f: impl FnMut(&[usize])) {
    let n = dims.len();
    let mut c = vec![0usize; n];
    let total: usize = dims.iter().product();
    for _ in 0..total {
        f(&c);
        for a in (0..n).rev() {
            c[a] += 1;
            if c[a] < dims[a] {
                break;
            }
            c[a] = 0;
        }
    }
}

/// Non-periodic TPC T_r for every displacement with |r_i| ≤ `max_r`, by
/// direct summation. Quadratic cost; intended for reference checks.
pub fn nonperiodic_tpc_reference(img: &BinaryImage, max_r: usize) -> Result<TpcMap> {
    let domain = img.domain().clone();
    if max_r >= domain.min_edge() {
        return Err(Error::RadiusTooLarge {
            radius: max_r,
            min_edge: domain.min_edge(),
        });
    }
    let dims = domain.dims().to_vec();
    let n = dims.len();
    let strides = domain.strides();
    let bits = img.bits();
    let shape = vec![2 * max_r + 1; n];
    let total: usize = shape.iter().product();
    let values: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let r = displacement_of(idx, &shape);
            let mut sum = 0u64;
            for_each_coord(&dims, |x| {
                let mut y = 0usize;
                for a in 0..n {
                    let ya = x[a] as isize + r[a];
                    if ya < 0 || ya as usize >= dims[a] {
                        return;
                    }
                    y += ya as usize * strides[a];
                }
                let xi: usize = (0..n).map(|a| x[a] * strides[a]).sum();
                sum += (bits[xi] & bits[y]) as u64;
            });
            sum as f64 / overlap_volume(&dims, &r[..n]) as f64
        })
        .collect();
    Ok(TpcMap {
        domain,
        shape,
        values,
        phase_fraction: phase_fraction(img),
        periodic: false,
    })
}

/// Periodic TPC by the O(|X|²) double sum, for timing comparisons against the FFT path.
pub fn periodic_tpc_direct(img: &BinaryImage) -> TpcMap {
    let domain = img.domain().clone();
    let dims = domain.dims().to_vec();
    let n = dims.len();
    let strides = domain.strides();
    let bits = img.bits();
    let vol = domain.volume();
    let ones: Vec<usize> = (0..vol).filter(|&i| bits[i] == 1).collect();
    let values: Vec<f64> = (0..vol)
        .into_par_iter()
        .map(|idx| {
            let r = displacement_of(idx, &dims);
            let mut count = 0usize;
            for &x in &ones {
                let mut rem = x;
                let mut y = 0usize;
                for a in (0..n).rev() {
                    let xa = rem % dims[a];
                    rem /= dims[a];
                    let ya = (xa as isize + r[a]).rem_euclid(dims[a] as isize) as usize;
                    y += ya * strides[a];
                }
                count += bits[y] as usize;
            }
            count as f64 / vol as f64
        })
        .collect();
    TpcMap {
        domain,
        shape: dims,
        values,
        phase_fraction: phase_fraction(img),
        periodic: true,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R0Policy {
    /// Ring width and candidate step; `None` picks it from the image size.
    pub increment: Option<usize>,
    /// Deviation band as a multiple of Φ(1 − Φ).
    pub band_factor: f64,
    /// A ring passes when fewer than this fraction of its values leave the band.
    pub max_ring_failure: f64,
    /// Width of the shell used for the ring mean T̃.
    pub ring_mean_width: f64,
    /// 3ⁿ median filter of the map before the ring test.
    pub median_filter: bool,
}

impl Default for R0Policy {
    fn default() -> Self {
        Self {
            increment: None,
            band_factor: 0.05,
            max_ring_failure: 0.03,
            ring_mean_width: 10.0,
            median_filter: false,
        }
    }
}

/// 100 px for large images, otherwise a step that leaves several candidate rings.
pub fn default_increment(min_edge: usize) -> usize {
    if min_edge >= 600 {
        100
    } else {
        (min_edge / 6).max(10)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R0Selection {
    pub r0: f64,
    pub increment: usize,
    pub ring_failure_fraction: f64,
    pub capped: bool,
    /// T̃_{r0}: mean of the map over r0 − w ≤ |r| ≤ r0.
    pub ring_mean: f64,
}

pub fn r0_cap(domain: &ImageDomain) -> f64 {
    domain.min_edge() as f64 / 2.0
}

pub fn check_phase_fraction(phi: PhaseFraction) -> Result<()> {
    let v = phi.value();
    if !(DEGENERATE_PHI..=1.0 - DEGENERATE_PHI).contains(&v) {
        return Err(Error::DegeneratePhaseFraction(v));
    }
    Ok(())
}

pub fn select_r0(tpc: &TpcMap, policy: &R0Policy) -> Result<R0Selection> {
    let phi = tpc.phase_fraction();
    check_phase_fraction(phi)?;
    let cap = r0_cap(tpc.domain());
    let inc = policy
        .increment
        .unwrap_or_else(|| default_increment(tpc.domain().min_edge()))
        .max(1);
    let phi2 = phi.value() * phi.value();
    let band = policy.band_factor * phi.bernoulli_variance();

    let filtered;
    let values = if policy.median_filter {
        filtered = median_filter(tpc);
        &filtered
    } else {
        tpc.values()
    };

    let candidates = (cap / inc as f64).floor() as usize;
    // Ring k (k ≥ 1) holds inc·k ≤ |r| < inc·(k + 1).
    let mut totals = vec![0usize; candidates + 1];
    let mut fails = vec![0usize; candidates + 1];
    for (idx, &v) in values.iter().enumerate() {
        let rad = norm(&tpc.displacement(idx));
        let k = (rad / inc as f64).floor() as usize;
        if (1..=candidates).contains(&k) {
            totals[k] += 1;
            if (v - phi2).abs() > band {
                fails[k] += 1;
            }
        }
    }
    let fraction = |k: usize| {
        if totals[k] == 0 {
            1.0
        } else {
            fails[k] as f64 / totals[k] as f64
        }
    };

    let chosen = (1..=candidates).find(|&k| fraction(k) < policy.max_ring_failure);
    let (r0, failure, capped) = match chosen {
        Some(k) => ((k * inc) as f64, fraction(k), false),
        None => {
            let (mut total, mut fail) = (0usize, 0usize);
            for (idx, &v) in values.iter().enumerate() {
                let rad = norm(&tpc.displacement(idx));
                if rad >= cap && rad < cap + inc as f64 {
                    total += 1;
                    if (v - phi2).abs() > band {
                        fail += 1;
                    }
                }
            }
            let f = if total == 0 { 1.0 } else { fail as f64 / total as f64 };
            (cap, f, true)
        }
    };

    Ok(R0Selection {
        r0,
        increment: inc,
        ring_failure_fraction: failure,
        capped,
        ring_mean: ring_mean(tpc, r0, policy.ring_mean_width),
    })
}

/// Mean of the map over the shell r0 − width ≤ |r| ≤ r0.
pub fn ring_mean(tpc: &TpcMap, r0: f64, width: f64) -> f64 {
    let (sum, count) = tpc
        .values()
        .iter()
        .enumerate()
        .filter(|(idx, _)| {
            let rad = norm(&tpc.displacement(*idx));
            rad >= r0 - width && rad <= r0
        })
        .fold((0.0, 0usize), |(s, c), (_, &v)| (s + v, c + 1));
    if count == 0 {
        tpc.phase_fraction().value().powi(2)
    } else {
        sum / count as f64
    }
}

fn median_filter(tpc: &TpcMap) -> Vec<f64> {
    let shape = tpc.shape().to_vec();
    let n = shape.len();
    let values = tpc.values();
    let mut strides = vec![1usize; n];
    for a in (0..n - 1).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    (0..values.len())
        .into_par_iter()
        .map_init(Vec::new, |window: &mut Vec<f64>, idx| {
            window.clear();
            let mut coord = [0usize; 3];
            let mut rem = idx;
            for a in (0..n).rev() {
                coord[a] = rem % shape[a];
                rem /= shape[a];
            }
            let offsets = 3usize.pow(n as u32);
            for o in 0..offsets {
                let mut flat = 0usize;
                let mut oo = o;
                for a in 0..n {
                    let d = (oo % 3) as isize - 1;
                    oo /= 3;
                    let c = (coord[a] as isize + d).clamp(0, shape[a] as isize - 1) as usize;
                    flat += c * strides[a];
                }
                window.push(values[flat]);
            }
            window.sort_by(|a, b| a.total_cmp(b));
            window[window.len() / 2]
        })
        .collect()
}

/// Writes the map as little-endian f64 values plus a `<path>.hdr` text sidecar.
pub fn dump_tpc(tpc: &TpcMap, r0: Option<f64>, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(tpc.len() * 8);
    for v in tpc.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    let mut header = std::fs::File::create(path.with_extension(
        path.extension()
            .map(|e| format!("{}.hdr", e.to_string_lossy()))
            .unwrap_or_else(|| "hdr".into()),
    ))?;
    let dims: Vec<String> = tpc.shape().iter().map(|d| d.to_string()).collect();
    writeln!(header, "dims={}", dims.join(","))?;
    writeln!(header, "order=C")?;
    writeln!(header, "dtype=f64le")?;
    writeln!(header, "centered=true")?;
    writeln!(header, "phi={}", tpc.phase_fraction().value())?;
    match r0 {
        Some(r) => writeln!(header, "r0={r}")?,
        None => writeln!(header, "r0=")?,
    }
    Ok(())
}
