//! Periodic autocorrelation of a real grid through the power spectrum.
//!
//! The last axis uses a real-to-complex transform (`n/2 + 1` bins); the
//! remaining axes are transformed as complex lines in parallel batches.

use rayon::prelude::*;
use realfft::RealFftPlanner;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Largest tolerated imaginary residue, relative to the squared volume, at
/// the bins that must be real for a Hermitian spectrum.
const IMAG_RESIDUE_LIMIT: f64 = 1e-8;

const LINE_BATCH: usize = 64;

/// Returns `Σ_x a[x]·a[(x + r) mod dims]` for every displacement `r`, in
/// unshifted (`r = 0` first) C order.
pub fn periodic_autocorrelation(data: &[f64], dims: &[usize]) -> Result<Vec<f64>> {
    let n = dims.len();
    let volume: usize = dims.iter().product();
    assert_eq!(data.len(), volume, "grid length does not match dims");
    let last = dims[n - 1];
    let half = last / 2 + 1;
    let rows = volume / last;

    let mut real_planner = RealFftPlanner::<f64>::new();
    let r2c = real_planner.plan_fft_forward(last);
    let c2r = real_planner.plan_fft_inverse(last);

    let mut spectrum = vec![Complex::new(0.0, 0.0); rows * half];
    spectrum
        .par_chunks_mut(half)
        .zip(data.par_chunks(last))
        .for_each_init(
            || (r2c.make_input_vec(), r2c.make_scratch_vec()),
            |(input, scratch), (out, row)| {
                input.copy_from_slice(row);
                r2c.process_with_scratch(input, out, scratch)
                    .expect("buffer sizes come from the planner");
            },
        );

    let mut spec_dims = dims.to_vec();
    spec_dims[n - 1] = half;
    let mut planner = FftPlanner::<f64>::new();
    for axis in 0..n - 1 {
        let fft = planner.plan_fft_forward(dims[axis]);
        transform_axis(&mut spectrum, &spec_dims, axis, &fft);
    }

    spectrum.par_iter_mut().for_each(|c| {
        *c = Complex::new(c.norm_sqr(), 0.0);
    });

    for axis in 0..n - 1 {
        let fft = planner.plan_fft_inverse(dims[axis]);
        transform_axis(&mut spectrum, &spec_dims, axis, &fft);
    }

    // DC and Nyquist bins of every last-axis spectrum must be real.
    let scale = (volume as f64) * (volume as f64);
    let nyquist = (last % 2 == 0).then_some(half - 1);
    let residue = spectrum
        .par_chunks(half)
        .map(|row| {
            let mut m = row[0].im.abs();
            if let Some(k) = nyquist {
                m = m.max(row[k].im.abs());
            }
            m
        })
        .reduce(|| 0.0, f64::max);
    if residue / scale > IMAG_RESIDUE_LIMIT {
        return Err(Error::Numerical(format!(
            "imaginary residue {residue:e} in inverse transform"
        )));
    }

    let mut out = vec![0.0; volume];
    out.par_chunks_mut(last)
        .zip(spectrum.par_chunks_mut(half))
        .for_each_init(
            || c2r.make_scratch_vec(),
            |scratch, (row_out, row_in)| {
                row_in[0].im = 0.0;
                if let Some(k) = nyquist {
                    row_in[k].im = 0.0;
                }
                c2r.process_with_scratch(row_in, row_out, scratch)
                    .expect("buffer sizes come from the planner");
            },
        );

    // rustfft transforms are unnormalised: the round trip carries one factor of |X|.
    let inv = 1.0 / volume as f64;
    out.par_iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

/// In-place complex FFT along `axis` of a C-ordered grid.
fn transform_axis(buf: &mut [Complex<f64>], dims: &[usize], axis: usize, fft: &Arc<dyn Fft<f64>>) {
    let len = dims[axis];
    if len == 1 {
        return;
    }
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let lines = outer * inner;
    let line_start = |line: usize| (line / inner) * len * inner + line % inner;

    let shared: &[Complex<f64>] = buf;
    let batches: Vec<Vec<Complex<f64>>> = (0..lines.div_ceil(LINE_BATCH))
        .into_par_iter()
        .map_init(
            || vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()],
            |scratch, b| {
                let first = b * LINE_BATCH;
                let count = LINE_BATCH.min(lines - first);
                let mut block = Vec::with_capacity(count * len);
                for line in first..first + count {
                    let start = line_start(line);
                    block.extend((0..len).map(|k| shared[start + k * inner]));
                }
                fft.process_with_scratch(&mut block, scratch);
                block
            },
        )
        .collect();

    for (b, block) in batches.into_iter().enumerate() {
        for (j, line) in block.chunks_exact(len).enumerate() {
            let start = line_start(b * LINE_BATCH + j);
            for (k, v) in line.iter().enumerate() {
                buf[start + k * inner] = *v;
            }
        }
    }
}
