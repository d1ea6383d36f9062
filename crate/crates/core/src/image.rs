//! Segmented image loading, binarization and phase fractions.
//!
//! Grids are stored flat in C order (last axis fastest). A 2D raster of
//! `height x width` has dims `[height, width]`; a multi-page stack or raw
//! volume has dims `[depth, height, width]`.

use std::io::Cursor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// More distinct labels than this indicates an unsegmented (grayscale) input.
pub const MAX_PHASES: usize = 16;

/// Shortest edge accepted for analysis.
pub const MIN_ANALYSIS_EDGE: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDomain {
    dims: Vec<usize>,
}

impl ImageDomain {
    /// Builds a 2D or 3D domain. Edges only need to be non-zero here; the
    /// analysis minimum is checked by [`ImageDomain::ensure_analysable`].
    pub fn new(dims: &[usize]) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) {
            return Err(Error::InvalidDimensions(format!(
                "expected 2 or 3 axes, got {}",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidDimensions(format!("zero-length axis in {dims:?}")));
        }
        Ok(Self { dims: dims.to_vec() })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// |X|, the number of pixels or voxels.
    pub fn volume(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn min_edge(&self) -> usize {
        *self.dims.iter().min().expect("domain has at least two axes")
    }

    pub fn ensure_analysable(&self) -> Result<()> {
        if self.min_edge() < MIN_ANALYSIS_EDGE {
            return Err(Error::ImageTooSmall(format!(
                "every edge must be at least {MIN_ANALYSIS_EDGE} px, got {:?}",
                self.dims
            )));
        }
        Ok(())
    }

    /// C-order strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims.len()];
        for axis in (0..self.dims.len() - 1).rev() {
            strides[axis] = strides[axis + 1] * self.dims[axis + 1];
        }
        strides
    }
}

/// Observed fraction of the selected phase, always in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhaseFraction(f64);

impl PhaseFraction {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidArgument(format!(
                "phase fraction {value} outside [0, 1]"
            )));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// φ(1 − φ), the Bernoulli variance of a single pixel.
    pub fn bernoulli_variance(self) -> f64 {
        self.0 * (1.0 - self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentedImage {
    domain: ImageDomain,
    labels: Vec<u8>,
    phases: Vec<u8>,
}

impl SegmentedImage {
    pub fn from_labels(dims: &[usize], labels: Vec<u8>) -> Result<Self> {
        let domain = ImageDomain::new(dims)?;
        if labels.len() != domain.volume() {
            return Err(Error::DimensionMismatch {
                expected: domain.volume(),
                found: labels.len(),
            });
        }
        let mut present = [false; 256];
        for &l in &labels {
            present[l as usize] = true;
        }
        let phases: Vec<u8> = (0..=255u8).filter(|&l| present[l as usize]).collect();
        if phases.len() > MAX_PHASES {
            return Err(Error::TooManyPhases(phases.len()));
        }
        Ok(Self {
            domain,
            labels,
            phases,
        })
    }

    pub fn domain(&self) -> &ImageDomain {
        &self.domain
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Distinct labels, sorted ascending.
    pub fn phases(&self) -> &[u8] {
        &self.phases
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    domain: ImageDomain,
    bits: Vec<u8>,
    selected_phase: u8,
}

impl BinaryImage {
    pub fn from_bits(dims: &[usize], bits: Vec<u8>) -> Result<Self> {
        let domain = ImageDomain::new(dims)?;
        if bits.len() != domain.volume() {
            return Err(Error::DimensionMismatch {
                expected: domain.volume(),
                found: bits.len(),
            });
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("binary image values must be 0 or 1".into()));
        }
        Ok(Self {
            domain,
            bits,
            selected_phase: 1,
        })
    }

    pub fn domain(&self) -> &ImageDomain {
        &self.domain
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn selected_phase(&self) -> u8 {
        self.selected_phase
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn complement(&self) -> BinaryImage {
        BinaryImage {
            domain: self.domain.clone(),
            bits: self.bits.iter().map(|&b| 1 - b).collect(),
            selected_phase: self.selected_phase,
        }
    }

    /// Extracts the axis-aligned box starting at `origin` with edges `dims`.
    pub fn crop(&self, origin: &[usize], dims: &[usize]) -> Result<BinaryImage> {
        let n = self.domain.ndim();
        if origin.len() != n || dims.len() != n {
            return Err(Error::InvalidArgument("crop rank differs from image rank".into()));
        }
        for axis in 0..n {
            if origin[axis] + dims[axis] > self.domain.dims[axis] {
                return Err(Error::InvalidArgument(format!(
                    "crop {origin:?}+{dims:?} exceeds image {:?}",
                    self.domain.dims
                )));
            }
        }
        let out_domain = ImageDomain::new(dims)?;
        let src_strides = self.domain.strides();
        let row = dims[n - 1];
        let mut bits = Vec::with_capacity(out_domain.volume());
        let outer: usize = dims[..n - 1].iter().product();
        let mut idx = vec![0usize; n - 1];
        for _ in 0..outer {
            let start: usize = (0..n - 1)
                .map(|a| (origin[a] + idx[a]) * src_strides[a])
                .sum::<usize>()
                + origin[n - 1];
            bits.extend_from_slice(&self.bits[start..start + row]);
            for a in (0..n - 1).rev() {
                idx[a] += 1;
                if idx[a] < dims[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        Ok(BinaryImage {
            domain: out_domain,
            bits,
            selected_phase: self.selected_phase,
        })
    }

    /// Nearest-neighbour upscaling by an integer factor along every axis.
    pub fn upscale(&self, factor: usize) -> BinaryImage {
        assert!(factor >= 1);
        let dims: Vec<usize> = self.domain.dims.iter().map(|d| d * factor).collect();
        let domain = ImageDomain::new(&dims).expect("scaled dims are valid");
        let src_strides = self.domain.strides();
        let n = dims.len();
        let mut bits = vec![0u8; domain.volume()];
        let mut idx = vec![0usize; n];
        for b in bits.iter_mut() {
            let src: usize = (0..n).map(|a| (idx[a] / factor) * src_strides[a]).sum();
            *b = self.bits[src];
            for a in (0..n).rev() {
                idx[a] += 1;
                if idx[a] < dims[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        BinaryImage {
            domain,
            bits,
            selected_phase: self.selected_phase,
        }
    }

    /// Labels suitable for writing to disk: `0` for background, `one` for the phase.
    pub fn to_labels(&self, one: u8) -> Vec<u8> {
        self.bits.iter().map(|&b| b * one).collect()
    }
}

pub fn binarize(img: &SegmentedImage, phase: u8) -> Result<BinaryImage> {
    if !img.phases.contains(&phase) {
        return Err(Error::UnknownPhase(phase));
    }
    Ok(BinaryImage {
        domain: img.domain.clone(),
        bits: img.labels.iter().map(|&l| u8::from(l == phase)).collect(),
        selected_phase: phase,
    })
}

pub fn phase_fraction(img: &BinaryImage) -> PhaseFraction {
    PhaseFraction(img.count_ones() as f64 / img.domain.volume() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatHint {
    #[default]
    Auto,
    Png,
    Tiff,
    Raw,
}

impl FormatHint {
    pub fn from_path(path: &std::path::Path) -> FormatHint {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("png") => FormatHint::Png,
            Some("tif") | Some("tiff") => FormatHint::Tiff,
            Some("raw") | Some("bin") => FormatHint::Raw,
            _ => FormatHint::Auto,
        }
    }
}

impl std::str::FromStr for FormatHint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(FormatHint::Auto),
            "png" => Ok(FormatHint::Png),
            "tif" | "tiff" => Ok(FormatHint::Tiff),
            "raw" => Ok(FormatHint::Raw),
            other => Err(Error::UnsupportedFormat(other.to_string())),
        }
    }
}

fn sniff(bytes: &[u8]) -> Option<FormatHint> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        Some(FormatHint::Png)
    } else if bytes.starts_with(b"II*\0") || bytes.starts_with(b"MM\0*") {
        Some(FormatHint::Tiff)
    } else {
        None
    }
}

/// Decodes a segmented image. Raw volumes need `dims_override`; for raster
/// formats it is optional and, when given, must match the decoded shape.
pub fn load_image(
    bytes: &[u8],
    hint: FormatHint,
    dims_override: Option<&[usize]>,
) -> Result<SegmentedImage> {
    let format = match hint {
        FormatHint::Auto => match sniff(bytes) {
            Some(f) => f,
            None if dims_override.is_some() => FormatHint::Raw,
            None => {
                return Err(Error::UnsupportedFormat(
                    "unrecognised header; pass dims to read a raw volume".into(),
                ))
            }
        },
        other => other,
    };
    let (dims, labels) = match format {
        FormatHint::Png => decode_png(bytes)?,
        FormatHint::Tiff => decode_tiff(bytes)?,
        FormatHint::Raw => {
            let dims = dims_override.ok_or_else(|| {
                Error::InvalidDimensions("raw volumes require explicit dims".into())
            })?;
            let expected: usize = dims.iter().product();
            if bytes.len() != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    found: bytes.len(),
                });
            }
            (dims.to_vec(), bytes.to_vec())
        }
        FormatHint::Auto => unreachable!(),
    };
    if let Some(want) = dims_override {
        if format != FormatHint::Raw && want != dims.as_slice() {
            let expected: usize = want.iter().product();
            return Err(Error::DimensionMismatch {
                expected,
                found: labels.len(),
            });
        }
    }
    SegmentedImage::from_labels(&dims, labels)
}

pub fn load_path(path: &std::path::Path, dims_override: Option<&[usize]>) -> Result<SegmentedImage> {
    let bytes = std::fs::read(path)?;
    load_image(&bytes, FormatHint::from_path(path), dims_override)
}

fn unpack_low_depth(row: &[u8], depth: u8, width: usize, out: &mut Vec<u8>) {
    let per_byte = 8 / depth as usize;
    let mask = (1u16 << depth) as u8 - 1;
    for x in 0..width {
        let byte = row[x / per_byte];
        let shift = 8 - depth as usize * (x % per_byte + 1);
        out.push((byte >> shift) & mask);
    }
}

/// Collapses interleaved channels to one label per pixel. Colour pixels must
/// be gray (R = G = B); alpha is ignored.
fn collapse_channels(data: &[u8], channels: usize, color: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(data.len() / channels);
    for px in data.chunks_exact(channels) {
        if px[..color].iter().any(|&c| c != px[0]) {
            return Err(Error::UnsupportedFormat(
                "colour image with distinct channels; supply a label image".into(),
            ));
        }
        out.push(px[0]);
    }
    Ok(out)
}

fn decode_png(bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>)> {
    use png::{BitDepth, ColorType};
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::UnsupportedFormat(format!("png: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::UnsupportedFormat(format!("png: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let labels = match (info.color_type, info.bit_depth) {
        (ColorType::Grayscale | ColorType::Indexed, BitDepth::Eight) => data.to_vec(),
        (ColorType::Grayscale | ColorType::Indexed, d @ (BitDepth::One | BitDepth::Two | BitDepth::Four)) => {
            let mut out = Vec::with_capacity(w * h);
            for row in data.chunks(info.line_size) {
                unpack_low_depth(row, d as u8, w, &mut out);
            }
            out
        }
        (ColorType::GrayscaleAlpha, BitDepth::Eight) => collapse_channels(data, 2, 1)?,
        (ColorType::Rgb, BitDepth::Eight) => collapse_channels(data, 3, 3)?,
        (ColorType::Rgba, BitDepth::Eight) => collapse_channels(data, 4, 3)?,
        (ct, bd) => {
            return Err(Error::UnsupportedFormat(format!(
                "png {ct:?} at {bd:?} bits; only 8-bit or lower label images are read"
            )))
        }
    };
    Ok((vec![h, w], labels))
}

fn decode_tiff(bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>)> {
    use tiff::decoder::{Decoder, DecodingResult};
    use tiff::ColorType;
    let tiff_err = |e: tiff::TiffError| Error::UnsupportedFormat(format!("tiff: {e}"));
    let mut decoder = Decoder::new(Cursor::new(bytes)).map_err(tiff_err)?;
    let mut pages = 0usize;
    let mut page_dims: Option<(usize, usize)> = None;
    let mut labels = Vec::new();
    loop {
        let (w, h) = decoder.dimensions().map_err(tiff_err)?;
        let (w, h) = (w as usize, h as usize);
        match page_dims {
            None => page_dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(Error::InvalidDimensions(format!(
                    "tiff page {pages} is {w}x{h}, first page is {}x{}",
                    d.0, d.1
                )))
            }
            _ => {}
        }
        let color = decoder.colortype().map_err(tiff_err)?;
        let data = match decoder.read_image().map_err(tiff_err)? {
            DecodingResult::U8(v) => v,
            _ => {
                return Err(Error::UnsupportedFormat(
                    "tiff sample format must be 8-bit unsigned".into(),
                ))
            }
        };
        let page = match color {
            ColorType::Gray(8) => data,
            ColorType::GrayA(8) => collapse_channels(&data, 2, 1)?,
            ColorType::RGB(8) => collapse_channels(&data, 3, 3)?,
            ColorType::RGBA(8) => collapse_channels(&data, 4, 3)?,
            other => {
                return Err(Error::UnsupportedFormat(format!(
                    "tiff colour type {other:?}"
                )))
            }
        };
        labels.extend_from_slice(&page);
        pages += 1;
        if !decoder.more_images() {
            break;
        }
        decoder.next_image().map_err(tiff_err)?;
    }
    let (w, h) = page_dims.expect("at least one page decoded");
    let dims = if pages == 1 { vec![h, w] } else { vec![pages, h, w] };
    Ok((dims, labels))
}

/// Encodes a 2D label grid as an 8-bit grayscale PNG.
pub fn encode_png(dims: &[usize], labels: &[u8]) -> Result<Vec<u8>> {
    if dims.len() != 2 || dims[0] * dims[1] != labels.len() {
        return Err(Error::InvalidDimensions(format!("png needs 2D dims, got {dims:?}")));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, dims[1] as u32, dims[0] as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writer
            .write_image_data(labels)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    Ok(out)
}

/// Encodes a 2D grid as a single-page TIFF, or a 3D grid as a multi-page stack.
pub fn encode_tiff(dims: &[usize], labels: &[u8]) -> Result<Vec<u8>> {
    use tiff::encoder::{colortype, TiffEncoder};
    let (pages, h, w) = match *dims {
        [h, w] => (1, h, w),
        [d, h, w] => (d, h, w),
        _ => return Err(Error::InvalidDimensions(format!("tiff needs 2D or 3D dims, got {dims:?}"))),
    };
    if pages * h * w != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: pages * h * w,
            found: labels.len(),
        });
    }
    let mut cursor = Cursor::new(Vec::new());
    {
        let io_err = |e: tiff::TiffError| Error::Io(std::io::Error::other(e));
        let mut enc = TiffEncoder::new(&mut cursor).map_err(io_err)?;
        for page in labels.chunks_exact(h * w) {
            enc.write_image::<colortype::Gray8>(w as u32, h as u32, page)
                .map_err(io_err)?;
        }
    }
    Ok(cursor.into_inner())
}
