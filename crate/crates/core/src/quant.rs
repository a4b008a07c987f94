//! 4-bit blockwise quantization for frozen base weights.
//!
//! Elements are grouped in row-major order into blocks of `block_size` (the
//! last block may be short). Each block stores one scale and one 4-bit code
//! per element.
//!
//! * `absmax-int4`: scale = absmax / 7, code = round(v / scale) clamped to
//!   [-7, 7] and stored offset by +7. Code 15 is reserved.
//! * `nf4`: scale = absmax, code = index of the nearest level of a fixed
//!   16-level normal-quantile codebook on [-1, 1].

use std::io::Read;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BLOCK_SIZE: usize = 64;

/// Sixteen levels at standard-normal quantiles, normalized to [-1, 1] and
/// mirrored about zero. The positive half equals the positive half of the
/// usual NF4 table; the negative half is its reflection.
pub const NF4_LEVELS: [f64; 16] = [
    -1.0,
    -0.722_956_727_892_882_1,
    -0.562_616_970_075_237,
    -0.440_709_802_413_190_13,
    -0.337_915_193_521_655_06,
    -0.246_112_293_929_935_9,
    -0.160_930_172_704_936_18,
    -0.079_580_329_094_169_37,
    0.079_580_329_094_169_37,
    0.160_930_172_704_936_18,
    0.246_112_293_929_935_9,
    0.337_915_193_521_655_06,
    0.440_709_802_413_190_13,
    0.562_616_970_075_237,
    0.722_956_727_892_882_1,
    1.0,
];

const INT4_ZERO: u8 = 7;
const INT4_RESERVED: u8 = 15;
/// Code used for elements of all-zero NF4 blocks.
const NF4_ZERO: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    AbsmaxInt4,
    Nf4,
}

impl QuantMode {
    fn tag(self) -> u8 {
        match self {
            QuantMode::AbsmaxInt4 => 0,
            QuantMode::Nf4 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(QuantMode::AbsmaxInt4),
            1 => Ok(QuantMode::Nf4),
            _ => Err(Error::Quant(format!("unknown quantization mode tag {tag}"))),
        }
    }

    pub fn zero_code(self) -> u8 {
        match self {
            QuantMode::AbsmaxInt4 => INT4_ZERO,
            QuantMode::Nf4 => NF4_ZERO,
        }
    }

    /// Codebook value of `code` before scaling.
    pub fn decode(self, code: u8) -> Result<f64> {
        match self {
            QuantMode::AbsmaxInt4 if code < INT4_RESERVED => Ok(f64::from(code) - 7.0),
            QuantMode::AbsmaxInt4 => Err(Error::Quant(format!("reserved int4 code {code}"))),
            QuantMode::Nf4 => NF4_LEVELS
                .get(code as usize)
                .copied()
                .ok_or_else(|| Error::Quant(format!("nf4 code {code} out of range"))),
        }
    }

    fn block_scale(self, absmax: f64) -> f64 {
        match self {
            QuantMode::AbsmaxInt4 => absmax / 7.0,
            QuantMode::Nf4 => absmax,
        }
    }

    fn encode(self, value: f64, scale: f64) -> u8 {
        match self {
            QuantMode::AbsmaxInt4 => {
                // f64::round rounds half away from zero.
                let q = (value / scale).round().clamp(-7.0, 7.0);
                (q as i32 + 7) as u8
            }
            QuantMode::Nf4 => nearest_nf4(value / scale),
        }
    }
}

impl std::fmt::Display for QuantMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QuantMode::AbsmaxInt4 => "absmax-int4",
            QuantMode::Nf4 => "nf4",
        })
    }
}

/// Nearest level; on an exact tie the level farther from zero wins (and the
/// upper one at zero itself).
fn nearest_nf4(x: f64) -> u8 {
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for (i, &level) in NF4_LEVELS.iter().enumerate() {
        let d = (x - level).abs();
        // Levels ascend, so on a positive tie the later one is farther out.
        if d < best_dist || (d == best_dist && level > 0.0) {
            best = i;
            best_dist = d;
        }
    }
    best as u8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub block_size: usize,
    pub mode: QuantMode,
    pub scales: Vec<f64>,
    /// One code per element, unpacked.
    pub codes: Vec<u8>,
}

impl QuantizedTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn n_blocks(&self) -> usize {
        self.numel().div_ceil(self.block_size)
    }

    fn validate(&self) -> Result<()> {
        if self.block_size < 2 {
            return Err(Error::Quant(format!("block_size {} < 2", self.block_size)));
        }
        if self.codes.len() != self.numel() {
            return Err(Error::Quant(format!(
                "{} codes for {} elements",
                self.codes.len(),
                self.numel()
            )));
        }
        if self.scales.len() != self.n_blocks() {
            return Err(Error::Quant(format!(
                "{} scales for {} blocks",
                self.scales.len(),
                self.n_blocks()
            )));
        }
        if let Some(s) = self.scales.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::Quant(format!("invalid block scale {s}")));
        }
        Ok(())
    }

    /// Flat row-major dequantized values.
    pub fn dequantize_flat(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.codes.len());
        for (block, codes) in self.codes.chunks(self.block_size).enumerate() {
            let scale = self.scales[block];
            for &code in codes {
                out.push(scale * self.mode.decode(code)?);
            }
        }
        Ok(out)
    }

    /// Serialized form: ndim (u8), dims (u64 each), block_size (u32), mode
    /// (u8), little-endian f64 scales, then the codes packed two per byte with
    /// the low nibble first.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.block_size as u32).to_le_bytes());
        out.push(self.mode.tag());
        for s in &self.scales {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for pair in self.codes.chunks(2) {
            let lo = pair[0] & 0x0f;
            let hi = pair.get(1).copied().unwrap_or(0) & 0x0f;
            out.push(lo | (hi << 4));
        }
        out
    }

    pub fn decode_from(reader: &mut impl Read) -> Result<Self> {
        let ndim = read_array::<1>(reader)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(read_array(reader)?) as usize);
        }
        let block_size = u32::from_le_bytes(read_array(reader)?) as usize;
        let mode = QuantMode::from_tag(read_array::<1>(reader)?[0])?;
        if block_size < 2 {
            return Err(Error::Quant(format!("block_size {block_size} < 2")));
        }
        let numel: usize = shape.iter().product();
        let n_blocks = numel.div_ceil(block_size);
        let mut scales = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            scales.push(f64::from_le_bytes(read_array(reader)?));
        }
        let mut packed = vec![0u8; numel.div_ceil(2)];
        reader
            .read_exact(&mut packed)
            .map_err(|e| Error::Quant(format!("truncated code array: {e}")))?;
        let mut codes = Vec::with_capacity(numel);
        for byte in packed {
            codes.push(byte & 0x0f);
            codes.push(byte >> 4);
        }
        codes.truncate(numel);
        let q = QuantizedTensor {
            shape,
            block_size,
            mode,
            scales,
            codes,
        };
        q.validate()?;
        Ok(q)
    }
}

fn read_array<const N: usize>(reader: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    reader
        .read_exact(&mut buf)
        .map_err(|e| Error::Quant(format!("truncated quantized tensor: {e}")))?;
    Ok(buf)
}

/// Quantize a flat slice with an explicit shape.
pub fn quantize_flat(
    values: &[f64],
    shape: Vec<usize>,
    block_size: usize,
    mode: QuantMode,
) -> Result<QuantizedTensor> {
    if block_size < 2 {
        return Err(Error::Quant(format!("block_size must be >= 2, got {block_size}")));
    }
    if shape.iter().product::<usize>() != values.len() {
        return Err(Error::Shape(format!(
            "shape {shape:?} does not hold {} values",
            values.len()
        )));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Quant(format!("cannot quantize non-finite value {v}")));
    }
    let mut scales = Vec::with_capacity(values.len().div_ceil(block_size));
    let mut codes = Vec::with_capacity(values.len());
    for block in values.chunks(block_size) {
        let absmax = block.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if absmax == 0.0 {
            scales.push(0.0);
            codes.extend(std::iter::repeat_n(mode.zero_code(), block.len()));
            continue;
        }
        let scale = mode.block_scale(absmax);
        scales.push(scale);
        codes.extend(block.iter().map(|&v| mode.encode(v, scale)));
    }
    Ok(QuantizedTensor {
        shape,
        block_size,
        mode,
        scales,
        codes,
    })
}

pub fn quantize_blockwise(
    weights: &Array2<f64>,
    block_size: usize,
    mode: QuantMode,
) -> Result<QuantizedTensor> {
    let flat: Vec<f64> = weights.iter().copied().collect();
    quantize_flat(&flat, weights.shape().to_vec(), block_size, mode)
}

pub fn dequantize(q: &QuantizedTensor) -> Result<Array2<f64>> {
    let (rows, cols) = match q.shape.as_slice() {
        [r, c] => (*r, *c),
        [n] => (1, *n),
        other => return Err(Error::Shape(format!("expected a matrix, got shape {other:?}"))),
    };
    Array2::from_shape_vec((rows, cols), q.dequantize_flat()?)
        .map_err(|e| Error::Shape(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantErrorReport {
    pub max_abs_err: f64,
    pub rms_err: f64,
    pub per_block_max: Vec<f64>,
}

pub fn quant_error_report(original: &Array2<f64>, q: &QuantizedTensor) -> Result<QuantErrorReport> {
    if original.shape() != q.shape.as_slice() {
        return Err(Error::Shape(format!(
            "original {:?} vs quantized {:?}",
            original.shape(),
            q.shape
        )));
    }
    let recon = q.dequantize_flat()?;
    let errs: Vec<f64> = original
        .iter()
        .zip(&recon)
        .map(|(a, b)| (a - b).abs())
        .collect();
    let per_block_max: Vec<f64> = errs
        .chunks(q.block_size)
        .map(|b| b.iter().copied().fold(0.0, f64::max))
        .collect();
    let max_abs_err = per_block_max.iter().copied().fold(0.0, f64::max);
    let rms_err = if errs.is_empty() {
        0.0
    } else {
        (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt()
    };
    Ok(QuantErrorReport {
        max_abs_err,
        rms_err,
        per_block_max,
    })
}
