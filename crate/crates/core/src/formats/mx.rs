//! MXINT microscaling: blocks of `b` elements along the last axis share one
//! 8-bit power-of-two scale, and each element is a `d`-bit signed integer.

use std::fmt;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::Tensor;

use super::fp8::{floor_log2, pow2};

/// Scale exponent stored for an all-zero block.
pub const ZERO_BLOCK_EXPONENT: i8 = -127;
/// Bits of the shared scale.
pub const SCALE_BITS: u64 = 8;

/// MXINTd-b: `d` bits per element, `b` elements per block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MxSpec {
    element_bits: u8,
    block_size: usize,
}

impl MxSpec {
    pub fn new(element_bits: u8, block_size: usize) -> Result<Self> {
        if !(2..=16).contains(&element_bits) {
            return Err(Error::Config(format!(
                "MX element bits must be in 2..=16, got {element_bits}"
            )));
        }
        if block_size == 0 {
            return Err(Error::Config("MX block size must be positive".into()));
        }
        Ok(MxSpec {
            element_bits,
            block_size,
        })
    }

    pub fn element_bits(&self) -> u8 {
        self.element_bits
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Largest code magnitude, `2^(d-1) - 1`.
    pub fn max_code(&self) -> i32 {
        (1 << (self.element_bits - 1)) - 1
    }

    /// Blocks covering one row of `len` elements (the last block may be short).
    pub fn blocks_per_row(&self, len: usize) -> usize {
        len.div_ceil(self.block_size)
    }

    /// Storage for `rows` rows of `len` elements.
    pub fn size_bits(&self, rows: usize, len: usize) -> u64 {
        let elems = (rows * len) as u64;
        elems * self.element_bits as u64 + (rows * self.blocks_per_row(len)) as u64 * SCALE_BITS
    }

    /// Step between adjacent codes for shared exponent `e`.
    pub fn scale_for(&self, exponent: i8) -> f64 {
        pow2(exponent as i32 - (self.element_bits as i32 - 2))
    }
}

impl fmt::Display for MxSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MXINT{}-{}", self.element_bits, self.block_size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MxTensor {
    pub spec: MxSpec,
    pub shape: Vec<usize>,
    pub codes: Vec<i16>,
    /// One per block, row-major over (row, block).
    pub scale_exponents: Vec<i8>,
}

impl MxTensor {
    pub fn num_blocks(&self) -> usize {
        self.scale_exponents.len()
    }

    pub fn size_bits(&self) -> u64 {
        self.codes.len() as u64 * self.spec.element_bits as u64 + self.num_blocks() as u64 * SCALE_BITS
    }
}

/// Shared exponent of a block: `floor(log2(max|x|))` clamped to the 8-bit
/// range, or [`ZERO_BLOCK_EXPONENT`] for an all-zero block.
pub fn shared_exponent(block: &[f64]) -> i8 {
    let m = block.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m == 0.0 {
        ZERO_BLOCK_EXPONENT
    } else {
        floor_log2(m).clamp(-127, 127) as i8
    }
}

fn encode_block(block: &[f64], spec: &MxSpec, codes: &mut [i16]) -> i8 {
    let e = shared_exponent(block);
    let scale = spec.scale_for(e);
    let lim = spec.max_code() as f64;
    for (c, &x) in codes.iter_mut().zip(block) {
        *c = (x / scale).round_ties_even().clamp(-lim, lim) as i16;
    }
    e
}

/// Quantize-dequantize each block of each `row_len`-long row in place.
pub fn mx_fake_quantize(data: &mut [f64], row_len: usize, spec: &MxSpec) {
    assert!(row_len > 0 && data.len().is_multiple_of(row_len));
    let lim = spec.max_code() as f64;
    for row in data.chunks_mut(row_len) {
        for block in row.chunks_mut(spec.block_size) {
            let scale = spec.scale_for(shared_exponent(block));
            for x in block.iter_mut() {
                *x = (*x / scale).round_ties_even().clamp(-lim, lim) * scale;
            }
        }
    }
}

pub fn mx_quantize(t: &Tensor, spec: &MxSpec) -> MxTensor {
    mx_quantize_with(t, spec, Exec::default())
}

pub fn mx_quantize_with(t: &Tensor, spec: &MxSpec, exec: Exec) -> MxTensor {
    let len = t.last_dim();
    let rows = t.numel() / len;
    let nb = spec.blocks_per_row(len);
    let encoded = exec.map(rows, |r| {
        let row: Vec<f64> = t.data()[r * len..(r + 1) * len].iter().map(|&v| v as f64).collect();
        let mut codes = vec![0i16; len];
        let exps: Vec<i8> = row
            .chunks(spec.block_size)
            .zip(codes.chunks_mut(spec.block_size))
            .map(|(b, c)| encode_block(b, spec, c))
            .collect();
        (codes, exps)
    });
    let mut codes = Vec::with_capacity(t.numel());
    let mut scale_exponents = Vec::with_capacity(rows * nb);
    for (c, e) in encoded {
        codes.extend(c);
        scale_exponents.extend(e);
    }
    MxTensor {
        spec: *spec,
        shape: t.shape().to_vec(),
        codes,
        scale_exponents,
    }
}

pub fn mx_dequantize(m: &MxTensor) -> Result<Tensor> {
    let len = m.shape.last().copied().unwrap_or(1);
    let bs = m.spec.block_size;
    let nb = m.spec.blocks_per_row(len);
    if !m.codes.len().is_multiple_of(len) || m.scale_exponents.len() != (m.codes.len() / len) * nb {
        return Err(Error::shape("MX codes and block exponents disagree with shape"));
    }
    let data = m
        .codes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let (r, col) = (i / len, i % len);
            let e = m.scale_exponents[r * nb + col / bs];
            (c as f64 * m.spec.scale_for(e)) as f32
        })
        .collect();
    Tensor::new(m.shape.clone(), data)
}
