//! Number formats for weights and activations, with the FP8 codecs used to
//! store fixed-point scales.

mod fixed;
mod fp8;
mod mx;

pub use fixed::{
    compute_qparams, fixed_fake_quantize, fixed_point_dequantize, fixed_point_quantize, group_ranges,
    qparams_from_data, Granularity, QParams, QTensor, QuantSpec, RangeMode, ScaleDtype,
};
pub use fp8::{decode_fp8, encode_fp8, Fp8Kind};
pub use mx::{
    mx_dequantize, mx_fake_quantize, mx_quantize, mx_quantize_with, shared_exponent, MxSpec, MxTensor,
    SCALE_BITS as MX_SCALE_BITS, ZERO_BLOCK_EXPONENT,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Bits charged for a tensor kept in the original precision.
pub const FP16_BITS: u64 = 16;

/// Target format of one operand: `FP16` (left unquantized), `MXINT<d>-<b>`,
/// or `INT<i>` (fixed point, shaped by a [`Scheme`]).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Format {
    Fp16,
    Mx(MxSpec),
    Int(u8),
}

impl Format {
    pub fn is_quantized(&self) -> bool {
        !matches!(self, Format::Fp16)
    }

    pub fn bits(&self) -> u8 {
        match self {
            Format::Fp16 => 16,
            Format::Mx(s) => s.element_bits(),
            Format::Int(b) => *b,
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Format::Fp16 => f.write_str("FP16"),
            Format::Mx(s) => s.fmt(f),
            Format::Int(b) => write!(f, "INT{b}"),
        }
    }
}

fn parse_uint<T: FromStr>(s: &str, what: &str, full: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Parse(format!("bad {what} in format {full:?}")))
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        if up == "FP16" || up == "FP32" {
            return Ok(Format::Fp16);
        }
        if let Some(rest) = up.strip_prefix("MXINT") {
            let (d, b) = rest
                .split_once('-')
                .ok_or_else(|| Error::Parse(format!("expected MXINT<d>-<b>, got {s:?}")))?;
            return Ok(Format::Mx(MxSpec::new(
                parse_uint(d, "element bits", s)?,
                parse_uint(b, "block size", s)?,
            )?));
        }
        if let Some(rest) = up.strip_prefix("INT") {
            let bits: u8 = parse_uint(rest.trim_start_matches('-'), "bit width", s)?;
            if !(2..=16).contains(&bits) {
                return Err(Error::Parse(format!("integer bits out of range in {s:?}")));
            }
            return Ok(Format::Int(bits));
        }
        Err(Error::Parse(format!(
            "unknown format {s:?}; expected FP16, MXINT<d>-<b> or INT<i>"
        )))
    }
}

impl Serialize for Format {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Format {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Concrete storage of a weight tensor, with everything needed to count its
/// bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StorageFormat {
    Fp16,
    Mx(MxSpec),
    Fixed(QuantSpec),
}

impl StorageFormat {
    /// Exact storage cost of a tensor of `shape`, including shared scales
    /// and zero points. MX blocks run along the last axis.
    pub fn size_bits(&self, shape: &[usize]) -> Result<u64> {
        let numel: usize = shape.iter().product();
        match self {
            StorageFormat::Fp16 => Ok(numel as u64 * FP16_BITS),
            StorageFormat::Mx(spec) => {
                let len = shape.last().copied().unwrap_or(1);
                let rows = numel.checked_div(len).unwrap_or(0);
                Ok(spec.size_bits(rows, len))
            }
            StorageFormat::Fixed(spec) => spec.size_bits(shape),
        }
    }

    /// The operand format this storage realizes.
    pub fn format(&self) -> Format {
        match self {
            StorageFormat::Fp16 => Format::Fp16,
            StorageFormat::Mx(spec) => Format::Mx(*spec),
            StorageFormat::Fixed(spec) => Format::Int(spec.bits),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SchemeGranularity {
    PerTensor,
    PerChannel,
    PerBlock(usize),
}

/// How INT-i operands are grouped and how their scales are stored.
///
/// `per-tensor-affine` or `per-block32-affine-e4m3fn`.
/// `per-tensor-affine`, `per-channel-symmetric` or `per-block32-affine-e4m3fn`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Scheme {
    pub granularity: SchemeGranularity,
    pub range: RangeMode,
    pub scale_dtype: ScaleDtype,
}

impl Default for Scheme {
    fn default() -> Self {
        Scheme {
            granularity: SchemeGranularity::PerTensor,
            range: RangeMode::Affine,
            scale_dtype: ScaleDtype::Fp32,
        }
    }
}

impl Scheme {
    /// Concrete spec for `bits`, with per-channel groups along `channel_axis`.
    pub fn spec(&self, bits: u8, channel_axis: usize) -> Result<QuantSpec> {
        let granularity = match self.granularity {
            SchemeGranularity::PerTensor => Granularity::PerTensor,
            SchemeGranularity::PerChannel => Granularity::PerChannel { axis: channel_axis },
            SchemeGranularity::PerBlock(size) => Granularity::PerBlock { size },
        };
        QuantSpec::new(bits, granularity, self.range, self.scale_dtype)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.granularity {
            SchemeGranularity::PerTensor => f.write_str("per-tensor")?,
            SchemeGranularity::PerChannel => f.write_str("per-channel")?,
            SchemeGranularity::PerBlock(b) => write!(f, "per-block{b}")?,
        }
        f.write_str(match self.range {
            RangeMode::Affine => "-affine",
            RangeMode::Symmetric => "-symmetric",
        })?;
        if self.scale_dtype != ScaleDtype::Fp32 {
            write!(f, "-{}", self.scale_dtype)?;
        }
        Ok(())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("bad scheme {s:?}; expected e.g. per-tensor-affine"));
        let lower = s.trim().to_ascii_lowercase();
        let rest = lower.strip_prefix("per-").ok_or_else(bad)?;
        let mut parts = rest.split('-');
        let granularity = match parts.next().ok_or_else(bad)? {
            "tensor" => SchemeGranularity::PerTensor,
            "channel" => SchemeGranularity::PerChannel,
            g => {
                let size: usize = g
                    .strip_prefix("block")
                    .and_then(|n| n.parse().ok())
                    .filter(|&n| n > 0)
                    .ok_or_else(bad)?;
                SchemeGranularity::PerBlock(size)
            }
        };
        let range = match parts.next().ok_or_else(bad)? {
            "affine" | "asymmetric" => RangeMode::Affine,
            "symmetric" => RangeMode::Symmetric,
            _ => return Err(bad()),
        };
        let scale_dtype = match parts.next() {
            None | Some("fp32") => ScaleDtype::Fp32,
            Some("e4m3fn") | Some("e4m3") => ScaleDtype::Fp8(Fp8Kind::E4m3fn),
            Some("e5m2") => ScaleDtype::Fp8(Fp8Kind::E5m2),
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(Scheme {
            granularity,
            range,
            scale_dtype,
        })
    }
}

impl Serialize for Scheme {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Scheme {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
