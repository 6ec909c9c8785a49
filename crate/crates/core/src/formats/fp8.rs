//! FP8 codecs used to store quantization scales.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Fp8Kind {
    /// 4 exponent bits, 3 mantissa bits, no infinities, max 448.
    E4m3fn,
    /// 5 exponent bits, 2 mantissa bits, IEEE-style specials, max 57344.
    E5m2,
}

impl Fp8Kind {
    fn mantissa_bits(self) -> i32 {
        match self {
            Fp8Kind::E4m3fn => 3,
            Fp8Kind::E5m2 => 2,
        }
    }

    fn bias(self) -> i32 {
        match self {
            Fp8Kind::E4m3fn => 7,
            Fp8Kind::E5m2 => 15,
        }
    }

    pub fn max_finite(self) -> f64 {
        match self {
            Fp8Kind::E4m3fn => 448.0,
            Fp8Kind::E5m2 => 57344.0,
        }
    }

    pub fn max_finite_code(self) -> u8 {
        match self {
            Fp8Kind::E4m3fn => 0x7E,
            Fp8Kind::E5m2 => 0x7B,
        }
    }

    /// Smallest positive (subnormal) value.
    pub fn min_positive(self) -> f64 {
        pow2(1 - self.bias() - self.mantissa_bits())
    }
}

pub(crate) fn pow2(k: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&k));
    f64::from_bits(((k + 1023) as u64) << 52)
}

/// `floor(log2(v))` for finite `v > 0`, exact.
pub(crate) fn floor_log2(v: f64) -> i32 {
    let bits = v.to_bits();
    let e = ((bits >> 52) & 0x7ff) as i32;
    if e == 0 {
        let mant = bits & ((1u64 << 52) - 1);
        -1074 + (63 - mant.leading_zeros() as i32)
    } else {
        e - 1023
    }
}

/// Round-to-nearest-even encoding of a positive scale. Values above the
/// largest finite code saturate to it.
pub fn encode_fp8(v: f64, kind: Fp8Kind) -> Result<u8> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::Domain(format!("fp8 scale must be finite and > 0, got {v}")));
    }
    if v >= kind.max_finite() {
        return Ok(kind.max_finite_code());
    }
    let m = kind.mantissa_bits();
    let emin = 1 - kind.bias();
    let mut e = floor_log2(v).max(emin);
    let mut q = (v / pow2(e - m)).round_ties_even() as u32;
    if q == 1 << (m + 1) {
        e += 1;
        q = 1 << m;
    }
    let code = if q < 1 << m {
        q
    } else {
        (((e + kind.bias()) as u32) << m) | (q - (1 << m))
    };
    Ok(code as u8)
}

pub fn decode_fp8(code: u8, kind: Fp8Kind) -> f64 {
    let m = kind.mantissa_bits();
    let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
    let exp_field = ((code & 0x7f) >> m) as i32;
    let man = (code & ((1 << m) - 1)) as i32;
    match kind {
        Fp8Kind::E4m3fn if exp_field == 15 && man == 7 => return f64::NAN,
        Fp8Kind::E5m2 if exp_field == 31 => {
            return if man == 0 { sign * f64::INFINITY } else { f64::NAN };
        }
        _ => {}
    }
    let emin = 1 - kind.bias();
    let mag = if exp_field == 0 {
        man as f64 * pow2(emin - m)
    } else {
        (1.0 + man as f64 / (1 << m) as f64) * pow2(exp_field - kind.bias())
    };
    sign * mag
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Oracle: decode every code and take the nearest finite one, ties to an
    /// even code.
    fn nearest_by_enumeration(v: f64, kind: Fp8Kind) -> u8 {
        let mut best = (f64::INFINITY, 0u8);
        for code in 0u8..=0x7f {
            let x = decode_fp8(code, kind);
            if !x.is_finite() {
                continue;
            }
            let err = (x - v).abs();
            if err < best.0 || (err == best.0 && code % 2 == 0) {
                best = (err, code);
            }
        }
        best.1
    }

    #[test]
    fn one_encodes_to_0x38() {
        assert_eq!(encode_fp8(1.0, Fp8Kind::E4m3fn).unwrap(), 0x38);
        assert_eq!(decode_fp8(0x38, Fp8Kind::E4m3fn), 1.0);
    }

    #[test]
    fn saturation() {
        let c = encode_fp8(500.0, Fp8Kind::E4m3fn).unwrap();
        assert_eq!(decode_fp8(c, Fp8Kind::E4m3fn), 448.0);
        let c = encode_fp8(1e9, Fp8Kind::E5m2).unwrap();
        assert_eq!(decode_fp8(c, Fp8Kind::E5m2), 57344.0);
    }

    #[test]
    fn grid_point_is_lossless() {
        let c = encode_fp8(0.5, Fp8Kind::E5m2).unwrap();
        assert_eq!(decode_fp8(c, Fp8Kind::E5m2), 0.5);
    }

    #[test]
    fn non_positive_is_domain_error() {
        assert!(matches!(encode_fp8(0.0, Fp8Kind::E4m3fn), Err(Error::Domain(_))));
        assert!(matches!(encode_fp8(-1.0, Fp8Kind::E5m2), Err(Error::Domain(_))));
        assert!(encode_fp8(f64::NAN, Fp8Kind::E5m2).is_err());
    }

    #[test]
    fn min_positive_matches_code_one() {
        for kind in [Fp8Kind::E4m3fn, Fp8Kind::E5m2] {
            assert_eq!(decode_fp8(1, kind), kind.min_positive());
        }
        assert_eq!(Fp8Kind::E4m3fn.min_positive(), 2f64.powi(-9));
        assert_eq!(Fp8Kind::E5m2.min_positive(), 2f64.powi(-16));
    }

    #[test]
    fn decode_encode_decode_is_identity_on_all_codes() {
        for kind in [Fp8Kind::E4m3fn, Fp8Kind::E5m2] {
            for code in 0u8..=255 {
                let v = decode_fp8(code, kind);
                if !(v > 0.0) || !v.is_finite() {
                    continue;
                }
                let back = decode_fp8(encode_fp8(v, kind).unwrap(), kind);
                assert_eq!(back, v, "{kind:?} code {code:#04x}");
            }
        }
    }

    #[test]
    fn encode_matches_enumeration_oracle() {
        let mut rng = crate::tensor::Rng::new(21);
        for kind in [Fp8Kind::E4m3fn, Fp8Kind::E5m2] {
            // random magnitudes across the whole range, plus exact midpoints
            for _ in 0..20_000 {
                let v = 2f64.powf(rng.uniform_in(-20.0, 17.0));
                if v >= kind.max_finite() {
                    continue;
                }
                assert_eq!(
                    encode_fp8(v, kind).unwrap(),
                    nearest_by_enumeration(v, kind),
                    "{kind:?} {v}"
                );
            }
            for code in 1u8..kind.max_finite_code() {
                let mid = 0.5 * (decode_fp8(code, kind) + decode_fp8(code + 1, kind));
                assert_eq!(encode_fp8(mid, kind).unwrap(), nearest_by_enumeration(mid, kind));
            }
        }
    }

    #[test]
    fn floor_log2_exact() {
        assert_eq!(floor_log2(1.0), 0);
        assert_eq!(floor_log2(3.0), 1);
        assert_eq!(floor_log2(448.0), 8);
        assert_eq!(floor_log2(0.49), -2);
        assert_eq!(floor_log2(f64::from_bits(1)), -1074);
        assert_eq!(floor_log2(f64::from_bits(3)), -1073);
    }
}
