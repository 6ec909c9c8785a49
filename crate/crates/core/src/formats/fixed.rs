//! Fixed-point INT-i quantization. A [`QuantSpec`] sets the grouping, the
//! range mode and the storage type of the scales.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::fp8::{decode_fp8, encode_fp8, Fp8Kind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Granularity {
    PerTensor,
    /// One group per index along `axis`.
    PerChannel {
        axis: usize,
    },
    /// Groups of `size` consecutive elements along the last axis.
    PerBlock {
        size: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RangeMode {
    Symmetric,
    Affine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScaleDtype {
    Fp32,
    Fp8(Fp8Kind),
}

impl ScaleDtype {
    pub fn bits(self) -> u64 {
        match self {
            ScaleDtype::Fp32 => 32,
            ScaleDtype::Fp8(_) => 8,
        }
    }

    /// Rounds a positive scale to the nearest storable value (never zero).
    pub fn round_scale(self, scale: f64) -> Result<f64> {
        match self {
            ScaleDtype::Fp32 => {
                let s = scale as f32;
                Ok(if s > 0.0 { s as f64 } else { f32::from_bits(1) as f64 })
            }
            ScaleDtype::Fp8(kind) => {
                let s = decode_fp8(encode_fp8(scale, kind)?, kind);
                Ok(if s > 0.0 { s } else { kind.min_positive() })
            }
        }
    }
}

impl fmt::Display for ScaleDtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleDtype::Fp32 => "fp32",
            ScaleDtype::Fp8(Fp8Kind::E4m3fn) => "e4m3fn",
            ScaleDtype::Fp8(Fp8Kind::E5m2) => "e5m2",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QuantSpec {
    pub bits: u8,
    pub granularity: Granularity,
    pub range: RangeMode,
    pub scale_dtype: ScaleDtype,
}

impl QuantSpec {
    pub fn new(bits: u8, granularity: Granularity, range: RangeMode, scale_dtype: ScaleDtype) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(Error::Config(format!("integer bits must be in 2..=16, got {bits}")));
        }
        if let Granularity::PerBlock { size: 0 } = granularity {
            return Err(Error::Config("per-block granularity needs a block size".into()));
        }
        Ok(QuantSpec {
            bits,
            granularity,
            range,
            scale_dtype,
        })
    }

    pub fn qmin(&self) -> i32 {
        match self.range {
            RangeMode::Affine => -(1 << (self.bits - 1)),
            RangeMode::Symmetric => -(1 << (self.bits - 1)) + 1,
        }
    }

    pub fn qmax(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }

    /// Bits stored per group: the scale, plus a zero point in the scale's
    /// format for affine ranges.
    pub fn group_overhead_bits(&self) -> u64 {
        let zp = match self.range {
            RangeMode::Affine => self.scale_dtype.bits(),
            RangeMode::Symmetric => 0,
        };
        self.scale_dtype.bits() + zp
    }

    pub fn group_count(&self, shape: &[usize]) -> Result<usize> {
        let numel: usize = shape.iter().product();
        match self.granularity {
            Granularity::PerTensor => Ok(1),
            Granularity::PerChannel { axis } => shape
                .get(axis)
                .copied()
                .ok_or_else(|| Error::shape(format!("channel axis {axis} out of range for shape {shape:?}"))),
            Granularity::PerBlock { size } => {
                let len = shape.last().copied().unwrap_or(1);
                Ok(numel / len * len.div_ceil(size))
            }
        }
    }

    /// Group of every element, in flat order.
    pub fn group_ids(&self, shape: &[usize]) -> Result<Vec<usize>> {
        let numel: usize = shape.iter().product();
        self.group_count(shape)?;
        Ok(match self.granularity {
            Granularity::PerTensor => vec![0; numel],
            Granularity::PerChannel { axis } => {
                let stride: usize = shape[axis + 1..].iter().product();
                let n = shape[axis];
                (0..numel).map(|i| (i / stride) % n).collect()
            }
            Granularity::PerBlock { size } => {
                let len = shape.last().copied().unwrap_or(1);
                let nb = len.div_ceil(size);
                (0..numel).map(|i| (i / len) * nb + (i % len) / size).collect()
            }
        })
    }

    pub fn size_bits(&self, shape: &[usize]) -> Result<u64> {
        let numel: usize = shape.iter().product();
        Ok(numel as u64 * self.bits as u64 + self.group_count(shape)? as u64 * self.group_overhead_bits())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QParams {
    pub scales: Vec<f64>,
    pub zero_points: Vec<i32>,
}

impl QParams {
    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    #[inline]
    pub(crate) fn quantize_value(&self, g: usize, x: f64, spec: &QuantSpec) -> i32 {
        let q = (x / self.scales[g]).round_ties_even() + self.zero_points[g] as f64;
        q.clamp(spec.qmin() as f64, spec.qmax() as f64) as i32
    }

    #[inline]
    pub(crate) fn dequantize_value(&self, g: usize, code: i32) -> f64 {
        // f32 result so that dequantized tensors survive an f32 store bit-exactly
        ((code - self.zero_points[g]) as f64 * self.scales[g]) as f32 as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QTensor {
    pub spec: QuantSpec,
    pub qparams: QParams,
    pub codes: Vec<i32>,
    pub shape: Vec<usize>,
}

impl QTensor {
    pub fn size_bits(&self) -> u64 {
        self.codes.len() as u64 * self.spec.bits as u64 + self.qparams.len() as u64 * self.spec.group_overhead_bits()
    }
}

/// Scale and zero point per group from observed `(min, max)` ranges.
///
/// Affine ranges are widened to include zero first, so zero is always exactly
/// representable and the zero point stays inside the code range.
pub fn compute_qparams(ranges: &[(f64, f64)], spec: &QuantSpec) -> Result<QParams> {
    let mut scales = Vec::with_capacity(ranges.len());
    let mut zero_points = Vec::with_capacity(ranges.len());
    for (g, &(lo, hi)) in ranges.iter().enumerate() {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Stats(format!("group {g}: min {lo} > max {hi}")));
        }
        let (scale, zp) = match spec.range {
            RangeMode::Affine => {
                let (lo, hi) = (lo.min(0.0), hi.max(0.0));
                if hi == lo {
                    (1.0, 0)
                } else {
                    let levels = ((1u64 << spec.bits) - 1) as f64;
                    let scale = spec.scale_dtype.round_scale((hi - lo) / levels)?;
                    let zp = spec.qmin() as f64 - (lo / scale).round_ties_even();
                    (scale, zp.clamp(spec.qmin() as f64, spec.qmax() as f64) as i32)
                }
            }
            RangeMode::Symmetric => {
                let amax = lo.abs().max(hi.abs());
                if amax == 0.0 {
                    (1.0, 0)
                } else {
                    (spec.scale_dtype.round_scale(amax / spec.qmax() as f64)?, 0)
                }
            }
        };
        scales.push(scale);
        zero_points.push(zp);
    }
    Ok(QParams { scales, zero_points })
}

/// Per-group `(min, max)` of raw values laid out as `shape`.
pub fn group_ranges(data: &[f64], shape: &[usize], spec: &QuantSpec) -> Result<Vec<(f64, f64)>> {
    let ids = spec.group_ids(shape)?;
    if ids.len() != data.len() {
        return Err(Error::shape(format!(
            "shape {shape:?} does not match {} values",
            data.len()
        )));
    }
    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); spec.group_count(shape)?];
    for (&g, &x) in ids.iter().zip(data) {
        let r = &mut ranges[g];
        r.0 = r.0.min(x);
        r.1 = r.1.max(x);
    }
    Ok(ranges)
}

fn check_groups(shape: &[usize], qp: &QParams, spec: &QuantSpec) -> Result<Vec<usize>> {
    let want = spec.group_count(shape)?;
    if qp.scales.len() != want || qp.zero_points.len() != want {
        return Err(Error::shape(format!(
            "{:?} over shape {shape:?} needs {want} groups, qparams have {}",
            spec.granularity,
            qp.scales.len()
        )));
    }
    spec.group_ids(shape)
}

pub fn fixed_point_quantize(t: &Tensor, qp: &QParams, spec: &QuantSpec) -> Result<QTensor> {
    let ids = check_groups(t.shape(), qp, spec)?;
    let codes = t
        .data()
        .iter()
        .zip(&ids)
        .map(|(&x, &g)| qp.quantize_value(g, x as f64, spec))
        .collect();
    Ok(QTensor {
        spec: *spec,
        qparams: qp.clone(),
        codes,
        shape: t.shape().to_vec(),
    })
}

pub fn fixed_point_dequantize(q: &QTensor) -> Result<Tensor> {
    let ids = check_groups(&q.shape, &q.qparams, &q.spec)?;
    let data = q
        .codes
        .iter()
        .zip(&ids)
        .map(|(&c, &g)| q.qparams.dequantize_value(g, c) as f32)
        .collect();
    Tensor::new(q.shape.clone(), data)
}

/// Quantize-dequantize `data` (laid out as `shape`) in place.
pub fn fixed_fake_quantize(data: &mut [f64], shape: &[usize], qp: &QParams, spec: &QuantSpec) -> Result<()> {
    let ids = check_groups(shape, qp, spec)?;
    if ids.len() != data.len() {
        return Err(Error::shape(format!(
            "shape {shape:?} does not match {} values",
            data.len()
        )));
    }
    for (x, &g) in data.iter_mut().zip(&ids) {
        *x = qp.dequantize_value(g, qp.quantize_value(g, *x, spec));
    }
    Ok(())
}

/// QParams derived from the data itself (weights, or dynamic activations).
pub fn qparams_from_data(data: &[f64], shape: &[usize], spec: &QuantSpec) -> Result<QParams> {
    compute_qparams(&group_ranges(data, shape, spec)?, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn spec(bits: u8, g: Granularity, r: RangeMode) -> QuantSpec {
        QuantSpec::new(bits, g, r, ScaleDtype::Fp32).unwrap()
    }

    #[test]
    fn affine_example() {
        let s = spec(8, Granularity::PerTensor, RangeMode::Affine);
        let qp = compute_qparams(&[(-1.0, 3.0)], &s).unwrap();
        assert_eq!(qp.scales[0], (4.0f64 / 255.0) as f32 as f64);
        assert_eq!(qp.zero_points[0], -64);

        let x = Tensor::new(vec![2], vec![3.0, 10.0]).unwrap();
        let q = fixed_point_quantize(&x, &qp, &s).unwrap();
        assert_eq!(q.codes, vec![127, 127]);
        let back = fixed_point_dequantize(&q).unwrap();
        assert!((back.data()[0] as f64 - 191.0 * 4.0 / 255.0).abs() < 1e-6);
        assert!((back.data()[0] - 2.9961).abs() < 1e-4);
    }

    #[test]
    fn symmetric_example() {
        let s = spec(8, Granularity::PerTensor, RangeMode::Symmetric);
        let qp = compute_qparams(&[(-2.0, 1.0)], &s).unwrap();
        assert_eq!(qp.scales[0], (2.0f64 / 127.0) as f32 as f64);
        assert_eq!(qp.zero_points[0], 0);
        let z = Tensor::new(vec![1], vec![0.0]).unwrap();
        let q = fixed_point_quantize(&z, &qp, &s).unwrap();
        assert_eq!(q.codes, vec![0]);
        assert_eq!(fixed_point_dequantize(&q).unwrap().data(), &[0.0]);
    }

    #[test]
    fn degenerate_range() {
        for r in [RangeMode::Affine, RangeMode::Symmetric] {
            let qp = compute_qparams(&[(0.0, 0.0)], &spec(8, Granularity::PerTensor, r)).unwrap();
            assert_eq!((qp.scales[0], qp.zero_points[0]), (1.0, 0));
        }
        // a positive constant still roundtrips
        let s = spec(8, Granularity::PerTensor, RangeMode::Affine);
        let qp = compute_qparams(&[(5.0, 5.0)], &s).unwrap();
        let x = Tensor::new(vec![1], vec![5.0]).unwrap();
        let back = fixed_point_dequantize(&fixed_point_quantize(&x, &qp, &s).unwrap()).unwrap();
        assert!((back.data()[0] - 5.0).abs() < 1e-6);
    }

    #[test]
    fn inverted_range_is_stats_error() {
        let s = spec(8, Granularity::PerTensor, RangeMode::Affine);
        assert!(matches!(compute_qparams(&[(1.0, 0.0)], &s), Err(Error::Stats(_))));
    }

    #[test]
    fn group_count_mismatch_is_shape_error() {
        let s = spec(8, Granularity::PerChannel { axis: 0 }, RangeMode::Symmetric);
        let qp = compute_qparams(&[(-1.0, 1.0)], &s).unwrap();
        let x = Tensor::zeros(vec![3, 2]).unwrap();
        assert!(matches!(fixed_point_quantize(&x, &qp, &s), Err(Error::Shape(_))));
    }

    #[test]
    fn integer_ranges() {
        let a = spec(4, Granularity::PerTensor, RangeMode::Affine);
        let s = spec(4, Granularity::PerTensor, RangeMode::Symmetric);
        assert_eq!((a.qmin(), a.qmax()), (-8, 7));
        assert_eq!((s.qmin(), s.qmax()), (-7, 7));
    }

    #[test]
    fn group_layouts() {
        let s = spec(8, Granularity::PerChannel { axis: 1 }, RangeMode::Affine);
        assert_eq!(s.group_ids(&[2, 3]).unwrap(), vec![0, 1, 2, 0, 1, 2]);
        let s = spec(8, Granularity::PerChannel { axis: 0 }, RangeMode::Affine);
        assert_eq!(s.group_ids(&[2, 3]).unwrap(), vec![0, 0, 0, 1, 1, 1]);
        let s = spec(8, Granularity::PerBlock { size: 2 }, RangeMode::Affine);
        assert_eq!(s.group_ids(&[2, 3]).unwrap(), vec![0, 0, 1, 2, 2, 3]);
        assert_eq!(s.group_count(&[2, 3]).unwrap(), 4);
        assert!(QuantSpec::new(
            8,
            Granularity::PerBlock { size: 0 },
            RangeMode::Affine,
            ScaleDtype::Fp32
        )
        .is_err());
    }

    #[test]
    fn fp8_scales_are_storable() {
        let s = QuantSpec::new(
            8,
            Granularity::PerTensor,
            RangeMode::Affine,
            ScaleDtype::Fp8(Fp8Kind::E4m3fn),
        )
        .unwrap();
        let qp = compute_qparams(&[(-1.0, 3.0)], &s).unwrap();
        let sc = qp.scales[0];
        assert_eq!(
            decode_fp8(encode_fp8(sc, Fp8Kind::E4m3fn).unwrap(), Fp8Kind::E4m3fn),
            sc
        );
        assert_eq!(s.group_overhead_bits(), 16);
        // tiny scales clamp to the smallest subnormal rather than zero
        let qp = compute_qparams(&[(-1e-9, 1e-9)], &s).unwrap();
        assert_eq!(qp.scales[0], Fp8Kind::E4m3fn.min_positive());
    }

    #[test]
    fn size_bits_formula() {
        let s = spec(8, Granularity::PerTensor, RangeMode::Affine);
        assert_eq!(s.size_bits(&[256]).unwrap(), 2048 + 32 + 32);
        let s = spec(8, Granularity::PerTensor, RangeMode::Symmetric);
        assert_eq!(s.size_bits(&[256]).unwrap(), 2048 + 32);
    }

    fn arb_case() -> impl Strategy<Value = (Vec<usize>, Granularity, RangeMode, u8, u64)> {
        (
            prop::sample::select(vec![vec![12usize], vec![4, 6], vec![3, 2, 5]]),
            0usize..3,
            any::<bool>(),
            4u8..9,
            any::<u64>(),
        )
            .prop_map(|(shape, g, affine, bits, seed)| {
                let gran = match g {
                    0 => Granularity::PerTensor,
                    1 => Granularity::PerChannel {
                        axis: seed as usize % shape.len(),
                    },
                    _ => Granularity::PerBlock {
                        size: 1 + seed as usize % 4,
                    },
                };
                let range = if affine {
                    RangeMode::Affine
                } else {
                    RangeMode::Symmetric
                };
                (shape, gran, range, bits, seed)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(400))]
        #[test]
        fn roundtrip_error_within_half_step((shape, gran, range, bits, seed) in arb_case()) {
            let s = spec(bits, gran, range);
            let n: usize = shape.iter().product();
            let mut rng = Rng::new(seed);
            let data: Vec<f64> = (0..n).map(|_| rng.normal() * 3.0 + 0.5).map(|v: f64| v as f32 as f64).collect();
            let qp = qparams_from_data(&data, &shape, &s).unwrap();
            let t = Tensor::new(shape.clone(), data.iter().map(|&v| v as f32).collect()).unwrap();
            let back = fixed_point_dequantize(&fixed_point_quantize(&t, &qp, &s).unwrap()).unwrap();
            let ids = s.group_ids(&shape).unwrap();
            for ((&x, &y), &g) in data.iter().zip(back.data()).zip(&ids) {
                // f32 output rounding adds at most one ulp of the value
                let tol = qp.scales[g] / 2.0 + (y.abs() as f64) * 1.2e-7;
                prop_assert!((x - y as f64).abs() <= tol, "x={} y={} scale={}", x, y, qp.scales[g]);
            }
        }
    }
}
