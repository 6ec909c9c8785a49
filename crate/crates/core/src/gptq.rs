//! GPTQ weight rounding with MX-aware micro-blocks: columns are quantized
//! left to right and each micro-block's rounding error is propagated into the
//! columns not yet quantized, weighted by the inverse layer Hessian.

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::formats::{mx_fake_quantize, qparams_from_data, Granularity, MxSpec, QParams, QuantSpec};
use crate::tensor::Mat;

/// Dampening added to the Hessian diagonal, as a fraction of its mean.
pub const DEFAULT_DAMPING: f64 = 0.01;
/// Columns per lazy-update block.
pub const DEFAULT_B1: usize = 128;
/// Micro-block width for fixed-point targets.
pub const FIXED_POINT_B2: usize = 32;

/// Running `2·X·Xᵀ / n` over calibration columns.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianState {
    sum: Mat,
    nsamples: usize,
}

impl HessianState {
    pub fn new(d_col: usize) -> Self {
        HessianState {
            sum: Mat::zeros(d_col, d_col),
            nsamples: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.sum.rows()
    }

    pub fn nsamples(&self) -> usize {
        self.nsamples
    }

    /// Adds a `d_col × n` slab whose columns are individual samples.
    pub fn accumulate(&mut self, x: &Mat, exec: Exec) -> Result<()> {
        if x.rows() != self.dim() {
            return Err(Error::shape(format!(
                "activation slab has {} rows, Hessian is {}x{}",
                x.rows(),
                self.dim(),
                self.dim()
            )));
        }
        let xxt = x.matmul_nt_with(x, exec)?;
        self.sum
            .data_mut()
            .iter_mut()
            .zip(xxt.data())
            .for_each(|(s, v)| *s += 2.0 * v);
        self.nsamples += x.cols();
        Ok(())
    }

    /// Adds activations laid out `n × d_col`, one sample per row, as produced
    /// by a forward pass.
    pub fn accumulate_rows(&mut self, a: &Mat, exec: Exec) -> Result<()> {
        self.accumulate(&a.transpose(), exec)
    }

    /// The averaged Hessian `2·X·Xᵀ / n` (zero before any sample).
    pub fn hessian(&self) -> Mat {
        let n = self.nsamples.max(1) as f64;
        let mut h = self.sum.clone();
        h.data_mut().iter_mut().for_each(|v| *v /= n);
        h
    }
}

/// Upper Cholesky factor `U` of `(H + λI)^{-1}`, so `Uᵀ·U = (H + λI)^{-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct GptqWorkspace {
    pub hinv_chol: Mat,
    pub lambda: f64,
    /// True when the full factorization failed and only diag(H) was used.
    pub diagonal_fallback: bool,
}

/// Inverts the damped `H` and factors the inverse. Dead inputs (zero
/// diagonal) get a unit diagonal so they neither break the factorization nor
/// receive error feedback.
pub fn prepare_inverse(state: &HessianState, damping: f64) -> Result<GptqWorkspace> {
    prepare_inverse_from(&state.hessian(), damping)
}

pub fn prepare_inverse_from(h: &Mat, damping: f64) -> Result<GptqWorkspace> {
    let n = h.rows();
    if h.cols() != n || n == 0 {
        return Err(Error::shape(format!(
            "Hessian must be square, got {}x{}",
            h.rows(),
            h.cols()
        )));
    }
    if let Some(i) = h.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            column: i % n,
            msg: "non-finite Hessian entry".into(),
        });
    }
    let mut h = h.clone();
    for i in 0..n {
        if h[(i, i)] == 0.0 {
            h.data_mut()[i * n + i] = 1.0;
        }
    }
    let lambda = damping * (0..n).map(|i| h[(i, i)]).sum::<f64>() / n as f64;
    h.add_diag(lambda);
    let full = h
        .spd_inverse()
        .and_then(|inv| inv.cholesky_lower())
        .map(|l| l.transpose())
        .ok()
        .filter(|u| u.is_finite());
    Ok(match full {
        Some(u) => GptqWorkspace {
            hinv_chol: u,
            lambda,
            diagonal_fallback: false,
        },
        None => {
            let mut u = Mat::zeros(n, n);
            for i in 0..n {
                let d = h[(i, i)];
                if !(d > 0.0) {
                    return Err(Error::Numeric {
                        column: i,
                        msg: format!("damped Hessian diagonal {d} is not positive"),
                    });
                }
                u.data_mut()[i * n + i] = 1.0 / d.sqrt();
            }
            GptqWorkspace {
                hinv_chol: u,
                lambda,
                diagonal_fallback: true,
            }
        }
    })
}

/// Target format of a weight matrix `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightQuantizer {
    /// MX blocks along the input-channel axis.
    Mx(MxSpec),
    /// Fixed point with parameters frozen from the weights before GPTQ.
    /// With `rederive`, per-block groups instead take their parameters from
    /// the error-updated weights at the moment they are quantized.
    Fixed {
        spec: QuantSpec,
        qparams: QParams,
        rederive: bool,
    },
}

impl WeightQuantizer {
    /// Fixed-point quantizer whose parameters come from `w` itself.
    pub fn fixed_from_weights(w: &Mat, spec: QuantSpec, rederive: bool) -> Result<Self> {
        if let Granularity::PerChannel { axis } = spec.granularity {
            if axis > 1 {
                return Err(Error::Config(format!("weight channel axis {axis} out of range")));
            }
        }
        let qparams = qparams_from_data(w.data(), &[w.rows(), w.cols()], &spec)?;
        Ok(WeightQuantizer::Fixed {
            spec,
            qparams,
            rederive,
        })
    }

    /// Default micro-block width for this target.
    pub fn default_b2(&self) -> usize {
        match self {
            WeightQuantizer::Mx(spec) => spec.block_size(),
            WeightQuantizer::Fixed { .. } => FIXED_POINT_B2,
        }
    }

    /// Quantize-dequantize columns `start..start + seg.len()` of row `row` of
    /// a `rows × cols` matrix in place.
    fn quantize_segment(&self, row: usize, start: usize, cols: usize, seg: &mut [f64]) -> Result<()> {
        match self {
            WeightQuantizer::Mx(spec) => {
                mx_fake_quantize(seg, seg.len(), spec);
                Ok(())
            }
            WeightQuantizer::Fixed {
                spec,
                qparams,
                rederive,
            } => {
                if let (true, Granularity::PerBlock { size }) = (*rederive, spec.granularity) {
                    for block in seg.chunks_mut(size) {
                        let local = qparams_from_data(block, &[block.len()], &per_tensor(spec))?;
                        for x in block.iter_mut() {
                            *x = local.dequantize_value(0, local.quantize_value(0, *x, spec));
                        }
                    }
                    return Ok(());
                }
                for (i, x) in seg.iter_mut().enumerate() {
                    let g = group_of(spec.granularity, row, start + i, cols);
                    *x = qparams.dequantize_value(g, qparams.quantize_value(g, *x, spec));
                }
                Ok(())
            }
        }
    }
}

fn per_tensor(spec: &QuantSpec) -> QuantSpec {
    QuantSpec {
        granularity: Granularity::PerTensor,
        ..*spec
    }
}

fn group_of(g: Granularity, row: usize, col: usize, cols: usize) -> usize {
    match g {
        Granularity::PerTensor => 0,
        Granularity::PerChannel { axis: 0 } => row,
        Granularity::PerChannel { .. } => col,
        Granularity::PerBlock { size } => row * cols.div_ceil(size) + col / size,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GptqConfig {
    pub b1: usize,
    pub b2: usize,
    pub damping: f64,
    pub quantizer: WeightQuantizer,
}

impl GptqConfig {
    /// Defaults: `B2` is the MX block size (or 32 for fixed point) and `B1`
    /// is the smallest multiple of `B2` that is at least 128.
    pub fn new(quantizer: WeightQuantizer) -> Self {
        let b2 = quantizer.default_b2();
        GptqConfig {
            b1: DEFAULT_B1.div_ceil(b2) * b2,
            b2,
            damping: DEFAULT_DAMPING,
            quantizer,
        }
    }

    pub fn with_blocks(mut self, b1: usize, b2: usize) -> Self {
        self.b1 = b1;
        self.b2 = b2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.b1 == 0 || self.b2 == 0 || !self.b1.is_multiple_of(self.b2) {
            return Err(Error::Config(format!(
                "micro-block {} must be positive and divide block {}",
                self.b2, self.b1
            )));
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(Error::Config(format!(
                "damping {} must be finite and non-negative",
                self.damping
            )));
        }
        match &self.quantizer {
            WeightQuantizer::Mx(spec) if !self.b2.is_multiple_of(spec.block_size()) => Err(Error::Config(format!(
                "micro-block {} is not a multiple of the MX block size {}",
                self.b2,
                spec.block_size()
            ))),
            WeightQuantizer::Fixed {
                spec, rederive: true, ..
            } => match spec.granularity {
                Granularity::PerBlock { size } if !self.b2.is_multiple_of(size) => Err(Error::Config(format!(
                    "micro-block {} is not a multiple of the group size {size}",
                    self.b2
                ))),
                _ => Ok(()),
            },
            _ => Ok(()),
        }
    }
}

/// Solves `e·U = d` for the row vector `e`, with `U` upper triangular and
/// given as the square block `u[off.., off..]` of width `d.len()`.
fn solve_upper_left(u: &Mat, off: usize, d: &[f64], e: &mut [f64]) {
    for a in 0..d.len() {
        let mut acc = d[a];
        for c in 0..a {
            acc -= e[c] * u[(off + c, off + a)];
        }
        e[a] = acc / u[(off + a, off + a)];
    }
}

fn quantize_row(w: &mut [f64], row: usize, u: &Mat, cfg: &GptqConfig) -> Result<()> {
    let n = w.len();
    let mut q = vec![0.0; cfg.b2];
    let mut err = vec![0.0; cfg.b1];
    for i in (0..n).step_by(cfg.b1) {
        let i2 = (i + cfg.b1).min(n);
        for j in (i..i2).step_by(cfg.b2) {
            let k = (j + cfg.b2).min(i2);
            let q = &mut q[..k - j];
            q.copy_from_slice(&w[j..k]);
            cfg.quantizer.quantize_segment(row, j, n, q)?;
            let d: Vec<f64> = w[j..k].iter().zip(q.iter()).map(|(a, b)| a - b).collect();
            let e = &mut err[j - i..k - i];
            solve_upper_left(u, j, &d, e);
            if let Some(c) = e.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    column: j + c,
                    msg: "non-finite quantization error".into(),
                });
            }
            w[j..k].copy_from_slice(q);
            for (a, &ea) in e.iter().enumerate() {
                let urow = &u.row(j + a)[k..i2];
                w[k..i2].iter_mut().zip(urow).for_each(|(x, uv)| *x -= ea * uv);
            }
        }
        for (a, &ea) in err[..i2 - i].iter().enumerate() {
            let urow = &u.row(i + a)[i2..n];
            w[i2..n].iter_mut().zip(urow).for_each(|(x, uv)| *x -= ea * uv);
        }
        if let Some(c) = w[i2..n].iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                column: i2 + c,
                msg: "non-finite weight after error propagation".into(),
            });
        }
    }
    Ok(())
}

/// Quantizes `w` (`[out, in]`) column by column with error feedback.
/// Returns the dequantized weights; rows are independent and run in parallel.
pub fn gptq_quantize_layer(w: &Mat, ws: &GptqWorkspace, cfg: &GptqConfig, exec: Exec) -> Result<Mat> {
    cfg.validate()?;
    let n = w.cols();
    if ws.hinv_chol.rows() != n {
        return Err(Error::shape(format!(
            "weight has {n} columns, inverse Hessian is {}x{}",
            ws.hinv_chol.rows(),
            ws.hinv_chol.cols()
        )));
    }
    if let Some(i) = w.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            column: i % n,
            msg: "non-finite weight".into(),
        });
    }
    let rows = exec.try_map(w.rows(), |r| {
        let mut row = w.row(r).to_vec();
        quantize_row(&mut row, r, &ws.hinv_chol, cfg)?;
        Ok::<_, Error>(row)
    })?;
    Mat::new(w.rows(), n, rows.concat())
}

/// Plain round-to-nearest of `w` in the target format.
pub fn rtn_quantize(w: &Mat, quantizer: &WeightQuantizer) -> Result<Mat> {
    let n = w.cols();
    let mut out = w.clone();
    for r in 0..w.rows() {
        quantizer.quantize_segment(r, 0, n, out.row_mut(r))?;
    }
    Ok(out)
}

/// Layer reconstruction error `‖W·X − Ŵ·X‖²` for a `d_col × n` input slab.
pub fn objective(w: &Mat, q: &Mat, x: &Mat) -> Result<f64> {
    let delta = Mat::from_fn(w.rows(), w.cols(), |r, c| w[(r, c)] - q[(r, c)]);
    let dx = delta.matmul(x)?;
    Ok(dx.data().iter().map(|v| v * v).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::{RangeMode, ScaleDtype};
    use crate::tensor::Rng;

    fn randn(rows: usize, cols: usize, rng: &mut Rng) -> Mat {
        Mat::from_fn(rows, cols, |_, _| rng.normal())
    }

    fn max_diff(a: &Mat, b: &Mat) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    /// Gauss-Jordan inverse with partial pivoting, independent of Cholesky.
    fn gauss_jordan(m: &Mat) -> Mat {
        let n = m.rows();
        let mut a: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut r = m.row(i).to_vec();
                r.extend((0..n).map(|j| (i == j) as u8 as f64));
                r
            })
            .collect();
        for c in 0..n {
            let p = (c..n).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs())).unwrap();
            a.swap(c, p);
            let piv = a[c][c];
            a[c].iter_mut().for_each(|v| *v /= piv);
            for r in 0..n {
                if r != c {
                    let f = a[r][c];
                    let pivot_row = a[c].clone();
                    a[r].iter_mut().zip(&pivot_row).for_each(|(v, p)| *v -= f * p);
                }
            }
        }
        Mat::from_fn(n, n, |i, j| a[i][n + j])
    }

    #[test]
    fn hessian_examples() {
        let mut h = HessianState::new(2);
        h.accumulate(&Mat::zeros(2, 3), Exec::Serial).unwrap();
        assert_eq!(h.hessian(), Mat::zeros(2, 2));

        let mut h = HessianState::new(2);
        h.accumulate(&Mat::new(2, 1, vec![1.0, 2.0]).unwrap(), Exec::Serial)
            .unwrap();
        assert_eq!(h.hessian().data(), &[2.0, 4.0, 4.0, 8.0]);
        assert!(matches!(
            h.accumulate(&Mat::zeros(3, 1), Exec::Serial),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn hessian_is_additive_over_slabs() {
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            let a = randn(5, 7, &mut rng);
            let b = randn(5, 4, &mut rng);
            let joined = Mat::from_fn(5, 11, |r, c| if c < 7 { a[(r, c)] } else { b[(r, c - 7)] });
            let mut h1 = HessianState::new(5);
            h1.accumulate(&a, Exec::Serial).unwrap();
            h1.accumulate(&b, Exec::default()).unwrap();
            let mut h2 = HessianState::new(5);
            h2.accumulate(&joined, Exec::Serial).unwrap();
            assert_eq!(h1.nsamples(), 11);
            assert!(max_diff(&h1.hessian(), &h2.hessian()) < 1e-12);
            let h = h1.hessian();
            assert_eq!(h, h.transpose());
            let mut h3 = HessianState::new(5);
            h3.accumulate_rows(&joined.transpose(), Exec::Serial).unwrap();
            assert_eq!(h3.hessian(), h2.hessian());
        }
    }

    #[test]
    fn scaled_identity_factor() {
        let mut h = Mat::identity(4);
        h.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        let ws = prepare_inverse_from(&h, 0.01).unwrap();
        assert!((ws.lambda - 0.02).abs() < 1e-15);
        let want = 1.0 / 2.02f64.sqrt();
        let mut expected = Mat::identity(4);
        expected.data_mut().iter_mut().for_each(|v| *v *= want);
        assert!(max_diff(&ws.hinv_chol, &expected) < 1e-15);
        assert!(!ws.diagonal_fallback);
    }

    #[test]
    fn factor_reconstructs_damped_inverse() {
        let mut rng = Rng::new(2);
        for n in 1..=16 {
            let x = randn(n, n + 3, &mut rng);
            let mut st = HessianState::new(n);
            st.accumulate(&x, Exec::Serial).unwrap();
            let ws = prepare_inverse(&st, 0.01).unwrap();
            let u = &ws.hinv_chol;
            for r in 0..n {
                for c in 0..r {
                    assert_eq!(u[(r, c)], 0.0);
                }
            }
            let mut damped = st.hessian();
            damped.add_diag(ws.lambda);
            let oracle = gauss_jordan(&damped);
            let recon = u.transpose().matmul(u).unwrap();
            let scale = oracle.max_abs();
            assert!(max_diff(&recon, &oracle) <= 1e-8 * scale.max(1.0));
        }
    }

    #[test]
    fn rank_one_slab_is_damped_into_definiteness() {
        let mut st = HessianState::new(3);
        st.accumulate(&Mat::new(3, 1, vec![1.0, -2.0, 0.5]).unwrap(), Exec::Serial)
            .unwrap();
        let ws = prepare_inverse(&st, 0.01).unwrap();
        assert!(!ws.diagonal_fallback);
        assert!(ws.hinv_chol.is_finite());
    }

    #[test]
    fn indefinite_hessian_falls_back_to_diagonal() {
        let h = Mat::new(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        let ws = prepare_inverse_from(&h, 0.01).unwrap();
        assert!(ws.diagonal_fallback);
        assert_eq!(ws.hinv_chol[(0, 1)], 0.0);
        let bad = Mat::new(2, 2, vec![1.0, f64::NAN, 0.0, 1.0]).unwrap();
        assert!(matches!(
            prepare_inverse_from(&bad, 0.01),
            Err(Error::Numeric { column: 1, .. })
        ));
    }

    #[test]
    fn dead_inputs_get_unit_diagonal() {
        let h = Mat::new(2, 2, vec![4.0, 0.0, 0.0, 0.0]).unwrap();
        let ws = prepare_inverse_from(&h, 0.0).unwrap();
        assert_eq!(ws.hinv_chol[(1, 1)], 1.0);
        assert_eq!(ws.hinv_chol[(0, 0)], 0.5);
    }

    fn mx(d: u8, b: usize) -> WeightQuantizer {
        WeightQuantizer::Mx(MxSpec::new(d, b).unwrap())
    }

    #[test]
    fn config_validation() {
        assert!(GptqConfig::new(mx(4, 16)).validate().is_ok());
        assert_eq!(GptqConfig::new(mx(4, 16)).b2, 16);
        assert_eq!(GptqConfig::new(mx(8, 256)).b1, 256);
        let bad = GptqConfig::new(mx(4, 16)).with_blocks(128, 24);
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = GptqConfig::new(mx(4, 16)).with_blocks(48, 32);
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let spec = QuantSpec::new(4, Granularity::PerTensor, RangeMode::Symmetric, ScaleDtype::Fp32).unwrap();
        let q = WeightQuantizer::fixed_from_weights(&Mat::identity(4), spec, false).unwrap();
        assert_eq!(GptqConfig::new(q).b2, FIXED_POINT_B2);
    }

    #[test]
    fn diagonal_hessian_reduces_to_rounding() {
        let mut rng = Rng::new(3);
        let w = randn(8, 40, &mut rng);
        let h = Mat::from_fn(40, 40, |i, j| if i == j { rng.uniform_in(0.5, 3.0) } else { 0.0 });
        let ws = prepare_inverse_from(&h, 0.01).unwrap();
        let spec = QuantSpec::new(
            4,
            Granularity::PerChannel { axis: 0 },
            RangeMode::Affine,
            ScaleDtype::Fp32,
        )
        .unwrap();
        for quantizer in [mx(4, 8), WeightQuantizer::fixed_from_weights(&w, spec, false).unwrap()] {
            let cfg = GptqConfig::new(quantizer.clone()).with_blocks(16, 8);
            let q = gptq_quantize_layer(&w, &ws, &cfg, Exec::Serial).unwrap();
            assert_eq!(q, rtn_quantize(&w, &quantizer).unwrap());
        }
    }

    #[test]
    fn rows_are_independent_and_order_is_shared() {
        let mut rng = Rng::new(4);
        let w = randn(6, 32, &mut rng);
        let x = randn(32, 64, &mut rng);
        let mut st = HessianState::new(32);
        st.accumulate(&x, Exec::Serial).unwrap();
        let ws = prepare_inverse(&st, 0.01).unwrap();
        let cfg = GptqConfig::new(mx(4, 8)).with_blocks(16, 8);
        let all = gptq_quantize_layer(&w, &ws, &cfg, Exec::default()).unwrap();
        for r in 0..6 {
            let single = Mat::new(1, 32, w.row(r).to_vec()).unwrap();
            let q = gptq_quantize_layer(&single, &ws, &cfg, Exec::Serial).unwrap();
            assert_eq!(q.row(0), all.row(r));
        }
        // permuting rows permutes the output rows
        let perm = [3, 0, 5, 1, 4, 2];
        let wp = Mat::from_fn(6, 32, |r, c| w[(perm[r], c)]);
        let qp = gptq_quantize_layer(&wp, &ws, &cfg, Exec::Serial).unwrap();
        for (r, &p) in perm.iter().enumerate() {
            assert_eq!(qp.row(r), all.row(p));
        }
    }

    #[test]
    fn quantized_prefix_is_stable() {
        let mut rng = Rng::new(5);
        let w = randn(4, 48, &mut rng);
        let x = randn(48, 96, &mut rng);
        let mut st = HessianState::new(48);
        st.accumulate(&x, Exec::Serial).unwrap();
        let ws = prepare_inverse(&st, 0.01).unwrap();
        let cfg = GptqConfig::new(mx(4, 8)).with_blocks(16, 8);
        let full = gptq_quantize_layer(&w, &ws, &cfg, Exec::Serial).unwrap();
        // running only the first 16 columns gives the same first 16 columns
        let w16 = w.slice(0..4, 0..16);
        let u16 = ws.hinv_chol.slice(0..16, 0..16);
        let ws16 = GptqWorkspace {
            hinv_chol: u16,
            ..ws.clone()
        };
        let part = gptq_quantize_layer(&w16, &ws16, &cfg, Exec::Serial).unwrap();
        assert_eq!(part, full.slice(0..4, 0..16));
        // every output row is on the MX grid
        assert_eq!(rtn_quantize(&full, &cfg.quantizer).unwrap(), full);
    }

    #[test]
    fn block_size_only_regroups_updates() {
        let mut rng = Rng::new(6);
        let w = randn(3, 64, &mut rng);
        let x = randn(64, 128, &mut rng);
        let mut st = HessianState::new(64);
        st.accumulate(&x, Exec::Serial).unwrap();
        let ws = prepare_inverse(&st, 0.01).unwrap();
        let base = GptqConfig::new(mx(4, 8));
        let a = gptq_quantize_layer(&w, &ws, &base.clone().with_blocks(8, 8), Exec::Serial).unwrap();
        let b = gptq_quantize_layer(&w, &ws, &base.clone().with_blocks(64, 8), Exec::Serial).unwrap();
        let c = gptq_quantize_layer(&w, &ws, &base.with_blocks(32, 8), Exec::Serial).unwrap();
        // lazy batching changes rounding order only, never the math
        assert!(max_diff(&a, &b) < 1e-9 || a == b);
        assert!(max_diff(&a, &c) < 1e-9 || a == c);
    }

    #[test]
    fn gptq_beats_rounding_on_correlated_data() {
        let mut rng = Rng::new(7);
        let mut wins = 0;
        for _ in 0..10 {
            let w = randn(16, 32, &mut rng);
            let base = randn(4, 256, &mut rng);
            let mix = randn(32, 4, &mut rng);
            let noise = randn(32, 256, &mut rng);
            let mut x = mix.matmul(&base).unwrap();
            x.data_mut()
                .iter_mut()
                .zip(noise.data())
                .for_each(|(v, n)| *v += 0.1 * n);
            let mut st = HessianState::new(32);
            st.accumulate(&x, Exec::Serial).unwrap();
            let ws = prepare_inverse(&st, 0.01).unwrap();
            let cfg = GptqConfig::new(mx(4, 8)).with_blocks(16, 8);
            let q = gptq_quantize_layer(&w, &ws, &cfg, Exec::Serial).unwrap();
            let r = rtn_quantize(&w, &cfg.quantizer).unwrap();
            wins += (objective(&w, &q, &x).unwrap() < objective(&w, &r, &x).unwrap()) as usize;
        }
        assert!(wins >= 9, "{wins}/10");
    }

    #[test]
    fn rederived_block_params_stay_on_grid() {
        let mut rng = Rng::new(8);
        let w = randn(2, 32, &mut rng);
        let x = randn(32, 64, &mut rng);
        let mut st = HessianState::new(32);
        st.accumulate(&x, Exec::Serial).unwrap();
        let ws = prepare_inverse(&st, 0.01).unwrap();
        let spec = QuantSpec::new(
            4,
            Granularity::PerBlock { size: 8 },
            RangeMode::Symmetric,
            ScaleDtype::Fp32,
        )
        .unwrap();
        let q = WeightQuantizer::fixed_from_weights(&w, spec, true).unwrap();
        let cfg = GptqConfig::new(q.clone()).with_blocks(16, 8);
        let out = gptq_quantize_layer(&w, &ws, &cfg, Exec::Serial).unwrap();
        // each group of 8 holds at most 15 distinct levels
        for r in 0..2 {
            for block in out.row(r).chunks(8) {
                let mut v = block.to_vec();
                v.sort_by(f64::total_cmp);
                v.dedup();
                assert!(v.len() <= 15);
            }
        }
        let bad = GptqConfig::new(q).with_blocks(16, 4);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn numeric_errors_report_the_column() {
        let ws = prepare_inverse_from(&Mat::identity(4), 0.01).unwrap();
        let mut w = Mat::zeros(1, 4);
        w.data_mut()[2] = f64::INFINITY;
        let cfg = GptqConfig::new(mx(4, 2)).with_blocks(4, 2);
        assert!(matches!(
            gptq_quantize_layer(&w, &ws, &cfg, Exec::Serial),
            Err(Error::Numeric { column: 2, .. })
        ));
    }
}
