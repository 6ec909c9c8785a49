//! Layer primitives shared by the model and the rewrites that act on it.

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::formats::StorageFormat;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(gamma: Vec<f64>, beta: Vec<f64>, eps: f64) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(Error::shape(format!(
                "layer norm gamma has {} channels, beta {}",
                gamma.len(),
                beta.len()
            )));
        }
        Ok(LayerNorm { gamma, beta, eps })
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let n = x.cols();
        let mut out = x.clone();
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + self.eps).sqrt();
            for ((v, g), b) in row.iter_mut().zip(&self.gamma).zip(&self.beta) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        out
    }
}

/// Affine layer in the canonical `[out, in]` orientation: `y = x·Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Mat,
    /// Empty when the layer has no bias.
    pub bias: Vec<f64>,
    /// Per-input-channel divisor applied to the input before the product
    /// (an explicit smoothing node).
    pub input_divisor: Option<Vec<f64>>,
    /// Storage format of the weight, once assigned by a quantization plan.
    pub format: Option<StorageFormat>,
}

impl Linear {
    pub fn new(weight: Mat, bias: Vec<f64>) -> Result<Self> {
        if !bias.is_empty() && bias.len() != weight.rows() {
            return Err(Error::shape(format!(
                "bias of {} for a {}x{} weight",
                bias.len(),
                weight.rows(),
                weight.cols()
            )));
        }
        Ok(Linear {
            weight,
            bias,
            input_divisor: None,
            format: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    /// Divides the input by the explicit divisor, if any.
    pub fn prepare_input(&self, x: &Mat) -> Mat {
        let mut x = x.clone();
        if let Some(div) = &self.input_divisor {
            for r in 0..x.rows() {
                for (v, d) in x.row_mut(r).iter_mut().zip(div) {
                    *v /= d;
                }
            }
        }
        x
    }

    /// `x·Wᵀ + b` on an input that has already been prepared.
    pub fn apply(&self, x: &Mat, exec: Exec) -> Result<Mat> {
        let mut y = x.matmul_nt_with(&self.weight, exec)?;
        if !self.bias.is_empty() {
            for r in 0..y.rows() {
                for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                    *v += b;
                }
            }
        }
        Ok(y)
    }

    pub fn forward(&self, x: &Mat, exec: Exec) -> Result<Mat> {
        self.apply(&self.prepare_input(x), exec)
    }

    /// max |W[:, j]| for every input channel j.
    pub fn input_channel_absmax(&self) -> Vec<f64> {
        let mut m = vec![0.0f64; self.in_features()];
        for r in 0..self.weight.rows() {
            for (a, w) in m.iter_mut().zip(self.weight.row(r)) {
                *a = a.max(w.abs());
            }
        }
        m
    }
}

/// GPT-2's tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// In-place softmax over the first `len` entries of `row`; the rest are zeroed.
pub fn masked_softmax(row: &mut [f64], len: usize) {
    let max = row[..len].iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in &mut row[..len] {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in &mut row[..len] {
        *v /= sum;
    }
    row[len..].iter_mut().for_each(|v| *v = 0.0);
}

/// Per-column maximum of |x| over all rows.
pub fn column_absmax(x: &Mat) -> Vec<f64> {
    let mut m = vec![0.0f64; x.cols()];
    for r in 0..x.rows() {
        for (a, v) in m.iter_mut().zip(x.row(r)) {
            *a = a.max(v.abs());
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_normalizes() {
        let ln = LayerNorm::new(vec![1.0; 4], vec![0.0; 4], 1e-5).unwrap();
        let x = Mat::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = ln.forward(&x);
        let mean: f64 = y.row(0).iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        let var: f64 = y.row(0).iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn linear_with_divisor() {
        let mut l = Linear::new(Mat::new(1, 2, vec![2.0, 3.0]).unwrap(), vec![1.0]).unwrap();
        l.input_divisor = Some(vec![2.0, 1.0]);
        let y = l
            .forward(&Mat::new(1, 2, vec![4.0, 1.0]).unwrap(), Exec::Serial)
            .unwrap();
        assert_eq!(y.data(), &[2.0 * 2.0 + 3.0 + 1.0]);
        assert_eq!(l.input_channel_absmax(), vec![2.0, 3.0]);
    }

    #[test]
    fn softmax_masks() {
        let mut r = vec![1.0, 1.0, 5.0];
        masked_softmax(&mut r, 2);
        assert_eq!(r, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
    }
}
