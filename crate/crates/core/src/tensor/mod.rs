//! Dense tensors, deterministic randomness, the small amount of linear
//! algebra the quantizers need, and the NWT weight file format.

mod linalg;
mod nwt;
mod rng;

pub use linalg::Mat;
pub use nwt::write_atomic;
pub use nwt::{decode_nwt, encode_nwt, read_nwt, write_nwt, TensorMap, NWT_MAGIC};
pub use rng::Rng;

use half::f16;

use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F16,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "f32" => Some(DType::F32),
            "f16" => Some(DType::F16),
            _ => None,
        }
    }
}

/// Row-major dense tensor. FP16 tensors keep their values widened to `f32`
/// in memory; every stored value is exactly representable in half precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::shape(format!("dimensions must be positive, got {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::shape(format!(
            "shape {shape:?} holds {numel} elements but data has {len}"
        )));
    }
    Ok(())
}

fn check_finite(data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Domain(format!("non-finite value at flat index {i}"))),
        None => Ok(()),
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        check_finite(&data)?;
        Ok(Tensor {
            shape,
            dtype: DType::F32,
            data,
        })
    }

    /// Builds an FP16 tensor, rounding each value to the nearest half.
    pub fn new_f16(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        let data: Vec<f32> = data.into_iter().map(|v| f16::from_f32(v).to_f32()).collect();
        check_finite(&data)?;
        Ok(Tensor {
            shape,
            dtype: DType::F16,
            data,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::new(vec![n, n], data)
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn(shape: Vec<usize>, std: f32, rng: &mut Rng) -> Result<Self> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() as f32 * std).collect();
        Tensor::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Length of the last axis (1 for a scalar).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape, self.data.len())?;
        Ok(Tensor { shape, ..self })
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        match dtype {
            DType::F32 => Tensor { dtype, ..self.clone() },
            DType::F16 => Tensor {
                shape: self.shape.clone(),
                dtype,
                data: self.data.iter().map(|&v| f16::from_f32(v).to_f32()).collect(),
            },
        }
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_with(other, Exec::default())
    }

    /// FP32 product with a sequential sum over the inner dimension.
    pub fn matmul_with(&self, other: &Tensor, exec: Exec) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        if self.dtype != other.dtype {
            return Err(Error::shape(format!(
                "matmul dtypes differ: {} x {}",
                self.dtype.name(),
                other.dtype.name()
            )));
        }
        let a = &self.data;
        let b = &other.data;
        let mut out = vec![0.0f32; m * n];
        exec.for_each_chunk(&mut out, n, |i, row| {
            let arow = &a[i * k..(i + 1) * k];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        });
        Tensor::new(vec![m, n], out)
    }
}
