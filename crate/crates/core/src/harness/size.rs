//! Exact model size in bits.

use crate::error::{Error, Result};
use crate::formats::{StorageFormat, FP16_BITS};
use crate::nn::{LayerNorm, Linear};

use super::model::{GptModel, Site};

/// Bit counts of a model, split by role.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SizeReport {
    /// Every stored parameter, including shared scales and smoothing divisors.
    pub total_bits: u64,
    /// Linear-layer weights in their storage formats, counting the head as
    /// its own tensor.
    pub weight_bits: u64,
    /// Linear-layer weights as if kept at 16 bits.
    pub fp16_weight_bits: u64,
    /// Explicit per-channel smoothing divisors.
    pub smoothing_bits: u64,
}

fn fp16(n: usize) -> u64 {
    n as u64 * FP16_BITS
}

fn norm_bits(ln: &LayerNorm) -> u64 {
    fp16(ln.gamma.len() + ln.beta.len())
}

/// Storage format of a linear layer. Layers of a model that was never
/// quantized are FP16; a quantized model must assign every layer a format.
fn storage(model: &GptModel, site: Site, layer: &Linear) -> Result<StorageFormat> {
    match (layer.format, &model.plan) {
        (Some(f), _) => Ok(f),
        (None, None) => Ok(StorageFormat::Fp16),
        (None, Some(_)) => Err(Error::Accounting(format!("{site} has no storage format assigned"))),
    }
}

/// Sums every tensor's storage cost. Unquantized parameters count 16 bits
/// each. The head shares the token embedding while it stays at 16 bits and
/// is stored separately once quantized.
pub fn size_report(model: &GptModel) -> Result<SizeReport> {
    let mut r = SizeReport::default();
    let mut other = fp16(model.wte.data().len()) + fp16(model.wpe.data().len()) + norm_bits(&model.ln_f);
    for site in Site::linear_sites(model.config.n_layer) {
        let layer = model.linear(site).expect("linear site");
        let format = storage(model, site, layer)?;
        let bits = format.size_bits(&[layer.weight.rows(), layer.weight.cols()])?;
        r.weight_bits += bits;
        r.fp16_weight_bits += fp16(layer.weight.data().len());
        let shared = site == Site::LmHead && format == StorageFormat::Fp16;
        if !shared {
            other += bits;
        }
        other += fp16(layer.bias.len());
        if let Some(div) = &layer.input_divisor {
            r.smoothing_bits += fp16(div.len());
        }
    }
    for b in &model.blocks {
        other += norm_bits(&b.ln_1) + norm_bits(&b.ln_2);
    }
    r.total_bits = other + r.smoothing_bits;
    Ok(r)
}

pub fn model_size_bits(model: &GptModel) -> Result<u64> {
    Ok(size_report(model)?.total_bits)
}
