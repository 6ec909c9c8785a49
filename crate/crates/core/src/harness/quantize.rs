//! Quantization plans and the driver that turns a full-precision model into
//! a fake-quantized one.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calibrate::{collect_channel_absmax, collect_minmax, GroupAxis, MinMaxStats};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::formats::{Format, QParams, QuantSpec, Scheme, SchemeGranularity, StorageFormat};
use crate::gptq::{
    gptq_quantize_layer, prepare_inverse, rtn_quantize, GptqConfig, HessianState, WeightQuantizer, DEFAULT_B1,
    DEFAULT_DAMPING,
};
use crate::nn::Linear;
use crate::smooth::{smooth_model, SmoothOptions, DEFAULT_ALPHA};
use crate::tensor::Mat;

use super::model::{ActQuant, ActQuantizers, GptModel, Observer, Operand, Site};

/// Formats of a site's two operands. For linear sites `act` is the input
/// activation and `wgt` the weight; for attention products they are the
/// left and right activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperandFormats {
    pub act: Format,
    pub wgt: Format,
}

impl OperandFormats {
    pub const FP16: OperandFormats = OperandFormats {
        act: Format::Fp16,
        wgt: Format::Fp16,
    };
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

/// Everything that decides how a model is quantized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantPlan {
    /// Every linear layer, including the language-model head.
    pub linear: OperandFormats,
    /// Query × key-transpose.
    pub qk: OperandFormats,
    /// Attention probabilities × values.
    pub pv: OperandFormats,
    #[serde(default)]
    pub sq_aw: bool,
    #[serde(default)]
    pub sq_aa: bool,
    #[serde(default)]
    pub gptq: bool,
    /// How INT-i operands are grouped and scaled.
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub b1: Option<usize>,
    #[serde(default)]
    pub b2: Option<usize>,
    /// Re-derive per-block fixed-point weight parameters during GPTQ instead
    /// of freezing them from the unquantized weights.
    #[serde(default)]
    pub rederive_qparams: bool,
}

impl Default for QuantPlan {
    fn default() -> Self {
        QuantPlan::full_precision()
    }
}

impl QuantPlan {
    pub fn full_precision() -> Self {
        QuantPlan {
            linear: OperandFormats::FP16,
            qk: OperandFormats::FP16,
            pv: OperandFormats::FP16,
            sq_aw: false,
            sq_aa: false,
            gptq: false,
            scheme: Scheme::default(),
            alpha: DEFAULT_ALPHA,
            b1: None,
            b2: None,
            rederive_qparams: false,
        }
    }

    /// Weights in `wgt`; every activation operand, including both sides of
    /// the attention products, in `act`.
    pub fn uniform(act: Format, wgt: Format) -> Self {
        let aa = OperandFormats { act, wgt: act };
        QuantPlan {
            linear: OperandFormats { act, wgt },
            qk: aa,
            pv: aa,
            ..QuantPlan::full_precision()
        }
    }

    pub fn formats(&self, site: Site) -> OperandFormats {
        match site {
            Site::Qk(_) => self.qk,
            Site::Pv(_) => self.pv,
            _ => self.linear,
        }
    }

    pub fn format(&self, site: Site, operand: Operand) -> Format {
        let f = self.formats(site);
        match operand {
            Operand::Lhs => f.act,
            Operand::Rhs => f.wgt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        for f in [
            self.linear.act,
            self.linear.wgt,
            self.qk.act,
            self.qk.wgt,
            self.pv.act,
            self.pv.wgt,
        ] {
            if let Format::Int(bits) = f {
                self.scheme.spec(bits, 0).map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    /// Weight storage of a linear layer under this plan.
    pub fn weight_storage(&self) -> Result<StorageFormat> {
        Ok(match self.linear.wgt {
            Format::Fp16 => StorageFormat::Fp16,
            Format::Mx(spec) => StorageFormat::Mx(spec),
            // weight channels are output rows
            Format::Int(bits) => StorageFormat::Fixed(self.scheme.spec(bits, 0)?),
        })
    }

    fn gptq_config(&self, quantizer: WeightQuantizer) -> GptqConfig {
        let base = GptqConfig::new(quantizer);
        let b2 = self.b2.unwrap_or(base.b2);
        let b1 = self.b1.unwrap_or_else(|| DEFAULT_B1.div_ceil(b2) * b2);
        GptqConfig {
            damping: DEFAULT_DAMPING,
            ..base.with_blocks(b1, b2)
        }
    }
}

/// How an INT-i activation operand gets its parameters.
enum ActSource {
    Static(QuantSpec),
    Dynamic(QuantSpec),
}

fn int_act_source(plan: &QuantPlan, site: Site, bits: u8) -> Result<ActSource> {
    let scheme = plan.scheme;
    Ok(match (scheme.granularity, site.is_linear()) {
        (SchemeGranularity::PerBlock(_), _) => ActSource::Dynamic(scheme.spec(bits, 1)?),
        (SchemeGranularity::PerChannel, true) => ActSource::Static(scheme.spec(bits, 1)?),
        // attention operands have no fixed channel set, so they share one range
        (SchemeGranularity::PerChannel, false) | (SchemeGranularity::PerTensor, _) => ActSource::Static(
            Scheme {
                granularity: SchemeGranularity::PerTensor,
                ..scheme
            }
            .spec(bits, 1)?,
        ),
    })
}

/// Activation operands of a model with `n_layer` blocks in forward order.
pub fn activation_operands(n_layer: usize) -> Vec<(Site, Operand)> {
    let mut out = Vec::new();
    for l in 0..n_layer {
        for site in [
            Site::Qkv(l),
            Site::Qk(l),
            Site::Pv(l),
            Site::AttnProj(l),
            Site::Fc(l),
            Site::MlpProj(l),
        ] {
            out.push((site, Operand::Lhs));
            if !site.is_linear() {
                out.push((site, Operand::Rhs));
            }
        }
    }
    out.push((Site::LmHead, Operand::Lhs));
    out
}

/// Operands whose quantizers need calibrated ranges, with their grouping.
pub fn static_targets(plan: &QuantPlan, n_layer: usize) -> Result<Vec<((Site, Operand), GroupAxis)>> {
    let mut out = Vec::new();
    for (site, op) in activation_operands(n_layer) {
        if let Format::Int(bits) = plan.format(site, op) {
            if let ActSource::Static(spec) = int_act_source(plan, site, bits)? {
                let axis = match spec.granularity {
                    crate::formats::Granularity::PerChannel { axis } => GroupAxis::PerChannel { axis },
                    _ => GroupAxis::PerTensor,
                };
                out.push(((site, op), axis));
            }
        }
    }
    Ok(out)
}

/// Builds every activation quantizer of the plan. `static_params` supplies
/// calibrated parameters for each static operand.
pub fn build_act_quantizers(
    plan: &QuantPlan,
    n_layer: usize,
    mut static_params: impl FnMut(Site, Operand, &QuantSpec) -> Result<QParams>,
) -> Result<ActQuantizers> {
    let mut map = BTreeMap::new();
    for (site, op) in activation_operands(n_layer) {
        let q = match plan.format(site, op) {
            Format::Fp16 => continue,
            Format::Mx(spec) => ActQuant::Mx(spec),
            Format::Int(bits) => match int_act_source(plan, site, bits)? {
                ActSource::Dynamic(spec) => ActQuant::Dynamic(spec),
                ActSource::Static(spec) => ActQuant::Static {
                    qparams: static_params(site, op, &spec)?,
                    spec,
                },
            },
        };
        map.insert((site, op), q);
    }
    Ok(map)
}

fn weight_quantizer(layer: &Linear, plan: &QuantPlan, storage: StorageFormat) -> Result<Option<WeightQuantizer>> {
    Ok(match storage {
        StorageFormat::Fp16 => None,
        StorageFormat::Mx(spec) => Some(WeightQuantizer::Mx(spec)),
        StorageFormat::Fixed(spec) => Some(WeightQuantizer::fixed_from_weights(
            &layer.weight,
            spec,
            plan.rederive_qparams,
        )?),
    })
}

fn round_weights(layer: &mut Linear, plan: &QuantPlan, hessian: Option<&HessianState>, exec: Exec) -> Result<()> {
    let storage = plan.weight_storage()?;
    if let Some(quantizer) = weight_quantizer(layer, plan, storage)? {
        layer.weight = match hessian {
            Some(h) => {
                let ws = prepare_inverse(h, DEFAULT_DAMPING)?;
                gptq_quantize_layer(&layer.weight, &ws, &plan.gptq_config(quantizer), exec)?
            }
            None => rtn_quantize(&layer.weight, &quantizer)?,
        };
    }
    layer.format = Some(storage);
    Ok(())
}

/// Captures the input of one linear site.
struct Capture {
    site: Site,
    input: Option<Mat>,
}

impl Observer for Capture {
    fn observe(&mut self, site: Site, operand: Operand, x: &Mat) {
        if site == self.site && operand == Operand::Lhs {
            self.input = Some(x.clone());
        }
    }
}

/// Samples processed together when gathering layer inputs; bounds memory.
const CAPTURE_CHUNK: usize = 8;

fn site_hessian(model: &GptModel, site: Site, hidden: &[Mat], exec: Exec) -> Result<HessianState> {
    let dim = model.linear(site).expect("linear site").in_features();
    let mut state = HessianState::new(dim);
    for chunk in hidden.chunks(CAPTURE_CHUNK) {
        let inputs = exec.try_map(chunk.len(), |i| {
            let mut cap = Capture { site, input: None };
            match site {
                Site::LmHead => model.head(&chunk[i], &mut cap)?,
                Site::Qkv(l) | Site::AttnProj(l) | Site::Fc(l) | Site::MlpProj(l) => {
                    model.forward_block(l, &chunk[i], &mut cap)?
                }
                Site::Qk(_) | Site::Pv(_) => unreachable!("attention sites have no weights"),
            };
            cap.input
                .ok_or_else(|| Error::Calibration(format!("{site} was not reached")))
        })?;
        // merge in sample order so results do not depend on scheduling
        for x in &inputs {
            state.accumulate_rows(x, exec)?;
        }
    }
    Ok(state)
}

/// Quantizes every linear weight in forward order. With `gptq`, each
/// layer's Hessian comes from the inputs it receives in the partially
/// quantized model; `inspect` sees each Hessian before it is used.
pub fn quantize_weights(
    model: &mut GptModel,
    plan: &QuantPlan,
    samples: &[Vec<u32>],
    exec: Exec,
    inspect: &mut dyn FnMut(Site, &HessianState),
) -> Result<()> {
    let storage = plan.weight_storage()?;
    if !plan.gptq || storage == StorageFormat::Fp16 {
        for site in Site::linear_sites(model.config.n_layer) {
            round_weights(model.linear_mut(site).expect("linear site"), plan, None, exec)?;
        }
        return Ok(());
    }
    if samples.is_empty() {
        return Err(Error::Calibration("GPTQ needs calibration samples".into()));
    }
    let mut hidden = exec.try_map(samples.len(), |i| model.embed(&samples[i]))?;
    for l in 0..model.config.n_layer {
        for site in [Site::Qkv(l), Site::AttnProj(l), Site::Fc(l), Site::MlpProj(l)] {
            let h = site_hessian(model, site, &hidden, exec)?;
            inspect(site, &h);
            round_weights(model.linear_mut(site).expect("linear site"), plan, Some(&h), exec)?;
        }
        let m: &GptModel = model;
        hidden = exec.try_map(hidden.len(), |i| {
            m.forward_block(l, &hidden[i], &mut super::model::NoObserver)
        })?;
    }
    let h = site_hessian(model, Site::LmHead, &hidden, exec)?;
    inspect(Site::LmHead, &h);
    round_weights(&mut model.lm_head, plan, Some(&h), exec)
}

/// Runs the full pipeline on a full-precision model:
/// smoothing statistics, smoothing rewrites, fixed-point range calibration,
/// weight rounding (GPTQ or round-to-nearest), then activation quantizers.
pub fn quantize_model(model: &GptModel, plan: &QuantPlan, samples: &[Vec<u32>], exec: Exec) -> Result<GptModel> {
    plan.validate()?;
    let mut q = model.clone();
    q.act_quant.clear();

    if plan.sq_aw || plan.sq_aa {
        let stats = collect_channel_absmax(&q, samples, exec)?;
        smooth_model(
            &mut q,
            &stats,
            SmoothOptions {
                aw: plan.sq_aw,
                aa: plan.sq_aa,
                alpha: plan.alpha,
            },
        )?;
    }

    let targets = static_targets(plan, q.config.n_layer)?;
    let ranges: BTreeMap<(Site, Operand), MinMaxStats> = if targets.is_empty() {
        BTreeMap::new()
    } else {
        collect_minmax(&q, samples, &targets, exec)?
    };

    quantize_weights(&mut q, plan, samples, exec, &mut |_, _| {})?;

    q.act_quant = build_act_quantizers(plan, q.config.n_layer, |site, op, spec| {
        ranges
            .get(&(site, op))
            .ok_or_else(|| Error::Calibration(format!("no ranges for {site} {}", op.name())))?
            .qparams(spec)
    })?;
    q.plan = Some(plan.clone());
    Ok(q)
}
