//! Model files: an NWT tensor archive plus a JSON config sidecar.
//!
//! Checkpoint linears use the Conv1D `[in, out]` layout on disk and are
//! transposed to `[out, in]` on load. A quantized model additionally stores:
//!
//! - smoothing vectors as `smooth/<site>/s`
//! - calibrated activation parameters as `actq/<site>/<lhs|rhs>/{scale,zero_point}`
//! - its plan in the sidecar's `quantization` field
//!
//! Weights are saved dequantized.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::QParams;
use crate::nn::{LayerNorm, Linear};
use crate::tensor::{read_nwt, write_atomic, write_nwt, Mat, Tensor, TensorMap};

use super::model::{ActQuant, Block, GptModel, ModelConfig, Operand, Site};
use super::quantize::{build_act_quantizers, QuantPlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    #[serde(flatten)]
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantization: Option<QuantPlan>,
}

pub fn read_sidecar(path: impl AsRef<Path>) -> Result<ModelSidecar> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

pub fn write_sidecar(sidecar: &ModelSidecar, path: impl AsRef<Path>) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(sidecar)?;
    json.push(b'\n');
    write_atomic(path.as_ref(), &json)
}

/// Pulls named tensors out of a map, remembering what was consumed so that
/// leftovers can be reported.
struct Source<'a> {
    tensors: &'a TensorMap,
    used: BTreeSet<&'a str>,
}

impl<'a> Source<'a> {
    fn get(&mut self, name: &str, shape: &[usize]) -> Result<&'a Tensor> {
        let (key, t) = self
            .tensors
            .get_key_value(name)
            .ok_or_else(|| Error::Input(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(Error::shape(format!(
                "{name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        self.used.insert(key);
        Ok(t)
    }

    fn has(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    fn vec(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        Ok(self.get(name, &[len])?.data().iter().map(|&v| v as f64).collect())
    }

    fn mat(&mut self, name: &str, rows: usize, cols: usize) -> Result<Mat> {
        Mat::from_tensor(self.get(name, &[rows, cols])?)
    }

    fn norm(&mut self, prefix: &str, d: usize, eps: f64) -> Result<LayerNorm> {
        LayerNorm::new(
            self.vec(&format!("{prefix}.weight"), d)?,
            self.vec(&format!("{prefix}.bias"), d)?,
            eps,
        )
    }

    /// Conv1D linear stored `[in, out]`.
    fn conv1d(&mut self, prefix: &str, inp: usize, out: usize) -> Result<Linear> {
        let w = self.mat(&format!("{prefix}.weight"), inp, out)?.transpose();
        Linear::new(w, self.vec(&format!("{prefix}.bias"), out)?)
    }
}

fn smooth_name(site: Site) -> String {
    format!("smooth/{site}/s")
}

fn actq_name(site: Site, op: Operand, field: &str) -> String {
    format!("actq/{site}/{}/{field}", op.name())
}

/// Builds a model from named tensors. Every tensor must be consumed.
pub fn model_from_tensors(config: ModelConfig, tensors: &TensorMap, plan: Option<QuantPlan>) -> Result<GptModel> {
    config.validate()?;
    let (d, ff, v) = (config.d_model, config.d_ff, config.vocab_size);
    let eps = config.layer_norm_eps;
    let mut src = Source {
        tensors,
        used: BTreeSet::new(),
    };
    let wte = src.mat("wte.weight", v, d)?;
    let wpe = src.mat("wpe.weight", config.max_seq_len, d)?;
    let mut blocks = Vec::with_capacity(config.n_layer);
    for i in 0..config.n_layer {
        let p = format!("h.{i}");
        blocks.push(Block {
            ln_1: src.norm(&format!("{p}.ln_1"), d, eps)?,
            attn_qkv: src.conv1d(&format!("{p}.attn.c_attn"), d, 3 * d)?,
            attn_proj: src.conv1d(&format!("{p}.attn.c_proj"), d, d)?,
            ln_2: src.norm(&format!("{p}.ln_2"), d, eps)?,
            fc: src.conv1d(&format!("{p}.mlp.c_fc"), d, ff)?,
            mlp_proj: src.conv1d(&format!("{p}.mlp.c_proj"), ff, d)?,
        });
    }
    let ln_f = src.norm("ln_f", d, eps)?;
    let head = if src.has("lm_head.weight") {
        src.mat("lm_head.weight", v, d)?
    } else {
        wte.clone()
    };
    let mut model = GptModel {
        config,
        wte,
        wpe,
        blocks,
        ln_f,
        lm_head: Linear::new(head, Vec::new())?,
        act_quant: BTreeMap::new(),
        smoothing: BTreeMap::new(),
        plan: None,
    };

    let n_layer = model.config.n_layer;
    let mut smooth_sites: Vec<Site> = Site::linear_sites(n_layer);
    smooth_sites.extend(Site::attention_sites(n_layer));
    for site in smooth_sites {
        let name = smooth_name(site);
        if !src.has(&name) {
            continue;
        }
        let len = src.tensors[&name].numel();
        let s = src.vec(&name, len)?;
        if let Site::AttnProj(_) | Site::MlpProj(_) = site {
            let layer = model.linear_mut(site).expect("linear site");
            if s.len() != layer.in_features() {
                return Err(Error::shape(format!(
                    "{name} has {} entries for {} inputs",
                    s.len(),
                    layer.in_features()
                )));
            }
            layer.input_divisor = Some(s.clone());
        }
        model.smoothing.insert(site, s);
    }

    if let Some(plan) = plan {
        plan.validate()?;
        let storage = plan.weight_storage()?;
        for site in Site::linear_sites(n_layer) {
            model.linear_mut(site).expect("linear site").format = Some(storage);
        }
        model.act_quant = build_act_quantizers(&plan, n_layer, |site, op, spec| {
            let groups = match spec.granularity {
                crate::formats::Granularity::PerChannel { .. } => {
                    model.linear(site).map(|l| l.in_features()).unwrap_or(1)
                }
                _ => 1,
            };
            let scales = src.vec(&actq_name(site, op, "scale"), groups)?;
            let zero_points = src
                .vec(&actq_name(site, op, "zero_point"), groups)?
                .into_iter()
                .map(|z| z as i32)
                .collect();
            Ok(QParams { scales, zero_points })
        })?;
        model.plan = Some(plan);
    }

    if let Some(extra) = tensors.keys().find(|k| !src.used.contains(k.as_str())) {
        return Err(Error::Input(format!("unexpected tensor {extra}")));
    }
    Ok(model)
}

fn f32_tensor(shape: Vec<usize>, data: &[f64]) -> Result<Tensor> {
    Tensor::new(shape, data.iter().map(|&v| v as f32).collect())
}

/// Named FP32 tensors of a model, in checkpoint orientation.
pub fn model_to_tensors(model: &GptModel) -> Result<TensorMap> {
    let mut out = TensorMap::new();
    let put_mat = |out: &mut TensorMap, name: String, m: &Mat| -> Result<()> {
        out.insert(name, f32_tensor(vec![m.rows(), m.cols()], m.data())?);
        Ok(())
    };
    let put_vec = |out: &mut TensorMap, name: String, v: &[f64]| -> Result<()> {
        out.insert(name, f32_tensor(vec![v.len()], v)?);
        Ok(())
    };
    let put_norm = |out: &mut TensorMap, p: &str, ln: &LayerNorm| -> Result<()> {
        put_vec(out, format!("{p}.weight"), &ln.gamma)?;
        put_vec(out, format!("{p}.bias"), &ln.beta)
    };
    put_mat(&mut out, "wte.weight".into(), &model.wte)?;
    put_mat(&mut out, "wpe.weight".into(), &model.wpe)?;
    for (i, b) in model.blocks.iter().enumerate() {
        let p = format!("h.{i}");
        put_norm(&mut out, &format!("{p}.ln_1"), &b.ln_1)?;
        put_norm(&mut out, &format!("{p}.ln_2"), &b.ln_2)?;
        for (name, layer) in [
            ("attn.c_attn", &b.attn_qkv),
            ("attn.c_proj", &b.attn_proj),
            ("mlp.c_fc", &b.fc),
            ("mlp.c_proj", &b.mlp_proj),
        ] {
            put_mat(&mut out, format!("{p}.{name}.weight"), &layer.weight.transpose())?;
            put_vec(&mut out, format!("{p}.{name}.bias"), &layer.bias)?;
        }
    }
    put_norm(&mut out, "ln_f", &model.ln_f)?;
    if model.lm_head.weight != model.wte {
        put_mat(&mut out, "lm_head.weight".into(), &model.lm_head.weight)?;
    }
    for (site, s) in &model.smoothing {
        put_vec(&mut out, smooth_name(*site), s)?;
    }
    for ((site, op), q) in &model.act_quant {
        if let ActQuant::Static { qparams, .. } = q {
            put_vec(&mut out, actq_name(*site, *op, "scale"), &qparams.scales)?;
            let zp: Vec<f64> = qparams.zero_points.iter().map(|&z| z as f64).collect();
            put_vec(&mut out, actq_name(*site, *op, "zero_point"), &zp)?;
        }
    }
    Ok(out)
}

pub fn load_model(nwt: impl AsRef<Path>, config: impl AsRef<Path>) -> Result<GptModel> {
    let sidecar = read_sidecar(config)?;
    model_from_tensors(sidecar.config, &read_nwt(nwt)?, sidecar.quantization)
}

pub fn save_model(model: &GptModel, nwt: impl AsRef<Path>, config: impl AsRef<Path>) -> Result<()> {
    write_nwt(&model_to_tensors(model)?, nwt)?;
    write_sidecar(
        &ModelSidecar {
            config: model.config.clone(),
            quantization: model.plan.clone(),
        },
        config,
    )
}

/// Tensor name inside a reference-logit file.
pub const REFERENCE_LOGITS: &str = "logits";

/// Reads `[tokens, vocab]` reference logits dumped by an external implementation.
pub fn read_reference_logits(path: impl AsRef<Path>) -> Result<Mat> {
    let tensors = read_nwt(path)?;
    let t = tensors
        .get(REFERENCE_LOGITS)
        .ok_or_else(|| Error::Input(format!("reference file has no {REFERENCE_LOGITS} tensor")))?;
    if t.rank() != 2 {
        return Err(Error::shape(format!("reference logits have shape {:?}", t.shape())));
    }
    Mat::from_tensor(t)
}

pub fn write_reference_logits(logits: &Mat, path: impl AsRef<Path>) -> Result<()> {
    let mut tensors = TensorMap::new();
    tensors.insert(
        REFERENCE_LOGITS.into(),
        f32_tensor(vec![logits.rows(), logits.cols()], logits.data())?,
    );
    write_nwt(&tensors, path)
}

/// Largest absolute difference between the model's logits on `tokens` and
/// a reference dump for the same tokens.
pub fn logit_parity(model: &GptModel, tokens: &[u32], reference: &Mat) -> Result<f64> {
    let logits = model.forward_logits(tokens)?;
    if (logits.rows(), logits.cols()) != (reference.rows(), reference.cols()) {
        return Err(Error::shape(format!(
            "model logits are {}x{}, reference {}x{}",
            logits.rows(),
            logits.cols(),
            reference.rows(),
            reference.cols()
        )));
    }
    Ok(logits
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}
