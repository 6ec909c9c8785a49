use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::formats::{fixed_fake_quantize, mx_fake_quantize, qparams_from_data, MxSpec, QParams, QuantSpec};
use crate::nn::{gelu, masked_softmax, LayerNorm, Linear};
use crate::tensor::Mat;

use super::quantize::QuantPlan;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Architecture {
    /// GPT-2 decoder whose checkpoint linears use the `[in, out]` Conv1D layout.
    #[default]
    #[serde(rename = "gpt2-conv1d")]
    Gpt2Conv1d,
}

#[derive(Deserialize)]
struct RawConfig {
    n_layer: usize,
    n_head: usize,
    #[serde(alias = "n_embd")]
    d_model: usize,
    #[serde(default, alias = "n_inner")]
    d_ff: Option<usize>,
    #[serde(alias = "vocab")]
    vocab_size: usize,
    #[serde(default, alias = "n_positions")]
    max_seq_len: Option<usize>,
    /// Checkpoint configs often carry both `n_positions` and `n_ctx`.
    #[serde(default)]
    n_ctx: Option<usize>,
    #[serde(default, alias = "architecture_tag")]
    architecture: Architecture,
    #[serde(default = "default_eps", alias = "layer_norm_epsilon")]
    layer_norm_eps: f64,
}

fn default_eps() -> f64 {
    1e-5
}

/// Shape of a GPT-2 family model. Accepts Hugging Face key names
/// such as `n_embd` or `n_positions` when read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawConfig")]
pub struct ModelConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub architecture: Architecture,
    pub layer_norm_eps: f64,
}

impl TryFrom<RawConfig> for ModelConfig {
    type Error = Error;

    fn try_from(r: RawConfig) -> Result<Self> {
        let c = ModelConfig {
            n_layer: r.n_layer,
            n_head: r.n_head,
            d_model: r.d_model,
            d_ff: r.d_ff.unwrap_or(4 * r.d_model),
            vocab_size: r.vocab_size,
            max_seq_len: r
                .max_seq_len
                .or(r.n_ctx)
                .ok_or_else(|| Error::Config("config needs max_seq_len, n_positions or n_ctx".into()))?,
            architecture: r.architecture,
            layer_norm_eps: r.layer_norm_eps,
        };
        c.validate()?;
        Ok(c)
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_head == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_head) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_head {}",
                self.d_model, self.n_head
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.d_ff == 0 {
            return Err(Error::Config(
                "vocab_size, max_seq_len and d_ff must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_head
    }
}

/// A matrix multiplication the quantization plan can target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    Qkv(usize),
    AttnProj(usize),
    Fc(usize),
    MlpProj(usize),
    LmHead,
    /// Query × key-transpose inside attention.
    Qk(usize),
    /// Attention probabilities × value.
    Pv(usize),
}

impl Site {
    pub fn is_linear(&self) -> bool {
        !matches!(self, Site::Qk(_) | Site::Pv(_))
    }

    /// Linear sites in forward order.
    pub fn linear_sites(n_layer: usize) -> Vec<Site> {
        let mut v: Vec<Site> = (0..n_layer)
            .flat_map(|l| [Site::Qkv(l), Site::AttnProj(l), Site::Fc(l), Site::MlpProj(l)])
            .collect();
        v.push(Site::LmHead);
        v
    }

    pub fn attention_sites(n_layer: usize) -> Vec<Site> {
        (0..n_layer).flat_map(|l| [Site::Qk(l), Site::Pv(l)]).collect()
    }

    pub fn parse(name: &str) -> Option<Site> {
        if name == "lm_head" {
            return Some(Site::LmHead);
        }
        let rest = name.strip_prefix("h.")?;
        let (layer, tail) = rest.split_once('.')?;
        let l: usize = layer.parse().ok()?;
        Some(match tail {
            "attn.c_attn" => Site::Qkv(l),
            "attn.c_proj" => Site::AttnProj(l),
            "mlp.c_fc" => Site::Fc(l),
            "mlp.c_proj" => Site::MlpProj(l),
            "attn.qk" => Site::Qk(l),
            "attn.pv" => Site::Pv(l),
            _ => return None,
        })
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Qkv(l) => write!(f, "h.{l}.attn.c_attn"),
            Site::AttnProj(l) => write!(f, "h.{l}.attn.c_proj"),
            Site::Fc(l) => write!(f, "h.{l}.mlp.c_fc"),
            Site::MlpProj(l) => write!(f, "h.{l}.mlp.c_proj"),
            Site::LmHead => f.write_str("lm_head"),
            Site::Qk(l) => write!(f, "h.{l}.attn.qk"),
            Site::Pv(l) => write!(f, "h.{l}.attn.pv"),
        }
    }
}

/// Left or right operand of a site's product. For linear sites the left
/// operand is the activation and the right one the weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Operand {
    Lhs,
    Rhs,
}

impl Operand {
    pub fn name(self) -> &'static str {
        match self {
            Operand::Lhs => "lhs",
            Operand::Rhs => "rhs",
        }
    }
}

/// Fake quantizer applied to an activation operand at run time.
#[derive(Clone, Debug, PartialEq)]
pub enum ActQuant {
    /// Dynamic MX: block scales come from the live tensor.
    Mx(MxSpec),
    /// Static fixed point with calibrated parameters.
    Static { spec: QuantSpec, qparams: QParams },
    /// Fixed point with parameters derived from the live tensor (per-block).
    Dynamic(QuantSpec),
}

impl ActQuant {
    /// Quantize-dequantize `x` in place, grouping along its last axis.
    pub fn apply(&self, x: &mut Mat) -> Result<()> {
        let shape = [x.rows(), x.cols()];
        match self {
            ActQuant::Mx(spec) => {
                let cols = x.cols();
                mx_fake_quantize(x.data_mut(), cols, spec);
                Ok(())
            }
            ActQuant::Static { spec, qparams } => fixed_fake_quantize(x.data_mut(), &shape, qparams, spec),
            ActQuant::Dynamic(spec) => {
                let qp = qparams_from_data(x.data(), &shape, spec)?;
                fixed_fake_quantize(x.data_mut(), &shape, &qp, spec)
            }
        }
    }
}

pub type ActQuantizers = BTreeMap<(Site, Operand), ActQuant>;

/// Receives every activation operand the forward pass feeds into a site,
/// before any fake quantization.
///
/// Linear inputs arrive as `[tokens, in_features]` after any explicit
/// smoothing divide. `Qk` operands arrive once as `[tokens, d_model]` with the
/// heads concatenated; `Pv` operands arrive once per head as `[tokens, tokens]`
/// probabilities and `[tokens, head_dim]` values.
pub trait Observer {
    fn observe(&mut self, site: Site, operand: Operand, x: &Mat);
}

pub struct NoObserver;

impl Observer for NoObserver {
    fn observe(&mut self, _: Site, _: Operand, _: &Mat) {}
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln_1: LayerNorm,
    pub attn_qkv: Linear,
    pub attn_proj: Linear,
    pub ln_2: LayerNorm,
    pub fc: Linear,
    pub mlp_proj: Linear,
}

/// GPT-2 decoder evaluated in f64, with optional fake quantization at every
/// targeted site.
#[derive(Clone, Debug, PartialEq)]
pub struct GptModel {
    pub config: ModelConfig,
    pub wte: Mat,
    pub wpe: Mat,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    /// Tied to `wte` at load; quantized as its own linear site.
    pub lm_head: Linear,
    pub act_quant: ActQuantizers,
    /// Smoothing factors of every rewritten site, keyed by site.
    pub smoothing: BTreeMap<Site, Vec<f64>>,
    /// The plan this model was quantized with, if any.
    pub plan: Option<QuantPlan>,
}

/// Anything that maps a token sequence to next-token logits.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    /// `[tokens.len(), vocab_size]` logits.
    fn logits(&self, tokens: &[u32]) -> Result<Mat>;
}

impl GptModel {
    pub fn linear(&self, site: Site) -> Option<&Linear> {
        match site {
            Site::Qkv(l) => self.blocks.get(l).map(|b| &b.attn_qkv),
            Site::AttnProj(l) => self.blocks.get(l).map(|b| &b.attn_proj),
            Site::Fc(l) => self.blocks.get(l).map(|b| &b.fc),
            Site::MlpProj(l) => self.blocks.get(l).map(|b| &b.mlp_proj),
            Site::LmHead => Some(&self.lm_head),
            Site::Qk(_) | Site::Pv(_) => None,
        }
    }

    pub fn linear_mut(&mut self, site: Site) -> Option<&mut Linear> {
        match site {
            Site::Qkv(l) => self.blocks.get_mut(l).map(|b| &mut b.attn_qkv),
            Site::AttnProj(l) => self.blocks.get_mut(l).map(|b| &mut b.attn_proj),
            Site::Fc(l) => self.blocks.get_mut(l).map(|b| &mut b.fc),
            Site::MlpProj(l) => self.blocks.get_mut(l).map(|b| &mut b.mlp_proj),
            Site::LmHead => Some(&mut self.lm_head),
            Site::Qk(_) | Site::Pv(_) => None,
        }
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token {t} out of range for vocab {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Token plus position embeddings, `[tokens, d_model]`.
    pub fn embed(&self, tokens: &[u32]) -> Result<Mat> {
        self.check_tokens(tokens)?;
        let d = self.config.d_model;
        let mut h = Mat::zeros(tokens.len(), d);
        for (p, &t) in tokens.iter().enumerate() {
            let e = self.wte.row(t as usize);
            let pos = self.wpe.row(p);
            for ((o, a), b) in h.row_mut(p).iter_mut().zip(e).zip(pos) {
                *o = a + b;
            }
        }
        Ok(h)
    }

    fn quantize_operand(&self, site: Site, operand: Operand, x: &mut Mat) -> Result<()> {
        if let Some(q) = self.act_quant.get(&(site, operand)) {
            q.apply(x)?;
        }
        Ok(())
    }

    fn linear_site(&self, site: Site, x: &Mat, obs: &mut dyn Observer) -> Result<Mat> {
        let layer = self.linear(site).expect("linear site");
        let mut x = layer.prepare_input(x);
        obs.observe(site, Operand::Lhs, &x);
        self.quantize_operand(site, Operand::Lhs, &mut x)?;
        layer.apply(&x, Exec::default())
    }

    fn attention(&self, layer: usize, qkv: &Mat, obs: &mut dyn Observer) -> Result<Mat> {
        let t = qkv.rows();
        let d = self.config.d_model;
        let nh = self.config.n_head;
        let hd = self.config.head_dim();
        let q_all = qkv.slice(0..t, 0..d);
        let k_all = qkv.slice(0..t, d..2 * d);
        obs.observe(Site::Qk(layer), Operand::Lhs, &q_all);
        obs.observe(Site::Qk(layer), Operand::Rhs, &k_all);
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        let mut merged = Mat::zeros(t, d);
        for h in 0..nh {
            let mut q = qkv.slice(0..t, h * hd..(h + 1) * hd);
            let mut k = qkv.slice(0..t, d + h * hd..d + (h + 1) * hd);
            let v = qkv.slice(0..t, 2 * d + h * hd..2 * d + (h + 1) * hd);
            self.quantize_operand(Site::Qk(layer), Operand::Lhs, &mut q)?;
            self.quantize_operand(Site::Qk(layer), Operand::Rhs, &mut k)?;
            let mut p = q.matmul_nt_with(&k, Exec::Serial)?;
            for i in 0..t {
                let row = p.row_mut(i);
                row.iter_mut().for_each(|s| *s *= inv_sqrt);
                masked_softmax(row, i + 1);
            }
            obs.observe(Site::Pv(layer), Operand::Lhs, &p);
            obs.observe(Site::Pv(layer), Operand::Rhs, &v);
            self.quantize_operand(Site::Pv(layer), Operand::Lhs, &mut p)?;
            // value blocks run along the contraction (token) axis
            let mut vt = v.transpose();
            self.quantize_operand(Site::Pv(layer), Operand::Rhs, &mut vt)?;
            let o = p.matmul_nt_with(&vt, Exec::Serial)?;
            for i in 0..t {
                merged.row_mut(i)[h * hd..(h + 1) * hd].copy_from_slice(o.row(i));
            }
        }
        Ok(merged)
    }

    /// One transformer block on hidden states `h`.
    pub fn forward_block(&self, layer: usize, h: &Mat, obs: &mut dyn Observer) -> Result<Mat> {
        let b = &self.blocks[layer];
        let a = b.ln_1.forward(h);
        let qkv = self.linear_site(Site::Qkv(layer), &a, obs)?;
        let merged = self.attention(layer, &qkv, obs)?;
        let attn_out = self.linear_site(Site::AttnProj(layer), &merged, obs)?;
        let mut h1 = h.clone();
        h1.data_mut().iter_mut().zip(attn_out.data()).for_each(|(x, y)| *x += y);
        let m = b.ln_2.forward(&h1);
        let mut f = self.linear_site(Site::Fc(layer), &m, obs)?;
        f.data_mut().iter_mut().for_each(|x| *x = gelu(*x));
        let f2 = self.linear_site(Site::MlpProj(layer), &f, obs)?;
        h1.data_mut().iter_mut().zip(f2.data()).for_each(|(x, y)| *x += y);
        Ok(h1)
    }

    /// Final norm and language-model head.
    pub fn head(&self, h: &Mat, obs: &mut dyn Observer) -> Result<Mat> {
        let x = self.ln_f.forward(h);
        self.linear_site(Site::LmHead, &x, obs)
    }

    pub fn forward_with(&self, tokens: &[u32], obs: &mut dyn Observer) -> Result<Mat> {
        let mut h = self.embed(tokens)?;
        for l in 0..self.blocks.len() {
            h = self.forward_block(l, &h, obs)?;
        }
        self.head(&h, obs)
    }

    pub fn forward_logits(&self, tokens: &[u32]) -> Result<Mat> {
        self.forward_with(tokens, &mut NoObserver)
    }

    /// Hidden states entering block `layer`.
    pub fn hidden_before(&self, layer: usize, tokens: &[u32]) -> Result<Mat> {
        let mut h = self.embed(tokens)?;
        for l in 0..layer {
            h = self.forward_block(l, &h, &mut NoObserver)?;
        }
        Ok(h)
    }
}

impl LanguageModel for GptModel {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn logits(&self, tokens: &[u32]) -> Result<Mat> {
        self.forward_logits(tokens)
    }
}
