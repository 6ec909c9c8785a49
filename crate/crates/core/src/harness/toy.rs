//! Small randomly initialized models for tests and benches.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::nn::{LayerNorm, Linear};
use crate::tensor::{Mat, Rng};

use super::model::{Architecture, Block, GptModel, ModelConfig};

pub fn toy_config(n_layer: usize, d_model: usize, n_head: usize, vocab_size: usize, max_seq_len: usize) -> ModelConfig {
    ModelConfig {
        n_layer,
        n_head,
        d_model,
        d_ff: 4 * d_model,
        vocab_size,
        max_seq_len,
        architecture: Architecture::Gpt2Conv1d,
        layer_norm_eps: 1e-5,
    }
}

fn randn(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| std * rng.normal())
}

fn layer_norm(d: usize, rng: &mut Rng, eps: f64) -> LayerNorm {
    LayerNorm {
        gamma: (0..d).map(|_| 1.0 + 0.1 * rng.normal()).collect(),
        beta: (0..d).map(|_| 0.02 * rng.normal()).collect(),
        eps,
    }
}

fn linear(out: usize, inp: usize, rng: &mut Rng) -> Linear {
    let weight = randn(out, inp, 1.0 / (inp as f64).sqrt(), rng);
    let bias = (0..out).map(|_| 0.02 * rng.normal()).collect();
    Linear::new(weight, bias).expect("consistent toy shapes")
}

/// A GPT-2 shaped model with Gaussian weights and a head tied to `wte`.
pub fn random_model(config: &ModelConfig, rng: &mut Rng) -> Result<GptModel> {
    config.validate()?;
    let d = config.d_model;
    let eps = config.layer_norm_eps;
    let wte = randn(config.vocab_size, d, 1.0, rng);
    let wpe = randn(config.max_seq_len, d, 0.1, rng);
    let blocks = (0..config.n_layer)
        .map(|_| Block {
            ln_1: layer_norm(d, rng, eps),
            attn_qkv: linear(3 * d, d, rng),
            attn_proj: linear(d, d, rng),
            ln_2: layer_norm(d, rng, eps),
            fc: linear(config.d_ff, d, rng),
            mlp_proj: linear(d, config.d_ff, rng),
        })
        .collect();
    let ln_f = layer_norm(d, rng, eps);
    let lm_head = Linear::new(wte.clone(), Vec::new())?;
    Ok(GptModel {
        config: config.clone(),
        wte,
        wpe,
        blocks,
        ln_f,
        lm_head,
        act_quant: BTreeMap::new(),
        smoothing: BTreeMap::new(),
        plan: None,
    })
}

/// Multiplies the normalization gains feeding every block's attention and
/// MLP inputs by `factor` on the given channels, producing the systematic
/// activation outlier channels seen in trained transformers.
pub fn plant_outlier_channels(model: &mut GptModel, channels: &[usize], factor: f64) {
    for b in &mut model.blocks {
        for ln in [&mut b.ln_1, &mut b.ln_2] {
            for &c in channels {
                ln.gamma[c] *= factor;
                ln.beta[c] *= factor;
            }
        }
    }
}

/// Token sequence drawn autoregressively from `model` at temperature 1.
///
/// The context restarts every `max_seq_len` tokens, which is exactly the
/// context each prediction gets under non-overlapping perplexity windows.
pub fn sample_tokens(model: &GptModel, len: usize, rng: &mut Rng) -> Result<Vec<u32>> {
    let window = model.config.max_seq_len;
    let mut tokens = vec![rng.below(model.config.vocab_size) as u32];
    while tokens.len() < len {
        let start = (tokens.len() - 1) / window * window;
        let logits = model.forward_logits(&tokens[start..])?;
        let last = logits.row(logits.rows() - 1);
        let max = last.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let weights: Vec<f64> = last.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.uniform() * total;
        let mut pick = weights.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        tokens.push(pick as u32);
    }
    Ok(tokens)
}
