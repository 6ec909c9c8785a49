//! Run configuration: command-line flags layered over an optional JSON file.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;

use mxquant::formats::{Format, Scheme};
use mxquant::harness::{CorpusFormat, QuantPlan};

use crate::Failure;

/// Seed used when neither a flag nor the config file sets one.
pub const DEFAULT_SEED: u64 = 0x5eed_5eed;

/// Every run setting, all optional. Shared by the flag parser and the JSON
/// config file so the two layers have identical vocabularies.
#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFields {
    /// Model tensors (NWT)
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Model config JSON; defaults to the model path with a .json extension
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Evaluation corpus
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Calibration corpus, required whenever a plan quantizes anything
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Corpus encoding: text (one token per byte) or u32; inferred from the
    /// file extension when absent
    #[arg(long)]
    pub corpus_format: Option<String>,
    /// Seed for calibration sampling (default 0x5eed5eed)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluation and calibration window length; defaults to the model context
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Number of calibration windows
    #[arg(long)]
    pub samples: Option<usize>,
    /// Activation format such as MXINT8-16 or INT8 (default FP16)
    #[arg(long)]
    pub act_format: Option<Format>,
    /// Weight format such as MXINT4-16 or INT4 (default FP16)
    #[arg(long)]
    pub wgt_format: Option<Format>,
    /// Fixed-point scheme, for example per-channel-symmetric or per-block64-affine-e4m3fn
    #[arg(long)]
    pub scheme: Option<Scheme>,
    /// Fold SmoothQuant factors between activations and weights
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub sq_aw: Option<bool>,
    /// Smooth the query-key activation product
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub sq_aa: Option<bool>,
    /// Round weights with GPTQ instead of round-to-nearest
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub gptq: Option<bool>,
    /// GPTQ lazy-update block width in columns
    #[arg(long)]
    pub b1: Option<usize>,
    /// GPTQ micro-block width, quantized as one unit
    #[arg(long)]
    pub b2: Option<usize>,
    /// SmoothQuant migration strength
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Re-derive per-block fixed-point weight parameters inside GPTQ
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub rederive_qparams: Option<bool>,
    /// Worker threads for sweep cells
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output path
    #[arg(long)]
    pub out: Option<PathBuf>,
}

macro_rules! overlay {
    ($hi:expr, $lo:expr; $($f:ident),*) => {
        RunFields { $($f: $hi.$f.or($lo.$f),)* }
    };
}

impl RunFields {
    /// Field-wise `self` where set, otherwise `lower`.
    pub fn over(self, lower: RunFields) -> RunFields {
        overlay!(self, lower; model, config, corpus, calib, corpus_format, seed, seq_len, samples,
            act_format, wgt_format, scheme, sq_aw, sq_aa, gptq, b1, b2, alpha, rederive_qparams, jobs, out)
    }

    /// Resolves relative paths against `base`, the directory of the file they came from.
    pub fn rebase(mut self, base: &Path) -> RunFields {
        for p in [
            &mut self.model,
            &mut self.config,
            &mut self.corpus,
            &mut self.calib,
            &mut self.out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self
    }

    pub fn from_file(path: &Path) -> Result<RunFields, Failure> {
        let bytes = std::fs::read(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
        let fields: RunFields = serde_json::from_slice(&bytes)
            .map_err(|e| Failure::usage(format!("invalid config {}: {e}", path.display())))?;
        Ok(fields.rebase(path.parent().unwrap_or(Path::new("."))))
    }

    /// The quantization plan these fields describe, on top of full precision.
    pub fn plan(&self) -> Result<QuantPlan, Failure> {
        let fp = QuantPlan::full_precision();
        let act = self.act_format.unwrap_or(Format::Fp16);
        let wgt = self.wgt_format.unwrap_or(Format::Fp16);
        let plan = QuantPlan {
            sq_aw: self.sq_aw.unwrap_or(fp.sq_aw),
            sq_aa: self.sq_aa.unwrap_or(fp.sq_aa),
            gptq: self.gptq.unwrap_or(fp.gptq),
            scheme: self.scheme.unwrap_or(fp.scheme),
            alpha: self.alpha.unwrap_or(fp.alpha),
            b1: self.b1,
            b2: self.b2,
            rederive_qparams: self.rederive_qparams.unwrap_or(false),
            ..QuantPlan::uniform(act, wgt)
        };
        plan.validate().map_err(|e| Failure::usage(e.to_string()))?;
        Ok(plan)
    }
}

/// Input locations and evaluation settings after defaults are applied.
#[derive(Clone, Debug)]
pub struct Inputs {
    pub model: PathBuf,
    pub config: PathBuf,
    pub corpus: Option<PathBuf>,
    pub calib: Option<PathBuf>,
    corpus_format: Option<CorpusFormat>,
    pub seed: u64,
    pub seq_len: Option<usize>,
    pub samples: usize,
}

fn existing(path: PathBuf, what: &str) -> Result<PathBuf, Failure> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Failure::usage(format!("{what} {} does not exist", path.display())))
    }
}

impl Inputs {
    pub fn resolve(f: &RunFields) -> Result<Inputs, Failure> {
        let model = existing(
            f.model.clone().ok_or_else(|| Failure::usage("--model is required"))?,
            "model",
        )?;
        let config = existing(
            f.config.clone().unwrap_or_else(|| model.with_extension("json")),
            "config",
        )?;
        let corpus = f.corpus.clone().map(|p| existing(p, "corpus")).transpose()?;
        let calib = f.calib.clone().map(|p| existing(p, "calibration corpus")).transpose()?;
        let corpus_format = f
            .corpus_format
            .as_deref()
            .map(|s| s.parse::<CorpusFormat>().map_err(|e| Failure::usage(e.to_string())))
            .transpose()?;
        if f.seq_len == Some(0) || f.samples == Some(0) {
            return Err(Failure::usage("--seq-len and --samples must be positive"));
        }
        Ok(Inputs {
            model,
            config,
            corpus,
            calib,
            corpus_format,
            seed: f.seed.unwrap_or(DEFAULT_SEED),
            seq_len: f.seq_len,
            samples: f.samples.unwrap_or(mxquant::calibrate::CALIBRATION_SAMPLES),
        })
    }

    pub fn format_of(&self, path: &Path) -> CorpusFormat {
        self.corpus_format
            .unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()) {
                Some("txt") | Some("text") => CorpusFormat::Text,
                _ => CorpusFormat::U32,
            })
    }

    pub fn require_corpus(&self) -> Result<&Path, Failure> {
        self.corpus
            .as_deref()
            .ok_or_else(|| Failure::usage("--corpus is required"))
    }

    pub fn calib_path(&self) -> Result<&Path, Failure> {
        self.calib
            .as_deref()
            .ok_or_else(|| Failure::usage("--calib is required to quantize"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let file: RunFields = serde_json::from_str(r#"{"seed": 3, "alpha": 0.7, "act_format": "MXINT8-16"}"#).unwrap();
        let flags = RunFields {
            seed: Some(9),
            ..RunFields::default()
        };
        let merged = flags.over(file);
        assert_eq!(merged.seed, Some(9));
        assert_eq!(merged.alpha, Some(0.7));
        let plan = merged.plan().unwrap();
        assert_eq!(plan.linear.act, "MXINT8-16".parse().unwrap());
        assert_eq!(plan.linear.wgt, Format::Fp16);
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        assert!(serde_json::from_str::<RunFields>(r#"{"sead": 3}"#).is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let f = RunFields {
            model: Some("m.nwt".into()),
            out: Some("/abs/out.csv".into()),
            ..RunFields::default()
        }
        .rebase(Path::new("/data/run"));
        assert_eq!(f.model.unwrap(), PathBuf::from("/data/run/m.nwt"));
        assert_eq!(f.out.unwrap(), PathBuf::from("/abs/out.csv"));
    }
}
