//! Perplexity evaluation and result records.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::formats::Format;
use crate::tensor::Mat;

use super::model::LanguageModel;
use super::quantize::QuantPlan;

/// Negative log-likelihood of `target` under one row of logits.
fn token_nll(logits: &[f64], target: u32) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[target as usize]
}

/// Sum of next-token NLL over one window and the number of predictions.
pub fn window_nll<M: LanguageModel + ?Sized>(model: &M, window: &[u32]) -> Result<(f64, usize)> {
    let inputs = &window[..window.len() - 1];
    let logits: Mat = model.logits(inputs)?;
    let mut sum = 0.0;
    for (p, &t) in window[1..].iter().enumerate() {
        if t as usize >= model.vocab_size() {
            return Err(Error::Input(format!(
                "token {t} out of range for vocab {}",
                model.vocab_size()
            )));
        }
        sum += token_nll(logits.row(p), t);
    }
    Ok((sum, inputs.len()))
}

/// `exp` of the mean next-token NLL over non-overlapping windows of
/// `seq_len` predictions. Every token after the first is predicted exactly
/// once; the last window may be shorter.
pub fn perplexity<M: LanguageModel + Sync + ?Sized>(
    model: &M,
    tokens: &[u32],
    seq_len: usize,
    exec: Exec,
) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::Input(format!(
            "corpus of {} tokens has nothing to predict",
            tokens.len()
        )));
    }
    if seq_len == 0 || seq_len > model.max_seq_len() {
        return Err(Error::Input(format!(
            "sequence length {seq_len} outside 1..={}",
            model.max_seq_len()
        )));
    }
    let starts: Vec<usize> = (0..tokens.len() - 1).step_by(seq_len).collect();
    let parts = exec.try_map(starts.len(), |i| {
        let s = starts[i];
        window_nll(model, &tokens[s..(s + seq_len + 1).min(tokens.len())])
    })?;
    // summed in window order so the result does not depend on scheduling
    let (sum, count) = parts.iter().fold((0.0, 0), |(s, c), (ws, wc)| (s + ws, c + wc));
    Ok((sum / count as f64).exp())
}

/// One evaluated configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPoint {
    pub label: String,
    pub size_bits: u64,
    pub ppl: f64,
    pub act_format: Format,
    pub wgt_format: Format,
    pub sq_aw: bool,
    pub sq_aa: bool,
    pub gptq: bool,
    /// Fixed-point scheme; meaningful only for INT formats.
    pub scheme: String,
}

impl EvalPoint {
    pub fn new(label: impl Into<String>, plan: &QuantPlan, size_bits: u64, ppl: f64) -> Self {
        EvalPoint {
            label: label.into(),
            size_bits,
            ppl,
            act_format: plan.linear.act,
            wgt_format: plan.linear.wgt,
            sq_aw: plan.sq_aw,
            sq_aa: plan.sq_aa,
            gptq: plan.gptq,
            scheme: plan.scheme.to_string(),
        }
    }
}

pub const CSV_HEADER: [&str; 9] = [
    "label",
    "size_bits",
    "ppl",
    "act_format",
    "wgt_format",
    "sq_aw",
    "sq_aa",
    "gptq",
    "scheme",
];

/// Writes points as CSV. Floats use the shortest representation that reads
/// back exactly.
pub fn write_csv<W: Write>(points: &[EvalPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for p in points {
        w.write_record([
            p.label.clone(),
            p.size_bits.to_string(),
            format!("{}", p.ppl),
            p.act_format.to_string(),
            p.wgt_format.to_string(),
            p.sq_aw.to_string(),
            p.sq_aa.to_string(),
            p.gptq.to_string(),
            p.scheme.clone(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string(points: &[EvalPoint]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(points, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Parse(e.to_string()))
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<EvalPoint>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::Parse(format!(
            "unexpected CSV header {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let field = |k: usize| rec.get(k).unwrap_or_default();
        let bad = |what: &str| Error::Parse(format!("row {}: bad {what}", i + 1));
        let flag = |k: usize, name: &str| field(k).parse::<bool>().map_err(|_| bad(name));
        out.push(EvalPoint {
            label: field(0).to_string(),
            size_bits: field(1).parse().map_err(|_| bad("size_bits"))?,
            ppl: field(2).parse().map_err(|_| bad("ppl"))?,
            act_format: field(3).parse().map_err(|_| bad("act_format"))?,
            wgt_format: field(4).parse().map_err(|_| bad("wgt_format"))?,
            sq_aw: flag(5, "sq_aw")?,
            sq_aa: flag(6, "sq_aa")?,
            gptq: flag(7, "gptq")?,
            scheme: field(8).to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Ignores its input and returns a fixed logit table row per position.
    struct TableModel {
        vocab: usize,
        rows: Vec<Vec<f64>>,
    }

    impl LanguageModel for TableModel {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn max_seq_len(&self) -> usize {
            self.rows.len()
        }
        fn logits(&self, tokens: &[u32]) -> Result<Mat> {
            let data = self.rows[..tokens.len()].concat();
            Mat::new(tokens.len(), self.vocab, data)
        }
    }

    #[test]
    fn uniform_logits_give_vocab_size() {
        let m = TableModel {
            vocab: 256,
            rows: vec![vec![0.0; 256]; 8],
        };
        let tokens: Vec<u32> = (0..50).map(|i| (i * 37 % 256) as u32).collect();
        let ppl = perplexity(&m, &tokens, 8, Exec::Serial).unwrap();
        assert!((ppl - 256.0).abs() < 1e-9);
    }

    #[test]
    fn confident_correct_logits_approach_one() {
        let mut rows = vec![vec![0.0; 4]; 3];
        for (p, r) in rows.iter_mut().enumerate() {
            r[(p + 1) % 4] = 60.0;
        }
        let m = TableModel { vocab: 4, rows };
        let ppl = perplexity(&m, &[0, 1, 2, 3], 3, Exec::Serial).unwrap();
        assert!(ppl >= 1.0 && ppl - 1.0 < 1e-20_f64.max(1e-12));
    }

    #[test]
    fn hand_computed_table() {
        // corpus [0, 1, 0]: two predictions from a two-row table
        let rows = vec![vec![(2.0f64).ln(), 0.0], vec![0.0, (3.0f64).ln()]];
        let m = TableModel { vocab: 2, rows };
        // p(1 | pos 0) = 1/3, p(0 | pos 1) = 1/4
        let expected = ((3.0f64.ln() + 4.0f64.ln()) / 2.0).exp();
        let ppl = perplexity(&m, &[0, 1, 0], 2, Exec::Serial).unwrap();
        assert!((ppl - expected).abs() < 1e-12);
        // stride 1 gives two windows that predict the same tokens from position 0
        let ppl1 = perplexity(&m, &[0, 1, 0], 1, Exec::Serial).unwrap();
        let e1 = ((3.0f64.ln() + (1.5f64).ln()) / 2.0).exp();
        assert!((ppl1 - e1).abs() < 1e-12);
    }

    #[test]
    fn every_token_is_predicted_once() {
        struct Counter;
        impl LanguageModel for Counter {
            fn vocab_size(&self) -> usize {
                2
            }
            fn max_seq_len(&self) -> usize {
                4
            }
            fn logits(&self, tokens: &[u32]) -> Result<Mat> {
                Ok(Mat::zeros(tokens.len(), 2))
            }
        }
        for n in 2..20 {
            let tokens = vec![0u32; n];
            let mut total = 0;
            for s in (0..n - 1).step_by(4) {
                total += window_nll(&Counter, &tokens[s..(s + 5).min(n)]).unwrap().1;
            }
            assert_eq!(total, n - 1);
            let ppl = perplexity(&Counter, &tokens, 4, Exec::default()).unwrap();
            assert!((ppl - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn input_errors() {
        let m = TableModel {
            vocab: 2,
            rows: vec![vec![0.0; 2]; 4],
        };
        assert!(matches!(perplexity(&m, &[], 2, Exec::Serial), Err(Error::Input(_))));
        assert!(matches!(perplexity(&m, &[1], 2, Exec::Serial), Err(Error::Input(_))));
        assert!(matches!(perplexity(&m, &[0, 5], 2, Exec::Serial), Err(Error::Input(_))));
        assert!(matches!(perplexity(&m, &[0, 1], 9, Exec::Serial), Err(Error::Input(_))));
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let plan = QuantPlan::uniform("MXINT8-16".parse().unwrap(), "INT4".parse().unwrap());
        let points = vec![
            EvalPoint::new("a,b", &plan, 1234, 46.061_234_567_890_12),
            EvalPoint::new("fp", &QuantPlan::full_precision(), 99, 1.0 / 3.0 + 10.0),
        ];
        let text = csv_string(&points).unwrap();
        assert!(text.starts_with("label,size_bits,ppl,act_format,wgt_format,sq_aw,sq_aa,gptq,scheme\n"));
        assert_eq!(read_csv(text.as_bytes()).unwrap(), points);
        assert!(read_csv("x,y\n1,2\n".as_bytes()).is_err());
    }
}
