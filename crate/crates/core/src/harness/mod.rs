//! GPT-2 evaluation harness: model, quantization pipeline, size accounting,
//! perplexity and Pareto analysis.

pub mod corpus;
pub mod eval;
pub mod io;
pub mod model;
pub mod pareto;
pub mod quantize;
pub mod size;
pub mod toy;

pub use corpus::{
    load_corpus, read_u32_tokens, text_tokens, token_sidecar_path, write_u32_tokens, CorpusFormat, TokenSidecar,
};
pub use eval::{csv_string, perplexity, read_csv, write_csv, EvalPoint, CSV_HEADER};
pub use io::{
    load_model, logit_parity, model_from_tensors, model_to_tensors, read_reference_logits, save_model,
    write_reference_logits, ModelSidecar, REFERENCE_LOGITS,
};
pub use model::{
    ActQuant, ActQuantizers, Architecture, Block, GptModel, LanguageModel, ModelConfig, NoObserver, Observer, Operand,
    Site,
};
pub use pareto::{pareto_frontier, pareto_indices};
pub use quantize::{quantize_model, quantize_weights, OperandFormats, QuantPlan};
pub use size::{model_size_bits, size_report, SizeReport};
