//! Serial versus data-parallel execution of the hot kernels.
//!
//! Build with `--no-default-features` to confirm that the parallel variant
//! degrades to the serial path when the `parallel` feature is off.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use mxquant::formats::{mx_quantize_with, MxSpec};
use mxquant::gptq::{gptq_quantize_layer, prepare_inverse, GptqConfig, HessianState, WeightQuantizer};
use mxquant::harness::perplexity;
use mxquant::harness::toy::{random_model, sample_tokens, toy_config};
use mxquant::{Exec, Mat, Rng, Tensor};

const MODES: [(&str, Exec); 2] = [("serial", Exec::Serial), ("parallel", Exec::Parallel)];

fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.normal())
}

fn matmul(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let a = gaussian(256, 256, &mut rng);
    let b = gaussian(256, 256, &mut rng);
    let mut g = c.benchmark_group("matmul_256");
    for (name, exec) in MODES {
        g.bench_function(name, |bench| bench.iter(|| a.matmul_with(black_box(&b), exec).unwrap()));
    }
    g.finish();
}

fn mx_quantize(c: &mut Criterion) {
    let t = Tensor::randn(vec![1024, 1024], 1.0, &mut Rng::new(2)).unwrap();
    let spec = MxSpec::new(4, 16).unwrap();
    let mut g = c.benchmark_group("mx_quantize_1024x1024");
    for (name, exec) in MODES {
        g.bench_function(name, |bench| {
            bench.iter(|| mx_quantize_with(black_box(&t), &spec, exec))
        });
    }
    g.finish();
}

fn gptq_layer(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let d = 256;
    let w = gaussian(d, d, &mut rng);
    let x = gaussian(d, 4 * d, &mut rng);
    let mut state = HessianState::new(d);
    state.accumulate(&x, Exec::Serial).unwrap();
    let ws = prepare_inverse(&state, 0.01).unwrap();
    let cfg = GptqConfig::new(WeightQuantizer::Mx(MxSpec::new(4, 16).unwrap()));
    let mut g = c.benchmark_group("gptq_layer_256");
    g.sample_size(20);
    for (name, exec) in MODES {
        g.bench_function(name, |bench| {
            bench.iter(|| gptq_quantize_layer(black_box(&w), &ws, &cfg, exec).unwrap())
        });
    }
    g.finish();
}

fn perplexity_eval(c: &mut Criterion) {
    let mut rng = Rng::new(4);
    let model = random_model(&toy_config(2, 64, 4, 256, 64), &mut rng).unwrap();
    let tokens = sample_tokens(&model, 1024, &mut rng).unwrap();
    let mut g = c.benchmark_group("perplexity_toy");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |bench, &exec| {
            bench.iter(|| perplexity(&model, black_box(&tokens), 64, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, mx_quantize, gptq_layer, perplexity_eval);
criterion_main!(benches);
