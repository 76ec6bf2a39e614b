use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tips_core::backtest::portfolio_returns;
use tips_core::data::{synth_market, Regime, SynthSpec};
use tips_core::exec::{self, ExecMode};
use tips_core::model::{BackboneConfig, ModelParams};
use tips_core::objectives::soft_spearman;
use tips_core::priors::PriorSpec;
use tips_core::tensor::Tape;

const MODES: [(&str, ExecMode); 2] = [
    ("sequential", ExecMode::Sequential),
    ("parallel", ExecMode::Parallel),
];

fn day_window() -> tips_core::tensor::Tensor {
    let panel = synth_market(
        &SynthSpec::single(Regime::Momentum { coef: 0.3 }, 80, 100),
        1,
    )
    .unwrap();
    panel.window(60, 20)
}

fn forward(c: &mut Criterion) {
    let cfg = BackboneConfig::default();
    let x = day_window();
    let mut g = c.benchmark_group("forward_100_stocks");
    g.sample_size(10);
    for spec in [PriorSpec::Vanilla, PriorSpec::Past] {
        let params = ModelParams::init(&cfg, &spec, 0).unwrap();
        let prior = spec.build(cfg.lookback, cfg.heads).unwrap();
        for (name, mode) in MODES {
            g.bench_with_input(BenchmarkId::new(name, spec.kind()), &x, |b, x| {
                exec::with_mode(mode, || b.iter(|| params.predict(&prior, x).unwrap()))
            });
        }
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let cfg = BackboneConfig::default();
    let x = day_window();
    let y: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64).collect();
    let params = ModelParams::init(&cfg, &PriorSpec::Vanilla, 0).unwrap();
    let prior = PriorSpec::Vanilla.build(cfg.lookback, cfg.heads).unwrap();
    let mut g = c.benchmark_group("forward_backward_100_stocks");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(name, |b| {
            exec::with_mode(mode, || {
                b.iter(|| {
                    let tape = Tape::new();
                    let bound = params.bind(&tape, true);
                    let out = tips_core::model::forward(
                        &bound,
                        &cfg,
                        &prior,
                        tape.constant(x.clone()),
                        None,
                    )
                    .unwrap();
                    soft_spearman(out.logits, &y, 50.0)
                        .unwrap()
                        .backward()
                        .unwrap();
                    bound.grads()
                })
            })
        });
    }
    g.finish();
}

fn backtest(c: &mut Criterion) {
    let preds: Vec<Vec<f64>> = (0..500)
        .map(|d| (0..300).map(|s| ((d * 31 + s * 17) % 97) as f64).collect())
        .collect();
    let rets: Vec<Vec<f64>> = (0..500)
        .map(|d| {
            (0..300)
                .map(|s| (((d + s) % 11) as f64 - 5.0) * 1e-3)
                .collect()
        })
        .collect();
    let mut g = c.benchmark_group("backtest_500x300");
    for (name, mode) in MODES {
        g.bench_function(name, |b| {
            exec::with_mode(mode, || {
                b.iter(|| portfolio_returns(&preds, &rets, 5, 5).unwrap())
            })
        });
    }
    g.finish();
}

criterion_group!(benches, forward, train_step, backtest);
criterion_main!(benches);
