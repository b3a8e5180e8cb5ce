use std::time::{Duration, Instant};

use convqa_core::diagnostics::gradcheck_suite;
use convqa_core::numerics::{finite_diff_check, GradCheckConfig, Graph, ParameterSet, Tensor, Var};
use convqa_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Op = fn(&mut Graph, Var, Var, &Tensor) -> Result<Var>;

fn weighted(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone())?;
    let m = g.mul(y, w)?;
    g.sum(m)
}

/// Each entry maps params `a` (r x c) and `b` (r x c) to a scalar through
/// one primitive; the weight tensor `w` has the output's shape where needed.
fn primitives() -> Vec<(&'static str, Op)> {
    vec![
        ("add", |g, a, b, w| {
            let y = g.add(a, b)?;
            weighted(g, y, w)
        }),
        ("sub", |g, a, b, w| {
            let y = g.sub(a, b)?;
            weighted(g, y, w)
        }),
        ("mul", |g, a, b, w| {
            let y = g.mul(a, b)?;
            weighted(g, y, w)
        }),
        ("scale", |g, a, _, w| {
            let y = g.scale(a, -1.7)?;
            weighted(g, y, w)
        }),
        ("matmul_t", |g, a, b, _| {
            let y = g.matmul_t(a, b)?;
            let y = g.tanh(y)?;
            g.sum(y)
        }),
        ("matmul", |g, a, b, _| {
            let bt = g.transpose(b)?;
            let y = g.matmul(a, bt)?;
            let y = g.sigmoid(y)?;
            g.sum(y)
        }),
        ("tanh", |g, a, _, w| {
            let y = g.tanh(a)?;
            weighted(g, y, w)
        }),
        ("sigmoid", |g, a, _, w| {
            let y = g.sigmoid(a)?;
            weighted(g, y, w)
        }),
        ("relu", |g, a, _, w| {
            let y = g.relu(a)?;
            weighted(g, y, w)
        }),
        ("exp", |g, a, _, w| {
            let y = g.exp(a)?;
            weighted(g, y, w)
        }),
        ("log", |g, a, _, w| {
            let y = g.exp(a)?;
            let y = g.log(y)?;
            let y = g.mul(y, y)?;
            weighted(g, y, w)
        }),
        ("softmax", |g, a, _, w| {
            let y = g.softmax(a)?;
            weighted(g, y, w)
        }),
        ("log_softmax", |g, a, _, w| {
            let y = g.log_softmax(a)?;
            weighted(g, y, w)
        }),
        ("layer_norm", |g, a, _, w| {
            let y = g.layer_norm(a)?;
            weighted(g, y, w)
        }),
        ("cross_entropy", |g, a, _, _| {
            let rows = g.value(a).rows();
            let cols = g.value(a).cols();
            let targets: Vec<usize> = (0..rows).map(|r| (r * 7 + 1) % cols).collect();
            g.cross_entropy(a, &targets)
        }),
        ("sq_dist", |g, a, b, _| {
            let ra = g.row(a, 0)?;
            let rb = g.row(b, 0)?;
            g.sq_dist(ra, rb)
        }),
        ("concat_cols+slice_cols", |g, a, b, _| {
            let c = g.concat_cols(&[a, b])?;
            let cols = g.value(a).cols();
            let s = g.slice_cols(c, 1, cols)?;
            let y = g.tanh(s)?;
            g.sum(y)
        }),
        ("concat_rows+select_rows", |g, a, b, _| {
            let c = g.concat_rows(&[a, b])?;
            let rows = g.value(c).rows();
            let s = g.select_rows(c, &[rows - 1, 0, 0])?;
            let y = g.mul(s, s)?;
            g.sum(y)
        }),
    ]
}

#[test]
fn every_primitive_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cfg = GradCheckConfig::default();
    let mut trials = 0;
    let mut worst: f64 = 0.0;
    for round in 0..8 {
        for (label, op) in primitives() {
            let rows = rng.gen_range(1..4);
            let cols = rng.gen_range(2..5);
            let rand = |rng: &mut ChaCha8Rng| {
                Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
            };
            let mut ps = ParameterSet::new(round);
            ps.insert("a", rand(&mut rng)).unwrap();
            ps.insert("b", rand(&mut rng)).unwrap();
            let w = rand(&mut rng);
            let names = vec!["a".to_string(), "b".to_string()];
            let report = finite_diff_check(label, &ps, &names, cfg, |g| {
                let a = g.param("a")?;
                let b = g.param("b")?;
                op(g, a, b, &w)
            })
            .unwrap();
            assert!(report.passed(), "{label} round {round}: {:?}", report.failures());
            worst = worst.max(report.max_rel_error());
            trials += 1;
        }
    }
    assert!(trials >= 100, "{trials} trials");
    assert!(worst < 1e-4);
}

#[test]
fn layer_and_policy_suite_within_budget() {
    let started = Instant::now();
    let reports = gradcheck_suite(17).unwrap();
    let elapsed = started.elapsed();
    let labels: Vec<&str> = reports.iter().map(|r| r.label.as_str()).collect();
    for needed in ["linear+tanh", "lstm", "layer_norm", "transformer_encoder", "question_encoder+distill", "selector", "policy_loss"] {
        assert!(labels.contains(&needed), "missing {needed}");
    }
    for r in &reports {
        assert!(r.passed(), "{}: {:?}", r.label, r.failures());
        assert!(r.max_rel_error() < 1e-4);
    }
    assert!(elapsed < Duration::from_secs(60), "{elapsed:?}");
}
