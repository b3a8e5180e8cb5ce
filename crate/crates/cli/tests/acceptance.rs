//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. The end-to-end run trains the desk configuration
//! and takes several minutes.

#[path = "../../core/tests/common/mod.rs"]
#[allow(dead_code)]
mod fixtures;
mod common;

use std::collections::HashSet;
use std::path::Path;
use std::time::{Duration, Instant};

use axum::http::{Method, StatusCode};
use common::{convqa, desk_config, train_all, write_config, TINY};
use convqa_cli::live_provider;
use convqa_cli::server::{router, AppState};
use convqa_core::agent::{beam_infer, AnswerSource, BeamConfig};
use convqa_core::diagnostics::gradcheck_suite;
use convqa_core::pipeline::{load_model, load_splits};
use convqa_core::{EntityId, PipelineConfig};
use fixtures::oracles;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;

fn read_json(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn stage(cfg: &Path, out: &Path, args: &[&str]) -> Result<String, String> {
    let o = convqa(cfg, out, args);
    if o.status.success() {
        Ok(String::from_utf8_lossy(&o.stdout).into_owned())
    } else {
        Err(format!("`{}` exited {}: {}", args.join(" "), o.status, String::from_utf8_lossy(&o.stderr).trim()))
    }
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let reports = gradcheck_suite(0).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_error()).fold(0.0, f64::max);
    let labels: Vec<&str> = reports.iter().map(|r| r.label.as_str()).collect();
    if !labels.iter().any(|l| l.contains("policy")) {
        return Err(format!("no policy loss among {labels:?}"));
    }
    let summary = format!("{} checks, max rel err {worst:.2e}, {:.1}s", reports.len(), elapsed.as_secs_f64());
    if worst < 1e-4 && elapsed < Duration::from_secs(60) {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn oracle_equivalences() -> Outcome {
    let a = oracles::complex_score(1000)?;
    let b = oracles::wide_beam(200)?;
    let c = oracles::rank_metrics_scan(1000)?;
    Ok(format!("complex: {a}; beam: {b}; rank: {c}"))
}

fn hit_order(where_: &str, m: &Value) -> Result<(), String> {
    let v = |k: &str| m[k].as_f64().unwrap_or(f64::NAN);
    let (p1, h3, h5, h8, mrr) = (v("p_at_1"), v("hit_at_3"), v("hit_at_5"), v("hit_at_8"), v("mrr"));
    if p1 <= h3 && h3 <= h5 && h5 <= h8 && p1 <= mrr && mrr <= 1.0 {
        Ok(())
    } else {
        Err(format!("{where_}: {m}"))
    }
}

/// Augment counts, policy normalisation and the beam/fallback partition on
/// random graphs; Hit@k ordering on every aggregate of the produced reports.
fn structural_invariants(reports: &[&Path]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for seed in 0..300u64 {
        let n = rng.gen_range(2..10);
        let f = fixtures::fixture(seed, n, rng.gen_range(1..15));
        let kg = &f.kg;
        let forward = kg.forward_triples().len();
        if kg.num_triples() != 2 * forward + kg.num_entities() {
            return Err(format!("seed {seed}: {} triples from {forward} edges", kg.num_triples()));
        }
        let w = f.walker();
        let topic = EntityId(rng.gen_range(0..kg.num_entities()));
        let lq = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let mut path = Vec::new();
        for _ in 0..3 {
            let (_, p) = w.distribution_after(&lq, topic, &path).map_err(|e| e.to_string())?;
            let total: f64 = p.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(format!("seed {seed}: policy sums to {total}"));
            }
            path.push(rng.gen_range(0..p.len()));
        }
        let cfg = BeamConfig {
            width: rng.gen_range(1..8),
            max_hops: rng.gen_range(1..4),
        };
        let got = beam_infer(&w, &lq, topic, &cfg, &f.table, &f.projection).map_err(|e| e.to_string())?;
        let ids: HashSet<EntityId> = got.entities().into_iter().collect();
        let split = got.entries.iter().position(|a| a.source == AnswerSource::Fallback).unwrap_or(got.entries.len());
        let ordered = got.entries[split..].iter().all(|a| a.source == AnswerSource::Fallback);
        if ids.len() != kg.num_entities() || got.entries.len() != kg.num_entities() || !ordered {
            return Err(format!("seed {seed}: beam and fallback do not partition the entities"));
        }
    }
    let mut aggregates = 0;
    for path in reports {
        let r = read_json(path)?;
        let rows: Vec<Value> = if let Some(rows) = r["rows"].as_array() {
            rows.iter().map(|row| row["metrics"].clone()).collect()
        } else {
            let mut v = vec![r["overall"].clone()];
            v.extend(r["per_domain"].as_object().into_iter().flat_map(|m| m.values().cloned()));
            v.extend(r["per_turn"].as_array().into_iter().flatten().cloned());
            v
        };
        for m in &rows {
            hit_order(&path.display().to_string(), m)?;
        }
        aggregates += rows.len();
    }
    Ok(format!("300 random graphs; Hit@k ordered on {aggregates} report aggregates"))
}

fn end_to_end(out: &Path) -> Outcome {
    let cfg = desk_config();
    let started = Instant::now();
    for cmd in ["synth", "train-complex", "train-teacher", "pretrain-selector", "train-student"] {
        stage(&cfg, out, &[cmd])?;
    }
    let o = convqa(&cfg, out, &["evaluate", "--min-p1", "0.7", "--min-hit5", "0.85"]);
    let elapsed = started.elapsed();
    print!("{}", String::from_utf8_lossy(&o.stdout));
    let r = read_json(&out.join("reports/eval_test.json"))?;
    let summary = format!(
        "P@1 {:.4}, Hit@5 {:.4} on {} test conversations; exit {:?}; {:.1} min",
        r["overall"]["p_at_1"].as_f64().unwrap_or(f64::NAN),
        r["overall"]["hit_at_5"].as_f64().unwrap_or(f64::NAN),
        r["conversations"],
        o.status.code(),
        elapsed.as_secs_f64() / 60.0
    );
    if o.status.success() && elapsed < Duration::from_secs(30 * 60) {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn distillation(out: &Path) -> Outcome {
    let d = read_json(&out.join("reports/distill.json"))?;
    let reduction = d["distance_reduction"].as_f64().ok_or("no distance_reduction")?;
    let summary = format!(
        "distance {:.4} -> {:.4}, {:.1}% reduction",
        d["distance_initial"].as_f64().unwrap_or(f64::NAN),
        d["distance_final"].as_f64().unwrap_or(f64::NAN),
        100.0 * reduction
    );
    if reduction >= 0.8 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn selector(out: &Path) -> Outcome {
    let s = read_json(&out.join("reports/selector.json"))?;
    let acc = s["valid_accuracy"].as_f64().ok_or("no valid_accuracy")?;
    let base = s["majority_baseline"].as_f64().ok_or("no majority_baseline")?;
    let summary = format!(
        "accuracy {acc:.4} vs majority {base:.4} on {} examples (reference {} not reproduced)",
        s["valid_examples"], s["reference_accuracy"]
    );
    if acc >= 0.95 && acc > base {
        Ok(summary)
    } else {
        Err(summary)
    }
}

/// Variants retrain from the end-to-end run's graph embeddings with fewer
/// RL epochs to bound the suite's runtime.
fn ablation(out: &Path) -> Outcome {
    let cfg = desk_config();
    let text = stage(&cfg, out, &["--set", "teacher.epochs=10", "--set", "student.epochs=10", "ablate"])?;
    print!("{text}");
    let t = read_json(&out.join("reports/ablation.json"))?;
    let names: HashSet<&str> = t["rows"].as_array().into_iter().flatten().filter_map(|r| r["variant"].as_str()).collect();
    let required = ["unique_edge_on", "unique_edge_off", "no_reformulation", "generated_only", "teacher_student"];
    let missing: Vec<&str> = required.iter().copied().filter(|n| !names.contains(n)).collect();
    let refs = t["reference"].as_array().map_or(0, Vec::len);
    let directional: Vec<String> = t["directional"]
        .as_array()
        .into_iter()
        .flatten()
        .map(|d| format!("{} {}", d[0].as_str().unwrap_or("?"), if d[1] == json!(true) { "agrees" } else { "disagrees" }))
        .collect();
    if !missing.is_empty() || refs == 0 {
        return Err(format!("missing rows {missing:?}, {refs} reference points"));
    }
    Ok(format!("{} rows, {refs} reference points; {}", names.len(), directional.join("; ")))
}

/// Replays a 5-turn test conversation through the service and compares
/// the full ranked lists with offline replay of the same checkpoint.
fn offline_online(out: &Path) -> Outcome {
    let mut cfg = PipelineConfig::load(&desk_config()).map_err(|e| e.to_string())?;
    cfg.paths.out = out.to_path_buf();
    let bundle = load_model(&cfg).map_err(|e| e.to_string())?;
    let splits = load_splits(&cfg, &bundle.kg, &bundle.vocab).map_err(|e| e.to_string())?;
    let conv = splits
        .test
        .iter()
        .find(|c| c.turns.len() == 5)
        .ok_or("no 5-turn test conversation")?
        .clone();
    let key = |e: EntityId| bundle.kg.entity(e).map(|x| x.external_key.clone()).unwrap();

    let offline: Vec<Vec<(String, f64)>> = {
        let provider = cfg.provider().map_err(|e| e.to_string())?;
        let engine = bundle.engine(Some(&provider)).map_err(|e| e.to_string())?;
        let mut state = engine.start(conv.main_topic_entity).map_err(|e| e.to_string())?;
        let mut lists = Vec::new();
        for turn in &conv.turns {
            let stored: Vec<String> = turn.generated_reformulations.iter().map(|q| q.raw_text.clone()).collect();
            let log = engine.ask(&mut state, &turn.question.raw_text, &stored).map_err(|e| e.to_string())?;
            lists.push(log.answers.entries.iter().map(|a| (key(a.entity), a.score)).collect());
        }
        lists
    };

    let n = bundle.kg.num_entities();
    let topic = key(conv.main_topic_entity);
    let questions: Vec<String> = conv.turns.iter().map(|t| t.question.raw_text.clone()).collect();
    let provider = live_provider(&cfg).map_err(|e| e.to_string())?;
    let app = router(AppState::new(bundle, provider, Duration::from_secs(60), n));
    let online: Vec<Vec<(String, f64)>> = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?.block_on(async {
        let (status, body) = common::call(&app, Method::POST, "/sessions", Some(&json!({ "topic_entity_key": topic }).to_string())).await;
        if status != StatusCode::CREATED {
            return Err(format!("create: {status} {body}"));
        }
        let id = body["session_id"].as_str().unwrap_or_default().to_string();
        let mut lists = Vec::new();
        for q in &questions {
            let (status, body) =
                common::call(&app, Method::POST, &format!("/sessions/{id}/ask"), Some(&json!({ "question": q }).to_string())).await;
            if status != StatusCode::OK {
                return Err(format!("ask: {status} {body}"));
            }
            let list = body["top_k"]
                .as_array()
                .into_iter()
                .flatten()
                .map(|c| (c["entity"].as_str().unwrap_or_default().to_string(), c["score"].as_f64().unwrap_or(f64::NAN)))
                .collect();
            lists.push(list);
        }
        Ok(lists)
    })?;

    for (turn, (a, b)) in offline.iter().zip(&online).enumerate() {
        if a.len() != b.len() {
            return Err(format!("turn {}: {} offline vs {} online candidates", turn + 1, a.len(), b.len()));
        }
        if let Some((i, (x, y))) = a.iter().zip(b).enumerate().find(|(_, (x, y))| x != y) {
            return Err(format!("turn {} rank {}: {x:?} offline vs {y:?} online", turn + 1, i + 1));
        }
    }
    Ok(format!("conversation {}: 5 turns x {n} ranked candidates identical", conv.id))
}

fn determinism(root: &Path) -> Outcome {
    let cfg = write_config(root, TINY);
    let files = [
        "data/kg.tsv",
        "data/train.json",
        "data/valid.json",
        "data/test.json",
        "checkpoints/complex.ckpt",
        "checkpoints/teacher.ckpt",
        "checkpoints/selector.ckpt",
        "checkpoints/model.ckpt",
    ];
    let runs: Vec<Vec<Vec<u8>>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = root.join(name);
            train_all(&cfg, &out);
            files.iter().map(|f| std::fs::read(out.join(f)).unwrap_or_default()).collect()
        })
        .collect();
    let differing: Vec<&str> = files.iter().zip(runs[0].iter().zip(&runs[1])).filter(|(_, (a, b))| a != b || a.is_empty()).map(|(f, _)| *f).collect();
    if differing.is_empty() {
        Ok(format!("{} artifacts bitwise identical over two runs", files.len()))
    } else {
        Err(format!("differ or missing: {differing:?}"))
    }
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let desk = dir.path().join("desk");
    let mut results: Vec<(&str, Outcome)> = vec![
        ("gradient_correctness", gradient_correctness()),
        ("oracle_equivalences", oracle_equivalences()),
    ];
    let e2e = end_to_end(&desk);
    let trained = e2e.is_ok() || desk.join("checkpoints/model.ckpt").exists();
    results.push(("end_to_end_synthetic", e2e));
    results.push(("distillation", distillation(&desk)));
    results.push(("selector", selector(&desk)));
    results.push(("ablation_harness", ablation(&desk)));
    let reports = [desk.join("reports/eval_test.json"), desk.join("reports/ablation.json")];
    let present: Vec<&Path> = reports.iter().filter(|p| p.exists()).map(|p| p.as_path()).collect();
    results.push(("structural_invariants", structural_invariants(&present)));
    results.push((
        "offline_online_equivalence",
        if trained { offline_online(&desk) } else { Err("no trained model".into()) },
    ));
    results.push(("determinism", determinism(&dir.path().join("tiny"))));

    let mut failed = 0;
    println!();
    for (name, r) in &results {
        match r {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} criteria failed");
        std::process::exit(1);
    }
}
