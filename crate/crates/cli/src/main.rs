use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use convqa_cli::server::{self, turn_view, AppState};
use convqa_cli::live_provider;
use convqa_core::data::ReformulationMode;
use convqa_core::diagnostics::gradcheck_suite;
use convqa_core::pipeline::{self, AblationVariant};
use convqa_core::PipelineConfig;

/// Conversational question answering over a knowledge graph: data
/// generation, staged training, evaluation and a live session service.
#[derive(Parser)]
#[command(name = "convqa", version)]
struct Cli {
    /// Config file: a JSON object or flat `dotted.key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Global seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root for data, checkpoints and reports.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override one config key, e.g. `--set student.epochs=5` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic graph and conversation corpus under <out>/data.
    Synth {
        /// Number of conversations.
        #[arg(long)]
        n: Option<usize>,
        /// Number of graph entities.
        #[arg(long)]
        entities: Option<usize>,
    },
    /// Train ComplEx embeddings on the graph.
    TrainComplex,
    /// Train the teacher encoder and policy on human reformulations, then fit the answer projection.
    TrainTeacher,
    /// Train the topic selector on frozen teacher encodings.
    PretrainSelector,
    /// Train the student encoder and policy end to end with distillation.
    TrainStudent,
    /// Evaluate the trained model on a split; exits 2 when a threshold is missed.
    Evaluate(EvaluateArgs),
    /// Train and evaluate ablation variants from the ComplEx checkpoint.
    Ablate {
        /// Comma-separated variants; all when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Finite-difference gradient check of every layer and the policy loss.
    Gradcheck,
    /// Serve the JSON session API.
    Serve {
        /// Listen address (default from config, 127.0.0.1:8080).
        #[arg(long)]
        bind: Option<String>,
        /// Idle session lifetime in seconds.
        #[arg(long)]
        ttl_secs: Option<u64>,
        /// Candidates returned per answer.
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Interactive terminal conversation.
    Chat {
        /// Key of the conversation's topic entity.
        #[arg(long)]
        topic: String,
    },
}

#[derive(Args)]
struct EvaluateArgs {
    /// Split to evaluate: train, valid or test.
    #[arg(long)]
    split: Option<String>,
    /// Feed gold instead of predicted answers into the next turn.
    #[arg(long)]
    teacher_force: bool,
    /// Reformulation source: dataset, template or external.
    #[arg(long)]
    reformulation: Option<ReformulationMode>,
    /// Sidecar JSON for external reformulations.
    #[arg(long)]
    sidecar: Option<PathBuf>,
    /// Minimum P@1; a miss makes the exit code nonzero.
    #[arg(long)]
    min_p1: Option<f64>,
    /// Minimum Hit@5; a miss makes the exit code nonzero.
    #[arg(long)]
    min_hit5: Option<f64>,
}

fn build_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.paths.out = out.clone();
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = build_config(&cli)?;
    match cli.command {
        Command::Synth { n, entities } => {
            if let Some(n) = n {
                cfg.synth.n_conversations = n;
            }
            if let Some(e) = entities {
                cfg.synth.entities = e;
            }
            print_json(&pipeline::run_synth(&cfg)?)?;
        }
        Command::TrainComplex => {
            let s = pipeline::run_train_complex(&cfg)?;
            println!(
                "final loss {:.5}; decreasing in {:.0}% of epochs",
                s.epoch_losses.last().copied().unwrap_or(f64::NAN),
                100.0 * s.decreasing_fraction
            );
        }
        Command::TrainTeacher => {
            let s = pipeline::run_train_teacher(&cfg, |_| {})?;
            if let Some(last) = s.log.epochs.last() {
                println!("teacher: final mean reward {:.4}, hit rate {:.4}", last.mean_reward, last.hit_rate);
            }
        }
        Command::PretrainSelector => {
            let r = pipeline::run_pretrain_selector(&cfg)?;
            println!(
                "selector: valid accuracy {:.4} (majority baseline {:.4}, {} examples)",
                r.valid_accuracy, r.majority_baseline, r.valid_examples
            );
        }
        Command::TrainStudent => {
            let s = pipeline::run_train_student(&cfg, |_| {})?;
            println!(
                "student: distance {:.5} -> {:.5} ({:.1}% reduction)",
                s.distance_initial,
                s.distance_final,
                100.0 * s.distance_reduction
            );
        }
        Command::Evaluate(a) => {
            if let Some(s) = a.split {
                cfg.eval.split = s;
            }
            cfg.eval.teacher_force |= a.teacher_force;
            if let Some(m) = a.reformulation {
                cfg.eval.reformulation = m;
            }
            if a.sidecar.is_some() {
                cfg.eval.sidecar = a.sidecar;
            }
            cfg.eval.min_p1 = a.min_p1.or(cfg.eval.min_p1);
            cfg.eval.min_hit5 = a.min_hit5.or(cfg.eval.min_hit5);
            let report = pipeline::run_evaluate(&cfg)?;
            print!("{}", report.to_text());
            if !report.thresholds_passed() {
                eprintln!("evaluation thresholds not met");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Ablate { variants } => {
            let list = if variants.is_empty() {
                AblationVariant::ALL.to_vec()
            } else {
                variants.iter().map(|v| v.parse()).collect::<convqa_core::Result<Vec<_>>>()?
            };
            print!("{}", pipeline::run_ablate(&cfg, &list)?.to_text());
        }
        Command::Gradcheck => {
            let started = Instant::now();
            let reports = gradcheck_suite(cfg.seed)?;
            let mut ok = true;
            for r in &reports {
                println!("{:<28} max rel err {:.3e}  {}", r.label, r.max_rel_error(), if r.passed() { "ok" } else { "FAILED" });
                ok &= r.passed();
            }
            let worst = reports.iter().map(|r| r.max_rel_error()).fold(0.0, f64::max);
            println!("max relative error {worst:.3e} in {:.2}s", started.elapsed().as_secs_f64());
            let path = cfg.report("gradcheck.json");
            std::fs::create_dir_all(path.parent().expect("reports dir"))?;
            std::fs::write(&path, serde_json::to_string_pretty(&reports)?)?;
            if !ok {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Serve { bind, ttl_secs, top_k } => {
            let bundle = pipeline::load_model(&cfg)?;
            let provider = live_provider(&cfg)?;
            let state = AppState::new(
                bundle,
                provider,
                Duration::from_secs(ttl_secs.unwrap_or(cfg.serve.session_ttl_secs)),
                top_k.unwrap_or(cfg.serve.top_k),
            );
            let bind = bind.unwrap_or_else(|| cfg.serve.bind.clone());
            tokio::runtime::Runtime::new()?.block_on(server::serve(state, &bind))?;
        }
        Command::Chat { topic } => chat(&cfg, &topic)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn chat(cfg: &PipelineConfig, topic_key: &str) -> Result<()> {
    let bundle = pipeline::load_model(cfg)?;
    let provider = live_provider(cfg)?;
    let engine = bundle.engine(Some(&provider))?;
    let new_state = |key: &str| -> Result<convqa_core::ConversationState> {
        match bundle.kg.entity_by_key(key) {
            Some(e) => Ok(engine.start(e)?),
            None => bail!(
                "unknown entity `{key}`; did you mean: {}",
                bundle.kg.nearest_keys(key, 5).join(", ")
            ),
        }
    };
    let mut state = new_state(topic_key)?;
    println!("topic: {topic_key}. Ask a question; `:new KEY` restarts, `:quit` exits.");
    let stdin = std::io::stdin();
    let mut line = String::new();
    loop {
        print!("> ");
        std::io::stdout().flush()?;
        line.clear();
        if stdin.lock().read_line(&mut line)? == 0 {
            break;
        }
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if text == ":quit" {
            break;
        }
        if let Some(key) = text.strip_prefix(":new ") {
            match new_state(key.trim()) {
                Ok(s) => {
                    state = s;
                    println!("topic: {}", key.trim());
                }
                Err(e) => println!("{e}"),
            }
            continue;
        }
        let log = engine.ask(&mut state, text, &[])?;
        let view = turn_view(&bundle.kg, log, cfg.serve.top_k);
        println!("answer: {}  (topic {})", view.answer.as_deref().unwrap_or("-"), view.topic_used);
        for s in &view.trace {
            println!("  hop {}: --{}--> {}", s.hop, s.relation, s.entity);
        }
        for (i, c) in view.top_k.iter().enumerate() {
            println!("  {:>2}. {:<24} {:.4} {:?}", i + 1, c.entity, c.score, c.source);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
