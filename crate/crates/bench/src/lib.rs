//! Benchmark fixtures: a desk-sized synthetic graph with an untrained model.

use convqa_core::data::{synth_generate, synth_kg, SynthConfig, Vocabulary};
use convqa_core::{EntityId, ModelBundle, PipelineConfig, Result};

pub struct Workload {
    pub bundle: ModelBundle,
    /// First-turn questions with their topic entity.
    pub questions: Vec<(EntityId, String)>,
}

/// Desk dimensions over the default 200-entity synthetic graph.
pub fn desk_workload() -> Result<Workload> {
    let mut cfg = PipelineConfig::default().with_seed(7);
    for (k, v) in [
        ("complex.dim", "32"),
        ("encoder.token_dim", "32"),
        ("encoder.question_dim", "32"),
        ("encoder.heads", "2"),
        ("encoder.ffn_dim", "64"),
        ("encoder.max_len", "24"),
        ("policy.hidden_dim", "64"),
        ("policy.history_dim", "32"),
    ] {
        cfg.set(k, v)?;
    }
    let kg = synth_kg(&cfg.synth, cfg.seed)?;
    let synth = SynthConfig {
        n_conversations: 20,
        ..cfg.synth.clone()
    };
    let corpus = synth_generate(&kg, &synth, cfg.seed)?;
    let texts: Vec<&str> = corpus.train.iter().flat_map(|c| c.turns.iter().map(|t| t.question.as_str())).collect();
    let vocab = Vocabulary::build(texts);
    let bundle = ModelBundle::untrained(&cfg, kg, vocab)?;
    let questions = corpus
        .train
        .iter()
        .filter_map(|c| Some((bundle.kg.entity_by_key(&c.seed_entity)?, c.turns.first()?.question.clone())))
        .collect();
    Ok(Workload { bundle, questions })
}
