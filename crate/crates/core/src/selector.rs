//! Binary "same topic as the previous answer" classifier and the topic
//! decision rule built on it.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::numerics::layers::FeedForward;
use crate::numerics::{softmax, AdamConfig, AdamState, Graph, ParameterSet, Tensor, Var};

pub const SELECTOR_PREFIX: &str = "selector";
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TopicSelector {
    pub prefix: String,
    pub input_dim: usize,
    ffn: FeedForward,
}

impl TopicSelector {
    pub fn register(ps: &mut ParameterSet, rng: &mut ChaCha8Rng, input_dim: usize, hidden_dim: usize) -> Result<Self> {
        Self::register_at(ps, rng, SELECTOR_PREFIX, input_dim, hidden_dim)
    }

    /// As [`TopicSelector::register`] under another parameter prefix.
    pub fn register_at(
        ps: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Result<Self> {
        let ffn = FeedForward::register(ps, rng, prefix, input_dim, hidden_dim, 2)?;
        Ok(TopicSelector {
            prefix: prefix.to_string(),
            input_dim,
            ffn,
        })
    }

    pub fn layout(input_dim: usize, hidden_dim: usize) -> Result<Self> {
        let mut scratch = ParameterSet::new(0);
        Self::register(&mut scratch, &mut ChaCha8Rng::seed_from_u64(0), input_dim, hidden_dim)
    }

    /// Two-column logits for a batch of question embeddings.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.ffn.forward(g, x)
    }

    fn logits(&self, ps: &ParameterSet, l_q: &[f64]) -> Result<Vec<f64>> {
        if l_q.len() != self.input_dim {
            return Err(Error::Dimension(format!(
                "selector expects width {}, got {}",
                self.input_dim,
                l_q.len()
            )));
        }
        let mut g = Graph::new(ps);
        let x = g.constant(Tensor::row(l_q.to_vec()))?;
        let z = self.ffn.forward(&mut g, x)?;
        Ok(g.value(z).data().to_vec())
    }

    /// Two-class softmax; index 1 is "topic equals previous answer".
    pub fn class_probabilities(&self, ps: &ParameterSet, l_q: &[f64]) -> Result<[f64; 2]> {
        let p = softmax(&self.logits(ps, l_q)?);
        Ok([p[0], p[1]])
    }

    pub fn predict_same_topic(&self, ps: &ParameterSet, l_q: &[f64]) -> Result<f64> {
        Ok(self.class_probabilities(ps, l_q)?[1])
    }
}

/// Turn 1 (no previous answer) always uses the main topic; afterwards the
/// previous answer is used when `prob >= threshold` and it is a graph entity.
pub fn select_topic(
    prob: f64,
    previous_answer: Option<EntityId>,
    main_topic: EntityId,
    threshold: f64,
    kg: &KnowledgeGraph,
) -> EntityId {
    match previous_answer {
        Some(prev) if prob >= threshold && kg.contains_entity(prev) => prev,
        _ => main_topic,
    }
}

/// Label source for one training example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Gold,
    /// Some gold answer lies within two hops of the previous answer.
    TwoHopHeuristic,
}

#[derive(Clone, Debug)]
pub struct SelectorExample {
    pub id: String,
    pub l_q: Vec<f64>,
    pub label: bool,
    pub source: LabelSource,
}

/// Label for turn `i > 0`: gold when the corpus records the topic, else
/// the two-hop heuristic; `None` when neither is available.
pub fn selector_label(
    kg: &KnowledgeGraph,
    gold_topic: Option<EntityId>,
    previous_answers: &[EntityId],
    gold_answers: &[EntityId],
) -> Option<(bool, LabelSource)> {
    let prev = *previous_answers.first()?;
    match gold_topic {
        Some(t) => Some((t == prev, LabelSource::Gold)),
        None if gold_answers.is_empty() => None,
        None => {
            let near = kg.within_hops(prev, 2);
            Some((gold_answers.iter().any(|a| near.contains(a)), LabelSource::TwoHopHeuristic))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            hidden_dim: 200,
            epochs: 20,
            batch_size: 12,
            learning_rate: 2e-5,
            weight_decay: 1.0,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SelectorReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub valid_accuracy: f64,
    pub valid_examples: usize,
    /// Accuracy of always predicting the majority class of the validation set.
    pub majority_baseline: f64,
    pub heuristic_labels: usize,
    /// Non-reproduced accuracy reported on real conversational data.
    pub reference_accuracy: f64,
}

pub fn accuracy(selector: &TopicSelector, ps: &ParameterSet, examples: &[SelectorExample], threshold: f64) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for ex in examples {
        let p = selector.predict_same_topic(ps, &ex.l_q)?;
        if (p >= threshold) == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

pub fn majority_baseline(examples: &[SelectorExample]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let pos = examples.iter().filter(|e| e.label).count();
    pos.max(examples.len() - pos) as f64 / examples.len() as f64
}

/// Binary cross-entropy training of the classifier on frozen encodings.
pub fn pretrain_selector(
    ps: &mut ParameterSet,
    selector: &TopicSelector,
    train: &[SelectorExample],
    valid: &[SelectorExample],
    config: &SelectorConfig,
) -> Result<SelectorReport> {
    if train.is_empty() {
        return Err(Error::contract("selector pretraining needs labelled turns"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(
        ps,
        &[selector.prefix.as_str()],
        AdamConfig {
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = SelectorReport {
        heuristic_labels: train
            .iter()
            .chain(valid)
            .filter(|e| e.source == LabelSource::TwoHopHeuristic)
            .count(),
        reference_accuracy: 0.832,
        ..SelectorReport::default()
    };
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size.max(1)) {
            let rows: Vec<f64> = batch.iter().flat_map(|&i| train[i].l_q.iter().copied()).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| usize::from(train[i].label)).collect();
            let grads = {
                let mut g = Graph::new(ps);
                let x = g.constant(Tensor::matrix(batch.len(), selector.input_dim, rows)?)?;
                let z = selector.ffn.forward(&mut g, x)?;
                let loss = g.cross_entropy(z, &targets)?;
                total += g.scalar(loss) * batch.len() as f64;
                g.backward(loss)?
            };
            adam.step(ps, &grads)?;
        }
        report.epoch_losses.push(total / train.len() as f64);
    }
    report.train_accuracy = accuracy(selector, ps, train, config.threshold)?;
    report.valid_accuracy = accuracy(selector, ps, valid, config.threshold)?;
    report.valid_examples = valid.len();
    report.majority_baseline = majority_baseline(valid);
    Ok(report)
}
