//! Monte Carlo policy-gradient training of the encoder and policy over
//! conversations, with optional teacher distillation.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{entropy, soft_reward, ActionSpace, Policy, RewardMode, WalkState};
use crate::data::{Conversation, Question, Turn};
use crate::embedding::{ComplexEmbeddings, QuestionProjection};
use crate::encoder::{distill_loss, squared_distance, QuestionEncoder};
use crate::error::{Error, Result};
use crate::kg::{ActionEdge, EdgeKind, EntityId, KnowledgeGraph, RelationId};
use crate::numerics::layers::FeedForward;
use crate::numerics::{AdamConfig, AdamState, Graph, ParameterSet, Tensor, Var};
use crate::selector::{select_topic, selector_label, TopicSelector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub rollouts: usize,
    /// Discount; rewards are terminal only, so any value leaves the
    /// objective unchanged and 1 is the documented setting.
    pub gamma: f64,
    pub entropy_weight: f64,
    pub max_hops: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beam_width: usize,
    pub distill_weight: f64,
    /// Weight of the auxiliary same-topic cross-entropy; ignored by stages
    /// without a topic head.
    pub topic_aux_weight: f64,
    /// Weight of the auxiliary path-relation cross-entropy; ignored by
    /// stages without a relation head.
    pub relation_aux_weight: f64,
    /// Subtract the per-question mean reward from each rollout's reward.
    pub baseline: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rollouts: 20,
            gamma: 1.0,
            entropy_weight: 0.01,
            max_hops: 3,
            learning_rate: 2e-5,
            weight_decay: 1.0,
            batch_size: 12,
            epochs: 20,
            beam_width: 20,
            distill_weight: 1.0,
            topic_aux_weight: 1.0,
            relation_aux_weight: 1.0,
            baseline: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rollouts == 0 || self.max_hops == 0 || self.batch_size == 0 {
            return Err(Error::Config("rollouts, max_hops and batch_size must be at least 1".into()));
        }
        if self.entropy_weight < 0.0 || !self.entropy_weight.is_finite() {
            return Err(Error::Config("entropy_weight must be a nonnegative number".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefSource {
    None,
    Human,
    Generated,
}

impl RefSource {
    pub fn pick(self, turn: &Turn) -> &[Question] {
        match self {
            RefSource::None => &[],
            RefSource::Human => &turn.human_reformulations,
            RefSource::Generated => &turn.generated_reformulations,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopicMode {
    /// The corpus's gold topic (teacher forcing).
    Gold,
    /// The selector applied to the trainable encoder's output, with the
    /// previous gold answer as candidate.
    Selector,
}

/// Fixed pieces of the environment.
#[derive(Clone, Copy)]
pub struct Env<'a> {
    pub kg: &'a KnowledgeGraph,
    pub actions: &'a ActionSpace,
    pub policy: &'a Policy,
    pub table: &'a ComplexEmbeddings,
    pub projection: Option<&'a QuestionProjection>,
}

/// What one training stage optimises.
#[derive(Clone, Copy)]
pub struct Stage<'a> {
    pub encoder: &'a QuestionEncoder,
    pub refs: RefSource,
    pub reward: RewardMode,
    pub topic: TopicMode,
    pub selector: Option<(&'a TopicSelector, f64)>,
    /// Frozen teacher and its reformulation source, for distillation.
    pub teacher: Option<(&'a QuestionEncoder, RefSource)>,
    /// Trainable same-topic head fitted jointly on labelled follow-ups,
    /// so the encoder keeps topic-shift cues.
    pub topic_aux: Option<&'a TopicSelector>,
    /// Trainable head predicting the relations of the shortest path from the
    /// topic to a gold answer (see [`path_relations`]).
    pub relation_aux: Option<&'a RelationHead>,
}

/// Two-slot relation classifier over `l_q`: first hop, then second hop
/// (the self-loop relation for one-hop paths).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RelationHead {
    pub prefix: String,
    pub num_relations: usize,
    ffn: FeedForward,
}

impl RelationHead {
    pub fn register(
        ps: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        num_relations: usize,
    ) -> Result<Self> {
        Ok(RelationHead {
            prefix: prefix.to_string(),
            num_relations,
            ffn: FeedForward::register(ps, rng, prefix, input_dim, hidden_dim, 2 * num_relations)?,
        })
    }

    /// Summed cross-entropy of both slots.
    pub fn loss(&self, g: &mut Graph, l_q: Var, labels: [RelationId; 2]) -> Result<Var> {
        let z = self.ffn.forward(g, l_q)?;
        let n = self.num_relations;
        let first = g.slice_cols(z, 0, n)?;
        let second = g.slice_cols(z, n, n)?;
        let a = g.cross_entropy(first, &[labels[0].0])?;
        let b = g.cross_entropy(second, &[labels[1].0])?;
        g.add(a, b)
    }
}

/// Relations of the lowest-uid path of one or two real hops from `topic`
/// to any gold answer; `None` when no such path exists.
pub fn path_relations(kg: &KnowledgeGraph, topic: EntityId, gold: &[EntityId]) -> Result<Option<[RelationId; 2]>> {
    let first = kg.out_edges(topic)?;
    let Some(stay) = first.iter().find(|a| a.kind == EdgeKind::SelfLoop).map(|a| a.relation) else {
        return Ok(None);
    };
    let real = |a: &&ActionEdge| a.kind != EdgeKind::SelfLoop;
    if let Some(a) = first.iter().filter(real).find(|a| gold.contains(&a.target)) {
        return Ok(Some([a.relation, stay]));
    }
    for a in first.iter().filter(real) {
        if let Some(b) = kg.out_edges(a.target)?.iter().filter(real).find(|b| gold.contains(&b.target)) {
            return Ok(Some([a.relation, b.relation]));
        }
    }
    Ok(None)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_reward: f64,
    pub entropy: f64,
    pub loss: f64,
    pub wall_ms: u64,
    /// Fraction of rollouts ending at a gold answer.
    pub hit_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distill: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

#[derive(Default)]
struct Stats {
    reward: f64,
    hits: usize,
    rollouts: usize,
    entropy: f64,
    visits: usize,
    questions: usize,
    distill: f64,
}

/// Per-turn teacher outputs of a frozen encoder over a conversation.
pub fn encode_values(
    ps: &ParameterSet,
    encoder: &QuestionEncoder,
    conv: &Conversation,
    refs: RefSource,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new(ps);
    let mut state = encoder.zero_state(&mut g)?;
    let mut out = Vec::with_capacity(conv.turns.len());
    for turn in &conv.turns {
        state = encoder.encode_turn(&mut g, &turn.question, refs.pick(turn), state)?;
        out.push(g.value(state.h).clone());
    }
    Ok(out)
}

/// Mean per-turn squared distance between two encoders' outputs.
pub fn mean_distance(
    ps: &ParameterSet,
    teacher: (&QuestionEncoder, RefSource),
    student: (&QuestionEncoder, RefSource),
    convs: &[Conversation],
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for c in convs {
        let t = encode_values(ps, teacher.0, c, teacher.1)?;
        let s = encode_values(ps, student.0, c, student.1)?;
        for (a, b) in t.iter().zip(&s) {
            total += squared_distance(a.data(), b.data());
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

struct Node<'e> {
    state: WalkState,
    edges: &'e [ActionEdge],
    logp: Var,
    probs: Vec<f64>,
    children: Vec<Option<usize>>,
    coef: Vec<f64>,
    visits: usize,
}

fn sample(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn push_node<'e>(
    g: &mut Graph,
    env: &Env<'e>,
    l_q: Var,
    nodes: &mut Vec<Node<'e>>,
    mats: &mut Vec<Var>,
    state: WalkState,
) -> Result<usize> {
    let edges = env.actions.actions(state.entity)?;
    let a = env.policy.action_matrix(g, edges)?;
    let logp = env.policy.log_probs(g, &state, l_q, a)?;
    let probs: Vec<f64> = g.value(logp).data().iter().map(|x| x.exp()).collect();
    nodes.push(Node {
        state,
        edges,
        logp,
        probs,
        children: vec![None; edges.len()],
        coef: vec![0.0; edges.len()],
        visits: 0,
    });
    mats.push(a);
    Ok(nodes.len() - 1)
}

/// Samples `rollouts` walks from `topic` and returns the REINFORCE
/// surrogate loss (negated objective) for them.
#[allow(clippy::too_many_arguments)]
fn rollout_loss<'e>(
    g: &mut Graph,
    env: &Env<'e>,
    l_q: Var,
    topic: EntityId,
    reward: &mut dyn FnMut(EntityId) -> Result<f64>,
    gold: &[EntityId],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    stats: &mut Stats,
) -> Result<Var> {
    let root_state = env.policy.initial_state(g, topic, l_q)?;
    let mut nodes: Vec<Node<'e>> = Vec::new();
    let mut mats: Vec<Var> = Vec::new();
    push_node(g, env, l_q, &mut nodes, &mut mats, root_state)?;

    let n = cfg.rollouts;
    let mut paths: Vec<Vec<(usize, usize)>> = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    let mut cache: HashMap<EntityId, f64> = HashMap::new();
    for _ in 0..n {
        let mut node = 0;
        let mut path = Vec::with_capacity(cfg.max_hops);
        let mut terminal = topic;
        for depth in 0..cfg.max_hops {
            let ai = sample(&nodes[node].probs, rng);
            path.push((node, ai));
            if depth + 1 == cfg.max_hops {
                terminal = nodes[node].edges[ai].target;
                break;
            }
            node = match nodes[node].children[ai] {
                Some(c) => c,
                None => {
                    let st = env
                        .policy
                        .step_index(g, &nodes[node].state, nodes[node].edges, mats[node], ai)?;
                    let c = push_node(g, env, l_q, &mut nodes, &mut mats, st)?;
                    nodes[node].children[ai] = Some(c);
                    c
                }
            };
        }
        let r = match cache.get(&terminal) {
            Some(&r) => r,
            None => {
                let r = reward(terminal)?;
                cache.insert(terminal, r);
                r
            }
        };
        stats.reward += r;
        stats.hits += usize::from(gold.contains(&terminal));
        stats.rollouts += 1;
        paths.push(path);
        rewards.push(r);
    }
    let baseline = if cfg.baseline {
        rewards.iter().sum::<f64>() / n as f64
    } else {
        0.0
    };
    for (path, r) in paths.iter().zip(&rewards) {
        for &(node, ai) in path {
            nodes[node].coef[ai] += (r - baseline) / n as f64;
            nodes[node].visits += 1;
        }
    }
    let mut terms = Vec::with_capacity(nodes.len());
    for node in &nodes {
        if node.visits == 0 {
            continue;
        }
        let h = entropy(&node.probs);
        stats.entropy += h * node.visits as f64;
        stats.visits += node.visits;
        let c = g.constant(Tensor::row(node.coef.clone()))?;
        let pg = g.mul(node.logp, c)?;
        let pg = g.sum(pg)?;
        let mut term = g.scale(pg, -1.0)?;
        if cfg.entropy_weight > 0.0 {
            let p = g.exp(node.logp)?;
            let plogp = g.mul(p, node.logp)?;
            let neg_h = g.sum(plogp)?;
            let w = cfg.entropy_weight * node.visits as f64 / n as f64;
            let e = g.scale(neg_h, w)?;
            term = g.add(term, e)?;
        }
        terms.push(term);
    }
    let all = g.concat_cols(&terms)?;
    g.sum(all)
}

/// Loss for one conversation: REINFORCE over every answerable turn plus
/// weighted distillation. Returns the loss and the number of questions.
#[allow(clippy::too_many_arguments)]
fn conversation_loss(
    g: &mut Graph,
    env: &Env,
    stage: &Stage,
    conv: &Conversation,
    teacher_out: Option<&[Tensor]>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    stats: &mut Stats,
) -> Result<(Var, usize)> {
    let ps = g.params();
    let enc = stage.encoder;
    let mut state = enc.zero_state(g)?;
    let mut l_qs = Vec::with_capacity(conv.turns.len());
    for turn in &conv.turns {
        state = enc.encode_turn(g, &turn.question, stage.refs.pick(turn), state)?;
        l_qs.push(state.h);
    }
    let mut terms = Vec::new();
    let mut questions = 0;
    for (i, turn) in conv.turns.iter().enumerate() {
        if turn.gold_answers.is_empty() {
            continue;
        }
        let l_q = l_qs[i];
        let lq_value = g.value(l_q).data().to_vec();
        let topic = match stage.topic {
            TopicMode::Gold => turn.gold_topic.unwrap_or(conv.main_topic_entity),
            TopicMode::Selector => {
                let (sel, threshold) = stage
                    .selector
                    .ok_or_else(|| Error::contract("selector topic mode without a selector"))?;
                let prev = (i > 0).then(|| conv.turns[i - 1].gold_answers.first().copied()).flatten();
                let p = if prev.is_some() {
                    sel.predict_same_topic(ps, &lq_value)?
                } else {
                    0.0
                };
                select_topic(p, prev, conv.main_topic_entity, threshold, env.kg)
            }
        };
        let gold = &turn.gold_answers;
        let mut reward = |e: EntityId| -> Result<f64> {
            match stage.reward {
                RewardMode::Hard => Ok(if gold.contains(&e) { 1.0 } else { 0.0 }),
                RewardMode::Soft => {
                    let proj = env
                        .projection
                        .ok_or_else(|| Error::contract("soft reward requires a fitted projection"))?;
                    soft_reward(e, gold, &lq_value, topic, env.table, proj, ps)
                }
            }
        };
        terms.push(rollout_loss(g, env, l_q, topic, &mut reward, gold, cfg, rng, stats)?);
        questions += 1;
    }
    stats.questions += questions;
    if let (Some(head), true) = (stage.topic_aux, cfg.topic_aux_weight > 0.0) {
        for i in 1..conv.turns.len() {
            let turn = &conv.turns[i];
            let Some((label, _)) = selector_label(env.kg, turn.gold_topic, &conv.turns[i - 1].gold_answers, &turn.gold_answers)
            else {
                continue;
            };
            let z = head.forward(g, l_qs[i])?;
            let ce = g.cross_entropy(z, &[usize::from(label)])?;
            terms.push(g.scale(ce, cfg.topic_aux_weight)?);
        }
    }
    if let (Some(head), true) = (stage.relation_aux, cfg.relation_aux_weight > 0.0) {
        for (i, turn) in conv.turns.iter().enumerate() {
            let topic = turn.gold_topic.unwrap_or(conv.main_topic_entity);
            let Some(labels) = path_relations(env.kg, topic, &turn.gold_answers)? else {
                continue;
            };
            let ce = head.loss(g, l_qs[i], labels)?;
            terms.push(g.scale(ce, cfg.relation_aux_weight)?);
        }
    }
    if let Some(t) = teacher_out {
        if cfg.distill_weight > 0.0 {
            let d = distill_loss(g, t, &l_qs)?;
            stats.distill += g.scalar(d);
            terms.push(g.scale(d, cfg.distill_weight)?);
        }
    }
    if terms.is_empty() {
        return Ok((g.constant(Tensor::scalar(0.0))?, 0));
    }
    let all = g.concat_cols(&terms)?;
    Ok((g.sum(all)?, questions))
}

fn abort(conv: &Conversation, e: Error) -> Error {
    match e {
        Error::Numeric { primitive } => Error::TrainingAborted {
            example: conv.id.clone(),
            reason: format!("non-finite value in `{primitive}`"),
        },
        other => other,
    }
}

/// Trains the stage encoder and the policy with REINFORCE (plus
/// distillation when a teacher is given). Parameters outside those two are
/// left bitwise unchanged.
pub fn train_reinforce(
    ps: &mut ParameterSet,
    env: &Env,
    stage: &Stage,
    corpus: &[Conversation],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainLog> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyInput("no training conversations".into()));
    }
    if let Some((teacher, _)) = stage.teacher {
        if !teacher.is_frozen() {
            return Err(Error::contract("teacher encoder must be frozen before distillation"));
        }
        if teacher.prefix == stage.encoder.prefix {
            return Err(Error::contract("teacher and student share parameters"));
        }
    }
    let teacher_out: Option<Vec<Vec<Tensor>>> = match stage.teacher {
        Some((t, refs)) => Some(corpus.iter().map(|c| encode_values(ps, t, c, refs)).collect::<Result<_>>()?),
        None => None,
    };
    let mut trainable: Vec<&str> = vec![stage.encoder.prefix.as_str()];
    trainable.extend(env.policy.trainable_prefixes());
    if let Some(head) = stage.topic_aux {
        if cfg.topic_aux_weight > 0.0 {
            trainable.push(head.prefix.as_str());
        }
    }
    if let Some(head) = stage.relation_aux {
        if cfg.relation_aux_weight > 0.0 {
            trainable.push(head.prefix.as_str());
        }
    }
    let frozen: Vec<String> = ps
        .names()
        .filter(|n| !trainable.iter().any(|p| n.starts_with(p)))
        .cloned()
        .collect();
    let frozen_refs: Vec<&str> = frozen.iter().map(String::as_str).collect();
    let mut adam = AdamState::new(
        ps,
        &trainable,
        AdamConfig {
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut stats = Stats::default();
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = adam.zero_grads(ps)?;
            let mut questions = 0usize;
            for &ci in batch {
                let conv = &corpus[ci];
                let t_out = teacher_out.as_ref().map(|t| t[ci].as_slice());
                let g_conv = {
                    let mut g = Graph::with_frozen(ps, &frozen_refs);
                    let (loss, q) = conversation_loss(&mut g, env, stage, conv, t_out, cfg, &mut rng, &mut stats)
                        .map_err(|e| abort(conv, e))?;
                    questions += q;
                    loss_sum += g.scalar(loss);
                    g.backward(loss).map_err(|e| abort(conv, e))?
                };
                if !g_conv.is_finite() {
                    return Err(Error::TrainingAborted {
                        example: conv.id.clone(),
                        reason: "non-finite gradient".into(),
                    });
                }
                grads.accumulate(&g_conv);
            }
            grads.retain_prefixes(&trainable.iter().map(|s| s.to_string()).collect::<Vec<_>>());
            grads.scale(1.0 / questions.max(1) as f64);
            adam.step(ps, &grads)?;
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            mean_reward: stats.reward / stats.rollouts.max(1) as f64,
            entropy: stats.entropy / stats.visits.max(1) as f64,
            loss: loss_sum / stats.questions.max(1) as f64,
            wall_ms: started.elapsed().as_millis() as u64,
            hit_rate: stats.hits as f64 / stats.rollouts.max(1) as f64,
            distill: teacher_out.as_ref().map(|_| stats.distill / corpus.len() as f64),
        };
        log::info!(
            "epoch {}: reward {:.4} hit {:.4} entropy {:.4} loss {:.4}",
            entry.epoch,
            entry.mean_reward,
            entry.hit_rate,
            entry.entropy,
            entry.loss
        );
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    Ok(log)
}

/// REINFORCE surrogate for one question under hard reward, with walks drawn
/// from a fresh generator seeded by `seed`. Rebuilding it on perturbed
/// parameters replays the same walks, so it can be checked numerically.
pub fn policy_surrogate(
    g: &mut Graph,
    env: &Env,
    l_q: Var,
    topic: EntityId,
    gold: &[EntityId],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Var> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reward = |e: EntityId| Ok(if gold.contains(&e) { 1.0 } else { 0.0 });
    rollout_loss(g, env, l_q, topic, &mut reward, gold, cfg, &mut rng, &mut Stats::default())
}
