//! The graph-walking policy: action construction with unique edge
//! embeddings, the policy network, soft reward and beam-search inference.

mod beam;
pub mod reinforce;

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use beam::{beam_infer, AnswerSource, BeamConfig, RankedAnswer, RankedAnswerList, TraceStep};

use crate::embedding::{answer_probability, ComplexEmbeddings, QuestionProjection};
use crate::error::{Error, Result};
use crate::kg::{ActionEdge, EdgeKind, EntityId, KnowledgeGraph};
use crate::numerics::layers::{Linear, LstmCell, LstmState};
use crate::numerics::{init_range, Graph, ParameterSet, Tensor, Var};

pub const POLICY_PREFIX: &str = "policy";
pub const ENTITY_TABLE: &str = "policy/entity";
pub const RELATION_TABLE: &str = "policy/relation";
pub const UNIQUE_EDGES: &str = "edges/unique";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub hidden_dim: usize,
    pub history_dim: usize,
    pub max_actions: usize,
    pub unique_edges: bool,
    /// Half-width of the uniform initialisation of unique edge embeddings.
    pub unique_init: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            hidden_dim: 200,
            history_dim: 200,
            max_actions: 200,
            unique_edges: true,
            unique_init: 0.1,
        }
    }
}

/// Per-entity candidate actions after the out-degree cap.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSpace {
    edges: Vec<Vec<ActionEdge>>,
}

impl ActionSpace {
    /// Entities with more than `max_actions` out-edges keep their self-loop
    /// and the `max_actions - 1` edges with the highest ComplEx triple score.
    pub fn build(kg: &KnowledgeGraph, table: Option<&ComplexEmbeddings>, max_actions: usize) -> Result<Self> {
        if max_actions == 0 {
            return Err(Error::Config("max_actions must be at least 1".into()));
        }
        let mut edges = Vec::with_capacity(kg.num_entities());
        for e in 0..kg.num_entities() {
            let mut out = kg.out_edges(EntityId(e))?;
            if out.len() > max_actions {
                let (stop, mut rest): (Vec<_>, Vec<_>) = out.into_iter().partition(|a| a.kind == EdgeKind::SelfLoop);
                let mut scored = Vec::with_capacity(rest.len());
                for a in rest.drain(..) {
                    let s = match table {
                        Some(t) => t.triple_score(EntityId(e), a.relation, a.target)?,
                        None => 0.0,
                    };
                    scored.push((s, a));
                }
                scored.sort_by(|x, y| y.0.total_cmp(&x.0).then_with(|| x.1.uid.cmp(&y.1.uid)));
                out = stop
                    .into_iter()
                    .chain(scored.into_iter().take(max_actions - 1).map(|(_, a)| a))
                    .collect();
                out.sort_by_key(|a| a.uid);
            }
            edges.push(out);
        }
        Ok(ActionSpace { edges })
    }

    pub fn actions(&self, entity: EntityId) -> Result<&[ActionEdge]> {
        self.edges
            .get(entity.0)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("entity {} has no action list", entity.0)))
    }

    pub fn num_entities(&self) -> usize {
        self.edges.len()
    }
}

/// Walk position, recurrent history `g_t` and step index.
#[derive(Clone, Copy, Debug)]
pub struct WalkState {
    pub entity: EntityId,
    pub history: LstmState,
    pub t: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Policy {
    pub entity_dim: usize,
    pub question_dim: usize,
    pub config: PolicyConfig,
    pub num_entities: usize,
    init: Linear,
    history: LstmCell,
    w1: Linear,
    w2: Linear,
}

impl Policy {
    /// Registers the policy. Entity and relation tables start from the real
    /// part of the ComplEx embeddings; unique edge vectors start uniform
    /// (or zero when disabled).
    pub fn register(
        ps: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        kg: &KnowledgeGraph,
        table: &ComplexEmbeddings,
        question_dim: usize,
        config: &PolicyConfig,
    ) -> Result<Self> {
        if table.num_entities() != kg.num_entities() || table.num_relations() != kg.num_relations() {
            return Err(Error::dim("embedding table does not match the augmented graph"));
        }
        let d = table.dim;
        ps.insert(ENTITY_TABLE, table.entity_re.clone())?;
        ps.insert(RELATION_TABLE, table.relation_re.clone())?;
        let unique = if config.unique_edges {
            init_range(rng, &[kg.num_triples(), d], config.unique_init)
        } else {
            Tensor::zeros(&[kg.num_triples(), d])
        };
        ps.insert(UNIQUE_EDGES, unique)?;
        Self::register_layers(ps, rng, d, question_dim, kg.num_entities(), config)
    }

    fn register_layers(
        ps: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        d: usize,
        question_dim: usize,
        num_entities: usize,
        config: &PolicyConfig,
    ) -> Result<Self> {
        let width = 3 * d;
        Ok(Policy {
            entity_dim: d,
            question_dim,
            config: config.clone(),
            num_entities,
            init: Linear::register(ps, rng, &format!("{POLICY_PREFIX}/init"), d + question_dim, width, false)?,
            history: LstmCell::register(ps, rng, &format!("{POLICY_PREFIX}/history"), width, config.history_dim)?,
            w1: Linear::register(
                ps,
                rng,
                &format!("{POLICY_PREFIX}/w1"),
                d + question_dim + config.history_dim,
                config.hidden_dim,
                true,
            )?,
            w2: Linear::register(ps, rng, &format!("{POLICY_PREFIX}/w2"), config.hidden_dim, width, false)?,
        })
    }

    pub fn layout(entity_dim: usize, question_dim: usize, num_entities: usize, config: &PolicyConfig) -> Result<Self> {
        let mut scratch = ParameterSet::new(0);
        Self::register_layers(
            &mut scratch,
            &mut ChaCha8Rng::seed_from_u64(0),
            entity_dim,
            question_dim,
            num_entities,
            config,
        )
    }

    /// Prefixes whose parameters the policy trains.
    pub fn trainable_prefixes(&self) -> Vec<&'static str> {
        let mut p = vec![POLICY_PREFIX];
        if self.config.unique_edges {
            p.push(UNIQUE_EDGES);
        }
        p
    }

    pub fn action_width(&self) -> usize {
        3 * self.entity_dim
    }

    fn check_entity(&self, e: EntityId) -> Result<()> {
        if e.0 >= self.num_entities {
            return Err(Error::Lookup(format!("entity {} not in graph", e.0)));
        }
        Ok(())
    }

    /// `g_0 = LSTM(0, proj([e_topic || l_q]))`.
    pub fn initial_state(&self, g: &mut Graph, topic: EntityId, l_q: Var) -> Result<WalkState> {
        self.check_entity(topic)?;
        let e = g.param_rows(ENTITY_TABLE, &[topic.0])?;
        let x = g.concat_cols(&[e, l_q])?;
        let x = self.init.forward(g, x)?;
        let zero = self.history.zero_state(g)?;
        let history = self.history.step(g, x, zero)?;
        Ok(WalkState {
            entity: topic,
            history,
            t: 0,
        })
    }

    /// Rows `[r || u || e']` for each candidate action.
    pub fn action_matrix(&self, g: &mut Graph, edges: &[ActionEdge]) -> Result<Var> {
        if edges.is_empty() {
            return Err(Error::EmptyInput("action set is empty".into()));
        }
        let rels: Vec<usize> = edges.iter().map(|a| a.relation.0).collect();
        let uids: Vec<usize> = edges.iter().map(|a| a.uid.0).collect();
        let targets: Vec<usize> = edges.iter().map(|a| a.target.0).collect();
        let r = g.param_rows(RELATION_TABLE, &rels)?;
        let u = g.param_rows(UNIQUE_EDGES, &uids)?;
        let e = g.param_rows(ENTITY_TABLE, &targets)?;
        g.concat_cols(&[r, u, e])
    }

    /// Action logits `A W2 ReLU(W1 [e_n || l_q || g_t])` as a `1 x m` row.
    pub fn logits(&self, g: &mut Graph, state: &WalkState, l_q: Var, actions: Var) -> Result<Var> {
        if g.value(actions).cols() != self.action_width() {
            return Err(Error::dim(format!(
                "action rows of width {} for policy width {}",
                g.value(actions).cols(),
                self.action_width()
            )));
        }
        let e = g.param_rows(ENTITY_TABLE, &[state.entity.0])?;
        let x = g.concat_cols(&[e, l_q, state.history.h])?;
        let h = self.w1.forward(g, x)?;
        let h = g.relu(h)?;
        let z = self.w2.forward(g, h)?;
        g.matmul_t(z, actions)
    }

    pub fn log_probs(&self, g: &mut Graph, state: &WalkState, l_q: Var, actions: Var) -> Result<Var> {
        let z = self.logits(g, state, l_q, actions)?;
        g.log_softmax(z)
    }

    /// Moves to `edge`'s target and advances the history on its action row.
    /// `edges` must be the list `actions` was built from.
    pub fn step(&self, g: &mut Graph, state: &WalkState, edges: &[ActionEdge], actions: Var, edge: &ActionEdge) -> Result<WalkState> {
        let idx = edges
            .iter()
            .position(|a| a == edge)
            .ok_or_else(|| Error::contract(format!("edge {} is not an action of entity {}", edge.uid.0, state.entity.0)))?;
        self.step_index(g, state, edges, actions, idx)
    }

    pub fn step_index(&self, g: &mut Graph, state: &WalkState, edges: &[ActionEdge], actions: Var, idx: usize) -> Result<WalkState> {
        let row = g.select_rows(actions, &[idx])?;
        let history = self.history.step(g, row, state.history)?;
        Ok(WalkState {
            entity: edges[idx].target,
            history,
            t: state.t + 1,
        })
    }
}

/// Read-only view of everything a walk needs.
#[derive(Clone, Copy)]
pub struct Walker<'a> {
    pub policy: &'a Policy,
    pub ps: &'a ParameterSet,
    pub kg: &'a KnowledgeGraph,
    pub actions: &'a ActionSpace,
}

impl<'a> Walker<'a> {
    /// Policy distribution over the actions of `entity` after walking
    /// `path` (action indices) from `topic`.
    pub fn distribution_after(&self, l_q: &[f64], topic: EntityId, path: &[usize]) -> Result<(EntityId, Vec<f64>)> {
        let mut g = Graph::new(self.ps);
        let lq = g.constant(Tensor::row(l_q.to_vec()))?;
        let mut st = self.policy.initial_state(&mut g, topic, lq)?;
        for &i in path {
            let edges = self.actions.actions(st.entity)?;
            let a = self.policy.action_matrix(&mut g, edges)?;
            st = self.policy.step_index(&mut g, &st, edges, a, i)?;
        }
        let edges = self.actions.actions(st.entity)?;
        let a = self.policy.action_matrix(&mut g, edges)?;
        let lp = self.policy.log_probs(&mut g, &st, lq, a)?;
        Ok((st.entity, g.value(lp).data().iter().map(|x| x.exp()).collect()))
    }
}

/// How terminal walk positions are rewarded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// 1 at a gold answer, else 0.
    Hard,
    /// 1 at a gold answer, else the embedding-based answer probability.
    Soft,
}

pub fn soft_reward(
    final_entity: EntityId,
    gold: &[EntityId],
    l_q: &[f64],
    topic: EntityId,
    table: &ComplexEmbeddings,
    projection: &QuestionProjection,
    ps: &ParameterSet,
) -> Result<f64> {
    if gold.contains(&final_entity) {
        return Ok(1.0);
    }
    answer_probability(l_q, topic, final_entity, table, projection, ps)
}

/// Shannon entropy `-sum p ln p` of a distribution.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

pub(crate) fn entity_set(list: &[(EntityId, f64)]) -> HashSet<EntityId> {
    list.iter().map(|(e, _)| *e).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::EdgeUid;

    pub(crate) fn toy() -> (KnowledgeGraph, ComplexEmbeddings, ParameterSet, Policy, ActionSpace) {
        let mut kg = KnowledgeGraph::parse_tsv("a\tr\tb\nb\ts\tc\na\ts\td\nd\tr\tc\n", "toy").unwrap();
        kg.add_isolated_entity("lonely").unwrap();
        let kg = kg.augment().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let table = ComplexEmbeddings::init(kg.num_entities(), kg.num_relations(), 3, &mut rng);
        let mut ps = ParameterSet::new(11);
        let cfg = PolicyConfig {
            hidden_dim: 5,
            history_dim: 4,
            max_actions: 200,
            unique_edges: true,
            unique_init: 0.1,
        };
        let policy = Policy::register(&mut ps, &mut rng, &kg, &table, 2, &cfg).unwrap();
        let actions = ActionSpace::build(&kg, Some(&table), 200).unwrap();
        (kg, table, ps, policy, actions)
    }

    #[test]
    fn single_action_is_certain() {
        let (kg, _, ps, policy, actions) = toy();
        let w = Walker {
            policy: &policy,
            ps: &ps,
            kg: &kg,
            actions: &actions,
        };
        let lonely = kg.entity_by_key("lonely").unwrap();
        let (_, p) = w.distribution_after(&[0.3, -0.2], lonely, &[]).unwrap();
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn zero_w2_is_uniform() {
        let (kg, _, mut ps, policy, actions) = toy();
        ps.get_mut("policy/w2/weight").unwrap().fill(0.0);
        let w = Walker {
            policy: &policy,
            ps: &ps,
            kg: &kg,
            actions: &actions,
        };
        let a = kg.entity_by_key("a").unwrap();
        let (_, p) = w.distribution_after(&[0.3, -0.2], a, &[]).unwrap();
        assert_eq!(p.len(), 3);
        for x in &p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn foreign_action_is_contract_error() {
        let (kg, _, ps, policy, actions) = toy();
        let mut g = Graph::new(&ps);
        let lq = g.constant(Tensor::row(vec![0.1, 0.2])).unwrap();
        let a = kg.entity_by_key("a").unwrap();
        let st = policy.initial_state(&mut g, a, lq).unwrap();
        let edges = actions.actions(a).unwrap();
        let m = policy.action_matrix(&mut g, edges).unwrap();
        let foreign = ActionEdge {
            uid: EdgeUid(999),
            ..edges[0]
        };
        assert!(matches!(policy.step(&mut g, &st, edges, m, &foreign), Err(Error::Contract(_))));
        let next = policy.step(&mut g, &st, edges, m, &edges[0]).unwrap();
        assert_eq!(next.entity, edges[0].target);
        assert_eq!(next.t, 1);
    }

    #[test]
    fn invalid_topic_is_lookup_error() {
        let (_, _, ps, policy, _) = toy();
        let mut g = Graph::new(&ps);
        let lq = g.constant(Tensor::row(vec![0.1, 0.2])).unwrap();
        assert!(matches!(policy.initial_state(&mut g, EntityId(99), lq), Err(Error::Lookup(_))));
    }

    #[test]
    fn cap_keeps_self_loop() {
        let (kg, table, ..) = toy();
        let capped = ActionSpace::build(&kg, Some(&table), 2).unwrap();
        for e in 0..kg.num_entities() {
            let acts = capped.actions(EntityId(e)).unwrap();
            assert!(acts.len() <= 2);
            assert_eq!(acts.iter().filter(|a| a.kind == EdgeKind::SelfLoop).count(), 1);
        }
    }

    #[test]
    fn uniform_entropy_is_log_m() {
        let p = vec![0.25; 4];
        assert!((entropy(&p) - 4f64.ln()).abs() < 1e-15);
    }
}
