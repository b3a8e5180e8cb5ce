use serde::{Deserialize, Serialize};

use super::{entity_set, Walker, WalkState};
use crate::embedding::{fallback_rank, sort_by_score, ComplexEmbeddings, QuestionProjection};
use crate::error::Result;
use crate::kg::{EntityId, RelationId};
use crate::numerics::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSource {
    Beam,
    Fallback,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub hop: usize,
    pub relation: RelationId,
    pub entity: EntityId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedAnswer {
    pub entity: EntityId,
    /// Path probability for beam entries, answer probability for fallback.
    pub score: f64,
    pub source: AnswerSource,
    /// Best path for beam entries; empty for fallback.
    pub trace: Vec<TraceStep>,
}

/// Every graph entity exactly once; beam entries precede fallback entries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedAnswerList {
    pub entries: Vec<RankedAnswer>,
}

impl RankedAnswerList {
    pub fn top(&self) -> Option<&RankedAnswer> {
        self.entries.first()
    }

    pub fn entities(&self) -> Vec<EntityId> {
        self.entries.iter().map(|a| a.entity).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    pub max_hops: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { width: 20, max_hops: 3 }
    }
}

struct Beam {
    prob: f64,
    state: WalkState,
    trace: Vec<TraceStep>,
}

/// Width-`k` beam over action sequences of exactly `max_hops` steps, then
/// the ComplEx fallback for every entity the beam did not reach.
pub fn beam_infer(
    walker: &Walker,
    l_q: &[f64],
    topic: EntityId,
    config: &BeamConfig,
    table: &ComplexEmbeddings,
    projection: &QuestionProjection,
) -> Result<RankedAnswerList> {
    let policy = walker.policy;
    let mut g = Graph::new(walker.ps);
    let lq = g.constant(Tensor::row(l_q.to_vec()))?;
    let start = policy.initial_state(&mut g, topic, lq)?;
    let mut beams = vec![Beam {
        prob: 1.0,
        state: start,
        trace: Vec::new(),
    }];
    for hop in 0..config.max_hops {
        let last = hop + 1 == config.max_hops;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        let mut expanded = Vec::with_capacity(beams.len());
        for (bi, b) in beams.iter().enumerate() {
            let edges = walker.actions.actions(b.state.entity)?;
            let a = policy.action_matrix(&mut g, edges)?;
            let lp = policy.log_probs(&mut g, &b.state, lq, a)?;
            for (ai, l) in g.value(lp).data().iter().enumerate() {
                cands.push((b.prob * l.exp(), bi, ai));
            }
            expanded.push((edges, a));
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then_with(|| (x.1, x.2).cmp(&(y.1, y.2))));
        cands.truncate(config.width.max(1));
        let mut next = Vec::with_capacity(cands.len());
        for (prob, bi, ai) in cands {
            let (edges, a) = expanded[bi];
            let b = &beams[bi];
            let edge = edges[ai];
            let state = if last {
                WalkState {
                    entity: edge.target,
                    t: b.state.t + 1,
                    ..b.state
                }
            } else {
                policy.step_index(&mut g, &b.state, edges, a, ai)?
            };
            let mut trace = b.trace.clone();
            trace.push(TraceStep {
                hop: hop + 1,
                relation: edge.relation,
                entity: edge.target,
            });
            next.push(Beam { prob, state, trace });
        }
        beams = next;
    }

    // Keep each terminal entity's most probable path.
    let mut best: Vec<(EntityId, f64, usize)> = Vec::new();
    for (i, b) in beams.iter().enumerate() {
        match best.iter_mut().find(|(e, _, _)| *e == b.state.entity) {
            Some(entry) if entry.1 >= b.prob => {}
            Some(entry) => *entry = (b.state.entity, b.prob, i),
            None => best.push((b.state.entity, b.prob, i)),
        }
    }
    let mut ranked: Vec<(EntityId, f64)> = best.iter().map(|(e, p, _)| (*e, *p)).collect();
    sort_by_score(&mut ranked);
    let excluded = entity_set(&ranked);
    let mut entries: Vec<RankedAnswer> = ranked
        .iter()
        .map(|&(e, p)| {
            let idx = best.iter().find(|b| b.0 == e).expect("present").2;
            RankedAnswer {
                entity: e,
                score: p,
                source: AnswerSource::Beam,
                trace: beams[idx].trace.clone(),
            }
        })
        .collect();
    for (e, p) in fallback_rank(l_q, topic, &excluded, table, projection, walker.ps)? {
        entries.push(RankedAnswer {
            entity: e,
            score: p,
            source: AnswerSource::Fallback,
            trace: Vec::new(),
        });
    }
    Ok(RankedAnswerList { entries })
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeMap, HashSet};

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::agent::tests::toy;
    use crate::embedding::PROJECTION;

    /// Enumerates every action sequence of `hops` steps with its product
    /// probability, re-evaluating the policy from scratch for each prefix.
    fn exhaustive(w: &Walker, l_q: &[f64], topic: EntityId, hops: usize) -> Vec<(EntityId, f64)> {
        let mut out: BTreeMap<EntityId, f64> = BTreeMap::new();
        let mut stack = vec![(Vec::<usize>::new(), 1.0f64)];
        while let Some((path, prob)) = stack.pop() {
            let (entity, p) = w.distribution_after(l_q, topic, &path).unwrap();
            if path.len() == hops {
                let e = out.entry(entity).or_insert(prob);
                *e = e.max(prob);
                continue;
            }
            for (i, pi) in p.iter().enumerate() {
                let mut next = path.clone();
                next.push(i);
                stack.push((next, prob * pi));
            }
        }
        let mut v: Vec<_> = out.into_iter().collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    #[test]
    fn wide_beam_equals_exhaustive_enumeration() {
        let (kg, table, mut ps, policy, actions) = toy();
        let proj = QuestionProjection::register(&mut ps, &mut ChaCha8Rng::seed_from_u64(2), 2, 3).unwrap();
        let w = Walker {
            policy: &policy,
            ps: &ps,
            kg: &kg,
            actions: &actions,
        };
        let topic = kg.entity_by_key("a").unwrap();
        let lq = [0.7, -0.4];
        let oracle = exhaustive(&w, &lq, topic, 3);
        let got = beam_infer(&w, &lq, topic, &BeamConfig { width: 1000, max_hops: 3 }, &table, &proj).unwrap();
        let beam: Vec<(EntityId, f64)> = got
            .entries
            .iter()
            .filter(|a| a.source == AnswerSource::Beam)
            .map(|a| (a.entity, a.score))
            .collect();
        assert_eq!(beam.len(), oracle.len());
        for (x, y) in beam.iter().zip(&oracle) {
            assert_eq!(x.0, y.0);
            assert!((x.1 - y.1).abs() < 1e-12);
        }
        let all: HashSet<EntityId> = got.entities().into_iter().collect();
        assert_eq!(all.len(), kg.num_entities());
        assert_eq!(got.entries.len(), kg.num_entities());
        assert!(ps.contains(PROJECTION));
    }

    #[test]
    fn self_loop_only_topic_ranks_first() {
        let (kg, table, mut ps, policy, actions) = toy();
        let proj = QuestionProjection::register(&mut ps, &mut ChaCha8Rng::seed_from_u64(2), 2, 3).unwrap();
        let w = Walker {
            policy: &policy,
            ps: &ps,
            kg: &kg,
            actions: &actions,
        };
        let lonely = kg.entity_by_key("lonely").unwrap();
        let got = beam_infer(&w, &[0.1, 0.1], lonely, &BeamConfig::default(), &table, &proj).unwrap();
        let top = got.top().unwrap();
        assert_eq!(top.entity, lonely);
        assert_eq!(top.score, 1.0);
        assert_eq!(top.trace.len(), 3);
        assert_eq!(got.entries.iter().filter(|a| a.source == AnswerSource::Beam).count(), 1);
    }
}
