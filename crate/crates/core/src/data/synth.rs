//! Seeded synthetic knowledge graphs and conversations with known ground
//! truth.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{ConversationRecord, TurnRecord};
use super::reformulate::{paraphrase, render, FrameFamily};
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId};

pub const RELATION_WORDS: [&str; 10] = [
    "capital", "founder", "director", "author", "publisher", "genre", "producer", "composer", "owner", "creator",
];

const DOMAINS: [&str; 5] = ["books", "movies", "music", "soccer", "tv"];
const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub entities: usize,
    pub relations: usize,
    /// Probability that an entity carries a given relation.
    pub relation_density: f64,
    pub n_conversations: usize,
    pub turns_per_conversation: usize,
    pub n_human_refs: usize,
    pub n_generated_refs: usize,
    /// Probability that a follow-up returns to the main topic (ellipsis)
    /// instead of the previous answer (anaphora).
    pub topic_shift_prob: f64,
    pub two_hop_prob: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            entities: 200,
            relations: 6,
            relation_density: 0.4,
            n_conversations: 300,
            turns_per_conversation: 5,
            n_human_refs: 4,
            n_generated_refs: 4,
            topic_shift_prob: 0.3,
            two_hop_prob: 0.15,
            valid_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub train: Vec<ConversationRecord>,
    pub valid: Vec<ConversationRecord>,
    pub test: Vec<ConversationRecord>,
}

fn entity_name(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut s = String::new();
    for _ in 0..syllables {
        s.push_str(ONSETS.choose(rng).expect("nonempty"));
        s.push_str(VOWELS.choose(rng).expect("nonempty"));
    }
    s.push_str(["n", "r", "l", "s", "x"].choose(rng).expect("nonempty"));
    let mut c = s.chars();
    let first = c.next().expect("nonempty").to_ascii_uppercase();
    std::iter::once(first).chain(c).collect()
}

/// Random functional graph: every entity carries each relation with
/// probability `relation_density` (at least one relation), pointing at a
/// uniformly drawn other entity.
pub fn synth_kg(config: &SynthConfig, seed: u64) -> Result<KnowledgeGraph> {
    if config.entities < 2 {
        return Err(Error::Generation("need at least 2 entities".into()));
    }
    if config.relations == 0 || config.relations > RELATION_WORDS.len() {
        return Err(Error::Generation(format!(
            "relation count must be in 1..={}",
            RELATION_WORDS.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::with_capacity(config.entities);
    let mut used = HashSet::new();
    while names.len() < config.entities {
        let n = entity_name(&mut rng);
        if used.insert(n.to_lowercase()) {
            names.push(n);
        }
    }
    let mut triples = Vec::new();
    for h in 0..config.entities {
        let mut rels: Vec<usize> = (0..config.relations)
            .filter(|_| rng.gen_bool(config.relation_density))
            .collect();
        if rels.is_empty() {
            rels.push(rng.gen_range(0..config.relations));
        }
        for r in rels {
            let mut t = rng.gen_range(0..config.entities - 1);
            if t >= h {
                t += 1;
            }
            triples.push((h, r, t));
        }
    }
    let mut kg = KnowledgeGraph::from_labeled(
        triples
            .iter()
            .map(|&(h, r, t)| (names[h].as_str(), RELATION_WORDS[r], names[t].as_str())),
    )?;
    for n in &names {
        kg.add_isolated_entity(n)?;
    }
    Ok(kg)
}

/// One relation path with its unique answer.
struct Fact {
    path: Vec<RelationId>,
    answer: EntityId,
}

fn functional_tail(kg: &KnowledgeGraph, head: EntityId, rel: RelationId) -> Option<EntityId> {
    kg.forward_out(head).find(|t| t.relation == rel).map(|t| t.tail)
}

fn sample_fact(kg: &KnowledgeGraph, topic: EntityId, two_hop_prob: f64, rng: &mut ChaCha8Rng) -> Option<Fact> {
    let first: Vec<_> = kg.forward_out(topic).map(|t| (t.relation, t.tail)).collect();
    let &(r1, mid) = first.choose(rng)?;
    if rng.gen_bool(two_hop_prob) {
        let second: Vec<_> = kg.forward_out(mid).map(|t| t.relation).collect();
        if let Some(&r2) = second.choose(rng) {
            let answer = functional_tail(kg, mid, r2)?;
            if answer != topic {
                return Some(Fact {
                    path: vec![r1, r2],
                    answer,
                });
            }
        }
    }
    Some(Fact {
        path: vec![r1],
        answer: mid,
    })
}

enum Reference<'a> {
    Named(&'a str),
    Anaphora,
    Ellipsis,
}

/// Core phrase for a relation path, e.g. `the genre of the author of X`.
fn core_phrase(words: &[&str], reference: &Reference) -> String {
    let outer: Vec<String> = words.iter().rev().map(|w| format!("the {w}")).collect();
    match reference {
        Reference::Named(name) => format!("{} of {name}", outer.join(" of ")),
        Reference::Ellipsis => outer.join(" of "),
        Reference::Anaphora => {
            let (inner, rest) = outer.split_last().expect("nonempty path");
            let its = format!("its {}", inner.trim_start_matches("the "));
            if rest.is_empty() {
                its
            } else {
                format!("{} of {its}", rest.join(" of "))
            }
        }
    }
}

/// Generates conversations over `kg` and splits them by conversation into
/// train / valid / test. Test turns carry no human reformulations.
pub fn synth_generate(kg: &KnowledgeGraph, config: &SynthConfig, seed: u64) -> Result<SynthCorpus> {
    if config.n_conversations == 0 || config.turns_per_conversation == 0 {
        return Err(Error::Generation("need at least one conversation and one turn".into()));
    }
    let seeds: Vec<EntityId> = (0..kg.num_entities())
        .map(EntityId)
        .filter(|&e| kg.forward_out(e).next().is_some())
        .collect();
    if seeds.is_empty() || kg.num_entities() < 2 {
        return Err(Error::Generation("graph has no entity with an outgoing relation".into()));
    }
    let label = |e: EntityId| kg.entity(e).map(|x| x.label.clone());
    let key = |e: EntityId| kg.entity(e).map(|x| x.external_key.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = Vec::with_capacity(config.n_conversations);
    for c in 0..config.n_conversations {
        let main = *seeds.choose(&mut rng).expect("nonempty");
        let mut prev: Option<EntityId> = None;
        let mut turns = Vec::with_capacity(config.turns_per_conversation);
        for _ in 0..config.turns_per_conversation {
            let ellipsis = match prev {
                None => false,
                Some(p) => p != main && rng.gen_bool(config.topic_shift_prob),
            };
            let topic = match prev {
                Some(p) if !ellipsis => p,
                _ => main,
            };
            let fact = match sample_fact(kg, topic, config.two_hop_prob, &mut rng) {
                Some(f) => f,
                None => {
                    return Err(Error::Generation(format!(
                        "entity `{}` has no outgoing relation",
                        label(topic)?
                    )))
                }
            };
            let words = fact
                .path
                .iter()
                .map(|&r| kg.relation(r).map(|x| x.label.as_str()))
                .collect::<Result<Vec<_>>>()?;
            let topic_label = label(topic)?;
            let resolved = core_phrase(&words, &Reference::Named(&topic_label));
            let frame = rng.gen_range(0..5);
            let question = match prev {
                None => render(FrameFamily::Query, frame, &resolved),
                Some(_) if ellipsis => render(FrameFamily::Follow, frame, &core_phrase(&words, &Reference::Ellipsis)),
                Some(_) => render(FrameFamily::Query, frame, &core_phrase(&words, &Reference::Anaphora)),
            };
            let mut human = Vec::with_capacity(config.n_human_refs);
            if prev.is_some() {
                human.push(render(FrameFamily::Query, frame + 1, &resolved));
                human.push(render(FrameFamily::Query, frame + 2, &resolved));
            }
            for p in paraphrase(&question, 4) {
                if human.len() >= config.n_human_refs {
                    break;
                }
                human.push(p);
            }
            human.truncate(config.n_human_refs);
            turns.push(TurnRecord {
                generated_reformulations: paraphrase(&question, config.n_generated_refs),
                question,
                answers: vec![key(fact.answer)?],
                human_reformulations: human,
                gold_topic: Some(key(topic)?),
            });
            prev = Some(fact.answer);
        }
        all.push(ConversationRecord {
            id: format!("conv-{c:04}"),
            domain: DOMAINS[rng.gen_range(0..DOMAINS.len())].to_string(),
            seed_entity: key(main)?,
            turns,
        });
    }
    let n = all.len();
    let n_test = ((n as f64) * config.test_fraction).round() as usize;
    let n_valid = ((n as f64) * config.valid_fraction).round() as usize;
    if n_test + n_valid >= n {
        return Err(Error::Generation(format!("{n} conversations too few to split")));
    }
    let mut test = all.split_off(n - n_test);
    let valid = all.split_off(n - n_test - n_valid);
    for c in &mut test {
        for t in &mut c.turns {
            t.human_reformulations.clear();
        }
    }
    Ok(SynthCorpus {
        train: all,
        valid,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            entities: 30,
            n_conversations: 20,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn core_phrases() {
        assert_eq!(core_phrase(&["genre"], &Reference::Named("Bo")), "the genre of Bo");
        assert_eq!(core_phrase(&["author", "genre"], &Reference::Named("Bo")), "the genre of the author of Bo");
        assert_eq!(core_phrase(&["author", "genre"], &Reference::Anaphora), "the genre of its author");
        assert_eq!(core_phrase(&["genre"], &Reference::Anaphora), "its genre");
        assert_eq!(core_phrase(&["author", "genre"], &Reference::Ellipsis), "the genre of the author");
    }

    #[test]
    fn single_turn_names_topic() {
        let kg = synth_kg(&small(), 1).unwrap();
        let cfg = SynthConfig {
            turns_per_conversation: 1,
            ..small()
        };
        let corpus = synth_generate(&kg, &cfg, 3).unwrap();
        for c in corpus.train.iter().chain(&corpus.valid).chain(&corpus.test) {
            assert!(c.turns[0].question.contains(&c.seed_entity));
        }
    }

    #[test]
    fn no_shift_follows_previous_answer() {
        let kg = synth_kg(&small(), 1).unwrap();
        let cfg = SynthConfig {
            topic_shift_prob: 0.0,
            ..small()
        };
        let corpus = synth_generate(&kg, &cfg, 3).unwrap();
        for c in &corpus.train {
            for w in c.turns.windows(2) {
                assert_eq!(w[1].gold_topic.as_ref(), Some(&w[0].answers[0]));
            }
        }
    }

    #[test]
    fn too_small_graph() {
        let cfg = SynthConfig {
            entities: 1,
            ..SynthConfig::default()
        };
        assert!(matches!(synth_kg(&cfg, 0), Err(Error::Generation(_))));
    }
}
