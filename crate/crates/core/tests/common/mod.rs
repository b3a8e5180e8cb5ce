//! Shared random fixtures.
#![allow(dead_code)]

pub mod oracles;

use convqa_core::agent::{ActionSpace, Policy, PolicyConfig, Walker};
use convqa_core::embedding::{ComplexEmbeddings, QuestionProjection};
use convqa_core::numerics::ParameterSet;
use convqa_core::KnowledgeGraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Augmented random graph over `n` entities; names that no edge touches
/// become isolated entities.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, edges: usize) -> KnowledgeGraph {
    let names: Vec<String> = (0..n).map(|i| format!("e{i}")).collect();
    let rels = ["r", "s", "t"];
    let mut lines = String::new();
    for _ in 0..edges {
        let h = rng.gen_range(0..n);
        let t = rng.gen_range(0..n);
        lines.push_str(&format!("{}\t{}\t{}\n", names[h], rels[rng.gen_range(0..3)], names[t]));
    }
    let mut kg = KnowledgeGraph::parse_tsv(&lines, "random").unwrap();
    for name in &names {
        if kg.entity_by_key(name).is_none() {
            kg.add_isolated_entity(name).unwrap();
        }
    }
    kg.augment().unwrap()
}

pub struct Fixture {
    pub kg: KnowledgeGraph,
    pub table: ComplexEmbeddings,
    pub ps: ParameterSet,
    pub policy: Policy,
    pub actions: ActionSpace,
    pub projection: QuestionProjection,
}

pub fn fixture(seed: u64, n: usize, edges: usize) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kg = random_graph(&mut rng, n, edges);
    let table = ComplexEmbeddings::init(kg.num_entities(), kg.num_relations(), 3, &mut rng);
    let mut ps = ParameterSet::new(seed);
    let cfg = PolicyConfig {
        hidden_dim: 6,
        history_dim: 4,
        ..PolicyConfig::default()
    };
    let policy = Policy::register(&mut ps, &mut rng, &kg, &table, 2, &cfg).unwrap();
    let actions = ActionSpace::build(&kg, Some(&table), cfg.max_actions).unwrap();
    let projection = QuestionProjection::register(&mut ps, &mut rng, 2, 3).unwrap();
    Fixture {
        kg,
        table,
        ps,
        policy,
        actions,
        projection,
    }
}

impl Fixture {
    pub fn walker(&self) -> Walker<'_> {
        Walker {
            policy: &self.policy,
            ps: &self.ps,
            kg: &self.kg,
            actions: &self.actions,
        }
    }
}
