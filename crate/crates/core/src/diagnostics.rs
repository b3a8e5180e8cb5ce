//! Finite-difference gradient checks over every trainable building block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::reinforce::{policy_surrogate, Env, TrainConfig};
use crate::agent::{ActionSpace, Policy, PolicyConfig};
use crate::data::{tokenize, Vocabulary};
use crate::embedding::ComplexEmbeddings;
use crate::encoder::{distill_loss, EncoderConfig, QuestionEncoder};
use crate::error::Result;
use crate::kg::KnowledgeGraph;
use crate::numerics::layers::{FeedForward, LayerNorm, Linear, LstmCell, TransformerEncoder};
use crate::numerics::{finite_diff_check, GradCheckConfig, GradCheckReport, Graph, ParameterSet, Tensor, Var};
use crate::selector::TopicSelector;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

/// `sum(out * w)` for a fixed random `w`, so every output coordinate
/// contributes with a distinct weight.
fn weighted_sum(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    let c = g.constant(w.clone())?;
    let m = g.mul(out, c)?;
    g.sum(m)
}

fn names(ps: &ParameterSet) -> Vec<String> {
    ps.names().cloned().collect()
}

/// The 5-entity graph used for the policy check.
pub fn five_node_graph() -> Result<KnowledgeGraph> {
    let mut kg = KnowledgeGraph::parse_tsv("a\tr\tb\nb\ts\tc\na\ts\td\nd\tr\tc\n", "five-node")?;
    kg.add_isolated_entity("e")?;
    kg.augment()
}

/// Runs every check; each report lists per-parameter maximum relative error.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    {
        let mut ps = ParameterSet::new(seed);
        let lin = Linear::register(&mut ps, &mut rng, "linear", 5, 4, true)?;
        let x = random(&mut rng, 3, 5);
        let w = random(&mut rng, 3, 4);
        reports.push(finite_diff_check("linear+tanh", &ps, &names(&ps), cfg, |g| {
            let x = g.constant(x.clone())?;
            let y = lin.forward(g, x)?;
            let y = g.tanh(y)?;
            weighted_sum(g, y, &w)
        })?);
    }
    {
        let mut ps = ParameterSet::new(seed);
        let ffn = FeedForward::register(&mut ps, &mut rng, "ffn", 4, 6, 3)?;
        let x = random(&mut rng, 2, 4);
        reports.push(finite_diff_check("feedforward+cross_entropy", &ps, &names(&ps), cfg, |g| {
            let x = g.constant(x.clone())?;
            let z = ffn.forward(g, x)?;
            g.cross_entropy(z, &[2, 0])
        })?);
    }
    {
        let mut ps = ParameterSet::new(seed);
        let cell = LstmCell::register(&mut ps, &mut rng, "lstm", 3, 4)?;
        let xs: Vec<Tensor> = (0..3).map(|_| random(&mut rng, 1, 3)).collect();
        let w = random(&mut rng, 1, 4);
        reports.push(finite_diff_check("lstm", &ps, &names(&ps), cfg, |g| {
            let mut s = cell.zero_state(g)?;
            for x in &xs {
                let x = g.constant(x.clone())?;
                s = cell.step(g, x, s)?;
            }
            weighted_sum(g, s.h, &w)
        })?);
    }
    {
        let mut ps = ParameterSet::new(seed);
        let ln = LayerNorm::register(&mut ps, "ln", 5)?;
        for n in names(&ps) {
            let t = random(&mut rng, 1, 5);
            ps.set(n, t);
        }
        let x = random(&mut rng, 3, 5);
        let w = random(&mut rng, 3, 5);
        reports.push(finite_diff_check("layer_norm", &ps, &names(&ps), cfg, |g| {
            let x = g.constant(x.clone())?;
            let y = ln.forward(g, x)?;
            weighted_sum(g, y, &w)
        })?);
    }
    {
        let mut ps = ParameterSet::new(seed);
        let enc = TransformerEncoder::register(&mut ps, &mut rng, "transformer", 2, 4, 2, 6)?;
        let x = random(&mut rng, 3, 4);
        let w = random(&mut rng, 3, 4);
        reports.push(finite_diff_check("transformer_encoder", &ps, &names(&ps), cfg, |g| {
            let x = g.constant(x.clone())?;
            let y = enc.forward(g, x)?;
            weighted_sum(g, y, &w)
        })?);
    }
    {
        let mut ps = ParameterSet::new(seed);
        let vocab = Vocabulary::build(["who wrote the book", "and its genre", "what about the author"]);
        let ecfg = EncoderConfig {
            token_dim: 4,
            question_dim: 4,
            context_layers: 1,
            fusion_layers: 1,
            heads: 2,
            ffn_dim: 5,
            max_len: 8,
        };
        let enc = QuestionEncoder::register(&mut ps, &mut rng, "encoder", &ecfg, vocab.len())?;
        let q1 = tokenize("who wrote the book", &vocab, 8)?;
        let q2 = tokenize("and its genre", &vocab, 8)?;
        let r2 = tokenize("what about the author", &vocab, 8)?;
        let teacher = [random(&mut rng, 1, 4), random(&mut rng, 1, 4)];
        reports.push(finite_diff_check("question_encoder+distill", &ps, &names(&ps), cfg, |g| {
            let s0 = enc.zero_state(g)?;
            let s1 = enc.encode_turn(g, &q1, &[], s0)?;
            let s2 = enc.encode_turn(g, &q2, std::slice::from_ref(&r2), s1)?;
            distill_loss(g, &teacher, &[s1.h, s2.h])
        })?);
    }
    {
        let mut ps = ParameterSet::new(seed);
        let sel = TopicSelector::register(&mut ps, &mut rng, 3, 4)?;
        let x = random(&mut rng, 4, 3);
        reports.push(finite_diff_check("selector", &ps, &names(&ps), cfg, |g| {
            let x = g.constant(x.clone())?;
            let z = sel.forward(g, x)?;
            g.cross_entropy(z, &[1, 0, 0, 1])
        })?);
    }
    {
        let kg = five_node_graph()?;
        let mut ps = ParameterSet::new(seed);
        let table = ComplexEmbeddings::init(kg.num_entities(), kg.num_relations(), 3, &mut rng);
        let pcfg = PolicyConfig {
            hidden_dim: 5,
            history_dim: 4,
            max_actions: 200,
            unique_edges: true,
            unique_init: 0.1,
        };
        let policy = Policy::register(&mut ps, &mut rng, &kg, &table, 2, &pcfg)?;
        let actions = ActionSpace::build(&kg, Some(&table), 200)?;
        let env = Env {
            kg: &kg,
            actions: &actions,
            policy: &policy,
            table: &table,
            projection: None,
        };
        let tcfg = TrainConfig {
            rollouts: 8,
            entropy_weight: 0.05,
            ..TrainConfig::default()
        };
        let topic = kg.entity_by_key("a").expect("present");
        let gold = [kg.entity_by_key("c").expect("present")];
        let lq = random(&mut rng, 1, 2);
        reports.push(finite_diff_check("policy_loss", &ps, &names(&ps), cfg, |g| {
            let l_q = g.constant(lq.clone())?;
            policy_surrogate(g, &env, l_q, topic, &gold, &tcfg, seed)
        })?);
    }
    Ok(reports)
}
