//! Brute-force oracles. Each check returns a one-line summary, or the
//! first disagreement.

use std::collections::{BTreeMap, HashSet};

use super::fixture;
use convqa_core::agent::{beam_infer, AnswerSource, BeamConfig, Walker};
use convqa_core::embedding::ComplexEmbeddings;
use convqa_core::eval::rank_metrics;
use convqa_core::{EntityId, RelationId};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

fn complex_row(table: &ComplexEmbeddings, entity: bool, row: usize) -> Vec<Complex64> {
    let (r, i) = if entity {
        (&table.entity_re, &table.entity_im)
    } else {
        (&table.relation_re, &table.relation_im)
    };
    r.row_slice(row)
        .iter()
        .zip(i.row_slice(row))
        .map(|(&a, &b)| Complex64::new(a, b))
        .collect()
}

/// Re(<r, t, conj(h)>) with `num_complex` arithmetic against `triple_score`.
pub fn complex_score(cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let dim = rng.gen_range(1..12);
        let table = ComplexEmbeddings::init(7, 4, dim, &mut rng);
        let (h, r, t) = (rng.gen_range(0..7), rng.gen_range(0..4), rng.gen_range(0..7));
        let hs = complex_row(&table, true, h);
        let rs = complex_row(&table, false, r);
        let ts = complex_row(&table, true, t);
        let oracle: Complex64 = (0..dim).map(|k| rs[k] * ts[k] * hs[k].conj()).sum();
        let got = table
            .triple_score(EntityId(h), RelationId(r), EntityId(t))
            .map_err(|e| e.to_string())?;
        let d = (got - oracle.re).abs();
        if d >= 1e-12 {
            return Err(format!("case {case}: {got} vs {}", oracle.re));
        }
        worst = worst.max(d);
    }
    Ok(format!("{cases} cases, max |delta| {worst:.1e}"))
}

/// `rank_metrics` against a linear scan for the first gold position.
pub fn rank_metrics_scan(cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..cases {
        let n = rng.gen_range(1..30);
        let mut ranked: Vec<EntityId> = (0..n).map(EntityId).collect();
        ranked.shuffle(&mut rng);
        let k = rng.gen_range(1..=n.min(4));
        let all: Vec<EntityId> = (0..n).map(EntityId).collect();
        let gold: HashSet<EntityId> = all.choose_multiple(&mut rng, k).copied().collect();

        let mut rank = 0;
        for (i, e) in ranked.iter().enumerate() {
            if gold.contains(e) {
                rank = i + 1;
                break;
            }
        }
        let s = rank_metrics(&ranked, &gold).ok_or_else(|| format!("case {case}: no gold in ranking"))?;
        let hit = |k: usize| if rank <= k { 1.0 } else { 0.0 };
        let expect = (hit(1), hit(3), hit(5), hit(8), 1.0 / rank as f64);
        if (s.p1, s.hit3, s.hit5, s.hit8, s.rr) != expect {
            return Err(format!("case {case}: {s:?} vs {expect:?}"));
        }
    }
    Ok(format!("{cases} permutations"))
}

/// Every action sequence of `hops` steps, scored by re-running the policy
/// from the topic for each prefix; best path probability per terminal.
pub fn enumerate(w: &Walker, l_q: &[f64], topic: EntityId, hops: usize) -> (usize, Vec<(EntityId, f64)>) {
    let mut best: BTreeMap<EntityId, f64> = BTreeMap::new();
    let mut paths = 0;
    let mut stack = vec![(Vec::<usize>::new(), 1.0f64)];
    while let Some((path, prob)) = stack.pop() {
        let (entity, dist) = w.distribution_after(l_q, topic, &path).unwrap();
        if path.len() == hops {
            paths += 1;
            let e = best.entry(entity).or_insert(prob);
            *e = e.max(prob);
            continue;
        }
        for (i, p) in dist.iter().enumerate() {
            let mut next = path.clone();
            next.push(i);
            stack.push((next, prob * p));
        }
    }
    let mut v: Vec<_> = best.into_iter().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    (paths, v)
}

/// Beam search with width = path count against exhaustive enumeration on
/// random graphs with at most 50 paths.
pub fn wide_beam(graphs: u64) -> Check {
    let mut checked = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for seed in 0..graphs {
        let f = fixture(seed, rng.gen_range(3..7), rng.gen_range(2..6));
        let w = f.walker();
        let topic = EntityId(rng.gen_range(0..f.kg.num_entities()));
        let hops = rng.gen_range(1..=3);
        let l_q = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let (paths, oracle) = enumerate(&w, &l_q, topic, hops);
        if paths > 50 {
            continue;
        }
        checked += 1;
        let cfg = BeamConfig { width: paths, max_hops: hops };
        let got = beam_infer(&w, &l_q, topic, &cfg, &f.table, &f.projection).map_err(|e| e.to_string())?;
        let beam: Vec<(EntityId, f64)> = got
            .entries
            .iter()
            .filter(|a| a.source == AnswerSource::Beam)
            .map(|a| (a.entity, a.score))
            .collect();
        if beam.len() != oracle.len() {
            return Err(format!("seed {seed}: {} beam answers, {} terminals", beam.len(), oracle.len()));
        }
        for (rank, (x, y)) in beam.iter().zip(&oracle).enumerate() {
            if x.0 != y.0 || (x.1 - y.1).abs() >= 1e-12 {
                return Err(format!("seed {seed} rank {rank}: {x:?} vs {y:?}"));
            }
        }
    }
    if checked < graphs as usize / 2 {
        return Err(format!("only {checked} graphs within the path budget"));
    }
    Ok(format!("{checked} graphs, exact rank match"))
}
