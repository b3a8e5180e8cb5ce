//! ComplEx knowledge-graph embeddings: training, trilinear scoring, the
//! question projection used by the soft reward, and the fallback ranker.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId};
use crate::numerics::{init_uniform, sigmoid, AdamConfig, AdamState, Gradients, ParameterSet, Tensor};

pub const ENTITY_RE: &str = "complex/entity_re";
pub const ENTITY_IM: &str = "complex/entity_im";
pub const RELATION_RE: &str = "complex/relation_re";
pub const RELATION_IM: &str = "complex/relation_im";
pub const PROJECTION: &str = "projection/weight";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComplexConfig {
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub negatives_per_positive: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ComplexConfig {
    fn default() -> Self {
        ComplexConfig {
            dim: 200,
            epochs: 100,
            batch_size: 256,
            learning_rate: 0.005,
            negatives_per_positive: 10,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Real and imaginary embedding tables for entities and relations.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexEmbeddings {
    pub dim: usize,
    pub entity_re: Tensor,
    pub entity_im: Tensor,
    pub relation_re: Tensor,
    pub relation_im: Tensor,
}

/// `Re(sum_k q_k * t_k * conj(h_k))` on split real/imaginary slices.
pub fn trilinear(q_re: &[f64], q_im: &[f64], h_re: &[f64], h_im: &[f64], t_re: &[f64], t_im: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..q_re.len() {
        let qt_re = q_re[k] * t_re[k] - q_im[k] * t_im[k];
        let qt_im = q_re[k] * t_im[k] + q_im[k] * t_re[k];
        s += qt_re * h_re[k] + qt_im * h_im[k];
    }
    s
}

impl ComplexEmbeddings {
    pub fn init(num_entities: usize, num_relations: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        ComplexEmbeddings {
            dim,
            entity_re: init_uniform(rng, &[num_entities, dim], dim),
            entity_im: init_uniform(rng, &[num_entities, dim], dim),
            relation_re: init_uniform(rng, &[num_relations, dim], dim),
            relation_im: init_uniform(rng, &[num_relations, dim], dim),
        }
    }

    pub fn num_entities(&self) -> usize {
        self.entity_re.rows()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_re.rows()
    }

    pub fn write_params(&self, ps: &mut ParameterSet) {
        ps.set(ENTITY_RE, self.entity_re.clone());
        ps.set(ENTITY_IM, self.entity_im.clone());
        ps.set(RELATION_RE, self.relation_re.clone());
        ps.set(RELATION_IM, self.relation_im.clone());
    }

    pub fn from_params(ps: &ParameterSet) -> Result<Self> {
        let entity_re = ps.get(ENTITY_RE)?.clone();
        Ok(ComplexEmbeddings {
            dim: entity_re.cols(),
            entity_re,
            entity_im: ps.get(ENTITY_IM)?.clone(),
            relation_re: ps.get(RELATION_RE)?.clone(),
            relation_im: ps.get(RELATION_IM)?.clone(),
        })
    }

    fn check_entity(&self, e: EntityId) -> Result<()> {
        if e.0 >= self.num_entities() {
            return Err(Error::Lookup(format!("entity {} has no embedding", e.0)));
        }
        Ok(())
    }

    /// Trilinear score with a free relation-slot vector `q`; `head` takes the
    /// conjugated slot.
    pub fn score(&self, q_re: &[f64], q_im: &[f64], head: EntityId, tail: EntityId) -> Result<f64> {
        if q_re.len() != self.dim || q_im.len() != self.dim {
            return Err(Error::dim(format!(
                "query of width {}/{} for embedding dim {}",
                q_re.len(),
                q_im.len(),
                self.dim
            )));
        }
        self.check_entity(head)?;
        self.check_entity(tail)?;
        Ok(trilinear(
            q_re,
            q_im,
            self.entity_re.row_slice(head.0),
            self.entity_im.row_slice(head.0),
            self.entity_re.row_slice(tail.0),
            self.entity_im.row_slice(tail.0),
        ))
    }

    pub fn triple_score(&self, head: EntityId, relation: RelationId, tail: EntityId) -> Result<f64> {
        if relation.0 >= self.num_relations() {
            return Err(Error::Lookup(format!("relation {} has no embedding", relation.0)));
        }
        self.score(
            self.relation_re.row_slice(relation.0),
            self.relation_im.row_slice(relation.0),
            head,
            tail,
        )
    }

    /// Partial derivatives of the score w.r.t. the relation slot, i.e. the
    /// feature vector `[d/dq_re, d/dq_im]` of the pair (head, tail).
    pub fn pair_features(&self, head: EntityId, tail: EntityId) -> Vec<f64> {
        let d = self.dim;
        let (h_re, h_im) = (self.entity_re.row_slice(head.0), self.entity_im.row_slice(head.0));
        let (t_re, t_im) = (self.entity_re.row_slice(tail.0), self.entity_im.row_slice(tail.0));
        let mut out = vec![0.0; 2 * d];
        for k in 0..d {
            out[k] = t_re[k] * h_re[k] + t_im[k] * h_im[k];
            out[d + k] = t_re[k] * h_im[k] - t_im[k] * h_re[k];
        }
        out
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ComplexTrainLog {
    /// Loss after each epoch on every training triple and a fixed set of
    /// negatives drawn once before training.
    pub epoch_losses: Vec<f64>,
    /// Running mean of the loss on the freshly sampled minibatches.
    pub sampled_losses: Vec<f64>,
}

impl ComplexTrainLog {
    /// Fraction of epoch-to-epoch transitions where the mean loss decreased.
    pub fn decreasing_fraction(&self) -> f64 {
        if self.epoch_losses.len() < 2 {
            return 1.0;
        }
        let down = self.epoch_losses.windows(2).filter(|w| w[1] < w[0]).count();
        down as f64 / (self.epoch_losses.len() - 1) as f64
    }
}

/// Trains embeddings on every triple of an augmented graph with a logistic
/// loss against uniformly corrupted heads or tails.
pub fn train_complex(kg: &KnowledgeGraph, config: &ComplexConfig) -> Result<(ComplexEmbeddings, ComplexTrainLog)> {
    train_complex_on(kg, kg.triples(), config)
}

/// As [`train_complex`] but restricted to `triples` (used for held-out
/// link-prediction checks).
pub fn train_complex_on(
    kg: &KnowledgeGraph,
    triples: &[crate::kg::Triple],
    config: &ComplexConfig,
) -> Result<(ComplexEmbeddings, ComplexTrainLog)> {
    if kg.num_entities() == 0 || triples.is_empty() {
        return Err(Error::contract("cannot train embeddings on an empty graph"));
    }
    if config.dim == 0 || config.batch_size == 0 {
        return Err(Error::Config("embedding dim and batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let table = ComplexEmbeddings::init(kg.num_entities(), kg.num_relations(), config.dim, &mut rng);
    let mut ps = ParameterSet::new(config.seed);
    table.write_params(&mut ps);
    let mut adam = AdamState::new(
        &ps,
        &["complex/"],
        AdamConfig {
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
    );

    let n_ent = kg.num_entities();
    let d = config.dim;
    let mut probe_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut probe = Vec::with_capacity(triples.len() * (1 + config.negatives_per_positive));
    for t in triples {
        probe.push((t.head.0, t.relation.0, t.tail.0, 1.0));
        for _ in 0..config.negatives_per_positive {
            let other = probe_rng.gen_range(0..n_ent);
            if probe_rng.gen_bool(0.5) {
                probe.push((other, t.relation.0, t.tail.0, -1.0));
            } else {
                probe.push((t.head.0, t.relation.0, other, -1.0));
            }
        }
    }
    let mut order: Vec<usize> = (0..triples.len()).collect();
    let mut log = ComplexTrainLog::default();
    for epoch in 0..config.epochs {
        // Linear decay to a tenth of the base rate by the last epoch.
        let progress = epoch as f64 / config.epochs.max(2).saturating_sub(1) as f64;
        adam.config.learning_rate = config.learning_rate * (1.0 - 0.9 * progress);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_samples = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut grads = adam.zero_grads(&ps)?;
            let mut samples = Vec::with_capacity(batch.len() * (1 + config.negatives_per_positive));
            for &i in batch {
                let t = triples[i];
                samples.push((t.head.0, t.relation.0, t.tail.0, 1.0));
                for _ in 0..config.negatives_per_positive {
                    let other = rng.gen_range(0..n_ent);
                    if rng.gen_bool(0.5) {
                        samples.push((other, t.relation.0, t.tail.0, -1.0));
                    } else {
                        samples.push((t.head.0, t.relation.0, other, -1.0));
                    }
                }
            }
            let scale = 1.0 / samples.len() as f64;
            let (er, ei, rr, ri) = (
                ps.get(ENTITY_RE)?,
                ps.get(ENTITY_IM)?,
                ps.get(RELATION_RE)?,
                ps.get(RELATION_IM)?,
            );
            let mut g_er = Tensor::zeros(er.shape());
            let mut g_ei = Tensor::zeros(ei.shape());
            let mut g_rr = Tensor::zeros(rr.shape());
            let mut g_ri = Tensor::zeros(ri.shape());
            for &(h, r, t, y) in &samples {
                let (h_re, h_im) = (er.row_slice(h), ei.row_slice(h));
                let (t_re, t_im) = (er.row_slice(t), ei.row_slice(t));
                let (r_re, r_im) = (rr.row_slice(r), ri.row_slice(r));
                let s = trilinear(r_re, r_im, h_re, h_im, t_re, t_im);
                // softplus(-y s)
                let z = -y * s;
                epoch_loss += softplus(z);
                let coef = -y * sigmoid(z) * scale;
                for k in 0..d {
                    let dh_re = r_re[k] * t_re[k] - r_im[k] * t_im[k];
                    let dh_im = r_re[k] * t_im[k] + r_im[k] * t_re[k];
                    let dt_re = r_re[k] * h_re[k] + r_im[k] * h_im[k];
                    let dt_im = r_re[k] * h_im[k] - r_im[k] * h_re[k];
                    let dr_re = t_re[k] * h_re[k] + t_im[k] * h_im[k];
                    let dr_im = t_re[k] * h_im[k] - t_im[k] * h_re[k];
                    g_er.row_slice_mut(h)[k] += coef * dh_re;
                    g_ei.row_slice_mut(h)[k] += coef * dh_im;
                    g_er.row_slice_mut(t)[k] += coef * dt_re;
                    g_ei.row_slice_mut(t)[k] += coef * dt_im;
                    g_rr.row_slice_mut(r)[k] += coef * dr_re;
                    g_ri.row_slice_mut(r)[k] += coef * dr_im;
                }
            }
            epoch_samples += samples.len();
            *grads.param_mut(ENTITY_RE).expect("registered") = g_er;
            *grads.param_mut(ENTITY_IM).expect("registered") = g_ei;
            *grads.param_mut(RELATION_RE).expect("registered") = g_rr;
            *grads.param_mut(RELATION_IM).expect("registered") = g_ri;
            adam.step(&mut ps, &grads)?;
        }
        let sampled = epoch_loss / epoch_samples.max(1) as f64;
        let table = ComplexEmbeddings::from_params(&ps)?;
        let fixed = probe
            .iter()
            .map(|&(h, r, t, y)| -> Result<f64> { Ok(softplus(-y * table.triple_score(EntityId(h), RelationId(r), EntityId(t))?)) })
            .sum::<Result<f64>>()?
            / probe.len().max(1) as f64;
        if !sampled.is_finite() || !fixed.is_finite() {
            return Err(Error::Numeric { primitive: "complex_loss" });
        }
        log.sampled_losses.push(sampled);
        log.epoch_losses.push(fixed);
    }
    Ok((ComplexEmbeddings::from_params(&ps)?, log))
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Filtered Hit@k of tail prediction over `test` triples: every other known
/// true tail of `(head, relation, ?)` is removed from the ranking.
pub fn filtered_hits_at(
    table: &ComplexEmbeddings,
    test: &[crate::kg::Triple],
    known: &HashSet<(usize, usize, usize)>,
    k: usize,
) -> Result<f64> {
    if test.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for t in test {
        let target = table.triple_score(t.head, t.relation, t.tail)?;
        let mut better = 0usize;
        for e in 0..table.num_entities() {
            if e == t.tail.0 || known.contains(&(t.head.0, t.relation.0, e)) {
                continue;
            }
            if table.triple_score(t.head, t.relation, EntityId(e))? > target {
                better += 1;
            }
        }
        if better < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / test.len() as f64)
}

/// Linear map from a question embedding to a (real, imaginary) relation slot.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuestionProjection {
    pub question_dim: usize,
    pub embedding_dim: usize,
}

impl QuestionProjection {
    pub fn register(ps: &mut ParameterSet, rng: &mut ChaCha8Rng, question_dim: usize, embedding_dim: usize) -> Result<Self> {
        ps.set(PROJECTION, init_uniform(rng, &[question_dim, 2 * embedding_dim], question_dim));
        Ok(QuestionProjection {
            question_dim,
            embedding_dim,
        })
    }

    pub fn project(&self, ps: &ParameterSet, l_q: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if l_q.len() != self.question_dim {
            return Err(Error::dim(format!(
                "question embedding of width {} for projection expecting {}",
                l_q.len(),
                self.question_dim
            )));
        }
        let w = ps.get(PROJECTION)?;
        let width = 2 * self.embedding_dim;
        let mut out = vec![0.0; width];
        for (i, &x) in l_q.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, wv) in out.iter_mut().zip(w.row_slice(i)) {
                *o += x * wv;
            }
        }
        let im = out.split_off(self.embedding_dim);
        Ok((out, im))
    }
}

/// `sigmoid(score(project(l_q), topic, candidate))`, strictly inside (0, 1)
/// for finite scores.
pub fn answer_probability(
    l_q: &[f64],
    topic: EntityId,
    candidate: EntityId,
    table: &ComplexEmbeddings,
    projection: &QuestionProjection,
    ps: &ParameterSet,
) -> Result<f64> {
    let (q_re, q_im) = projection.project(ps, l_q)?;
    Ok(sigmoid(table.score(&q_re, &q_im, topic, candidate)?))
}

/// Every entity not in `excluded`, by answer probability descending; ties go
/// to the lower entity id.
pub fn fallback_rank(
    l_q: &[f64],
    topic: EntityId,
    excluded: &HashSet<EntityId>,
    table: &ComplexEmbeddings,
    projection: &QuestionProjection,
    ps: &ParameterSet,
) -> Result<Vec<(EntityId, f64)>> {
    let (q_re, q_im) = projection.project(ps, l_q)?;
    let mut out = Vec::with_capacity(table.num_entities().saturating_sub(excluded.len()));
    for e in (0..table.num_entities()).map(EntityId) {
        if excluded.contains(&e) {
            continue;
        }
        out.push((e, sigmoid(table.score(&q_re, &q_im, topic, e)?)));
    }
    sort_by_score(&mut out);
    Ok(out)
}

pub(crate) fn sort_by_score(items: &mut [(EntityId, f64)]) {
    items.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

/// One gold fact for projection fitting.
#[derive(Clone, Debug)]
pub struct ProjectionSample {
    pub question: Vec<f64>,
    pub topic: EntityId,
    pub answers: Vec<EntityId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub negatives: usize,
    pub seed: u64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.005,
            negatives: 10,
            seed: 0,
        }
    }
}

/// Loss and gradient (w.r.t. the projection weight) of the logistic fact
/// loss for one sample against fixed negatives.
pub fn projection_loss_grad(
    table: &ComplexEmbeddings,
    weight: &Tensor,
    question: &[f64],
    topic: EntityId,
    positives: &[EntityId],
    negatives: &[EntityId],
) -> (f64, Tensor) {
    let width = weight.cols();
    let mut q = vec![0.0; width];
    for (i, &x) in question.iter().enumerate() {
        for (o, w) in q.iter_mut().zip(weight.row_slice(i)) {
            *o += x * w;
        }
    }
    let mut dq = vec![0.0; width];
    let mut loss = 0.0;
    let labelled = positives.iter().map(|&e| (e, 1.0)).chain(negatives.iter().map(|&e| (e, -1.0)));
    for (e, y) in labelled {
        let feats = table.pair_features(topic, e);
        let s: f64 = feats.iter().zip(&q).map(|(a, b)| a * b).sum();
        let z = -y * s;
        loss += if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
        let coef = -y * sigmoid(z);
        for (d, f) in dq.iter_mut().zip(&feats) {
            *d += coef * f;
        }
    }
    let mut grad = Tensor::zeros(weight.shape());
    for (i, &x) in question.iter().enumerate() {
        for (g, d) in grad.row_slice_mut(i).iter_mut().zip(&dq) {
            *g = x * d;
        }
    }
    (loss, grad)
}

/// Fits the projection on gold facts with answer-corruption negatives.
/// Returns per-epoch mean losses.
pub fn fit_projection(
    ps: &mut ParameterSet,
    table: &ComplexEmbeddings,
    samples: &[ProjectionSample],
    config: &ProjectionConfig,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::contract("projection fitting needs at least one gold fact"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(
        ps,
        &[PROJECTION],
        AdamConfig {
            learning_rate: config.learning_rate,
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size.max(1)) {
            let mut grads = Gradients::zeros_for(ps, [&PROJECTION.to_string()])?;
            let weight = ps.get(PROJECTION)?.clone();
            for &i in batch {
                let s = &samples[i];
                let gold: HashSet<EntityId> = s.answers.iter().copied().collect();
                let mut negatives = Vec::with_capacity(config.negatives);
                while negatives.len() < config.negatives && gold.len() < table.num_entities() {
                    let e = EntityId(rng.gen_range(0..table.num_entities()));
                    if !gold.contains(&e) {
                        negatives.push(e);
                    }
                }
                let (loss, g) = projection_loss_grad(table, &weight, &s.question, s.topic, &s.answers, &negatives);
                total += loss;
                grads.param_mut(PROJECTION).expect("registered").add_assign(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(ps, &grads)?;
        }
        losses.push(total / samples.len() as f64);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent complex-arithmetic oracle.
    fn brute(q: &[(f64, f64)], h: &[(f64, f64)], t: &[(f64, f64)]) -> f64 {
        let mut acc = (0.0, 0.0);
        for k in 0..q.len() {
            let (a, b) = q[k];
            let (c, d) = t[k];
            let qt = (a * c - b * d, a * d + b * c);
            let (e, f) = (h[k].0, -h[k].1);
            acc.0 += qt.0 * e - qt.1 * f;
            acc.1 += qt.0 * f + qt.1 * e;
        }
        acc.0
    }

    fn table_from(ent: &[Vec<(f64, f64)>]) -> ComplexEmbeddings {
        let d = ent[0].len();
        let re: Vec<f64> = ent.iter().flat_map(|r| r.iter().map(|x| x.0)).collect();
        let im: Vec<f64> = ent.iter().flat_map(|r| r.iter().map(|x| x.1)).collect();
        ComplexEmbeddings {
            dim: d,
            entity_re: Tensor::matrix(ent.len(), d, re).unwrap(),
            entity_im: Tensor::matrix(ent.len(), d, im).unwrap(),
            relation_re: Tensor::zeros(&[1, d]),
            relation_im: Tensor::zeros(&[1, d]),
        }
    }

    #[test]
    fn zero_query_scores_zero() {
        let t = table_from(&[vec![(0.3, -0.2), (1.0, 2.0)], vec![(0.5, 0.5), (-1.0, 0.1)]]);
        assert_eq!(t.score(&[0.0, 0.0], &[0.0, 0.0], EntityId(0), EntityId(1)).unwrap(), 0.0);
    }

    #[test]
    fn unit_case() {
        let t = table_from(&[vec![(1.0, 0.0)]]);
        assert_eq!(t.score(&[1.0], &[0.0], EntityId(0), EntityId(0)).unwrap(), 1.0);
    }

    #[test]
    fn random_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let mk = |rng: &mut ChaCha8Rng| (0..4).map(|_| (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))).collect::<Vec<_>>();
            let (q, h, tt) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let table = table_from(&[h.clone(), tt.clone()]);
            let qr: Vec<f64> = q.iter().map(|x| x.0).collect();
            let qi: Vec<f64> = q.iter().map(|x| x.1).collect();
            let s = table.score(&qr, &qi, EntityId(0), EntityId(1)).unwrap();
            assert!((s - brute(&q, &h, &tt)).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let t = table_from(&[vec![(1.0, 0.0), (0.0, 1.0)]]);
        assert!(matches!(
            t.score(&[1.0], &[0.0], EntityId(0), EntityId(0)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn fallback_order_and_partition() {
        // q = 1 + 0i, head = e0 = 1 + 0i: score(t) = Re(t) = 1, 2, 1.5
        let table = table_from(&[vec![(1.0, 0.0)], vec![(2.0, 0.5)], vec![(1.5, -3.0)]]);
        let mut ps = ParameterSet::new(0);
        ps.set(PROJECTION, Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let proj = QuestionProjection {
            question_dim: 1,
            embedding_dim: 1,
        };
        let ranked = fallback_rank(&[1.0], EntityId(0), &HashSet::new(), &table, &proj, &ps).unwrap();
        let order: Vec<usize> = ranked.iter().map(|(e, _)| e.0).collect();
        assert_eq!(order, vec![1, 2, 0]);

        let excluded: HashSet<EntityId> = [EntityId(1)].into();
        let rest = fallback_rank(&[1.0], EntityId(0), &excluded, &table, &proj, &ps).unwrap();
        assert_eq!(rest.len() + excluded.len(), 3);

        let all: HashSet<EntityId> = (0..3).map(EntityId).collect();
        assert!(fallback_rank(&[1.0], EntityId(0), &all, &table, &proj, &ps).unwrap().is_empty());
    }

    #[test]
    fn zero_projection_gives_half() {
        let table = table_from(&[vec![(0.4, 0.1)], vec![(2.0, 0.5)]]);
        let mut ps = ParameterSet::new(0);
        ps.set(PROJECTION, Tensor::zeros(&[3, 2]));
        let proj = QuestionProjection {
            question_dim: 3,
            embedding_dim: 1,
        };
        let p = answer_probability(&[1.0, -2.0, 0.5], EntityId(0), EntityId(1), &table, &proj, &ps).unwrap();
        assert_eq!(p, 0.5);
        assert!(matches!(
            answer_probability(&[1.0], EntityId(0), EntityId(1), &table, &proj, &ps),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let table = ComplexEmbeddings::init(6, 1, 3, &mut rng);
        let weight = init_uniform(&mut rng, &[4, 6], 4);
        let question = vec![0.3, -0.7, 1.1, 0.2];
        let (_, g) = projection_loss_grad(&table, &weight, &question, EntityId(0), &[EntityId(2)], &[EntityId(3), EntityId(5)]);
        let h = 1e-6;
        for i in 0..weight.numel() {
            let mut p = weight.clone();
            p.data_mut()[i] += h;
            let (lp, _) = projection_loss_grad(&table, &p, &question, EntityId(0), &[EntityId(2)], &[EntityId(3), EntityId(5)]);
            p.data_mut()[i] -= 2.0 * h;
            let (lm, _) = projection_loss_grad(&table, &p, &question, EntityId(0), &[EntityId(2)], &[EntityId(3), EntityId(5)]);
            let num = (lp - lm) / (2.0 * h);
            assert!((num - g.data()[i]).abs() < 1e-7, "entry {i}: {num} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn single_triple_one_epoch_is_finite() {
        let kg = KnowledgeGraph::parse_tsv("a\tr\tb\n", "t").unwrap().augment().unwrap();
        let cfg = ComplexConfig {
            dim: 8,
            epochs: 1,
            ..ComplexConfig::default()
        };
        let (table, log) = train_complex(&kg, &cfg).unwrap();
        assert!(log.epoch_losses[0].is_finite());
        assert!(table.entity_re.is_finite() && table.relation_im.is_finite());
    }
}
