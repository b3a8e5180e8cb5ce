//! Question representation stack: context encoder, reformulation fusion,
//! conversation-history recurrence and the distillation objective.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::Question;
use crate::error::{Error, Result};
use crate::numerics::layers::{FeedForward, LstmCell, LstmState, TransformerEncoder};
use crate::numerics::{init_uniform, Graph, ParameterSet, Tensor, Var};

pub const TEACHER_PREFIX: &str = "encoder/teacher";
pub const STUDENT_PREFIX: &str = "encoder/student";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub token_dim: usize,
    pub question_dim: usize,
    pub context_layers: usize,
    pub fusion_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            token_dim: 128,
            question_dim: 200,
            context_layers: 2,
            fusion_layers: 1,
            heads: 4,
            ffn_dim: 256,
            max_len: crate::data::vocab::DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuestionEncoder {
    pub prefix: String,
    pub config: EncoderConfig,
    pub vocab_size: usize,
    context: TransformerEncoder,
    pool: FeedForward,
    fusion: TransformerEncoder,
    history: LstmCell,
    frozen: bool,
}

impl QuestionEncoder {
    pub fn register(
        ps: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        config: &EncoderConfig,
        vocab_size: usize,
    ) -> Result<Self> {
        let c = config;
        if c.token_dim % c.heads != 0 || c.question_dim % c.heads != 0 {
            return Err(Error::Config(format!(
                "token_dim {} and question_dim {} must be divisible by {} heads",
                c.token_dim, c.question_dim, c.heads
            )));
        }
        ps.insert(
            format!("{prefix}/tokens"),
            init_uniform(rng, &[vocab_size, c.token_dim], c.token_dim),
        )?;
        ps.insert(
            format!("{prefix}/positions"),
            init_uniform(rng, &[c.max_len, c.token_dim], c.token_dim),
        )?;
        let context = TransformerEncoder::register(
            ps,
            rng,
            &format!("{prefix}/context"),
            c.context_layers,
            c.token_dim,
            c.heads,
            c.ffn_dim,
        )?;
        let pool = FeedForward::register(ps, rng, &format!("{prefix}/pool"), 2 * c.token_dim, c.question_dim, c.question_dim)?;
        let fusion = TransformerEncoder::register(
            ps,
            rng,
            &format!("{prefix}/fusion"),
            c.fusion_layers,
            c.question_dim,
            c.heads,
            c.ffn_dim,
        )?;
        let history = LstmCell::register(ps, rng, &format!("{prefix}/history"), c.question_dim, c.question_dim)?;
        Ok(QuestionEncoder {
            prefix: prefix.to_string(),
            config: config.clone(),
            vocab_size,
            context,
            pool,
            fusion,
            history,
            frozen: false,
        })
    }

    /// Parameter layout without keeping any values, for binding to a
    /// loaded checkpoint.
    pub fn layout(prefix: &str, config: &EncoderConfig, vocab_size: usize) -> Result<Self> {
        let mut scratch = ParameterSet::new(0);
        Self::register(&mut scratch, &mut ChaCha8Rng::seed_from_u64(0), prefix, config, vocab_size)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn output_dim(&self) -> usize {
        self.config.question_dim
    }

    /// `FFN(h_CLS || h_SEP)` over the context transformer applied to token
    /// plus position embeddings. Padding is not encoded.
    pub fn encode_context(&self, g: &mut Graph, q: &Question) -> Result<Var> {
        let ids = q.content();
        if ids.len() < 2 {
            return Err(Error::contract("question must contain CLS and SEP"));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::dim(format!(
                "question of {} tokens exceeds max_len {}",
                ids.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let tok = g.param_rows(&format!("{}/tokens", self.prefix), ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.param_rows(&format!("{}/positions", self.prefix), &positions)?;
        let x = g.add(tok, pos)?;
        let h = self.context.forward(g, x)?;
        let cls = g.row(h, 0)?;
        let sep = g.row(h, ids.len() - 1)?;
        let pooled = g.concat_cols(&[cls, sep])?;
        self.pool.forward(g, pooled)
    }

    /// Position-0 output of the fusion transformer over
    /// `[h_q, h_ref_1, .., h_ref_N]`.
    pub fn fuse(&self, g: &mut Graph, h_q: Var, refs: &[Var]) -> Result<Var> {
        let mut rows = Vec::with_capacity(refs.len() + 1);
        rows.push(h_q);
        rows.extend_from_slice(refs);
        for &r in &rows {
            let (rr, rc) = (g.value(r).rows(), g.value(r).cols());
            if rr != 1 || rc != self.config.question_dim {
                return Err(Error::dim(format!(
                    "fusion input {rr}x{rc}, expected 1x{}",
                    self.config.question_dim
                )));
            }
        }
        let seq = g.concat_rows(&rows)?;
        let out = self.fusion.forward(g, seq)?;
        g.row(out, 0)
    }

    pub fn history_step(&self, g: &mut Graph, m_q: Var, prev: LstmState) -> Result<LstmState> {
        self.history.step(g, m_q, prev)
    }

    pub fn zero_state(&self, g: &mut Graph) -> Result<LstmState> {
        self.history.zero_state(g)
    }

    pub fn history_cell(&self) -> &LstmCell {
        &self.history
    }

    /// Question plus reformulations through context, fusion and one history
    /// step. Returns the new state; `l_q` is its `h`.
    pub fn encode_turn(&self, g: &mut Graph, question: &Question, refs: &[Question], prev: LstmState) -> Result<LstmState> {
        let h_q = self.encode_context(g, question)?;
        let ref_vars = refs
            .iter()
            .map(|r| self.encode_context(g, r))
            .collect::<Result<Vec<_>>>()?;
        let m_q = self.fuse(g, h_q, &ref_vars)?;
        self.history_step(g, m_q, prev)
    }

    /// Inference-time turn update on a detached conversation state.
    pub fn advance(
        &self,
        ps: &ParameterSet,
        state: &mut ConversationEncoderState,
        turn: usize,
        question: &Question,
        refs: &[Question],
    ) -> Result<Vec<f64>> {
        if turn != state.turn {
            return Err(Error::contract(format!(
                "encoder state is at turn {}, cannot encode turn {turn}",
                state.turn
            )));
        }
        let mut g = Graph::new(ps);
        let prev = match &state.recurrent {
            None => self.zero_state(&mut g)?,
            Some((h, c)) => self.history.state_from(&mut g, &Tensor::row(h.clone()), &Tensor::row(c.clone()))?,
        };
        let next = self.encode_turn(&mut g, question, refs, prev)?;
        let h = g.value(next.h).data().to_vec();
        state.recurrent = Some((h.clone(), g.value(next.c).data().to_vec()));
        state.turn += 1;
        Ok(h)
    }
}

/// Recurrent history of one conversation, advanced exactly once per turn.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConversationEncoderState {
    /// `(h, c)`; `None` before the first turn.
    pub recurrent: Option<(Vec<f64>, Vec<f64>)>,
    pub turn: usize,
}

/// `sum_i ||teacher_i - student_i||^2` with the teacher side constant.
pub fn distill_loss(g: &mut Graph, teacher: &[Tensor], student: &[Var]) -> Result<Var> {
    if teacher.len() != student.len() {
        return Err(Error::contract(format!(
            "{} teacher outputs for {} student outputs",
            teacher.len(),
            student.len()
        )));
    }
    if student.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    let mut terms = Vec::with_capacity(student.len());
    for (t, &s) in teacher.iter().zip(student) {
        let t = g.constant(Tensor::row(t.data().to_vec()))?;
        terms.push(g.sq_dist(t, s)?);
    }
    let all = g.concat_cols(&terms)?;
    g.sum(all)
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
