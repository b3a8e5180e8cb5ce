//! Turn-by-turn answering shared by offline evaluation and the live service.

use serde::{Deserialize, Serialize};

use crate::agent::{beam_infer, ActionSpace, BeamConfig, Policy, RankedAnswerList, Walker};
use crate::data::{tokenize, ReformulationProvider, Vocabulary};
use crate::embedding::{ComplexEmbeddings, QuestionProjection};
use crate::encoder::{ConversationEncoderState, QuestionEncoder};
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::numerics::ParameterSet;
use crate::selector::{select_topic, TopicSelector};

/// Read-only view of a trained model for answering.
#[derive(Clone, Copy)]
pub struct Engine<'a> {
    pub kg: &'a KnowledgeGraph,
    pub ps: &'a ParameterSet,
    pub vocab: &'a Vocabulary,
    pub table: &'a ComplexEmbeddings,
    pub projection: &'a QuestionProjection,
    pub policy: &'a Policy,
    pub actions: &'a ActionSpace,
    pub encoder: &'a QuestionEncoder,
    /// Without a selector every turn uses the main topic.
    pub selector: Option<&'a TopicSelector>,
    pub threshold: f64,
    pub beam: BeamConfig,
    /// `None` encodes questions without reformulations.
    pub provider: Option<&'a ReformulationProvider>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnLog {
    pub turn: usize,
    pub question: String,
    pub reformulations: Vec<String>,
    pub topic_used: EntityId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub same_topic_probability: Option<f64>,
    pub answers: RankedAnswerList,
}

/// One conversation's state; the turn log only grows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversationState {
    pub main_topic: EntityId,
    pub encoder: ConversationEncoderState,
    pub previous_answer: Option<EntityId>,
    pub log: Vec<TurnLog>,
}

impl ConversationState {
    pub fn new(main_topic: EntityId) -> Self {
        ConversationState {
            main_topic,
            encoder: ConversationEncoderState::default(),
            previous_answer: None,
            log: Vec::new(),
        }
    }
}

impl Engine<'_> {
    pub fn start(&self, main_topic: EntityId) -> Result<ConversationState> {
        if !self.kg.contains_entity(main_topic) {
            return Err(Error::Lookup(format!("topic entity {main_topic} is not in the graph")));
        }
        Ok(ConversationState::new(main_topic))
    }

    /// Answers the next question. `stored` are the corpus's generated
    /// reformulations (used only in dataset mode).
    pub fn ask<'s>(&self, state: &'s mut ConversationState, question: &str, stored: &[String]) -> Result<&'s TurnLog> {
        let max_len = self.encoder.config.max_len;
        let q = tokenize(question, self.vocab, max_len)?;
        let reformulations = match self.provider {
            Some(p) => p.reformulations(question, stored),
            None => Vec::new(),
        };
        let refs = reformulations
            .iter()
            .map(|r| tokenize(r, self.vocab, max_len))
            .collect::<Result<Vec<_>>>()?;
        let turn = state.log.len();
        let mut encoder_state = state.encoder.clone();
        let l_q = self.encoder.advance(self.ps, &mut encoder_state, turn, &q, &refs)?;
        let (topic, prob) = match (self.selector, state.previous_answer) {
            (Some(sel), Some(_)) => {
                let p = sel.predict_same_topic(self.ps, &l_q)?;
                (select_topic(p, state.previous_answer, state.main_topic, self.threshold, self.kg), Some(p))
            }
            _ => (state.main_topic, None),
        };
        let walker = Walker {
            policy: self.policy,
            ps: self.ps,
            kg: self.kg,
            actions: self.actions,
        };
        let answers = beam_infer(&walker, &l_q, topic, &self.beam, self.table, self.projection)?;
        state.encoder = encoder_state;
        state.previous_answer = answers.top().map(|a| a.entity);
        state.log.push(TurnLog {
            turn: turn + 1,
            question: question.to_string(),
            reformulations,
            topic_used: topic,
            same_topic_probability: prob,
            answers,
        });
        Ok(state.log.last().expect("just pushed"))
    }
}
