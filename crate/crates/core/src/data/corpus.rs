use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{tokenize, Question, Vocabulary};
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph};

/// On-disk form of one conversation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub id: String,
    pub domain: String,
    pub seed_entity: String,
    pub turns: Vec<TurnRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default)]
    pub human_reformulations: Vec<String>,
    #[serde(default)]
    pub generated_reformulations: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_topic: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub question: Question,
    /// Sorted and deduplicated.
    pub gold_answers: Vec<EntityId>,
    pub human_reformulations: Vec<Question>,
    pub generated_reformulations: Vec<Question>,
    pub gold_topic: Option<EntityId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub domain: String,
    pub main_topic_entity: EntityId,
    pub turns: Vec<Turn>,
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub conversations: Vec<Conversation>,
    /// `(conversation id, reason)` for every dropped conversation.
    pub dropped: Vec<(String, String)>,
}

pub fn parse_records(text: &str) -> Result<Vec<ConversationRecord>> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        pointer: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

pub fn read_records(path: &Path) -> Result<Vec<ConversationRecord>> {
    parse_records(&fs::read_to_string(path)?)
}

pub fn write_records(path: &Path, records: &[ConversationRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(records)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Every text a vocabulary should see: questions and both reformulation
/// kinds.
pub fn record_texts(records: &[ConversationRecord]) -> impl Iterator<Item = &str> {
    records.iter().flat_map(|c| {
        c.turns.iter().flat_map(|t| {
            std::iter::once(t.question.as_str())
                .chain(t.human_reformulations.iter().map(String::as_str))
                .chain(t.generated_reformulations.iter().map(String::as_str))
        })
    })
}

/// Links records against `kg`. Conversations with an unknown seed, answer
/// or topic key are dropped and listed in the report.
pub fn resolve(records: &[ConversationRecord], vocab: &Vocabulary, kg: &KnowledgeGraph, max_len: usize) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    for rec in records {
        match resolve_one(rec, vocab, kg, max_len)? {
            Ok(c) => report.conversations.push(c),
            Err(reason) => report.dropped.push((rec.id.clone(), reason)),
        }
    }
    if !report.dropped.is_empty() {
        log::info!("dropped {} conversation(s) with unresolvable entities", report.dropped.len());
    }
    Ok(report)
}

fn resolve_one(
    rec: &ConversationRecord,
    vocab: &Vocabulary,
    kg: &KnowledgeGraph,
    max_len: usize,
) -> Result<std::result::Result<Conversation, String>> {
    let lookup = |key: &str| kg.entity_by_key(key).ok_or_else(|| format!("unknown entity `{key}`"));
    let main = match lookup(&rec.seed_entity) {
        Ok(e) => e,
        Err(r) => return Ok(Err(r)),
    };
    if rec.turns.is_empty() {
        return Ok(Err("conversation has no turns".into()));
    }
    let tok = |texts: &[String]| texts.iter().map(|t| tokenize(t, vocab, max_len)).collect::<Result<Vec<_>>>();
    let mut turns = Vec::with_capacity(rec.turns.len());
    for t in &rec.turns {
        let mut gold = Vec::with_capacity(t.answers.len());
        for a in &t.answers {
            match lookup(a) {
                Ok(e) => gold.push(e),
                Err(r) => return Ok(Err(r)),
            }
        }
        gold.sort_unstable();
        gold.dedup();
        let gold_topic = match &t.gold_topic {
            Some(k) => match lookup(k) {
                Ok(e) => Some(e),
                Err(r) => return Ok(Err(r)),
            },
            None => None,
        };
        turns.push(Turn {
            question: tokenize(&t.question, vocab, max_len)?,
            gold_answers: gold,
            human_reformulations: tok(&t.human_reformulations)?,
            generated_reformulations: tok(&t.generated_reformulations)?,
            gold_topic,
        });
    }
    if turns[0].gold_topic.is_none() {
        turns[0].gold_topic = Some(main);
    }
    Ok(Ok(Conversation {
        id: rec.id.clone(),
        domain: rec.domain.clone(),
        main_topic_entity: main,
        turns,
    }))
}

pub fn load_conversations(path: &Path, vocab: &Vocabulary, kg: &KnowledgeGraph, max_len: usize) -> Result<LoadReport> {
    resolve(&read_records(path)?, vocab, kg, max_len)
}

/// Inverse of [`resolve`] for a linked conversation.
pub fn export(conv: &Conversation, kg: &KnowledgeGraph) -> Result<ConversationRecord> {
    let key = |e: EntityId| kg.entity(e).map(|x| x.external_key.clone());
    let texts = |qs: &[Question]| qs.iter().map(|q| q.raw_text.clone()).collect::<Vec<_>>();
    let turns = conv
        .turns
        .iter()
        .map(|t| {
            Ok(TurnRecord {
                question: t.question.raw_text.clone(),
                answers: t.gold_answers.iter().map(|&e| key(e)).collect::<Result<_>>()?,
                human_reformulations: texts(&t.human_reformulations),
                generated_reformulations: texts(&t.generated_reformulations),
                gold_topic: t.gold_topic.map(key).transpose()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ConversationRecord {
        id: conv.id.clone(),
        domain: conv.domain.clone(),
        seed_entity: key(conv.main_topic_entity)?,
        turns,
    })
}
