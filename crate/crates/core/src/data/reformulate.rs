//! Question surface frames, the rule-based paraphraser and the pluggable
//! reformulation provider.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Frames for self-contained and anaphoric questions.
pub const QUERY_FRAMES: [(&str, &str); 5] = [
    ("what is ", "?"),
    ("tell me ", "."),
    ("do you know ", "?"),
    ("name ", "."),
    ("which entity is ", "?"),
];

/// Frames for elliptical follow-ups.
pub const FOLLOW_FRAMES: [(&str, &str); 5] = [
    ("and ", "?"),
    ("what about ", "?"),
    ("how about ", "?"),
    ("and what about ", "?"),
    ("then ", "?"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameFamily {
    Query,
    Follow,
}

impl FrameFamily {
    fn frames(self) -> &'static [(&'static str, &'static str); 5] {
        match self {
            FrameFamily::Query => &QUERY_FRAMES,
            FrameFamily::Follow => &FOLLOW_FRAMES,
        }
    }
}

pub fn render(family: FrameFamily, frame: usize, core: &str) -> String {
    let (pre, post) = family.frames()[frame % 5];
    format!("{pre}{core}{post}")
}

/// Recognises a framed question, returning its family, frame index and core
/// phrase. The longest matching prefix wins.
pub fn split_frame(text: &str) -> Option<(FrameFamily, usize, &str)> {
    let text = text.trim();
    let mut best: Option<(FrameFamily, usize, &str, usize)> = None;
    for family in [FrameFamily::Query, FrameFamily::Follow] {
        for (i, (pre, post)) in family.frames().iter().enumerate() {
            if let Some(core) = text.strip_prefix(pre).and_then(|r| r.strip_suffix(post)) {
                if !core.trim().is_empty() && best.map_or(true, |b| pre.len() > b.3) {
                    best = Some((family, i, core, pre.len()));
                }
            }
        }
    }
    best.map(|(f, i, c, _)| (f, i, c))
}

/// Up to `count` paraphrases using the other frames of the question's
/// family. The core phrase is copied verbatim, so no entity is introduced.
pub fn paraphrase(text: &str, count: usize) -> Vec<String> {
    match split_frame(text) {
        Some((family, frame, core)) => (1..5).take(count).map(|k| render(family, frame + k, core)).collect(),
        None => Vec::new(),
    }
}

pub fn question_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.trim().as_bytes()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReformulationMode {
    Dataset,
    Template,
    External,
}

impl std::str::FromStr for ReformulationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dataset" => Ok(ReformulationMode::Dataset),
            "template" => Ok(ReformulationMode::Template),
            "external" => Ok(ReformulationMode::External),
            other => Err(Error::Config(format!(
                "unknown reformulation mode `{other}` (expected dataset, template or external)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReformulationProvider {
    mode: ReformulationMode,
    count: usize,
    sidecar: BTreeMap<String, Vec<String>>,
}

impl ReformulationProvider {
    pub fn dataset() -> Self {
        ReformulationProvider {
            mode: ReformulationMode::Dataset,
            count: usize::MAX,
            sidecar: BTreeMap::new(),
        }
    }

    pub fn template(count: usize) -> Self {
        ReformulationProvider {
            mode: ReformulationMode::Template,
            count,
            sidecar: BTreeMap::new(),
        }
    }

    /// Reads a sidecar JSON map of question hash to reformulation texts.
    pub fn external(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("reformulation sidecar `{}` unavailable: {e}", path.display()))
        })?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let sidecar = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            pointer: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        Ok(ReformulationProvider {
            mode: ReformulationMode::External,
            count: usize::MAX,
            sidecar,
        })
    }

    pub fn from_mode(mode: ReformulationMode, count: usize, sidecar: Option<&PathBuf>) -> Result<Self> {
        match mode {
            ReformulationMode::Dataset => Ok(Self::dataset()),
            ReformulationMode::Template => Ok(Self::template(count)),
            ReformulationMode::External => match sidecar {
                Some(p) => Self::external(p),
                None => Err(Error::Config("external reformulation mode needs a sidecar path".into())),
            },
        }
    }

    pub fn mode(&self) -> ReformulationMode {
        self.mode
    }

    /// Reformulations of `question`; `stored` are the dataset's generated
    /// reformulations for it, if any.
    pub fn reformulations(&self, question: &str, stored: &[String]) -> Vec<String> {
        match self.mode {
            ReformulationMode::Dataset => stored.to_vec(),
            ReformulationMode::Template => paraphrase(question, self.count),
            ReformulationMode::External => self.sidecar.get(&question_hash(question)).cloned().unwrap_or_default(),
        }
    }
}

pub fn write_sidecar(path: &Path, entries: &BTreeMap<String, Vec<String>>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(entries)?)?;
    Ok(())
}
