//! Stage orchestration: configuration, on-disk artifacts, the trained model
//! bundle and the ablation harness.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::agent::reinforce::{encode_values, mean_distance, train_reinforce, Env, EpochLog, RefSource, RelationHead, Stage, TopicMode, TrainConfig, TrainLog};
use crate::agent::{ActionSpace, BeamConfig, Policy, PolicyConfig, RewardMode};
use crate::data::corpus::{read_records, record_texts, resolve, write_records};
use crate::data::{synth_generate, synth_kg, Conversation, ReformulationMode, ReformulationProvider, SynthConfig, Vocabulary};
use crate::embedding::{fit_projection, train_complex, ComplexConfig, ComplexEmbeddings, ProjectionConfig, ProjectionSample, QuestionProjection, PROJECTION};
use crate::encoder::{EncoderConfig, QuestionEncoder, STUDENT_PREFIX, TEACHER_PREFIX};
use crate::error::{Error, Result};
use crate::eval::{overall_reference, ConversationPrediction, EvalReport, MetricAccumulator, Metrics, ReferencePoint, TurnPrediction};
use crate::kg::KnowledgeGraph;
use crate::numerics::{Checkpoint, ParameterSet};
use crate::selector::{pretrain_selector, selector_label, SelectorConfig, SelectorExample, SelectorReport, TopicSelector, SELECTOR_PREFIX};
use crate::session::Engine;

/// Parameters of the throwaway same-topic head trained with the teacher.
const AUX_TOPIC_PREFIX: &str = "aux/topic";
const AUX_RELATION_PREFIX: &str = "aux/relation";

pub const CMD_SYNTH: &str = "synth";
pub const CMD_COMPLEX: &str = "train-complex";
pub const CMD_TEACHER: &str = "train-teacher";
pub const CMD_SELECTOR: &str = "pretrain-selector";
pub const CMD_STUDENT: &str = "train-student";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Root for every relative path below.
    pub out: PathBuf,
    /// Input triple file; the synthetic graph under `data/` when unset.
    pub kg: Option<PathBuf>,
    /// Directory holding `train.json`, `valid.json` and `test.json`.
    pub corpus: Option<PathBuf>,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out: PathBuf::from("runs/default"),
            kg: None,
            corpus: None,
            checkpoints: PathBuf::from("checkpoints"),
            reports: PathBuf::from("reports"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    /// Distil the student toward the frozen teacher.
    pub distill: bool,
    /// Pick follow-up topics with the selector; otherwise always the main topic.
    pub selector: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            distill: true,
            selector: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: String,
    pub teacher_force: bool,
    pub reformulation: ReformulationMode,
    pub template_count: usize,
    pub sidecar: Option<PathBuf>,
    pub min_p1: Option<f64>,
    pub min_hit5: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: "test".into(),
            teacher_force: false,
            reformulation: ReformulationMode::Dataset,
            template_count: 4,
            sidecar: None,
            min_p1: None,
            min_hit5: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub bind: String,
    pub session_ttl_secs: u64,
    pub top_k: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            bind: "127.0.0.1:8080".into(),
            session_ttl_secs: 3600,
            top_k: 8,
        }
    }
}

/// Every knob of the pipeline. Per-module `seed` fields are overwritten
/// with values derived from the global `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub stages: StageToggles,
    pub synth: SynthConfig,
    pub complex: ComplexConfig,
    pub projection: ProjectionConfig,
    pub encoder: EncoderConfig,
    pub policy: PolicyConfig,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    pub selector: SelectorConfig,
    pub eval: EvalConfig,
    pub serve: ServeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut c = PipelineConfig {
            seed: 0,
            paths: PathsConfig::default(),
            stages: StageToggles::default(),
            synth: SynthConfig::default(),
            complex: ComplexConfig::default(),
            projection: ProjectionConfig::default(),
            encoder: EncoderConfig::default(),
            policy: PolicyConfig::default(),
            teacher: TrainConfig::default(),
            student: TrainConfig::default(),
            selector: SelectorConfig::default(),
            eval: EvalConfig::default(),
            serve: ServeConfig::default(),
        };
        c.derive_seeds();
        c
    }
}

fn derive_seed(seed: u64, stage: &str) -> u64 {
    let d = Sha256::digest(format!("{seed}/{stage}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn schema_error(e: serde_path_to_error::Error<serde_json::Error>) -> Error {
    Error::Schema {
        pointer: e.path().to_string(),
        message: e.inner().to_string(),
    }
}

impl PipelineConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.derive_seeds();
        self
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    fn derive_seeds(&mut self) {
        self.complex.seed = self.stage_seed("complex");
        self.projection.seed = self.stage_seed("projection");
        self.teacher.seed = self.stage_seed("teacher");
        self.student.seed = self.stage_seed("student");
        self.selector.seed = self.stage_seed("selector");
    }

    /// JSON object (partial; missing fields keep defaults) or flat
    /// `dotted.key = value` lines, chosen by the first non-blank character.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            let de = &mut serde_json::Deserializer::from_str(text);
            let mut c: PipelineConfig = serde_path_to_error::deserialize(de).map_err(schema_error)?;
            c.derive_seeds();
            Ok(c)
        } else {
            let mut c = PipelineConfig::default();
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
                c.set(k.trim(), v.trim())?;
            }
            Ok(c)
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one dotted key; values are read as JSON when they parse as
    /// JSON and as plain strings otherwise.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        let mut next: PipelineConfig = serde_path_to_error::deserialize(root).map_err(schema_error)?;
        if key != "seed" {
            next.seed = self.seed;
        }
        next.derive_seeds();
        *self = next;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON without `paths`, so relocating a run
    /// does not change its identity.
    pub fn hash(&self) -> [u8; 32] {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(o) = v.as_object_mut() {
            o.remove("paths");
        }
        Sha256::digest(v.to_string().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    fn rooted(&self, p: &Path) -> PathBuf {
        self.paths.out.join(p)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.rooted(Path::new("data"))
    }

    pub fn kg_path(&self) -> PathBuf {
        match &self.paths.kg {
            Some(p) => p.clone(),
            None => self.data_dir().join("kg.tsv"),
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        match &self.paths.corpus {
            Some(p) => p.clone(),
            None => self.data_dir(),
        }
    }

    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.rooted(&self.paths.checkpoints).join(format!("{stage}.ckpt"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.rooted(&self.paths.reports).join(name)
    }

    pub fn beam(&self) -> BeamConfig {
        BeamConfig {
            width: self.student.beam_width,
            max_hops: self.student.max_hops,
        }
    }

    pub fn provider(&self) -> Result<ReformulationProvider> {
        ReformulationProvider::from_mode(self.eval.reformulation, self.eval.template_count, self.eval.sidecar.as_ref())
    }
}

fn require(path: &Path, command: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            command,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

const SPLITS: [&str; 3] = ["train", "valid", "test"];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthSummary {
    pub entities: usize,
    pub triples: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub files: Vec<PathBuf>,
}

/// Writes the synthetic graph and corpus splits under `data/`.
pub fn run_synth(cfg: &PipelineConfig) -> Result<SynthSummary> {
    let kg = synth_kg(&cfg.synth, cfg.stage_seed("synth-kg"))?;
    let corpus = synth_generate(&kg, &cfg.synth, cfg.stage_seed("synth-corpus"))?;
    let dir = cfg.data_dir();
    fs::create_dir_all(&dir)?;
    let kg_file = dir.join("kg.tsv");
    fs::write(&kg_file, kg.to_tsv())?;
    let mut files = vec![kg_file];
    for (name, recs) in SPLITS.iter().zip([&corpus.train, &corpus.valid, &corpus.test]) {
        let p = dir.join(format!("{name}.json"));
        write_records(&p, recs)?;
        files.push(p);
    }
    Ok(SynthSummary {
        entities: kg.num_entities(),
        triples: kg.forward_triples().len(),
        train: corpus.train.len(),
        valid: corpus.valid.len(),
        test: corpus.test.len(),
        files,
    })
}

/// Linked conversation splits.
#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<Conversation>,
    pub valid: Vec<Conversation>,
    pub test: Vec<Conversation>,
    /// Conversations dropped for unresolvable entity keys, per split.
    pub dropped: BTreeMap<String, usize>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&[Conversation]> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split `{other}` (expected train, valid or test)"))),
        }
    }
}

fn split_path(cfg: &PipelineConfig, name: &str) -> Result<PathBuf> {
    let p = cfg.corpus_dir().join(format!("{name}.json"));
    require(&p, CMD_SYNTH)?;
    Ok(p)
}

/// Input graph with inverse edges and self-loops added.
pub fn load_graph(cfg: &PipelineConfig) -> Result<KnowledgeGraph> {
    let p = cfg.kg_path();
    require(&p, CMD_SYNTH)?;
    KnowledgeGraph::load_tsv(&p)?.augment()
}

/// Vocabulary of every text in the training split.
pub fn build_vocabulary(cfg: &PipelineConfig) -> Result<Vocabulary> {
    let recs = read_records(&split_path(cfg, "train")?)?;
    Ok(Vocabulary::build(record_texts(&recs)))
}

pub fn load_splits(cfg: &PipelineConfig, kg: &KnowledgeGraph, vocab: &Vocabulary) -> Result<Splits> {
    let mut s = Splits::default();
    for name in SPLITS {
        let rep = resolve(&read_records(&split_path(cfg, name)?)?, vocab, kg, cfg.encoder.max_len)?;
        s.dropped.insert(name.to_string(), rep.dropped.len());
        match name {
            "train" => s.train = rep.conversations,
            "valid" => s.valid = rep.conversations,
            _ => s.test = rep.conversations,
        }
    }
    Ok(s)
}

/// Checkpoint metadata: enough to rebuild every module layout.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BundleMeta {
    pub stage: String,
    pub config: PipelineConfig,
    pub vocab: Vec<String>,
    /// Reformulation source the answering encoder was trained with.
    pub answer_refs: RefSource,
}

/// All trained modules over one parameter set.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub meta: BundleMeta,
    pub kg: KnowledgeGraph,
    pub vocab: Vocabulary,
    pub ps: ParameterSet,
    pub table: ComplexEmbeddings,
    pub actions: ActionSpace,
    pub policy: Option<Policy>,
    pub projection: Option<QuestionProjection>,
    pub teacher: Option<QuestionEncoder>,
    pub student: Option<QuestionEncoder>,
    pub selector: Option<TopicSelector>,
}

impl ModelBundle {
    fn config(&self) -> &PipelineConfig {
        &self.meta.config
    }

    /// The student when trained, else the teacher.
    pub fn answering_encoder(&self) -> Result<&QuestionEncoder> {
        self.student
            .as_ref()
            .or(self.teacher.as_ref())
            .ok_or_else(|| Error::contract("bundle has no trained encoder"))
    }

    pub fn engine<'a>(&'a self, provider: Option<&'a ReformulationProvider>) -> Result<Engine<'a>> {
        let missing = |what: &str| Error::contract(format!("bundle has no {what}"));
        Ok(Engine {
            kg: &self.kg,
            ps: &self.ps,
            vocab: &self.vocab,
            table: &self.table,
            projection: self.projection.as_ref().ok_or_else(|| missing("projection"))?,
            policy: self.policy.as_ref().ok_or_else(|| missing("policy"))?,
            actions: &self.actions,
            encoder: self.answering_encoder()?,
            selector: self.selector.as_ref().filter(|_| self.config().stages.selector),
            threshold: self.config().selector.threshold,
            beam: self.config().beam(),
            provider: if self.meta.answer_refs == RefSource::None { None } else { provider },
        })
    }

    /// Randomly initialised ComplEx table, student encoder, policy and
    /// projection over an augmented `kg`; no selector, no reformulations.
    pub fn untrained(cfg: &PipelineConfig, kg: KnowledgeGraph, vocab: Vocabulary) -> Result<Self> {
        let kg = if kg.is_augmented() { kg } else { kg.augment()? };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed("untrained"));
        let table = ComplexEmbeddings::init(kg.num_entities(), kg.num_relations(), cfg.complex.dim, &mut rng);
        let mut ps = ParameterSet::new(cfg.complex.seed);
        table.write_params(&mut ps);
        let dq = cfg.encoder.question_dim;
        QuestionEncoder::register(&mut ps, &mut rng, STUDENT_PREFIX, &cfg.encoder, vocab.len())?;
        Policy::register(&mut ps, &mut rng, &kg, &table, dq, &cfg.policy)?;
        QuestionProjection::register(&mut ps, &mut rng, dq, table.dim)?;
        let meta = BundleMeta {
            stage: "untrained".into(),
            config: cfg.clone(),
            vocab: vocab.tokens().to_vec(),
            answer_refs: RefSource::None,
        };
        Self::assemble(meta, kg, ps)
    }

    /// Paths are stored as defaults so checkpoints do not depend on where
    /// a run was written; loading takes them from the current config.
    fn checkpoint(&self) -> Checkpoint {
        let mut meta = self.meta.clone();
        meta.config.paths = PathsConfig::default();
        let meta = serde_json::to_string(&meta).expect("metadata serialises");
        Checkpoint::new(self.ps.clone(), self.config().hash(), meta)
    }

    /// Writes the checkpoint and a graph snapshot (`kg.tsv`) beside it.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)?;
        let snap = path.with_file_name("kg.tsv");
        self.kg.save_snapshot(&snap, &format!("config {}", self.config().hash_hex()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let meta: BundleMeta = {
            let de = &mut serde_json::Deserializer::from_str(&ckpt.header.metadata);
            serde_path_to_error::deserialize(de).map_err(|e| Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("metadata at `{}`: {}", e.path(), e.inner()),
            })?
        };
        let snap = path.with_file_name("kg.tsv");
        let kg = KnowledgeGraph::load_tsv(&snap)
            .map_err(|e| Error::Checkpoint {
                path: snap.clone(),
                message: format!("graph snapshot: {e}"),
            })?
            .augment()?;
        Self::assemble(meta, kg, ckpt.params)
    }

    fn assemble(meta: BundleMeta, kg: KnowledgeGraph, ps: ParameterSet) -> Result<Self> {
        let cfg = &meta.config;
        let vocab = Vocabulary::from_tokens(meta.vocab.clone());
        let table = ComplexEmbeddings::from_params(&ps)?;
        if table.num_entities() != kg.num_entities() {
            return Err(Error::dim("checkpoint embeddings do not match the graph snapshot"));
        }
        let actions = ActionSpace::build(&kg, Some(&table), cfg.policy.max_actions)?;
        let has = |prefix: &str| ps.names_with_prefix(prefix).next().is_some();
        let dq = cfg.encoder.question_dim;
        let encoder = |prefix: &str| -> Result<Option<QuestionEncoder>> {
            if !has(prefix) {
                return Ok(None);
            }
            Ok(Some(QuestionEncoder::layout(prefix, &cfg.encoder, vocab.len())?))
        };
        let mut teacher = encoder(TEACHER_PREFIX)?;
        if let Some(t) = teacher.as_mut() {
            t.freeze();
        }
        let student = encoder(STUDENT_PREFIX)?;
        let policy = if has(crate::agent::POLICY_PREFIX) {
            Some(Policy::layout(table.dim, dq, kg.num_entities(), &cfg.policy)?)
        } else {
            None
        };
        let projection = ps.contains(PROJECTION).then_some(QuestionProjection {
            question_dim: dq,
            embedding_dim: table.dim,
        });
        let selector = if has(SELECTOR_PREFIX) {
            Some(TopicSelector::layout(dq, cfg.selector.hidden_dim)?)
        } else {
            None
        };
        Ok(ModelBundle {
            meta,
            kg,
            vocab,
            ps,
            table,
            actions,
            policy,
            projection,
            teacher,
            student,
            selector,
        })
    }
}

fn load_stage(cfg: &PipelineConfig, stage: &str, command: &'static str) -> Result<ModelBundle> {
    let p = cfg.checkpoint(stage);
    require(&p, command)?;
    let mut b = ModelBundle::load(&p)?;
    if b.config().hash() != cfg.hash() {
        log::warn!("{} was produced under a different configuration", p.display());
    }
    // Runtime-only settings come from the current configuration.
    b.meta.config.paths = cfg.paths.clone();
    b.meta.config.eval = cfg.eval.clone();
    b.meta.config.serve = cfg.serve.clone();
    Ok(b)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComplexSummary {
    pub epoch_losses: Vec<f64>,
    pub decreasing_fraction: f64,
}

/// Fits the ComplEx tables on the augmented graph.
pub fn run_train_complex(cfg: &PipelineConfig) -> Result<ComplexSummary> {
    let kg = load_graph(cfg)?;
    let (table, log) = train_complex(&kg, &cfg.complex)?;
    let mut ps = ParameterSet::new(cfg.complex.seed);
    table.write_params(&mut ps);
    let bundle = ModelBundle::assemble(
        BundleMeta {
            stage: CMD_COMPLEX.into(),
            config: cfg.clone(),
            vocab: Vec::new(),
            answer_refs: RefSource::None,
        },
        kg,
        ps,
    )?;
    bundle.save(&cfg.checkpoint("complex"))?;
    let summary = ComplexSummary {
        decreasing_fraction: log.decreasing_fraction(),
        epoch_losses: log.epoch_losses,
    };
    write_json(&cfg.report("complex.json"), &summary)?;
    Ok(summary)
}

/// Trains an encoder and a fresh policy by REINFORCE with hard reward and
/// gold topics, freezes the encoder, then fits the question projection on
/// its outputs. Used for the teacher and for single-stage variants.
fn hard_stage(
    cfg: &PipelineConfig,
    mut bundle: ModelBundle,
    splits: &Splits,
    prefix: &str,
    refs: RefSource,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(ModelBundle, TrainLog, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(&format!("{prefix}/init")));
    let encoder = QuestionEncoder::register(&mut bundle.ps, &mut rng, prefix, &cfg.encoder, bundle.vocab.len())?;
    let policy = Policy::register(&mut bundle.ps, &mut rng, &bundle.kg, &bundle.table, cfg.encoder.question_dim, &cfg.policy)?;
    let aux = if cfg.teacher.topic_aux_weight > 0.0 {
        let dq = cfg.encoder.question_dim;
        Some(TopicSelector::register_at(&mut bundle.ps, &mut rng, AUX_TOPIC_PREFIX, dq, cfg.selector.hidden_dim)?)
    } else {
        None
    };
    let rel_aux = if cfg.teacher.relation_aux_weight > 0.0 {
        let (dq, nr) = (cfg.encoder.question_dim, bundle.kg.num_relations());
        Some(RelationHead::register(&mut bundle.ps, &mut rng, AUX_RELATION_PREFIX, dq, cfg.selector.hidden_dim, nr)?)
    } else {
        None
    };
    let log = {
        let env = Env {
            kg: &bundle.kg,
            actions: &bundle.actions,
            policy: &policy,
            table: &bundle.table,
            projection: None,
        };
        let stage = Stage {
            encoder: &encoder,
            refs,
            reward: RewardMode::Hard,
            topic: TopicMode::Gold,
            selector: None,
            teacher: None,
            topic_aux: aux.as_ref(),
            relation_aux: rel_aux.as_ref(),
        };
        train_reinforce(&mut bundle.ps, &env, &stage, &splits.train, &cfg.teacher, on_epoch)?
    };
    bundle.ps.remove_prefix(AUX_TOPIC_PREFIX);
    bundle.ps.remove_prefix(AUX_RELATION_PREFIX);
    let mut encoder = encoder;
    encoder.freeze();
    let projection = QuestionProjection::register(&mut bundle.ps, &mut rng, cfg.encoder.question_dim, bundle.table.dim)?;
    let mut samples = Vec::new();
    for conv in &splits.train {
        let outs = encode_values(&bundle.ps, &encoder, conv, refs)?;
        for (turn, l_q) in conv.turns.iter().zip(outs) {
            if turn.gold_answers.is_empty() {
                continue;
            }
            samples.push(ProjectionSample {
                question: l_q.data().to_vec(),
                topic: turn.gold_topic.unwrap_or(conv.main_topic_entity),
                answers: turn.gold_answers.clone(),
            });
        }
    }
    let proj_losses = fit_projection(&mut bundle.ps, &bundle.table, &samples, &cfg.projection)?;
    bundle.policy = Some(policy);
    bundle.projection = Some(projection);
    if prefix == TEACHER_PREFIX {
        bundle.teacher = Some(encoder);
    } else {
        bundle.student = Some(encoder);
    }
    bundle.meta.answer_refs = refs;
    Ok((bundle, log, proj_losses))
}

/// Labelled selector examples from a frozen encoder's outputs.
pub fn selector_examples(
    kg: &KnowledgeGraph,
    ps: &ParameterSet,
    encoder: &QuestionEncoder,
    refs: RefSource,
    convs: &[Conversation],
) -> Result<Vec<SelectorExample>> {
    let mut out = Vec::new();
    for conv in convs {
        let outs = encode_values(ps, encoder, conv, refs)?;
        for i in 1..conv.turns.len() {
            let turn = &conv.turns[i];
            if let Some((label, source)) =
                selector_label(kg, turn.gold_topic, &conv.turns[i - 1].gold_answers, &turn.gold_answers)
            {
                out.push(SelectorExample {
                    id: format!("{}#{}", conv.id, i + 1),
                    l_q: outs[i].data().to_vec(),
                    label,
                    source,
                });
            }
        }
    }
    Ok(out)
}

fn selector_stage(cfg: &PipelineConfig, bundle: &mut ModelBundle, splits: &Splits) -> Result<SelectorReport> {
    let encoder = bundle.answering_encoder()?.clone();
    let refs = bundle.meta.answer_refs;
    let train = selector_examples(&bundle.kg, &bundle.ps, &encoder, refs, &splits.train)?;
    let valid = selector_examples(&bundle.kg, &bundle.ps, &encoder, refs, &splits.valid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed("selector/init"));
    let selector = TopicSelector::register(&mut bundle.ps, &mut rng, cfg.encoder.question_dim, cfg.selector.hidden_dim)?;
    let report = pretrain_selector(&mut bundle.ps, &selector, &train, &valid, &cfg.selector)?;
    bundle.selector = Some(selector);
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub log: TrainLog,
    pub projection_losses: Vec<f64>,
}

pub fn run_train_teacher(cfg: &PipelineConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TeacherSummary> {
    let mut bundle = load_stage(cfg, "complex", CMD_COMPLEX)?;
    let vocab = build_vocabulary(cfg)?;
    let splits = load_splits(cfg, &bundle.kg, &vocab)?;
    bundle.meta.vocab = vocab.tokens().to_vec();
    bundle.meta.stage = CMD_TEACHER.into();
    bundle.meta.config = cfg.clone();
    bundle.vocab = vocab;
    let (bundle, log, projection_losses) = hard_stage(cfg, bundle, &splits, TEACHER_PREFIX, RefSource::Human, &mut on_epoch)?;
    bundle.save(&cfg.checkpoint("teacher"))?;
    write_jsonl(&cfg.report("teacher_log.jsonl"), &log.epochs)?;
    write_json(&cfg.report("projection.json"), &projection_losses)?;
    Ok(TeacherSummary { log, projection_losses })
}

pub fn run_pretrain_selector(cfg: &PipelineConfig) -> Result<SelectorReport> {
    let mut bundle = load_stage(cfg, "teacher", CMD_TEACHER)?;
    let splits = load_splits(cfg, &bundle.kg, &bundle.vocab)?;
    bundle.meta.config = cfg.clone();
    let report = selector_stage(cfg, &mut bundle, &splits)?;
    bundle.meta.stage = CMD_SELECTOR.into();
    bundle.save(&cfg.checkpoint("selector"))?;
    write_json(&cfg.report("selector.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StudentSummary {
    pub log: TrainLog,
    /// Mean per-turn squared student-teacher distance on the validation split.
    pub distance_initial: f64,
    pub distance_final: f64,
    pub distance_reduction: f64,
}

/// Registers a fresh student and trains it (with the policy) by REINFORCE
/// under soft reward and selector topics, plus distillation.
fn student_stage(
    cfg: &PipelineConfig,
    bundle: &mut ModelBundle,
    splits: &Splits,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<StudentSummary> {
    let teacher = bundle
        .teacher
        .clone()
        .ok_or_else(|| Error::contract("student training needs a trained teacher"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed("student/init"));
    let student = QuestionEncoder::register(&mut bundle.ps, &mut rng, STUDENT_PREFIX, &cfg.encoder, bundle.vocab.len())?;
    let pair = |ps: &ParameterSet| mean_distance(ps, (&teacher, RefSource::Human), (&student, RefSource::Generated), &splits.valid);
    let distance_initial = pair(&bundle.ps)?;
    let policy = bundle.policy.clone().ok_or_else(|| Error::contract("student training needs a policy"))?;
    let selector = bundle.selector.clone();
    let log = {
        let env = Env {
            kg: &bundle.kg,
            actions: &bundle.actions,
            policy: &policy,
            table: &bundle.table,
            projection: bundle.projection.as_ref(),
        };
        let use_selector = cfg.stages.selector && selector.is_some();
        let stage = Stage {
            encoder: &student,
            refs: RefSource::Generated,
            reward: RewardMode::Soft,
            topic: if use_selector { TopicMode::Selector } else { TopicMode::Gold },
            selector: selector.as_ref().map(|s| (s, cfg.selector.threshold)),
            teacher: cfg.stages.distill.then_some((&teacher, RefSource::Human)),
            topic_aux: None,
            relation_aux: None,
        };
        train_reinforce(&mut bundle.ps, &env, &stage, &splits.train, &cfg.student, on_epoch)?
    };
    let distance_final = pair(&bundle.ps)?;
    bundle.student = Some(student);
    bundle.meta.answer_refs = RefSource::Generated;
    Ok(StudentSummary {
        log,
        distance_initial,
        distance_final,
        distance_reduction: if distance_initial > 0.0 {
            1.0 - distance_final / distance_initial
        } else {
            0.0
        },
    })
}

pub fn run_train_student(cfg: &PipelineConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<StudentSummary> {
    let (stage, command) = if cfg.stages.selector {
        ("selector", CMD_SELECTOR)
    } else {
        ("teacher", CMD_TEACHER)
    };
    let mut bundle = load_stage(cfg, stage, command)?;
    let splits = load_splits(cfg, &bundle.kg, &bundle.vocab)?;
    bundle.meta.config = cfg.clone();
    let summary = student_stage(cfg, &mut bundle, &splits, &mut on_epoch)?;
    bundle.meta.stage = CMD_STUDENT.into();
    bundle.save(&cfg.checkpoint("model"))?;
    write_jsonl(&cfg.report("student_log.jsonl"), &summary.log.epochs)?;
    write_json(&cfg.report("distill.json"), &summary)?;
    Ok(summary)
}

/// Loads the final model (the `train-student` output).
pub fn load_model(cfg: &PipelineConfig) -> Result<ModelBundle> {
    load_stage(cfg, "model", CMD_STUDENT)
}

/// Replays conversations through `engine`, feeding each turn's top answer
/// (or, with `teacher_force`, the first gold answer) into the next.
pub fn replay(
    engine: &Engine,
    convs: &[Conversation],
    teacher_force: bool,
) -> Result<(MetricAccumulator, Vec<ConversationPrediction>)> {
    let mut acc = MetricAccumulator::default();
    let mut preds = Vec::with_capacity(convs.len());
    let key = |e| engine.kg.entity(e).map(|x| x.external_key.clone());
    for conv in convs {
        let mut state = engine.start(conv.main_topic_entity)?;
        let mut turns = Vec::with_capacity(conv.turns.len());
        for (i, turn) in conv.turns.iter().enumerate() {
            let stored: Vec<String> = turn.generated_reformulations.iter().map(|q| q.raw_text.clone()).collect();
            let log = engine.ask(&mut state, &turn.question.raw_text, &stored)?;
            let gold: HashSet<_> = turn.gold_answers.iter().copied().collect();
            acc.record(&conv.domain, i, &log.answers.entities(), &gold);
            turns.push(TurnPrediction {
                question: turn.question.raw_text.clone(),
                topic_used: key(log.topic_used)?,
                answer: log.answers.top().map(|a| key(a.entity)).transpose()?,
                gold: turn.gold_answers.iter().map(|&e| key(e)).collect::<Result<_>>()?,
            });
            if teacher_force {
                if let Some(&g) = turn.gold_answers.first() {
                    state.previous_answer = Some(g);
                }
            }
        }
        preds.push(ConversationPrediction {
            id: conv.id.clone(),
            turns,
        });
    }
    Ok((acc, preds))
}

/// Evaluates `bundle` on a split of `splits` under `cfg.eval`.
pub fn evaluate_bundle(cfg: &PipelineConfig, bundle: &ModelBundle, splits: &Splits, split: &str) -> Result<EvalReport> {
    let provider = cfg.provider()?;
    let engine = bundle.engine(Some(&provider))?;
    let convs = splits.get(split)?;
    let (acc, predictions) = replay(&engine, convs, cfg.eval.teacher_force)?;
    let mut report = EvalReport {
        split: split.to_string(),
        seed: cfg.seed,
        config_hash: bundle.config().hash_hex(),
        teacher_force: cfg.eval.teacher_force,
        reformulation_mode: provider.mode(),
        conversations: convs.len(),
        overall: acc.overall(),
        per_domain: acc.per_domain(),
        per_turn: acc.per_turn(),
        skipped_empty_gold: acc.skipped_empty_gold,
        resolution_failures: splits.dropped.get(split).copied().unwrap_or(0),
        reference: overall_reference(),
        thresholds: Vec::new(),
        predictions,
    };
    report.check_thresholds(cfg.eval.min_p1, cfg.eval.min_hit5);
    Ok(report)
}

/// Evaluates the final model and writes `eval_<split>.json` / `.txt`.
pub fn run_evaluate(cfg: &PipelineConfig) -> Result<EvalReport> {
    let bundle = load_model(cfg)?;
    let splits = load_splits(cfg, &bundle.kg, &bundle.vocab)?;
    let report = evaluate_bundle(cfg, &bundle, &splits, &cfg.eval.split)?;
    write_json(&cfg.report(&format!("eval_{}.json", report.split)), &report)?;
    fs::write(cfg.report(&format!("eval_{}.txt", report.split)), report.to_text())?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// Single-stage RL without reformulations at training or test time.
    NoReformulation,
    /// Single-stage RL on generated reformulations, tested on generated.
    GeneratedOnly,
    /// Full teacher-student pipeline.
    TeacherStudent,
    UniqueEdgeOn,
    UniqueEdgeOff,
    /// Single-stage RL on human reformulations, tested on generated.
    TrainTestMismatch,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::NoReformulation,
        AblationVariant::GeneratedOnly,
        AblationVariant::TeacherStudent,
        AblationVariant::UniqueEdgeOn,
        AblationVariant::UniqueEdgeOff,
        AblationVariant::TrainTestMismatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::NoReformulation => "no_reformulation",
            AblationVariant::GeneratedOnly => "generated_only",
            AblationVariant::TeacherStudent => "teacher_student",
            AblationVariant::UniqueEdgeOn => "unique_edge_on",
            AblationVariant::UniqueEdgeOff => "unique_edge_off",
            AblationVariant::TrainTestMismatch => "train_test_mismatch",
        }
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = if s == "human_teacher_student" { "teacher_student" } else { s };
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = AblationVariant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown ablation variant `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub metrics: Metrics,
    /// Mean rollout reward per epoch, all RL stages concatenated.
    pub reward_curve: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub split: String,
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
    pub reference: Vec<ReferencePoint>,
    /// `(comparison, agrees)` directional checks against the references.
    pub directional: Vec<(String, bool)>,
}

pub fn ablation_reference() -> Vec<ReferencePoint> {
    let p = |benchmark: &str, value| ReferencePoint {
        benchmark: benchmark.into(),
        metric: "p_at_1".into(),
        value,
        reproduced: false,
    };
    vec![
        p("unique_edge_off", 0.227),
        p("unique_edge_on", 0.265),
        p("generated_only", 0.212),
        p("teacher_student", 0.265),
    ]
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let rows: Vec<(String, Metrics)> = self.rows.iter().map(|r| (r.variant.clone(), r.metrics)).collect();
        let mut out = format!("ablation on split {}  seed {}\n", self.split, self.seed);
        out.push_str(&crate::eval::metrics_table(&rows));
        for (what, ok) in &self.directional {
            out.push_str(&format!("{what}: {}\n", if *ok { "agrees" } else { "disagrees" }));
        }
        out
    }
}

/// Trains and evaluates each variant from the shared ComplEx checkpoint
/// under one seed and one split.
pub fn run_ablate(cfg: &PipelineConfig, variants: &[AblationVariant]) -> Result<AblationTable> {
    let base = load_stage(cfg, "complex", CMD_COMPLEX)?;
    let vocab = build_vocabulary(cfg)?;
    let splits = load_splits(cfg, &base.kg, &vocab)?;
    let mut base = base;
    base.meta.vocab = vocab.tokens().to_vec();
    base.meta.config = cfg.clone();
    base.vocab = vocab;
    let split = cfg.eval.split.as_str();
    let mut done: BTreeMap<&'static str, AblationRow> = BTreeMap::new();
    let mut rows = Vec::new();
    for &v in variants {
        let key = match v {
            AblationVariant::UniqueEdgeOn => AblationVariant::TeacherStudent.name(),
            other => other.name(),
        };
        if let Some(row) = done.get(key) {
            rows.push(AblationRow {
                variant: v.name().into(),
                ..row.clone()
            });
            continue;
        }
        log::info!("ablation variant {}", v.name());
        let mut vcfg = cfg.clone();
        let mut curve = Vec::new();
        let mut track = |e: &EpochLog| curve.push(e.mean_reward);
        let bundle = match v {
            AblationVariant::TeacherStudent | AblationVariant::UniqueEdgeOn | AblationVariant::UniqueEdgeOff => {
                vcfg.policy.unique_edges = v != AblationVariant::UniqueEdgeOff;
                let mut b = base.clone();
                b.meta.config = vcfg.clone();
                let (mut b, _, _) = hard_stage(&vcfg, b, &splits, TEACHER_PREFIX, RefSource::Human, &mut track)?;
                selector_stage(&vcfg, &mut b, &splits)?;
                student_stage(&vcfg, &mut b, &splits, &mut track)?;
                b
            }
            AblationVariant::NoReformulation | AblationVariant::GeneratedOnly | AblationVariant::TrainTestMismatch => {
                let refs = match v {
                    AblationVariant::NoReformulation => RefSource::None,
                    AblationVariant::GeneratedOnly => RefSource::Generated,
                    _ => RefSource::Human,
                };
                let mut b = base.clone();
                b.meta.config = vcfg.clone();
                let (mut b, _, _) = hard_stage(&vcfg, b, &splits, STUDENT_PREFIX, refs, &mut track)?;
                selector_stage(&vcfg, &mut b, &splits)?;
                b
            }
        };
        let report = evaluate_bundle(&vcfg, &bundle, &splits, split)?;
        let row = AblationRow {
            variant: v.name().into(),
            metrics: report.overall,
            reward_curve: curve,
        };
        done.insert(key, row.clone());
        rows.push(row);
    }
    let p1 = |name: &str| rows.iter().find(|r| r.variant == name).map(|r| r.metrics.p_at_1);
    let mut directional = Vec::new();
    if let (Some(on), Some(off)) = (p1("unique_edge_on"), p1("unique_edge_off")) {
        directional.push(("unique_edge_on > unique_edge_off".to_string(), on > off));
    }
    if let (Some(ts), Some(gen)) = (p1("teacher_student"), p1("generated_only")) {
        directional.push(("teacher_student > generated_only".to_string(), ts > gen));
    }
    let table = AblationTable {
        seed: cfg.seed,
        split: split.to_string(),
        config_hash: cfg.hash_hex(),
        rows,
        reference: ablation_reference(),
        directional,
    };
    write_json(&cfg.report("ablation.json"), &table)?;
    fs::write(cfg.report("ablation.txt"), table.to_text())?;
    Ok(table)
}
