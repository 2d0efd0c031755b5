//! Three-stage semantic reasoning prompts, reasoner/encoder clients and the
//! resumable description store.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::user_rng;
use crate::error::{Error, Result};
use crate::tensor::{EmbeddingMatrix, Mat, Space};

/// Items sampled from a user's history for the user prompt.
pub const DEFAULT_USER_SAMPLE: usize = 10;

const ITEM_FORWARD: &str = include_str!("../assets/templates/item_forward.txt");
const ITEM_BACKWARD: &str = include_str!("../assets/templates/item_backward.txt");
const ITEM_FUSE: &str = include_str!("../assets/templates/item_fuse.txt");
const USER_FORWARD: &str = include_str!("../assets/templates/user_forward.txt");
const USER_BACKWARD: &str = include_str!("../assets/templates/user_backward.txt");
const USER_FUSE: &str = include_str!("../assets/templates/user_fuse.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityType {
    Item,
    User,
}

impl std::fmt::Display for EntityType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EntityType::Item => "item",
            EntityType::User => "user",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Forward,
    Backward,
    Fuse,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Forward => "forward",
            Stage::Backward => "backward",
            Stage::Fuse => "fuse",
        }
    }
}

/// Outputs of earlier stages.
#[derive(Clone, Copy, Debug, Default)]
pub struct StageContext<'a> {
    pub positive: Option<&'a str>,
    pub negative: Option<&'a str>,
}

/// Replaces `{name}` markers in one pass, so inserted text is never rescanned.
fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        let hit = after
            .find('}')
            .and_then(|end| values.iter().find(|(k, _)| *k == &after[..end]).map(|(_, v)| (end, v)));
        match hit {
            Some((end, v)) => {
                out.push_str(v);
                rest = &after[end + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn nonempty(s: Option<&str>) -> Option<&str> {
    s.filter(|t| !t.trim().is_empty())
}

fn stage_prompt(forward: String, templates: [&str; 3], stage: Stage, ctx: StageContext<'_>) -> Result<String> {
    let [_, backward, fuse] = templates;
    match stage {
        Stage::Forward => Ok(forward),
        Stage::Backward => {
            let pos = nonempty(ctx.positive).ok_or(Error::MissingContext {
                stage: "backward",
                what: "the forward-stage output",
            })?;
            Ok(fill(backward, &[("positive", pos)]))
        }
        Stage::Fuse => {
            let pos = nonempty(ctx.positive).ok_or(Error::MissingContext {
                stage: "fuse",
                what: "the forward-stage output",
            })?;
            let neg = nonempty(ctx.negative).ok_or(Error::MissingContext {
                stage: "fuse",
                what: "the backward-stage output",
            })?;
            Ok(fill(fuse, &[("positive", pos), ("negative", neg)]))
        }
    }
}

/// Item prompt for `stage`; attributes are listed one `- key: value` per line.
pub fn render_item_prompt(attributes: &[(String, String)], stage: Stage, ctx: StageContext<'_>) -> Result<String> {
    let forward = if stage == Stage::Forward {
        if attributes.is_empty() {
            return Err(Error::MissingContext {
                stage: "forward",
                what: "at least one item attribute",
            });
        }
        let listed: Vec<String> = attributes.iter().map(|(k, v)| format!("- {k}: {v}")).collect();
        fill(ITEM_FORWARD, &[("attributes", &listed.join("\n"))])
    } else {
        String::new()
    };
    stage_prompt(forward, [ITEM_FORWARD, ITEM_BACKWARD, ITEM_FUSE], stage, ctx)
}

/// User prompt for `stage` from the fused descriptions of sampled items.
pub fn render_user_prompt(sampled_items: &[String], stage: Stage, ctx: StageContext<'_>) -> Result<String> {
    let forward = if stage == Stage::Forward {
        if sampled_items.is_empty() {
            return Err(Error::MissingContext {
                stage: "forward",
                what: "at least one sampled item description",
            });
        }
        let listed: Vec<String> = sampled_items
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{}. {t}", i + 1))
            .collect();
        fill(USER_FORWARD, &[("items", &listed.join("\n"))])
    } else {
        String::new()
    };
    stage_prompt(forward, [USER_FORWARD, USER_BACKWARD, USER_FUSE], stage, ctx)
}

/// Up to `n` distinct positions of `history`, uniform without replacement,
/// returned in chronological order. Seeded per user.
pub fn sample_user_items(history: &[usize], n: usize, seed: u64, user: usize) -> Vec<usize> {
    if history.len() <= n {
        return history.to_vec();
    }
    let mut rng = user_rng(seed, user);
    let mut picked = sample(&mut rng, history.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| history[i]).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticRecord {
    pub entity_type: EntityType,
    pub index: usize,
    pub positive: String,
    pub negative: String,
    pub fused: String,
    /// Set when the entity could not be processed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SemanticRecord {
    pub fn is_complete(&self) -> bool {
        self.error.is_none() && !self.fused.is_empty()
    }

    pub fn text(&self, field: TextField) -> &str {
        match field {
            TextField::Positive => &self.positive,
            TextField::Negative => &self.negative,
            TextField::Fused => &self.fused,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextField {
    Positive,
    Negative,
    Fused,
}

/// Produces a completion for one prompt.
pub trait ReasonerClient: Sync {
    /// `Error::Transport` is retried; every other error is final.
    fn complete(&self, prompt: &str) -> Result<String>;
}

fn prompt_key(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// One stored completion.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredResponse {
    pub prompt: String,
    pub response: String,
}

/// Answers prompts from pre-generated responses; never touches the network.
#[derive(Clone, Debug, Default)]
pub struct FileReasoner {
    responses: HashMap<String, String>,
}

impl FileReasoner {
    pub fn new(entries: impl IntoIterator<Item = StoredResponse>) -> Self {
        Self {
            responses: entries
                .into_iter()
                .map(|e| (prompt_key(&e.prompt), e.response))
                .collect(),
        }
    }

    /// JSON lines of [`StoredResponse`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Self::new(entries))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl ReasonerClient for FileReasoner {
    fn complete(&self, prompt: &str) -> Result<String> {
        let key = prompt_key(prompt);
        self.responses.get(&key).cloned().ok_or(Error::Gap {
            entity: format!("prompt {}", &key[..12]),
            stage: String::new(),
        })
    }
}

/// Chat-completion client.
///
/// Request: `POST {url}` with `{"model", "messages": [{"role": "user",
/// "content": prompt}], "temperature": 0}` and an optional bearer token.
/// The reply text is read from `choices[0].message.content`.
#[derive(Clone, Debug)]
pub struct HttpReasoner {
    pub url: String,
    pub model: String,
    pub token: Option<String>,
    pub timeout: Duration,
}

impl HttpReasoner {
    /// Reads `REASONER_URL` and `REASONER_TOKEN`.
    pub fn from_env(model: &str) -> Result<Self> {
        let url = std::env::var("REASONER_URL").map_err(|_| Error::invalid("REASONER_URL is not set"))?;
        Ok(Self {
            url,
            model: model.to_owned(),
            token: std::env::var("REASONER_TOKEN").ok(),
            timeout: Duration::from_secs(120),
        })
    }
}

fn post_json(url: &str, token: Option<&str>, timeout: Duration, body: &serde_json::Value) -> Result<serde_json::Value> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .into();
    let mut req = agent.post(url).header("Content-Type", "application/json");
    if let Some(t) = token {
        req = req.header("Authorization", &format!("Bearer {t}"));
    }
    let mut resp = req.send_json(body).map_err(|e| Error::Transport(e.to_string()))?;
    resp.body_mut()
        .read_json::<serde_json::Value>()
        .map_err(|e| Error::Transport(e.to_string()))
}

impl ReasonerClient for HttpReasoner {
    fn complete(&self, prompt: &str) -> Result<String> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        });
        let reply = post_json(&self.url, self.token.as_deref(), self.timeout, &body)?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| Error::Format("reply has no choices[0].message.content".into()))
    }
}

/// What a record is generated from.
#[derive(Clone, Debug, PartialEq)]
pub enum EntityInput {
    Item { attributes: Vec<(String, String)> },
    User { sampled_items: Vec<String> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntityRequest {
    pub entity_type: EntityType,
    pub index: usize,
    pub input: EntityInput,
}

impl EntityRequest {
    fn prompt(&self, stage: Stage, ctx: StageContext<'_>) -> Result<String> {
        match &self.input {
            EntityInput::Item { attributes } => render_item_prompt(attributes, stage, ctx),
            EntityInput::User { sampled_items } => render_user_prompt(sampled_items, stage, ctx),
        }
    }

    fn label(&self) -> String {
        format!("{}_{}", self.entity_type, self.index)
    }
}

/// User requests from item descriptions: each user's history is sampled and
/// mapped to the fused item texts.
pub fn user_requests(
    sequences: &[Vec<usize>],
    item_records: &[SemanticRecord],
    n_sample: usize,
    seed: u64,
) -> Result<Vec<EntityRequest>> {
    let fused: BTreeMap<usize, &str> = item_records
        .iter()
        .filter(|r| r.entity_type == EntityType::Item && r.is_complete())
        .map(|r| (r.index, r.fused.as_str()))
        .collect();
    sequences
        .iter()
        .enumerate()
        .map(|(u, seq)| {
            let items = sample_user_items(seq, n_sample, seed, u)
                .into_iter()
                .map(|v| {
                    fused.get(&v).map(|t| t.to_string()).ok_or(Error::Gap {
                        entity: format!("item_{v}"),
                        stage: "fuse".into(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EntityRequest {
                entity_type: EntityType::User,
                index: u,
                input: EntityInput::User { sampled_items: items },
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct GenerateOptions {
    pub max_in_flight: usize,
    /// Total attempts per call, including the first.
    pub attempts: usize,
    pub base_delay: Duration,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_in_flight: 4,
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenerationReport {
    /// All records in the store after the run, sorted by (type, index).
    pub records: Vec<SemanticRecord>,
    /// Entities written during this run.
    pub generated: usize,
    /// Entities already complete in the store.
    pub resumed: usize,
    /// Missing file-backed responses: `(entity, stage)`.
    pub gaps: Vec<(String, String)>,
}

fn call_with_retry(client: &dyn ReasonerClient, prompt: &str, opts: &GenerateOptions) -> Result<String> {
    let mut attempt = 0;
    loop {
        match client.complete(prompt) {
            Err(Error::Transport(msg)) => {
                attempt += 1;
                if attempt >= opts.attempts.max(1) {
                    return Err(Error::Transport(msg));
                }
                std::thread::sleep(opts.base_delay * (1 << (attempt - 1)));
            }
            other => return other,
        }
    }
}

enum Outcome {
    Record(SemanticRecord),
    Gap(String, String),
}

fn run_entity(client: &dyn ReasonerClient, req: &EntityRequest, opts: &GenerateOptions) -> Result<Outcome> {
    let mut texts: Vec<String> = Vec::with_capacity(3);
    for stage in [Stage::Forward, Stage::Backward, Stage::Fuse] {
        let ctx = StageContext {
            positive: texts.first().map(String::as_str),
            negative: texts.get(1).map(String::as_str),
        };
        let prompt = req.prompt(stage, ctx)?;
        match call_with_retry(client, &prompt, opts) {
            Ok(t) => texts.push(t),
            Err(Error::Gap { .. }) => return Ok(Outcome::Gap(req.label(), stage.name().into())),
            Err(Error::Transport(msg)) => {
                return Ok(Outcome::Record(SemanticRecord {
                    entity_type: req.entity_type,
                    index: req.index,
                    positive: texts.first().cloned().unwrap_or_default(),
                    negative: texts.get(1).cloned().unwrap_or_default(),
                    fused: String::new(),
                    error: Some(format!("{} stage: {msg}", stage.name())),
                }))
            }
            Err(e) => return Err(e),
        }
    }
    let mut it = texts.into_iter();
    Ok(Outcome::Record(SemanticRecord {
        entity_type: req.entity_type,
        index: req.index,
        positive: it.next().unwrap_or_default(),
        negative: it.next().unwrap_or_default(),
        fused: it.next().unwrap_or_default(),
        error: None,
    }))
}

/// Reads a JSON-lines record store; a missing file is an empty store. The
/// last record for an entity wins.
pub fn load_store(path: impl AsRef<Path>) -> Result<Vec<SemanticRecord>> {
    let path = path.as_ref();
    if !path.exists() {
        return Ok(Vec::new());
    }
    let reader = BufReader::new(File::open(path)?);
    let mut latest: BTreeMap<(EntityType, usize), SemanticRecord> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: SemanticRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        latest.insert((r.entity_type, r.index), r);
    }
    Ok(latest.into_values().collect())
}

/// Runs forward, backward and fuse stages for every request not already
/// complete in `store`, appending each finished record to the store in
/// request order. At most `max_in_flight` entities are processed at once.
pub fn generate_descriptions(
    client: &dyn ReasonerClient,
    requests: &[EntityRequest],
    store: impl AsRef<Path>,
    opts: &GenerateOptions,
) -> Result<GenerationReport> {
    let store: PathBuf = store.as_ref().to_path_buf();
    if let Some(dir) = store.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let existing = load_store(&store)?;
    let done: std::collections::HashSet<(EntityType, usize)> = existing
        .iter()
        .filter(|r| r.is_complete())
        .map(|r| (r.entity_type, r.index))
        .collect();
    let todo: Vec<&EntityRequest> = requests
        .iter()
        .filter(|r| !done.contains(&(r.entity_type, r.index)))
        .collect();
    let mut report = GenerationReport {
        resumed: requests.len() - todo.len(),
        ..GenerationReport::default()
    };
    let mut out = OpenOptions::new().create(true).append(true).open(&store)?;
    for group in todo.chunks(opts.max_in_flight.max(1)) {
        let outcomes: Vec<Result<Outcome>> = std::thread::scope(|s| {
            let handles: Vec<_> = group
                .iter()
                .map(|req| s.spawn(move || run_entity(client, req, opts)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Transport("worker panicked".into())))
                })
                .collect()
        });
        for outcome in outcomes {
            match outcome? {
                Outcome::Record(r) => {
                    writeln!(out, "{}", serde_json::to_string(&r)?)?;
                    report.generated += 1;
                }
                Outcome::Gap(entity, stage) => report.gaps.push((entity, stage)),
            }
        }
        out.flush()?;
    }
    report.records = load_store(&store)?;
    Ok(report)
}

/// Text embedding model.
pub trait EncoderClient: Sync {
    fn dim(&self) -> usize;

    /// Embedding of `text`, the description of entity `index`.
    fn encode(&self, index: usize, text: &str) -> Result<Vec<f64>>;
}

/// Serves rows of a pre-computed embedding matrix by entity index.
#[derive(Clone, Debug)]
pub struct FileEncoder {
    pub matrix: EmbeddingMatrix,
}

impl FileEncoder {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            matrix: EmbeddingMatrix::load(path)?,
        })
    }
}

impl EncoderClient for FileEncoder {
    fn dim(&self) -> usize {
        self.matrix.cols()
    }

    fn encode(&self, index: usize, _text: &str) -> Result<Vec<f64>> {
        if index >= self.matrix.rows() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.matrix.rows(),
            });
        }
        Ok(self.matrix.values.row(index).to_vec())
    }
}

/// Embedding endpoint: `POST {url}` with `{"model", "input": [text]}`,
/// vector read from `data[0].embedding`.
#[derive(Clone, Debug)]
pub struct HttpEncoder {
    pub url: String,
    pub model: String,
    pub token: Option<String>,
    pub dim: usize,
    pub timeout: Duration,
}

impl HttpEncoder {
    /// Reads `ENCODER_URL` (and `REASONER_TOKEN` for auth, if set).
    pub fn from_env(model: &str, dim: usize) -> Result<Self> {
        let url = std::env::var("ENCODER_URL").map_err(|_| Error::invalid("ENCODER_URL is not set"))?;
        Ok(Self {
            url,
            model: model.to_owned(),
            token: std::env::var("REASONER_TOKEN").ok(),
            dim,
            timeout: Duration::from_secs(120),
        })
    }
}

impl EncoderClient for HttpEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, _index: usize, text: &str) -> Result<Vec<f64>> {
        let body = serde_json::json!({"model": self.model, "input": [text]});
        let reply = post_json(&self.url, self.token.as_deref(), self.timeout, &body)?;
        let v = reply["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| Error::Format("reply has no data[0].embedding".into()))?;
        v.iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| Error::Format("non-numeric embedding entry".into()))
            })
            .collect()
    }
}

/// Embeds one text field of records `0..n` (sorted by index, one entity
/// type) into a raw-space matrix.
pub fn encode_texts(
    client: &dyn EncoderClient,
    records: &[SemanticRecord],
    field: TextField,
) -> Result<EmbeddingMatrix> {
    let dim = client.dim();
    let mut m = Mat::zeros((records.len(), dim));
    for (i, r) in records.iter().enumerate() {
        if r.index != i {
            return Err(Error::invalid(format!(
                "record {i} has index {}; records must cover 0..n in order",
                r.index
            )));
        }
        let text = r.text(field);
        if text.is_empty() {
            return Err(Error::Gap {
                entity: format!("{}_{}", r.entity_type, r.index),
                stage: "fuse".into(),
            });
        }
        let v = client.encode(i, text)?;
        if v.len() != dim {
            return Err(Error::shape(format!(
                "encoder returned {} values for {}_{}, expected {dim}",
                v.len(),
                r.entity_type,
                r.index
            )));
        }
        m.row_mut(i).assign(&ndarray::Array1::from(v));
    }
    Ok(EmbeddingMatrix::new(m, Space::Raw))
}

/// Records of one entity type, sorted by index.
pub fn records_of(records: &[SemanticRecord], ty: EntityType) -> Vec<SemanticRecord> {
    let mut v: Vec<SemanticRecord> = records.iter().filter(|r| r.entity_type == ty).cloned().collect();
    v.sort_by_key(|r| r.index);
    v
}
