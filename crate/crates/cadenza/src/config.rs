//! Run configuration: one TOML file wiring encoder, projector, LM adapter,
//! training phases, vocabularies, chunking, and chat-client settings.
//! String values support `${VAR}` environment interpolation so secrets stay
//! out of the config file; `$${` escapes a literal `${`.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::chaining::ChatClientConfig;
use crate::data::{default_vocabularies, TaskKind, TaskVocabulary};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, ToyLm, ToyLmConfig};
use crate::projector::{HeadConfig, ProjectorConfig};
use crate::training::{LossWeights, PhaseName, PhaseSpec};

pub const DEFAULT_QUERY: &str = "Describe this piece of music.";

fn default_query() -> String {
    DEFAULT_QUERY.to_owned()
}

fn default_max_caption_tokens() -> usize {
    24
}

fn default_chunk_len() -> f64 {
    10.0
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Declared M + Σ N_k; validation enforces the sum exactly.
    pub token_budget: usize,
    #[serde(default = "default_query")]
    pub query: String,
    #[serde(default = "default_max_caption_tokens")]
    pub max_caption_tokens: usize,
    #[serde(default = "default_chunk_len")]
    pub chunk_len_s: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub encoder: EncoderConfig,
    pub projector: ProjectorSection,
    pub tasks: Vec<TaskSection>,
    #[serde(default)]
    pub lm: LmSection,
    #[serde(default)]
    pub phases: Vec<PhaseSection>,
    #[serde(default)]
    pub chat: ChatClientConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorSection {
    pub lm_dim: usize,
    pub hidden: usize,
    pub content_tokens: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub name: String,
    pub n_tokens: usize,
    /// Newline-separated label file; built-in vocabulary when omitted.
    #[serde(default)]
    pub vocab_path: Option<PathBuf>,
    /// Required with `vocab_path` for tasks without a built-in default.
    #[serde(default)]
    pub kind: Option<TaskKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmKind {
    Toy,
    Pipe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub kind: LmKind,
    pub dim: usize,
    pub max_positions: usize,
    pub seed: u64,
    /// Command line for `kind = "pipe"`: an LM server speaking the frame
    /// protocol on stdin/stdout.
    pub command: Vec<String>,
}

impl Default for LmSection {
    fn default() -> Self {
        let toy = ToyLmConfig::default();
        Self {
            kind: LmKind::Toy,
            dim: toy.dim,
            max_positions: toy.max_positions,
            seed: toy.seed,
            command: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSection {
    pub name: PhaseName,
    pub manifest: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub lambda_cap: f64,
    /// Uniform task weight; `lambda_tasks` entries override per task.
    pub lambda_task: f64,
    #[serde(default)]
    pub lambda_tasks: BTreeMap<String, f64>,
}

impl PhaseSection {
    pub fn to_spec(&self, task_names: &[String]) -> PhaseSpec {
        let lambda_tasks = task_names
            .iter()
            .map(|name| {
                let w = self.lambda_tasks.get(name).copied().unwrap_or(self.lambda_task);
                (name.clone(), w)
            })
            .collect();
        PhaseSpec {
            name: self.name,
            weights: LossWeights { lambda_cap: self.lambda_cap, lambda_tasks },
            dataset_id: self.manifest.display().to_string(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.query.trim().is_empty() {
            return Err(Error::Config("config field 'query': must be non-empty".into()));
        }
        if self.max_caption_tokens == 0 {
            return Err(Error::Config(
                "config field 'max_caption_tokens': must be positive".into(),
            ));
        }
        if self.chunk_len_s <= 0.0 || !self.chunk_len_s.is_finite() {
            return Err(Error::Config(format!(
                "config field 'chunk_len_s': {} is not a positive real",
                self.chunk_len_s
            )));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("config field 'tasks': at least one task head".into()));
        }
        let m = self.projector.content_tokens;
        let n: usize = self.tasks.iter().map(|t| t.n_tokens).sum();
        if m + n != self.token_budget {
            return Err(Error::Config(format!(
                "config field 'token_budget': M={m} content tokens + N={n} feature tokens \
                 give {}, but the declared budget is {}",
                m + n,
                self.token_budget
            )));
        }
        if self.lm.kind == LmKind::Toy && self.lm.dim != self.projector.lm_dim {
            return Err(Error::Config(format!(
                "config field 'lm.dim': toy LM dim {} does not match projector lm_dim {}",
                self.lm.dim, self.projector.lm_dim
            )));
        }
        if self.lm.kind == LmKind::Pipe && self.lm.command.is_empty() {
            return Err(Error::Config(
                "config field 'lm.command': pipe adapter needs a command".into(),
            ));
        }
        Ok(())
    }

    /// Vocabulary per task section, from file or the built-in defaults.
    pub fn vocabularies(&self) -> Result<Vec<TaskVocabulary>> {
        let builtins = default_vocabularies();
        self.tasks
            .iter()
            .map(|task| {
                let builtin = builtins.iter().find(|v| v.name() == task.name);
                match (&task.vocab_path, builtin) {
                    (Some(path), _) => {
                        let kind = task.kind.or(builtin.map(|v| v.kind())).ok_or_else(|| {
                            Error::Config(format!(
                                "config field 'tasks.{}.kind': required with vocab_path \
                                     for tasks without a built-in vocabulary",
                                task.name
                            ))
                        })?;
                        TaskVocabulary::from_file(task.name.clone(), path, kind)
                    }
                    (None, Some(v)) => Ok(v.clone()),
                    (None, None) => Err(Error::Config(format!(
                        "config field 'tasks.{}.vocab_path': task has no built-in \
                         vocabulary, a label file is required",
                        task.name
                    ))),
                }
            })
            .collect()
    }

    pub fn projector_config(&self, vocabs: &[TaskVocabulary]) -> Result<ProjectorConfig> {
        if vocabs.len() != self.tasks.len() {
            return Err(Error::Config("one vocabulary per task section".into()));
        }
        let heads = self
            .tasks
            .iter()
            .zip(vocabs)
            .map(|(task, vocab)| HeadConfig {
                name: task.name.clone(),
                classes: vocab.len(),
                n_tokens: task.n_tokens,
            })
            .collect();
        Ok(ProjectorConfig {
            encoder_layers: self.encoder.layers,
            encoder_dim: self.encoder.dim,
            lm_dim: self.projector.lm_dim,
            hidden: self.projector.hidden,
            content_tokens: self.projector.content_tokens,
            heads,
            seed: self.projector.seed,
        })
    }

    pub fn build_lm(&self) -> Result<Box<dyn LanguageModel>> {
        match self.lm.kind {
            LmKind::Toy => Ok(Box::new(ToyLm::new(ToyLmConfig {
                dim: self.lm.dim,
                max_positions: self.lm.max_positions,
                seed: self.lm.seed,
            })?)),
            LmKind::Pipe => {
                let lm = ChildLm::spawn(&self.lm.command)?;
                if lm.embedding_dim() != self.projector.lm_dim {
                    return Err(Error::Config(format!(
                        "pipe LM reports dim {} but projector lm_dim is {}",
                        lm.embedding_dim(),
                        self.projector.lm_dim
                    )));
                }
                Ok(Box::new(lm))
            }
        }
    }

    pub fn task_names(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.name.clone()).collect()
    }

    pub fn phase_specs(&self) -> Vec<PhaseSpec> {
        let names = self.task_names();
        self.phases.iter().map(|p| p.to_spec(&names)).collect()
    }
}

/// A child-process LM speaking the frame protocol on stdin/stdout. The
/// child is killed when this handle drops.
pub struct ChildLm {
    lm: crate::lm::wire::PipeLm<
        crate::lm::wire::StreamTransport<std::process::ChildStdin, std::process::ChildStdout>,
    >,
    child: std::process::Child,
}

impl ChildLm {
    pub fn spawn(command: &[String]) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::Config("pipe LM command is empty".into()))?;
        let mut child = std::process::Command::new(program)
            .args(args)
            .stdin(std::process::Stdio::piped())
            .stdout(std::process::Stdio::piped())
            .spawn()
            .map_err(|e| Error::Config(format!("failed to spawn LM server '{program}': {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let transport = crate::lm::wire::StreamTransport::new(stdin, stdout);
        let lm = crate::lm::wire::PipeLm::connect(transport)?;
        Ok(Self { lm, child })
    }
}

impl Drop for ChildLm {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl LanguageModel for ChildLm {
    fn embedding_dim(&self) -> usize {
        self.lm.embedding_dim()
    }

    fn vocab_size(&self) -> usize {
        self.lm.vocab_size()
    }

    fn encode(&self, text: &str) -> Vec<usize> {
        self.lm.encode(text)
    }

    fn decode(&self, ids: &[usize]) -> String {
        self.lm.decode(ids)
    }

    fn embed_query(&self, q: &crate::lm::QueryText) -> Result<crate::projector::TokenBlock> {
        self.lm.embed_query(q)
    }

    fn caption_nll(
        &self,
        prefix: &crate::autodiff::Mat,
        target: &crate::lm::CaptionTarget,
    ) -> Result<f64> {
        self.lm.caption_nll(prefix, target)
    }

    fn caption_nll_with_grad(
        &self,
        prefix: &crate::autodiff::Mat,
        target: &crate::lm::CaptionTarget,
    ) -> Result<(f64, crate::autodiff::Mat)> {
        self.lm.caption_nll_with_grad(prefix, target)
    }

    fn generate(&self, prefix: &crate::autodiff::Mat, max_tokens: usize) -> Result<String> {
        self.lm.generate(prefix, max_tokens)
    }

    fn digest(&self) -> String {
        self.lm.digest()
    }
}

/// Replaces `${VAR}` in every string value; `$${` escapes a literal `${`.
fn interpolate_str(s: &str, lookup: &dyn Fn(&str) -> Option<String>) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    loop {
        match rest.find("${") {
            None => {
                out.push_str(rest);
                return Ok(out);
            }
            Some(pos) => {
                if pos > 0 && rest.as_bytes()[pos - 1] == b'$' {
                    out.push_str(&rest[..pos - 1]);
                    out.push_str("${");
                    rest = &rest[pos + 2..];
                    continue;
                }
                out.push_str(&rest[..pos]);
                let after = &rest[pos + 2..];
                let end = after.find('}').ok_or_else(|| {
                    Error::Config(format!("unterminated ${{...}} in config value '{s}'"))
                })?;
                let var = &after[..end];
                let value = lookup(var).ok_or_else(|| {
                    Error::Config(format!(
                        "environment variable '{var}' referenced by the config is not set"
                    ))
                })?;
                out.push_str(&value);
                rest = &after[end + 1..];
            }
        }
    }
}

fn interpolate_value(v: &mut toml::Value, lookup: &dyn Fn(&str) -> Option<String>) -> Result<()> {
    match v {
        toml::Value::String(s) => {
            *s = interpolate_str(s, lookup)?;
        }
        toml::Value::Array(items) => {
            for item in items {
                interpolate_value(item, lookup)?;
            }
        }
        toml::Value::Table(table) => {
            for (_, item) in table.iter_mut() {
                interpolate_value(item, lookup)?;
            }
        }
        _ => {}
    }
    Ok(())
}

/// Parses and validates a config with an injectable variable lookup.
pub fn parse_config_with_lookup(
    text: &str,
    lookup: &dyn Fn(&str) -> Option<String>,
) -> Result<RunConfig> {
    let table: toml::Table = text.parse().map_err(|e| Error::Parse(format!("config TOML: {e}")))?;
    let mut value = toml::Value::Table(table);
    interpolate_value(&mut value, lookup)?;
    let config: RunConfig =
        value.try_into().map_err(|e| Error::Parse(format!("config structure: {e}")))?;
    config.validate()?;
    Ok(config)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_with_lookup(text, &|var| std::env::var(var).ok())
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}
