//! Long-form captioning: chunk the song, caption each chunk, assemble the
//! fixed chaining prompt, and ask an external chat service for the full
//! description. The prompt template is byte-exact, including its unicode
//! punctuation and trailing spaces; the golden-file test pins every byte.

use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crate::audio::AudioClip;
use crate::data::make_clips;
use crate::error::{Error, Result};
use crate::par;
use crate::pipeline::CaptionPipeline;

/// Template head up to the song-name line. `\u{2011}` (non-breaking hyphen)
/// and `\u{2014}` (em dash) are part of the format, as are the trailing
/// spaces inside the instruction block.
const PROMPT_HEAD: &str =
    "Given the following chronological 10\u{2011}second chunk descriptions of a \n\
single piece, write one flowing, detailed description of the entire song\n\
\u{2014}its structure, instrumentation, and standout moments. Mention transition \n\
points in terms of time stamps. If the description of certain chunks does \n\
not seem to fit with those for the chunks before and after, treat those \n\
as bad descriptions with lower accuracy and do not incorporate the information. \n\
Retain concrete musical attributes such as key, chords, tempo.\n\
\n\
Chunks for \u{201c}";

const PROMPT_AFTER_NAME: &str = "\" :\n";
const PROMPT_TAIL: &str = "Full song description:";

/// One captioned chunk; `index` is 1-based and chronological.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkCaption {
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
}

/// The assembled prompt; `rendered` is the exact request body text.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPrompt {
    pub song_name: String,
    pub chunks: Vec<ChunkCaption>,
    pub rendered: String,
}

/// Captions each kept chunk with an injected captioner. Chunks may be
/// processed concurrently; the returned list is always index-ordered.
pub fn caption_chunks_with<F>(
    audio: &AudioClip,
    clip_len_s: f64,
    caption: F,
) -> Result<Vec<ChunkCaption>>
where
    F: Fn(usize, &AudioClip) -> Result<String> + Sync,
{
    let clips = make_clips(audio, clip_len_s)?;
    let indexed: Vec<(usize, &AudioClip)> = clips.iter().enumerate().collect();
    let texts = par::map(&indexed, |&(i, clip)| caption(i, clip));
    let mut out = Vec::with_capacity(clips.len());
    let mut start_s = 0.0;
    for (i, (clip, text)) in clips.iter().zip(texts).enumerate() {
        let end_s = start_s + clip.duration_s();
        out.push(ChunkCaption { index: i + 1, start_s, end_s, text: text? });
        start_s = end_s;
    }
    Ok(out)
}

/// Captions chunks with the trained pipeline (greedy decoding per chunk).
pub fn caption_chunks(
    audio: &AudioClip,
    pipeline: &CaptionPipeline,
    clip_len_s: f64,
) -> Result<Vec<ChunkCaption>> {
    caption_chunks_with(audio, clip_len_s, |_, clip| pipeline.caption(clip))
}

/// Renders the chaining template around the given chunks, byte-exactly.
pub fn build_prompt(song_name: &str, chunks: &[ChunkCaption]) -> Result<ChainPrompt> {
    if chunks.is_empty() {
        return Err(Error::validation("prompt requires at least one chunk"));
    }
    for (i, chunk) in chunks.iter().enumerate() {
        if chunk.index != i + 1 {
            return Err(Error::validation(format!(
                "chunk indices must be consecutive from 1; position {i} holds index {}",
                chunk.index
            )));
        }
        if chunk.end_s <= chunk.start_s {
            return Err(Error::validation(format!(
                "chunk {} has empty time range [{}, {}]",
                chunk.index, chunk.start_s, chunk.end_s
            )));
        }
        if chunk.text.trim().is_empty() {
            return Err(Error::validation(format!("chunk {} caption is empty", chunk.index)));
        }
    }
    let mut rendered = String::from(PROMPT_HEAD);
    rendered.push_str(song_name);
    rendered.push_str(PROMPT_AFTER_NAME);
    for chunk in chunks {
        rendered.push_str(&format!(
            "{}. {} to {} seconds: {}\n",
            chunk.index,
            chunk.start_s.round() as i64,
            chunk.end_s.round() as i64,
            chunk.text
        ));
    }
    rendered.push_str(PROMPT_TAIL);
    Ok(ChainPrompt { song_name: song_name.to_owned(), chunks: chunks.to_vec(), rendered })
}

/// One-method chat abstraction: prompt in, completion out.
pub trait ChatClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
    /// Short label for logs and audit records.
    fn describe(&self) -> String;
}

/// Shared chat-service settings (also used by the judge metrics).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatClientConfig {
    /// `echo:`, `static:<text>`, `fail:`, or an `http(s)://` endpoint.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token for HTTP endpoints.
    pub auth_env: Option<String>,
    pub timeout_s: u64,
    pub attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for ChatClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "echo:".into(),
            model: "gpt-4".into(),
            auth_env: None,
            timeout_s: 60,
            attempts: 3,
            base_delay_ms: 250,
        }
    }
}

/// Returns the prompt unchanged; the identity test double.
pub struct EchoClient;

impl ChatClient for EchoClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        Ok(prompt.to_owned())
    }

    fn describe(&self) -> String {
        "echo".into()
    }
}

/// Always returns one fixed completion.
pub struct StaticClient(pub String);

impl ChatClient for StaticClient {
    fn complete(&self, _prompt: &str) -> Result<String> {
        Ok(self.0.clone())
    }

    fn describe(&self) -> String {
        "static".into()
    }
}

/// Always fails; exercises the retry and exit-code paths.
pub struct FailingClient;

impl ChatClient for FailingClient {
    fn complete(&self, _prompt: &str) -> Result<String> {
        Err(Error::Chain("injected transport failure".into()))
    }

    fn describe(&self) -> String {
        "fail".into()
    }
}

/// OpenAI-style chat-completion endpoint over HTTP.
pub struct HttpChatClient {
    endpoint: String,
    model: String,
    token: Option<String>,
    timeout: Duration,
}

impl HttpChatClient {
    pub fn new(endpoint: String, model: String, token: Option<String>, timeout: Duration) -> Self {
        Self { endpoint, model, token, timeout }
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| Error::Chain(format!("client build failed: {e}")))?;
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = client.post(&self.endpoint).json(&body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| Error::Chain(format!("request failed: {e}")))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::Chain(format!("endpoint returned {status}")));
        }
        let json: serde_json::Value =
            resp.json().map_err(|e| Error::Chain(format!("bad response body: {e}")))?;
        json["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| Error::Chain("response lacks choices[0].message.content".into()))
    }

    fn describe(&self) -> String {
        format!("http {} model {}", self.endpoint, self.model)
    }
}

/// Builds a client from the config's endpoint scheme. HTTP endpoints
/// require the auth variable to be set when one is configured.
pub fn build_client(config: &ChatClientConfig) -> Result<Box<dyn ChatClient>> {
    let endpoint = config.endpoint.as_str();
    if endpoint == "echo:" {
        return Ok(Box::new(EchoClient));
    }
    if let Some(text) = endpoint.strip_prefix("static:") {
        return Ok(Box::new(StaticClient(text.to_owned())));
    }
    if endpoint == "fail:" {
        return Ok(Box::new(FailingClient));
    }
    if endpoint.starts_with("http://") || endpoint.starts_with("https://") {
        let token = match &config.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!("auth environment variable {var} is not set"))
            })?),
            None => None,
        };
        return Ok(Box::new(HttpChatClient::new(
            endpoint.to_owned(),
            config.model.clone(),
            token,
            Duration::from_secs(config.timeout_s),
        )));
    }
    Err(Error::Config(format!("unrecognized chat endpoint '{endpoint}'")))
}

/// Retry policy and audit destination for [`chain`].
#[derive(Debug, Clone, Default)]
pub struct ChainOptions {
    pub attempts: u32,
    pub base_delay_ms: u64,
    pub audit_path: Option<std::path::PathBuf>,
}

impl ChainOptions {
    pub fn from_config(config: &ChatClientConfig) -> Self {
        Self { attempts: config.attempts, base_delay_ms: config.base_delay_ms, audit_path: None }
    }
}

#[derive(Serialize)]
struct AuditRecord<'a> {
    prompt: &'a str,
    completion: &'a str,
    requested_at_ms: u128,
    completed_at_ms: u128,
}

fn epoch_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Sends the prompt, retrying transport failures with exponential backoff.
/// A blank completion is a failure: the long caption must carry content.
pub fn chain(
    prompt: &ChainPrompt,
    client: &dyn ChatClient,
    options: &ChainOptions,
) -> Result<String> {
    let attempts = options.attempts.max(1);
    let requested_at = epoch_ms();
    let mut last_err = None;
    for attempt in 1..=attempts {
        match client.complete(&prompt.rendered) {
            Ok(text) if text.trim().is_empty() => {
                return Err(Error::Chain("chat service returned an empty completion".into()));
            }
            Ok(text) => {
                if let Some(path) = &options.audit_path {
                    let record = AuditRecord {
                        prompt: &prompt.rendered,
                        completion: &text,
                        requested_at_ms: requested_at,
                        completed_at_ms: epoch_ms(),
                    };
                    let mut file =
                        std::fs::OpenOptions::new().create(true).append(true).open(path)?;
                    writeln!(file, "{}", serde_json::to_string(&record)?)?;
                }
                return Ok(text);
            }
            Err(e) => {
                log::warn!("chat attempt {attempt}/{attempts} failed: {e}");
                if attempt < attempts {
                    let delay = options.base_delay_ms.saturating_mul(1 << (attempt - 1));
                    std::thread::sleep(Duration::from_millis(delay));
                }
                last_err = Some(e);
            }
        }
    }
    Err(Error::Chain(format!(
        "chat service failed after {attempts} attempts: {}",
        last_err.expect("at least one attempt ran")
    )))
}
