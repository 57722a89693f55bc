//! Frozen language-model bridge.
//!
//! The trainable projector talks to the LM through [`LanguageModel`] only:
//! embed query text, score a caption given a continuous prefix (with the
//! prefix gradient on request), and greedily generate. [`ToyLm`] is a tiny
//! frozen single-block causal transformer for desk-scale runs; the [`wire`]
//! submodule adapts the same contract over a byte protocol for external
//! runtimes.

pub mod wire;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::projector::{TokenBlock, TokenKind};

/// Textual query tokens appended after the music prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryText {
    text: String,
}

impl QueryText {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidInput("query text is empty".into()));
        }
        Ok(Self { text })
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// A caption with its token ids under the LM vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionTarget {
    pub text: String,
    pub token_ids: Vec<usize>,
}

/// Adapter boundary to a frozen autoregressive LM.
///
/// Implementations never mutate under these calls; `digest` must be stable
/// across any number of inference calls (frozen contract).
pub trait LanguageModel: Send + Sync {
    fn embedding_dim(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn encode(&self, text: &str) -> Vec<usize>;
    fn decode(&self, ids: &[usize]) -> String;
    fn embed_query(&self, q: &QueryText) -> Result<TokenBlock>;
    fn caption_nll(&self, prefix: &Mat, target: &CaptionTarget) -> Result<f64>;
    /// Loss plus its gradient with respect to the prefix, `[P, d]`.
    fn caption_nll_with_grad(&self, prefix: &Mat, target: &CaptionTarget) -> Result<(f64, Mat)>;
    fn generate(&self, prefix: &Mat, max_tokens: usize) -> Result<String>;
    fn digest(&self) -> String;

    fn caption_target(&self, text: &str) -> Result<CaptionTarget> {
        let token_ids = self.encode(text);
        if token_ids.is_empty() {
            return Err(Error::InvalidInput(format!("caption has no tokens: {text:?}")));
        }
        Ok(CaptionTarget { text: text.to_owned(), token_ids })
    }
}

pub const EOS: usize = 0;
pub const UNK: usize = 1;

const VOCAB_WORDS: &[&str] = &[
    "a",
    "an",
    "the",
    "this",
    "that",
    "with",
    "and",
    "or",
    "of",
    "in",
    "on",
    "over",
    "is",
    "are",
    "has",
    "have",
    "it",
    "its",
    "piece",
    "music",
    "describe",
    "song",
    "track",
    "tune",
    "sound",
    "audio",
    "clip",
    "style",
    "feel",
    "mood",
    "tempo",
    "beat",
    "rhythm",
    "melody",
    "harmony",
    "chords",
    "notes",
    "key",
    "major",
    "minor",
    "slow",
    "fast",
    "steady",
    "gentle",
    "soft",
    "loud",
    "quiet",
    "calm",
    "energetic",
    "upbeat",
    "mellow",
    "dark",
    "bright",
    "happy",
    "sad",
    "dreamy",
    "ambient",
    "piano",
    "guitar",
    "drums",
    "bass",
    "violin",
    "cello",
    "flute",
    "trumpet",
    "saxophone",
    "synth",
    "organ",
    "strings",
    "brass",
    "percussion",
    "keyboard",
    "acoustic",
    "electric",
    "electronic",
    "rock",
    "pop",
    "jazz",
    "classical",
    "folk",
    "metal",
    "blues",
    "country",
    "funk",
    "soul",
    "dance",
    "techno",
    "house",
    "orchestral",
    "cinematic",
    "vocals",
    "male",
    "female",
    "singer",
    "voice",
    "instrumental",
    "no",
    "solo",
    "band",
    "plays",
];

/// Lowercasing whitespace tokenizer over a fixed word list.
///
/// Surrounding ASCII punctuation is stripped per token, so token counts are
/// additive over concatenation and `encode`/`decode` round-trip losslessly
/// for canonical in-vocabulary text.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        let mut words = vec!["<eos>".to_owned(), "<unk>".to_owned()];
        words.extend(VOCAB_WORDS.iter().map(|w| (*w).to_owned()));
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    fn normalize(token: &str) -> &str {
        token.trim_matches(|c: char| c.is_ascii_punctuation())
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|t| Self::normalize(t).to_lowercase())
            .filter(|t| !t.is_empty())
            .map(|t| self.index.get(&t).copied().unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != EOS)
            .map(|&id| self.words.get(id).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Geometry and seeding of the toy LM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyLmConfig {
    pub dim: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self { dim: 16, max_positions: 512, seed: 23 }
    }
}

/// Frozen single-block causal self-attention transformer.
///
/// Seeded random weights, no layer norm, GeLU MLP, tied to the fixed
/// [`Tokenizer`] vocabulary. Small enough that every call rebuilds the
/// forward graph from scratch.
pub struct ToyLm {
    config: ToyLmConfig,
    tokenizer: Tokenizer,
    emb: Mat,
    pos: Mat,
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
    mlp_w1: Mat,
    mlp_b1: Mat,
    mlp_w2: Mat,
    mlp_b2: Mat,
    out_w: Mat,
    out_b: Mat,
}

impl ToyLm {
    pub fn new(config: ToyLmConfig) -> Result<Self> {
        if config.dim == 0 || config.max_positions == 0 {
            return Err(Error::Config("toy LM dim and max_positions must be positive".into()));
        }
        let tokenizer = Tokenizer::default();
        let v = tokenizer.vocab_size();
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bound = 1.0 / (d as f64).sqrt();
        let mut mat = |rows: usize, cols: usize| {
            Mat::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
        };
        Ok(Self {
            emb: mat(v, d),
            pos: mat(config.max_positions, d),
            wq: mat(d, d),
            wk: mat(d, d),
            wv: mat(d, d),
            wo: mat(d, d),
            mlp_w1: mat(d, 4 * d),
            mlp_b1: Mat::zeros((1, 4 * d)),
            mlp_w2: mat(4 * d, d),
            mlp_b2: Mat::zeros((1, d)),
            out_w: mat(d, v),
            out_b: Mat::zeros((1, v)),
            config,
            tokenizer,
        })
    }

    /// Zeroed output head: uniform next-token distribution over the vocab.
    pub fn with_uniform_head(config: ToyLmConfig) -> Result<Self> {
        let mut lm = Self::new(config)?;
        lm.out_w.fill(0.0);
        lm.out_b.fill(0.0);
        Ok(lm)
    }

    /// Output head biased so one in-vocabulary word dominates every step.
    pub fn with_biased_head(config: ToyLmConfig, word: &str, bias: f64) -> Result<Self> {
        let mut lm = Self::new(config)?;
        let ids = lm.tokenizer.encode(word);
        match ids.as_slice() {
            [id] if *id != UNK => lm.out_b[[0, *id]] = bias,
            _ => return Err(Error::InvalidInput(format!("not a single vocab word: {word:?}"))),
        }
        Ok(lm)
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn check_prefix(&self, prefix: &Mat) -> Result<()> {
        if prefix.nrows() == 0 || prefix.ncols() != self.config.dim {
            return Err(Error::Shape(format!(
                "prefix {:?} does not fit LM dim {}",
                prefix.dim(),
                self.config.dim
            )));
        }
        if prefix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite prefix entry".into()));
        }
        Ok(())
    }

    fn embedding_rows(&self, ids: &[usize]) -> Mat {
        let d = self.config.dim;
        let mut rows = Mat::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            rows.row_mut(i).assign(&self.emb.row(id.min(self.emb.nrows() - 1)));
        }
        rows
    }

    /// Transformer block over `[S, d]` rows; returns `[S, V]` logits.
    fn forward_on_tape(&self, tape: &mut Tape, rows: Var) -> Result<Var> {
        let (s, d) = tape.shape(rows);
        if s > self.config.max_positions {
            return Err(Error::Shape(format!(
                "sequence of {s} rows exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        let pos = tape.constant(self.pos.slice(ndarray::s![0..s, ..]).to_owned());
        let x = tape.add(rows, pos)?;

        let wq = tape.constant(self.wq.clone());
        let wk = tape.constant(self.wk.clone());
        let wv = tape.constant(self.wv.clone());
        let wo = tape.constant(self.wo.clone());
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let mask =
            tape.constant(Mat::from_shape_fn((s, s), |(i, j)| if j <= i { 0.0 } else { -1e9 }));
        let scores = tape.add(scores, mask)?;
        let attn = tape.softmax_rows(scores);
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.matmul(ctx, wo)?;
        let x = tape.add(x, ctx)?;

        let w1 = tape.constant(self.mlp_w1.clone());
        let b1 = tape.constant(self.mlp_b1.clone());
        let w2 = tape.constant(self.mlp_w2.clone());
        let b2 = tape.constant(self.mlp_b2.clone());
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h);
        let m = tape.matmul(h, w2)?;
        let m = tape.add_row(m, b2)?;
        let x = tape.add(x, m)?;

        let ow = tape.constant(self.out_w.clone());
        let ob = tape.constant(self.out_b.clone());
        let logits = tape.matmul(x, ow)?;
        tape.add_row(logits, ob)
    }

    /// Caption NLL graph: returns the tape, the tracked prefix node, and the
    /// scalar loss node. Targets are the caption ids followed by `<eos>`;
    /// the logits at row `P - 1 + j` predict target `j`.
    fn nll_graph(&self, prefix: &Mat, target: &CaptionTarget) -> Result<(Tape, Var, Var)> {
        self.check_prefix(prefix)?;
        if target.token_ids.is_empty() {
            return Err(Error::InvalidInput("empty caption target".into()));
        }
        if target.token_ids.iter().any(|&id| id >= self.vocab_size()) {
            return Err(Error::InvalidInput("caption token id outside vocabulary".into()));
        }
        let p = prefix.nrows();
        let mut targets = target.token_ids.clone();
        targets.push(EOS);

        let mut tape = Tape::new();
        let prefix_var = tape.param(prefix.clone());
        // input rows: prefix then embeddings of all targets but the last
        let rows = if targets.len() > 1 {
            let emb = tape.constant(self.embedding_rows(&targets[..targets.len() - 1]));
            tape.concat_rows(&[prefix_var, emb])?
        } else {
            prefix_var
        };
        let logits = self.forward_on_tape(&mut tape, rows)?;
        let predict_rows: Vec<usize> = (0..targets.len()).map(|j| p - 1 + j).collect();
        let picked = tape.gather_rows(logits, predict_rows)?;
        let loss = tape.ce_mean(picked, targets)?;
        Ok((tape, prefix_var, loss))
    }
}

impl LanguageModel for ToyLm {
    fn embedding_dim(&self) -> usize {
        self.config.dim
    }

    fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    fn encode(&self, text: &str) -> Vec<usize> {
        self.tokenizer.encode(text)
    }

    fn decode(&self, ids: &[usize]) -> String {
        self.tokenizer.decode(ids)
    }

    fn embed_query(&self, q: &QueryText) -> Result<TokenBlock> {
        let ids = self.encode(q.text());
        if ids.is_empty() {
            return Err(Error::InvalidInput(format!(
                "query normalizes to no tokens: {:?}",
                q.text()
            )));
        }
        TokenBlock::new(self.embedding_rows(&ids), TokenKind::Query)
    }

    fn caption_nll(&self, prefix: &Mat, target: &CaptionTarget) -> Result<f64> {
        let (tape, _, loss) = self.nll_graph(prefix, target)?;
        Ok(tape.value(loss)[[0, 0]])
    }

    fn caption_nll_with_grad(&self, prefix: &Mat, target: &CaptionTarget) -> Result<(f64, Mat)> {
        let (tape, prefix_var, loss) = self.nll_graph(prefix, target)?;
        let value = tape.value(loss)[[0, 0]];
        let grads = tape.backward(&[(loss, Mat::from_elem((1, 1), 1.0))])?;
        let dprefix = grads.wrt(prefix_var, prefix.nrows(), prefix.ncols());
        Ok((value, dprefix))
    }

    fn generate(&self, prefix: &Mat, max_tokens: usize) -> Result<String> {
        self.check_prefix(prefix)?;
        if max_tokens == 0 {
            return Err(Error::InvalidInput("max_tokens must be >= 1".into()));
        }
        let mut generated: Vec<usize> = Vec::new();
        loop {
            let mut tape = Tape::new();
            let rows = if generated.is_empty() {
                tape.constant(prefix.clone())
            } else {
                let p = tape.constant(prefix.clone());
                let emb = tape.constant(self.embedding_rows(&generated));
                tape.concat_rows(&[p, emb])?
            };
            let logits = self.forward_on_tape(&mut tape, rows)?;
            let last = tape.value(logits).nrows() - 1;
            let row = tape.value(logits).row(last);
            // argmax with lowest-id tie break keeps decoding deterministic
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            if best == EOS {
                break;
            }
            generated.push(best);
            if generated.len() >= max_tokens {
                break;
            }
        }
        Ok(self.decode(&generated))
    }

    fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.config.dim.to_le_bytes());
        hasher.update(self.config.max_positions.to_le_bytes());
        hasher.update(self.config.seed.to_le_bytes());
        for word in &self.tokenizer.words {
            hasher.update(word.as_bytes());
            hasher.update([0]);
        }
        for m in [
            &self.emb,
            &self.pos,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
            &self.out_w,
            &self.out_b,
        ] {
            for v in m.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}
