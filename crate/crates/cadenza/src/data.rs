//! Dataset plumbing: task vocabularies, JSONL manifests, multi-hot label
//! encoding, and fixed-length clip slicing.
//!
//! Vocabulary order is a checkpoint-compatibility contract; the ordering
//! digest feeds the checkpoint config digest. Tasks without a configured
//! vocabulary (chords, downbeats) are stored on records but never encoded.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Exactly one label per record (key, vocals).
    SingleLabel,
    /// Zero or more labels per record (instrument, genre, mood).
    MultiLabel,
}

/// Ordered label list for one task head.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVocabulary {
    name: String,
    labels: Vec<String>,
    kind: TaskKind,
    index: HashMap<String, usize>,
}

impl TaskVocabulary {
    pub fn new(name: impl Into<String>, labels: Vec<String>, kind: TaskKind) -> Result<Self> {
        let name = name.into();
        if labels.is_empty() {
            return Err(Error::Config(format!("task '{name}' has an empty vocabulary")));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, label) in labels.iter().enumerate() {
            if label.trim().is_empty() {
                return Err(Error::Config(format!("task '{name}' has a blank label")));
            }
            if index.insert(label.clone(), i).is_some() {
                return Err(Error::Config(format!("task '{name}' repeats label '{label}'")));
            }
        }
        Ok(Self { name, labels, kind, index })
    }

    /// Ordered plain-text list, one label per line; blank lines ignored.
    pub fn from_file(name: impl Into<String>, path: &Path, kind: TaskKind) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let labels =
            text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned).collect();
        Self::new(name, labels, kind)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    /// C_k.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// Hash of (name, kind, ordered labels); part of the checkpoint digest.
    pub fn order_digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.name.as_bytes());
        hasher.update([0, matches!(self.kind, TaskKind::MultiLabel) as u8]);
        for label in &self.labels {
            hasher.update(label.as_bytes());
            hasher.update([0]);
        }
        hex::encode(hasher.finalize())
    }
}

const TONICS: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];

/// 24 keys ordered C major, C minor, C# major, ...
pub fn default_key_vocab() -> TaskVocabulary {
    let labels = TONICS.iter().flat_map(|t| [format!("{t} major"), format!("{t} minor")]).collect();
    TaskVocabulary::new("key", labels, TaskKind::SingleLabel).expect("static vocab")
}

/// Vocals presence with gender folded in.
pub fn default_vocals_vocab() -> TaskVocabulary {
    let labels =
        ["no_vocals", "male_vocals", "female_vocals"].iter().map(|s| (*s).to_owned()).collect();
    TaskVocabulary::new("vocals", labels, TaskKind::SingleLabel).expect("static vocab")
}

fn toy_vocab(name: &str, labels: &[&str]) -> TaskVocabulary {
    TaskVocabulary::new(
        name,
        labels.iter().map(|s| (*s).to_owned()).collect(),
        TaskKind::MultiLabel,
    )
    .expect("static vocab")
}

/// Small stand-in taxonomies for desk-scale runs; real datasets supply
/// their own lists through the config.
pub fn toy_instrument_vocab() -> TaskVocabulary {
    toy_vocab(
        "instrument",
        &[
            "piano", "guitar", "drums", "bass", "violin", "cello", "flute", "synth", "organ",
            "strings",
        ],
    )
}

pub fn toy_mood_theme_vocab() -> TaskVocabulary {
    toy_vocab(
        "mood_theme",
        &[
            "happy",
            "sad",
            "calm",
            "energetic",
            "dark",
            "bright",
            "dreamy",
            "epic",
            "relaxing",
            "tense",
        ],
    )
}

pub fn toy_genre_vocab() -> TaskVocabulary {
    toy_vocab(
        "genre",
        &[
            "rock",
            "pop",
            "jazz",
            "classical",
            "electronic",
            "folk",
            "ambient",
            "metal",
            "blues",
            "country",
        ],
    )
}

/// The five default heads in checkpoint order.
pub fn default_vocabularies() -> Vec<TaskVocabulary> {
    vec![
        default_key_vocab(),
        toy_instrument_vocab(),
        toy_mood_theme_vocab(),
        toy_genre_vocab(),
        default_vocals_vocab(),
    ]
}

/// One line of the manifest: an aligned (audio, caption, labels) triplet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub audio_path: String,
    pub caption: String,
    #[serde(default)]
    pub features: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub split: Option<String>,
}

impl ManifestRecord {
    fn validate(&self, vocabs: &[TaskVocabulary], line: usize) -> Result<()> {
        if self.caption.trim().is_empty() {
            return Err(Error::validation_at(line, "caption is empty"));
        }
        if self.audio_path.trim().is_empty() {
            return Err(Error::validation_at(line, "audio_path is empty"));
        }
        for vocab in vocabs {
            match self.features.get(vocab.name()) {
                Some(labels) => {
                    for label in labels {
                        if vocab.position(label).is_none() {
                            return Err(Error::validation_at(
                                line,
                                format!("unknown {} label '{label}'", vocab.name()),
                            ));
                        }
                    }
                    if vocab.kind() == TaskKind::SingleLabel && labels.len() != 1 {
                        return Err(Error::validation_at(
                            line,
                            format!(
                                "task '{}' needs exactly one label, got {}",
                                vocab.name(),
                                labels.len()
                            ),
                        ));
                    }
                }
                None if vocab.kind() == TaskKind::SingleLabel => {
                    return Err(Error::validation_at(
                        line,
                        format!("missing required single-label task '{}'", vocab.name()),
                    ));
                }
                None => {}
            }
        }
        Ok(())
    }
}

/// Per-task multi-hot targets in vocabulary order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLabelSet {
    /// (task name, y_k) pairs, one per configured vocabulary.
    pub targets: Vec<(String, Vec<f64>)>,
}

/// Loads and validates a JSONL manifest. Blank lines are skipped; an empty
/// manifest is legal but logged.
pub fn load_manifest(path: &Path, vocabs: &[TaskVocabulary]) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("{} line {line_no}: {e}", path.display())))?;
        record.validate(vocabs, line_no)?;
        records.push(record);
    }
    if records.is_empty() {
        log::warn!("manifest {} contains no records", path.display());
    }
    Ok(records)
}

/// Multi-hot encoding in vocabulary order. Records must be validated.
pub fn encode_labels(record: &ManifestRecord, vocabs: &[TaskVocabulary]) -> FeatureLabelSet {
    let targets = vocabs
        .iter()
        .map(|vocab| {
            let mut y = vec![0.0; vocab.len()];
            if let Some(labels) = record.features.get(vocab.name()) {
                for label in labels {
                    if let Some(i) = vocab.position(label) {
                        y[i] = 1.0;
                    }
                }
            }
            (vocab.name().to_owned(), y)
        })
        .collect();
    FeatureLabelSet { targets }
}

/// Inverse of [`encode_labels`]: label strings per task, vocabulary order.
pub fn decode_labels(
    set: &FeatureLabelSet,
    vocabs: &[TaskVocabulary],
) -> BTreeMap<String, Vec<String>> {
    let by_name: HashMap<&str, &TaskVocabulary> = vocabs.iter().map(|v| (v.name(), v)).collect();
    set.targets
        .iter()
        .filter_map(|(name, y)| {
            by_name.get(name.as_str()).map(|vocab| {
                let labels = y
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v > 0.5)
                    .map(|(i, _)| vocab.labels()[i].clone())
                    .collect();
                (name.clone(), labels)
            })
        })
        .collect()
}

/// Slices audio into consecutive non-overlapping `clip_len_s` windows. The
/// final partial window is kept iff it is at least half a window long.
pub fn make_clips(clip: &AudioClip, clip_len_s: f64) -> Result<Vec<AudioClip>> {
    if clip_len_s <= 0.0 || !clip_len_s.is_finite() {
        return Err(Error::InvalidInput(format!("clip_len_s must be positive, got {clip_len_s}")));
    }
    let window = ((clip_len_s * clip.sample_rate() as f64).round() as usize).max(1);
    let total = clip.samples().len();
    let full = total / window;
    let remainder = total % window;
    let mut out = Vec::with_capacity(full + 1);
    for i in 0..full {
        out.push(clip.slice(i * window, window)?);
    }
    if remainder > 0 && 2 * remainder >= window {
        out.push(clip.slice(full * window, remainder)?);
    }
    Ok(out)
}
