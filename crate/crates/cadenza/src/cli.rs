//! Command-line surface: train, caption, chain, eval, inspect-config, and
//! a stdio LM server for the pipe adapter.

use clap::{Parser, Subcommand};
use serde::Deserialize;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::audio::AudioClip;
use crate::chaining::{build_client, build_prompt, caption_chunks, chain, ChainOptions};
use crate::checkpoint::{config_digest, Checkpoint};
use crate::config::{load_config, RunConfig};
use crate::data::{encode_labels, load_manifest, make_clips};
use crate::encoder::ToySpectralEncoder;
use crate::error::{Error, Result};
use crate::lm::{QueryText, ToyLm, ToyLmConfig};
use crate::metrics::{judge_corpus, score_corpus, TrigramHashEmbedder};
use crate::pipeline::CaptionPipeline;
use crate::projector::MultiTaskProjector;
use crate::training::{train_phase, TrainExample};

#[derive(Debug, Parser)]
#[command(
    name = "cadenza",
    version,
    about = "Multi-task music captioning over a frozen language model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the configured training phases; write a checkpoint and loss
    /// trace after each phase.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Caption one audio file with a trained checkpoint.
    Caption {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        audio: PathBuf,
    },
    /// Chunk-caption a song and chain the chunks into one long caption.
    Chain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        audio: PathBuf,
        /// Song name for the prompt; defaults to the audio file stem.
        #[arg(long)]
        song_name: Option<String>,
        /// Print the rendered prompt without any network call.
        #[arg(long)]
        dry_run: bool,
        /// Append request/response JSONL records to this file.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Score predictions against references (JSONL, {"text": ...} lines).
    Eval {
        predictions: PathBuf,
        references: PathBuf,
        /// Add chat-judged feature accuracies; needs --config for the
        /// client settings.
        #[arg(long)]
        with_judge: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the report JSON here instead of standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Validate a config file and print the resolved settings.
    InspectConfig {
        #[arg(long)]
        config: PathBuf,
    },
    /// Serve the toy LM over the length-prefixed frame protocol on stdio.
    LmServe {
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 512)]
        max_positions: usize,
        #[arg(long, default_value_t = 23)]
        seed: u64,
    },
}

/// Prints one stdout line. A consumer closing the pipe early (`... | head`)
/// is a normal end of output, not an error, so BrokenPipe exits cleanly.
fn emit(text: std::fmt::Arguments) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_fmt(text).and_then(|()| out.write_all(b"\n")) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => std::process::exit(0),
        other => Ok(other?),
    }
}

macro_rules! emit {
    ($($arg:tt)*) => { emit(format_args!($($arg)*))? };
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => cmd_train(&config),
        Command::Caption { config, checkpoint, audio } => cmd_caption(&config, &checkpoint, &audio),
        Command::Chain { config, checkpoint, audio, song_name, dry_run, audit } => {
            cmd_chain(&config, &checkpoint, &audio, song_name.as_deref(), dry_run, audit)
        }
        Command::Eval { predictions, references, with_judge, config, output } => {
            cmd_eval(&predictions, &references, with_judge, config.as_deref(), output.as_deref())
        }
        Command::InspectConfig { config } => cmd_inspect_config(&config),
        Command::LmServe { dim, max_positions, seed } => cmd_lm_serve(dim, max_positions, seed),
    }
}

/// Slices each manifest record's audio into training clips; every clip
/// inherits the record's caption and labels.
fn load_examples(
    manifest: &Path,
    config: &RunConfig,
    encoder: &ToySpectralEncoder,
    vocabs: &[crate::data::TaskVocabulary],
) -> Result<Vec<TrainExample>> {
    use crate::encoder::AudioEncoder;
    let records = load_manifest(manifest, vocabs)?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut examples = Vec::new();
    for record in &records {
        let audio_path = {
            let p = Path::new(&record.audio_path);
            if p.is_relative() {
                base.join(p)
            } else {
                p.to_path_buf()
            }
        };
        let audio = AudioClip::from_wav(&audio_path)?;
        let labels = encode_labels(record, vocabs);
        for clip in make_clips(&audio, config.chunk_len_s)? {
            examples.push(TrainExample {
                embedding: encoder.encode(&clip)?,
                caption: record.caption.clone(),
                labels: labels.clone(),
            });
        }
    }
    if examples.is_empty() {
        return Err(Error::validation(format!(
            "manifest {} yields no training clips",
            manifest.display()
        )));
    }
    Ok(examples)
}

pub fn cmd_train(config_path: &Path) -> Result<()> {
    use crate::encoder::AudioEncoder;
    let config = load_config(config_path)?;
    if config.phases.is_empty() {
        return Err(Error::Config("config field 'phases': at least one phase".into()));
    }
    let vocabs = config.vocabularies()?;
    let pconfig = config.projector_config(&vocabs)?;
    let mut projector = MultiTaskProjector::new(pconfig)?;
    let encoder = ToySpectralEncoder::new(config.encoder.clone())?;
    let lm = config.build_lm()?;
    let query = QueryText::new(config.query.clone())?;
    std::fs::create_dir_all(&config.output_dir)?;

    let encoder_digest = encoder.digest();
    let lm_digest = lm.digest();
    let task_names = config.task_names();
    for section in &config.phases {
        let spec = section.to_spec(&task_names);
        let examples = load_examples(&section.manifest, &config, &encoder, &vocabs)?;
        log::info!("phase {}: {} clips from {}", spec.name, examples.len(), spec.dataset_id);
        let outcome = train_phase(&spec, &mut projector, lm.as_ref(), &query, &examples)?;

        let trace_path = config.output_dir.join(format!("trace_{}.csv", spec.name));
        std::fs::write(&trace_path, outcome.trace_csv())?;
        let ckpt = Checkpoint::capture(&projector, &vocabs)?;
        let ckpt_path = config.output_dir.join(format!("checkpoint_{}.json", spec.name));
        ckpt.save(&ckpt_path)?;
        let last = outcome.trace.last().map(|r| r.total).unwrap_or(f64::NAN);
        emit!(
            "phase {}: {} steps, final total loss {:.6} -> {}, {}",
            spec.name,
            outcome.trace.len(),
            last,
            ckpt_path.display(),
            trace_path.display()
        );
    }
    assert_eq!(encoder.digest(), encoder_digest, "encoder must stay frozen");
    assert_eq!(lm.digest(), lm_digest, "LM must stay frozen");

    let final_path = config.output_dir.join("checkpoint.json");
    Checkpoint::capture(&projector, &vocabs)?.save(&final_path)?;
    emit!("final checkpoint -> {}", final_path.display());
    Ok(())
}

/// Restores the checkpoint and wires the full pipeline, refusing a
/// checkpoint whose config digest disagrees with the run config.
fn build_pipeline(config: &RunConfig, checkpoint_path: &Path) -> Result<CaptionPipeline> {
    let vocabs = config.vocabularies()?;
    let pconfig = config.projector_config(&vocabs)?;
    let expected = config_digest(&pconfig, &vocabs)?;
    let ckpt = Checkpoint::load(checkpoint_path)?;
    if ckpt.config_digest != expected {
        return Err(Error::Config(format!(
            "checkpoint {} was produced by a different config (digest {} != {})",
            checkpoint_path.display(),
            ckpt.config_digest,
            expected
        )));
    }
    let projector = ckpt.restore(&vocabs)?;
    let encoder = ToySpectralEncoder::new(config.encoder.clone())?;
    let lm = config.build_lm()?;
    let query = QueryText::new(config.query.clone())?;
    CaptionPipeline::new(Box::new(encoder), projector, lm, query, config.max_caption_tokens)
}

pub fn cmd_caption(config_path: &Path, checkpoint_path: &Path, audio_path: &Path) -> Result<()> {
    let config = load_config(config_path)?;
    let pipeline = build_pipeline(&config, checkpoint_path)?;
    let clip = AudioClip::from_wav(audio_path)?;
    emit!("{}", pipeline.caption(&clip)?);
    Ok(())
}

pub fn cmd_chain(
    config_path: &Path,
    checkpoint_path: &Path,
    audio_path: &Path,
    song_name: Option<&str>,
    dry_run: bool,
    audit: Option<PathBuf>,
) -> Result<()> {
    let config = load_config(config_path)?;
    let pipeline = build_pipeline(&config, checkpoint_path)?;
    let clip = AudioClip::from_wav(audio_path)?;
    let song = match song_name {
        Some(name) => name.to_owned(),
        None => audio_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "untitled".to_owned()),
    };
    let chunks = caption_chunks(&clip, &pipeline, config.chunk_len_s)?;
    let prompt = build_prompt(&song, &chunks)?;
    if dry_run {
        emit!("{}", prompt.rendered);
        return Ok(());
    }
    let client = build_client(&config.chat)?;
    let mut options = ChainOptions::from_config(&config.chat);
    options.audit_path = audit;
    emit!("{}", chain(&prompt, client.as_ref(), &options)?);
    Ok(())
}

fn read_text_lines(path: &Path) -> Result<Vec<String>> {
    #[derive(Deserialize)]
    struct TextLine {
        text: String,
    }
    let raw = std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    raw.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str::<TextLine>(line)
                .map(|t| t.text)
                .map_err(|e| Error::Parse(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn cmd_eval(
    predictions_path: &Path,
    references_path: &Path,
    with_judge: bool,
    config_path: Option<&Path>,
    output: Option<&Path>,
) -> Result<()> {
    let predictions = read_text_lines(predictions_path)?;
    let references = read_text_lines(references_path)?;
    let scores = score_corpus(&predictions, &references, &TrigramHashEmbedder::default())?;

    let judge = if with_judge {
        let config_path = config_path.ok_or_else(|| {
            Error::Config("--with-judge requires --config for the chat client settings".into())
        })?;
        let config = load_config(config_path)?;
        let client = build_client(&config.chat)?;
        Some(judge_corpus(&predictions, &references, client.as_ref(), config.chat.attempts)?)
    } else {
        None
    };

    let report = serde_json::json!({ "scores": scores, "judge": judge });
    let rendered = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    match output {
        Some(path) => std::fs::write(path, rendered + "\n")?,
        None => emit!("{rendered}"),
    }
    Ok(())
}

pub fn cmd_inspect_config(config_path: &Path) -> Result<()> {
    let config = load_config(config_path)?;
    let vocabs = config.vocabularies()?;
    let pconfig = config.projector_config(&vocabs)?;
    let tasks: Vec<_> = config
        .tasks
        .iter()
        .zip(&vocabs)
        .map(|(t, v)| {
            serde_json::json!({
                "name": t.name,
                "n_tokens": t.n_tokens,
                "classes": v.len(),
                "kind": v.kind(),
            })
        })
        .collect();
    let report = serde_json::json!({
        "config": config,
        "derived": {
            "token_budget": pconfig.token_budget(),
            "config_digest": config_digest(&pconfig, &vocabs)?,
            "tasks": tasks,
            "phases": config.phase_specs().len(),
        },
    });
    emit!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
    Ok(())
}

/// Serves frames until the peer closes its end. Read failures end the
/// session quietly; the protocol has no shutdown message.
pub fn cmd_lm_serve(dim: usize, max_positions: usize, seed: u64) -> Result<()> {
    use crate::lm::wire::{read_frame, serve_frame, write_frame};
    let lm = ToyLm::new(ToyLmConfig { dim, max_positions, seed })?;
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut reader = stdin.lock();
    let mut writer = stdout.lock();
    loop {
        let request = match read_frame(&mut reader) {
            Ok(frame) => frame,
            Err(_) => return Ok(()),
        };
        let response = serve_frame(&lm, &request);
        write_frame(&mut writer, &response)?;
        writer.flush().map_err(Error::from)?;
    }
}
