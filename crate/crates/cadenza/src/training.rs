//! Multi-task objective and the deterministic training loop.
//!
//! The total loss is `λ_cap·L_cap + Σ_k λ_k·L_k`. The task sum is
//! accumulated first, in head order, and the caption term is added last;
//! tests pin this grouping, so do not reorder the arithmetic.
//!
//! Only projector parameters move. The LM is consulted through the bridge
//! for loss and prefix gradient; a digest check guards the frozen contract.
//! With `λ_cap = 0` the bridge is never invoked at all.

use ndarray::{concatenate, s};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::autodiff::{Mat, Tape};
use crate::data::FeatureLabelSet;
use crate::encoder::LayeredEmbedding;
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, QueryText};
use crate::par;
use crate::projector::{FeaturePrediction, MultiTaskProjector};

/// Eq. 8 weighting: caption weight plus one weight per task head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cap: f64,
    pub lambda_tasks: BTreeMap<String, f64>,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(self.lambda_cap).chain(self.lambda_tasks.values().copied());
        for w in all.clone() {
            if w < 0.0 || !w.is_finite() {
                return Err(Error::Config(format!("loss weight {w} is not a nonnegative real")));
            }
        }
        if !all.clone().any(|w| w > 0.0) {
            return Err(Error::Config("all loss weights are zero".into()));
        }
        Ok(())
    }

    fn task_weight(&self, task: &str) -> Result<f64> {
        self.lambda_tasks
            .get(task)
            .copied()
            .ok_or_else(|| Error::Config(format!("no loss weight for task '{task}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseName {
    FeaturePretrain,
    CaptionPretrain,
    Finetune,
}

impl std::fmt::Display for PhaseName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PhaseName::FeaturePretrain => "feature_pretrain",
            PhaseName::CaptionPretrain => "caption_pretrain",
            PhaseName::Finetune => "finetune",
        };
        f.write_str(s)
    }
}

/// One schedule entry of the §4.3-style three-phase recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub name: PhaseName,
    pub weights: LossWeights,
    pub dataset_id: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl PhaseSpec {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.name == PhaseName::FeaturePretrain && self.weights.lambda_cap != 0.0 {
            return Err(Error::Config("feature_pretrain requires lambda_cap = 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate {} is not a positive real",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One aligned training example with its frozen-encoder embedding.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub embedding: LayeredEmbedding,
    pub caption: String,
    pub labels: FeatureLabelSet,
}

/// Per-step losses: batch means of each term and their Eq. 8 combination.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub cap_loss: f64,
    pub task_losses: Vec<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRow>,
    pub task_names: Vec<String>,
}

impl TrainOutcome {
    /// CSV stream: `step,l_cap,l_<task>...,total`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("step,l_cap");
        for name in &self.task_names {
            out.push_str(",l_");
            out.push_str(name);
        }
        out.push_str(",total\n");
        for row in &self.trace {
            out.push_str(&format!("{},{}", row.step, row.cap_loss));
            for l in &row.task_losses {
                out.push_str(&format!(",{l}"));
            }
            out.push_str(&format!(",{}\n", row.total));
        }
        out
    }
}

/// Stable BCE-with-logits, averaged over classes:
/// `max(l, 0) − l·t + ln(1 + e^(−|l|))`.
pub fn task_loss(pred: &FeaturePrediction, target: &[f64]) -> Result<f64> {
    if pred.logits.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} logits vs {} targets",
            pred.logits.len(),
            target.len()
        )));
    }
    if target.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::InvalidInput("BCE target outside [0, 1]".into()));
    }
    let mut total = 0.0;
    for (&l, &t) in pred.logits.iter().zip(target) {
        total += l.max(0.0) - l * t + (-l.abs()).exp().ln_1p();
    }
    Ok(total / target.len() as f64)
}

/// `λ_cap·L_cap + Σ λ_k·L_k`, task sum first.
pub fn total_loss(cap_loss: f64, task_losses: &[(String, f64)], w: &LossWeights) -> Result<f64> {
    let mut task_sum = 0.0;
    for (name, loss) in task_losses {
        task_sum += w.task_weight(name)? * loss;
    }
    Ok(w.lambda_cap * cap_loss + task_sum)
}

/// Per-example gradient contribution plus its loss terms.
/// Per-example gradients of the Eq. 8 objective, one matrix per projector
/// parameter in `ProjectorVars::ordered` order, plus the unweighted loss
/// terms. Zero-weighted terms contribute zero gradient and skip the LM.
pub struct ExampleGrad {
    pub grads: Vec<Mat>,
    pub cap_loss: f64,
    pub task_losses: Vec<f64>,
}

pub fn example_grad(
    projector: &MultiTaskProjector,
    lm: &dyn LanguageModel,
    query_rows: Option<&Mat>,
    example: &TrainExample,
    caption_ids: Option<&crate::lm::CaptionTarget>,
    weights: &LossWeights,
) -> Result<ExampleGrad> {
    let mut tape = Tape::new();
    let graph = projector.build_graph(&mut tape, &example.embedding)?;

    let mut seeds = Vec::new();
    let mut task_losses = Vec::with_capacity(projector.heads.len());
    for (k, spec) in projector.heads.iter().enumerate() {
        let target = example
            .labels
            .targets
            .iter()
            .find(|(name, _)| name == &spec.name)
            .map(|(_, y)| y)
            .ok_or_else(|| {
                Error::Config(format!("example lacks targets for task '{}'", spec.name))
            })?;
        if target.len() != spec.classes {
            return Err(Error::Shape(format!(
                "task '{}' target length {} vs {} classes",
                spec.name,
                target.len(),
                spec.classes
            )));
        }
        let target_row = Mat::from_shape_vec((1, target.len()), target.clone()).expect("row");
        let bce = tape.bce_mean(graph.logits[k], target_row)?;
        task_losses.push(tape.value(bce)[[0, 0]]);
        let lambda = weights.task_weight(&spec.name)?;
        if lambda > 0.0 {
            seeds.push((bce, Mat::from_elem((1, 1), lambda)));
        }
    }

    let cap_loss = if weights.lambda_cap > 0.0 {
        let query = query_rows.expect("query present when lambda_cap > 0");
        let target = caption_ids.expect("caption target present when lambda_cap > 0");
        let music = tape.value(graph.prefix);
        let full = concatenate(ndarray::Axis(0), &[music.view(), query.view()])
            .expect("stack prefix and query");
        let (loss, dfull) = lm.caption_nll_with_grad(&full, target)?;
        let music_rows = music.nrows();
        let dmusic = dfull.slice(s![0..music_rows, ..]).to_owned();
        seeds.push((graph.prefix, dmusic * weights.lambda_cap));
        loss
    } else {
        0.0
    };

    let grads = tape.backward(&seeds)?;
    let ordered = graph.vars.ordered();
    let grad_mats = ordered
        .iter()
        .map(|&v| {
            let (r, c) = tape.shape(v);
            grads.wrt(v, r, c)
        })
        .collect();
    Ok(ExampleGrad { grads: grad_mats, cap_loss, task_losses })
}

/// Runs one phase of SGD over the projector. Deterministic for a fixed
/// seed: seeded shuffle per epoch, fixed-size batches with the last partial
/// batch dropped, batch gradients averaged in index order.
pub fn train_phase(
    spec: &PhaseSpec,
    projector: &mut MultiTaskProjector,
    lm: &dyn LanguageModel,
    query: &QueryText,
    examples: &[TrainExample],
) -> Result<TrainOutcome> {
    spec.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidInput("training dataset is empty".into()));
    }
    if examples.len() < spec.batch_size {
        return Err(Error::InvalidInput(format!(
            "batch_size {} exceeds dataset of {}",
            spec.batch_size,
            examples.len()
        )));
    }

    let uses_lm = spec.weights.lambda_cap > 0.0;
    let lm_digest_before = uses_lm.then(|| lm.digest());
    let query_rows = if uses_lm { Some(lm.embed_query(query)?.vectors) } else { None };
    let caption_targets: Option<Vec<_>> = if uses_lm {
        Some(examples.iter().map(|ex| lm.caption_target(&ex.caption)).collect::<Result<_>>()?)
    } else {
        None
    };

    let task_names: Vec<String> = projector.heads.iter().map(|h| h.name.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut indices: Vec<usize> = (0..examples.len()).collect();
    let mut trace = Vec::new();
    let mut step = 0;

    for epoch in 0..spec.epochs {
        indices.shuffle(&mut rng);
        for (batch_no, batch) in indices.chunks_exact(spec.batch_size).enumerate() {
            step += 1;
            let results = par::map(batch, |&i| {
                example_grad(
                    projector,
                    lm,
                    query_rows.as_ref(),
                    &examples[i],
                    caption_targets.as_ref().map(|t| &t[i]),
                    &spec.weights,
                )
            });
            let mut batch_grads: Option<Vec<Mat>> = None;
            let mut cap_sum = 0.0;
            let mut task_sums = vec![0.0; task_names.len()];
            for result in results {
                let eg = result?;
                cap_sum += eg.cap_loss;
                for (s, l) in task_sums.iter_mut().zip(&eg.task_losses) {
                    *s += l;
                }
                match &mut batch_grads {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&eg.grads) {
                            *a += g;
                        }
                    }
                    slot => *slot = Some(eg.grads),
                }
            }
            let n = spec.batch_size as f64;
            let cap_loss = cap_sum / n;
            let task_losses: Vec<f64> = task_sums.iter().map(|s| s / n).collect();
            let named: Vec<(String, f64)> =
                task_names.iter().cloned().zip(task_losses.iter().copied()).collect();
            let total = total_loss(cap_loss, &named, &spec.weights)?;
            if !total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at step {step} (epoch {epoch}, batch {batch_no}): \
                     cap {cap_loss}, tasks {task_losses:?}"
                )));
            }
            let grads = batch_grads.expect("batch is non-empty");
            let scale = spec.learning_rate / n;
            for (param, grad) in projector.params_mut().into_iter().zip(&grads) {
                param.scaled_add(-scale, grad);
            }
            trace.push(TraceRow { step, cap_loss, task_losses, total });
        }
    }

    if let Some(before) = lm_digest_before {
        if lm.digest() != before {
            return Err(Error::Numerical("frozen LM drifted during training".into()));
        }
    }
    Ok(TrainOutcome { trace, task_names })
}
