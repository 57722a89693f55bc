//! Projector checkpoints: one JSON bundle of named parameter groups plus a
//! config digest. The digest covers projector geometry and the per-task
//! vocabulary ordering hashes, so a checkpoint refuses to load against a
//! reordered vocabulary or resized head.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::autodiff::Mat;
use crate::data::TaskVocabulary;
use crate::error::{Error, Result};
use crate::projector::{LayerWeights, Linear, Mlp, MultiTaskProjector, ProjectorConfig};

/// Serialized parameter bundle. Group names are part of the format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config_digest: String,
    pub config: ProjectorConfig,
    /// Raw (pre-softmax) content layer weights, `[1, L]`.
    pub content_layer_weights: Mat,
    /// Raw shared layer weights, `[1, L]`.
    pub shared_layer_weights: Mat,
    pub content_mlps: Vec<Mlp>,
    pub heads: Vec<HeadGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadGroup {
    pub name: String,
    pub head_k: Linear,
    pub feat_mlp_k: Vec<Mlp>,
}

/// Digest binding the projector geometry to vocabulary order. Every head
/// must have a matching vocabulary whose size equals the head's class count.
pub fn config_digest(config: &ProjectorConfig, vocabs: &[TaskVocabulary]) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(b"cadenza-projector-config v1\n");
    hasher.update(
        format!(
            "layers {} dim {} lm_dim {} hidden {} content_tokens {} seed {}\n",
            config.encoder_layers,
            config.encoder_dim,
            config.lm_dim,
            config.hidden,
            config.content_tokens,
            config.seed
        )
        .as_bytes(),
    );
    for head in &config.heads {
        let vocab = vocabs
            .iter()
            .find(|v| v.name() == head.name)
            .ok_or_else(|| Error::Config(format!("no vocabulary for task '{}'", head.name)))?;
        if vocab.labels().len() != head.classes {
            return Err(Error::Config(format!(
                "task '{}' has {} classes but vocabulary lists {} labels",
                head.name,
                head.classes,
                vocab.labels().len()
            )));
        }
        hasher.update(
            format!(
                "head {} classes {} tokens {} vocab {}\n",
                head.name,
                head.classes,
                head.n_tokens,
                vocab.order_digest()
            )
            .as_bytes(),
        );
    }
    Ok(hex::encode(hasher.finalize()))
}

fn expect_shape(name: &str, mat: &Mat, rows: usize, cols: usize) -> Result<()> {
    if mat.dim() != (rows, cols) {
        return Err(Error::Shape(format!(
            "checkpoint group {name}: expected [{rows}, {cols}], found [{}, {}]",
            mat.nrows(),
            mat.ncols()
        )));
    }
    Ok(())
}

fn expect_mlp(name: &str, mlp: &Mlp, in_dim: usize, hidden: usize, out_dim: usize) -> Result<()> {
    expect_shape(&format!("{name}.w1"), &mlp.w1, in_dim, hidden)?;
    expect_shape(&format!("{name}.b1"), &mlp.b1, 1, hidden)?;
    expect_shape(&format!("{name}.w2"), &mlp.w2, hidden, out_dim)?;
    expect_shape(&format!("{name}.b2"), &mlp.b2, 1, out_dim)
}

impl Checkpoint {
    /// Snapshots a trained projector together with its compatibility digest.
    pub fn capture(projector: &MultiTaskProjector, vocabs: &[TaskVocabulary]) -> Result<Self> {
        let config = projector.config().clone();
        Ok(Self {
            config_digest: config_digest(&config, vocabs)?,
            config,
            content_layer_weights: projector.content_weights.raw().clone(),
            shared_layer_weights: projector.shared_weights.raw().clone(),
            content_mlps: projector.content_mlps.clone(),
            heads: projector
                .heads
                .iter()
                .map(|h| HeadGroup {
                    name: h.name.clone(),
                    head_k: h.head.clone(),
                    feat_mlp_k: h.token_mlps.clone(),
                })
                .collect(),
        })
    }

    /// Rebuilds the projector, rejecting any digest or shape mismatch.
    pub fn restore(&self, vocabs: &[TaskVocabulary]) -> Result<MultiTaskProjector> {
        let expected = config_digest(&self.config, vocabs)?;
        if expected != self.config_digest {
            return Err(Error::Config(format!(
                "checkpoint digest mismatch: file carries {}, current config and \
                 vocabularies give {expected}",
                self.config_digest
            )));
        }
        let cfg = &self.config;
        let (l, d, dd, h) = (cfg.encoder_layers, cfg.encoder_dim, cfg.lm_dim, cfg.hidden);
        expect_shape("content_layer_weights", &self.content_layer_weights, 1, l)?;
        expect_shape("shared_layer_weights", &self.shared_layer_weights, 1, l)?;
        if self.content_mlps.len() != cfg.content_tokens {
            return Err(Error::Shape(format!(
                "checkpoint has {} content MLPs for {} content tokens",
                self.content_mlps.len(),
                cfg.content_tokens
            )));
        }
        for (i, mlp) in self.content_mlps.iter().enumerate() {
            expect_mlp(&format!("content_mlps[{i}]"), mlp, d, h, dd)?;
        }
        if self.heads.len() != cfg.heads.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} head groups for {} configured heads",
                self.heads.len(),
                cfg.heads.len()
            )));
        }
        for (group, hc) in self.heads.iter().zip(&cfg.heads) {
            if group.name != hc.name {
                return Err(Error::Config(format!(
                    "checkpoint head '{}' does not match configured head '{}'",
                    group.name, hc.name
                )));
            }
            expect_shape(&format!("head_{}", group.name), &group.head_k.w, d, hc.classes)?;
            expect_shape(&format!("head_{}.b", group.name), &group.head_k.b, 1, hc.classes)?;
            if group.feat_mlp_k.len() != hc.n_tokens {
                return Err(Error::Shape(format!(
                    "head '{}' has {} token MLPs for {} tokens",
                    group.name,
                    group.feat_mlp_k.len(),
                    hc.n_tokens
                )));
            }
            for (i, mlp) in group.feat_mlp_k.iter().enumerate() {
                expect_mlp(&format!("feat_mlp_{}[{i}]", group.name), mlp, hc.classes, h, dd)?;
            }
        }

        let mut projector = MultiTaskProjector::new(cfg.clone())?;
        projector.content_weights =
            LayerWeights::from_raw(self.content_layer_weights.iter().copied().collect())?;
        projector.shared_weights =
            LayerWeights::from_raw(self.shared_layer_weights.iter().copied().collect())?;
        projector.content_mlps = self.content_mlps.clone();
        for (spec, group) in projector.heads.iter_mut().zip(&self.heads) {
            spec.head = group.head_k.clone();
            spec.token_mlps = group.feat_mlp_k.clone();
        }
        Ok(projector)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(Error::from)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::from)?;
        serde_json::from_str(&text).map_err(Error::from)
    }
}
