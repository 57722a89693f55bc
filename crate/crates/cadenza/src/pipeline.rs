//! End-to-end captioning: frozen encoder into trained projector into frozen
//! LM. The pipeline owns its component trait objects and checks dimension
//! agreement once at construction so per-clip calls cannot mismatch.

use crate::audio::AudioClip;
use crate::autodiff::Mat;
use crate::encoder::AudioEncoder;
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, QueryText};
use crate::projector::{assemble_tokens, FeaturePrediction, MultiTaskProjector};

pub struct CaptionPipeline {
    encoder: Box<dyn AudioEncoder>,
    projector: MultiTaskProjector,
    lm: Box<dyn LanguageModel>,
    query: QueryText,
    max_tokens: usize,
}

impl CaptionPipeline {
    pub fn new(
        encoder: Box<dyn AudioEncoder>,
        projector: MultiTaskProjector,
        lm: Box<dyn LanguageModel>,
        query: QueryText,
        max_tokens: usize,
    ) -> Result<Self> {
        let cfg = projector.config();
        if encoder.layers() != cfg.encoder_layers || encoder.dim() != cfg.encoder_dim {
            return Err(Error::Config(format!(
                "encoder produces [{}, ., {}] but projector expects [{}, ., {}]",
                encoder.layers(),
                encoder.dim(),
                cfg.encoder_layers,
                cfg.encoder_dim
            )));
        }
        if lm.embedding_dim() != projector.lm_dim() {
            return Err(Error::Config(format!(
                "LM embedding dim {} does not match projector lm_dim {}",
                lm.embedding_dim(),
                projector.lm_dim()
            )));
        }
        if max_tokens == 0 {
            return Err(Error::Config("max_tokens must be positive".into()));
        }
        Ok(Self { encoder, projector, lm, query, max_tokens })
    }

    pub fn projector(&self) -> &MultiTaskProjector {
        &self.projector
    }

    pub fn lm(&self) -> &dyn LanguageModel {
        self.lm.as_ref()
    }

    pub fn encoder(&self) -> &dyn AudioEncoder {
        self.encoder.as_ref()
    }

    /// Full music prefix `[M + N + |q|, d]` for one clip.
    pub fn prefix(&self, clip: &AudioClip) -> Result<Mat> {
        let h = self.encoder.encode(clip)?;
        let content = self.projector.content_tokens(&h)?;
        let preds = self.projector.feature_logits(&h)?;
        let feature = self.projector.feature_tokens(&preds)?;
        let query = self.lm.embed_query(&self.query)?;
        assemble_tokens(&content, &feature, &query)
    }

    /// Greedy caption for one clip; deterministic for fixed components.
    pub fn caption(&self, clip: &AudioClip) -> Result<String> {
        let prefix = self.prefix(clip)?;
        self.lm.generate(&prefix, self.max_tokens)
    }

    /// Per-task predictions in head order, tagged with task names.
    pub fn predict_features(&self, clip: &AudioClip) -> Result<Vec<(String, FeaturePrediction)>> {
        let h = self.encoder.encode(clip)?;
        let preds = self.projector.feature_logits(&h)?;
        Ok(self.projector.heads.iter().map(|spec| spec.name.clone()).zip(preds).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::sine_clip;
    use crate::encoder::{EncoderConfig, ToySpectralEncoder};
    use crate::lm::{ToyLm, ToyLmConfig};
    use crate::projector::{HeadConfig, ProjectorConfig};

    fn tiny_pipeline() -> CaptionPipeline {
        let enc = ToySpectralEncoder::new(EncoderConfig {
            layers: 3,
            dim: 8,
            bands: 16,
            frames_per_second: 75,
            seed: 5,
        })
        .unwrap();
        let projector = MultiTaskProjector::new(ProjectorConfig {
            encoder_layers: 3,
            encoder_dim: 8,
            lm_dim: 16,
            hidden: 16,
            content_tokens: 4,
            heads: vec![
                HeadConfig { name: "key".into(), classes: 4, n_tokens: 2 },
                HeadConfig { name: "vocals".into(), classes: 3, n_tokens: 1 },
            ],
            seed: 11,
        })
        .unwrap();
        let lm = ToyLm::new(ToyLmConfig::default()).unwrap();
        CaptionPipeline::new(
            Box::new(enc),
            projector,
            Box::new(lm),
            QueryText::new("describe this piece of music").unwrap(),
            16,
        )
        .unwrap()
    }

    #[test]
    fn prefix_has_token_budget_plus_query_rows() {
        let p = tiny_pipeline();
        let clip = sine_clip(440.0, 2400, 0.1, 0.5);
        let prefix = p.prefix(&clip).unwrap();
        let budget = p.projector().config().token_budget();
        let query_rows = p.lm().encode("describe this piece of music").len();
        assert_eq!(prefix.nrows(), budget + query_rows);
        assert_eq!(prefix.ncols(), 16);
    }

    #[test]
    fn caption_is_deterministic() {
        let p = tiny_pipeline();
        let clip = sine_clip(440.0, 2400, 0.1, 0.5);
        let a = p.caption(&clip).unwrap();
        let b = p.caption(&clip).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predictions_are_named_and_simplex_free() {
        let p = tiny_pipeline();
        let clip = sine_clip(330.0, 2400, 0.1, 0.5);
        let preds = p.predict_features(&clip).unwrap();
        assert_eq!(preds.len(), 2);
        assert_eq!(preds[0].0, "key");
        assert_eq!(preds[1].0, "vocals");
        for (_, pred) in &preds {
            assert!(pred.probabilities.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn dimension_mismatch_is_a_config_error() {
        let enc = ToySpectralEncoder::new(EncoderConfig {
            layers: 2,
            dim: 8,
            bands: 16,
            frames_per_second: 75,
            seed: 5,
        })
        .unwrap();
        let projector = MultiTaskProjector::new(ProjectorConfig {
            encoder_layers: 3,
            encoder_dim: 8,
            lm_dim: 16,
            hidden: 16,
            content_tokens: 4,
            heads: vec![HeadConfig { name: "key".into(), classes: 4, n_tokens: 2 }],
            seed: 11,
        })
        .unwrap();
        let lm = ToyLm::new(ToyLmConfig::default()).unwrap();
        let result = CaptionPipeline::new(
            Box::new(enc),
            projector,
            Box::new(lm),
            QueryText::new("music").unwrap(),
            16,
        );
        assert!(matches!(result.err(), Some(Error::Config(_))));
    }
}
