//! Trainable multi-task projection head.
//!
//! Two pathways read the same layered embedding: content tokens pool layers
//! with simplex weights, average over time, and fan out through M parallel
//! MLP branches; feature tokens pool with separate simplex weights, predict
//! per-task class probabilities through K sigmoid heads, and map each head's
//! probabilities through its own token MLP branches. The final LM input is
//! `[content ‖ feature ‖ query]`.
//!
//! Forward passes share one code path with training: every op is recorded
//! on a [`Tape`], so values and gradients can never diverge.

use ndarray::{s, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Mat, Tape, Var};
use crate::encoder::LayeredEmbedding;
use crate::error::{Error, Result};

/// Simplex-constrained layer-mixing weights.
///
/// Stores unconstrained raw parameters; the effective weights are their
/// normalized exponentiation, so they are nonnegative and sum to one for
/// any raw values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    raw: Mat,
}

impl LayerWeights {
    /// Uniform simplex start: all raw parameters zero.
    pub fn zeros(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Shape("LayerWeights of length zero".into()));
        }
        Ok(Self { raw: Mat::zeros((1, len)) })
    }

    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Shape("LayerWeights of length zero".into()));
        }
        if raw.iter().any(|v| v.is_nan()) {
            return Err(Error::Numerical("NaN raw layer weight".into()));
        }
        let len = raw.len();
        Ok(Self { raw: Mat::from_shape_vec((1, len), raw).expect("row vector") })
    }

    /// Exact simplex point: raw = ln(w), so `effective()` reproduces `w`
    /// bit-for-bit at the vertices (one-hot) and the barycenter (uniform).
    pub fn from_effective(weights: &[f64]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if weights.is_empty() || weights.iter().any(|&w| !(0.0..=1.0 + 1e-6).contains(&w)) {
            return Err(Error::InvalidInput("effective weights must lie in [0, 1]".into()));
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!("effective weights sum to {sum}")));
        }
        Self::from_raw(weights.iter().map(|w| w.ln()).collect())
    }

    pub fn one_hot(index: usize, len: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::Shape(format!("one_hot index {index} for length {len}")));
        }
        let mut w = vec![0.0; len];
        w[index] = 1.0;
        Self::from_effective(&w)
    }

    pub fn uniform(len: usize) -> Result<Self> {
        Self::from_effective(&vec![1.0 / len as f64; len])
    }

    pub fn len(&self) -> usize {
        self.raw.ncols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn raw(&self) -> &Mat {
        &self.raw
    }

    pub(crate) fn raw_mut(&mut self) -> &mut Mat {
        &mut self.raw
    }

    /// Weights on the probability simplex.
    pub fn effective(&self) -> Vec<f64> {
        autodiff::softmax_rows(&self.raw).row(0).to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Content,
    Feature,
    Query,
}

/// A block of LM-ready token vectors `[n_tokens, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBlock {
    pub vectors: Mat,
    pub kind: TokenKind,
}

impl TokenBlock {
    pub fn new(vectors: Mat, kind: TokenKind) -> Result<Self> {
        if vectors.nrows() == 0 || vectors.ncols() == 0 {
            return Err(Error::Shape(format!("empty {kind:?} token block")));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite {kind:?} token")));
        }
        Ok(Self { vectors, kind })
    }

    pub fn n_tokens(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// One task head's sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePrediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl FeaturePrediction {
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite feature logit".into()));
        }
        let probabilities = logits.iter().map(|&l| autodiff::sigmoid(l)).collect();
        Ok(Self { logits, probabilities })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Mat,
    pub b: Mat,
}

/// Two-layer MLP branch with a smooth-gated activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Mlp {
    fn seeded(rng: &mut ChaCha8Rng, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        let first = 1.0 / (in_dim as f64).sqrt();
        let last = 1.0 / (out_dim as f64).sqrt();
        Self {
            w1: Mat::from_shape_fn((in_dim, hidden), |_| rng.random_range(-first..first)),
            b1: Mat::zeros((1, hidden)),
            w2: Mat::from_shape_fn((hidden, out_dim), |_| rng.random_range(-last..last)),
            b2: Mat::zeros((1, out_dim)),
        }
    }

    /// Records `gelu(x·w1 + b1)·w2 + b2` on the tape; `x` is `[1, in]`.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: Var) -> Result<(MlpVars, Var)> {
        let w1 = tape.param(self.w1.clone());
        let b1 = tape.param(self.b1.clone());
        let w2 = tape.param(self.w2.clone());
        let b2 = tape.param(self.b2.clone());
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h);
        let y = tape.matmul(h, w2)?;
        let y = tape.add_row(y, b2)?;
        Ok((MlpVars { w1, b1, w2, b2 }, y))
    }
}

/// Per-task head: a linear probe `f_k: D → C_k` plus `n_tokens` token MLP
/// branches mapping the head's probabilities into LM space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHeadSpec {
    pub name: String,
    pub classes: usize,
    pub n_tokens: usize,
    pub head: Linear,
    pub token_mlps: Vec<Mlp>,
}

/// Geometry of the projector; class counts follow the task vocabularies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorConfig {
    /// Encoder layer count L.
    pub encoder_layers: usize,
    /// Encoder embedding dimension D.
    pub encoder_dim: usize,
    /// LM embedding dimension d.
    pub lm_dim: usize,
    /// MLP hidden width; defaults to `lm_dim`.
    pub hidden: usize,
    /// Content token count M.
    pub content_tokens: usize,
    pub heads: Vec<HeadConfig>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub name: String,
    pub classes: usize,
    pub n_tokens: usize,
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_layers == 0
            || self.encoder_dim == 0
            || self.lm_dim == 0
            || self.hidden == 0
            || self.content_tokens == 0
        {
            return Err(Error::Config("projector dimensions must be positive".into()));
        }
        if self.heads.is_empty() {
            return Err(Error::Config("projector requires at least one task head".into()));
        }
        for h in &self.heads {
            if h.classes == 0 || h.n_tokens == 0 {
                return Err(Error::Config(format!(
                    "head '{}' needs classes >= 1 and n_tokens >= 1",
                    h.name
                )));
            }
        }
        let mut names: Vec<&str> = self.heads.iter().map(|h| h.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.heads.len() {
            return Err(Error::Config("duplicate task head names".into()));
        }
        Ok(())
    }

    /// M + Σ N_k.
    pub fn token_budget(&self) -> usize {
        self.content_tokens + self.heads.iter().map(|h| h.n_tokens).sum::<usize>()
    }
}

/// Trainable parameters of both projection pathways.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskProjector {
    config: ProjectorConfig,
    pub content_weights: LayerWeights,
    pub shared_weights: LayerWeights,
    pub content_mlps: Vec<Mlp>,
    pub heads: Vec<TaskHeadSpec>,
}

/// Tape handles for every parameter, in canonical order.
pub struct ProjectorVars {
    pub content_raw: Var,
    pub shared_raw: Var,
    pub content_mlps: Vec<MlpVars>,
    pub heads: Vec<HeadVars>,
}

pub struct HeadVars {
    pub w: Var,
    pub b: Var,
    pub token_mlps: Vec<MlpVars>,
}

impl ProjectorVars {
    /// Same order as [`MultiTaskProjector::params_mut`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.content_raw, self.shared_raw];
        for m in &self.content_mlps {
            out.extend([m.w1, m.b1, m.w2, m.b2]);
        }
        for h in &self.heads {
            out.extend([h.w, h.b]);
            for m in &h.token_mlps {
                out.extend([m.w1, m.b1, m.w2, m.b2]);
            }
        }
        out
    }
}

/// Full forward graph over one embedding.
pub struct ProjectorGraph {
    pub vars: ProjectorVars,
    /// `[M, d]` content tokens.
    pub content: Var,
    /// K logit rows, `[1, C_k]` each, in head order.
    pub logits: Vec<Var>,
    /// `[N, d]` feature tokens.
    pub feature: Var,
    /// `[M + N, d]` music prefix (content then feature).
    pub prefix: Var,
}

impl MultiTaskProjector {
    pub fn new(config: ProjectorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let content_weights = LayerWeights::zeros(config.encoder_layers)?;
        let shared_weights = LayerWeights::zeros(config.encoder_layers)?;
        let content_mlps = (0..config.content_tokens)
            .map(|_| Mlp::seeded(&mut rng, config.encoder_dim, config.hidden, config.lm_dim))
            .collect();
        let head_bound = 1.0 / (config.encoder_dim as f64).sqrt();
        let heads = config
            .heads
            .iter()
            .map(|hc| TaskHeadSpec {
                name: hc.name.clone(),
                classes: hc.classes,
                n_tokens: hc.n_tokens,
                head: Linear {
                    w: Mat::from_shape_fn((config.encoder_dim, hc.classes), |_| {
                        rng.random_range(-head_bound..head_bound)
                    }),
                    b: Mat::zeros((1, hc.classes)),
                },
                token_mlps: (0..hc.n_tokens)
                    .map(|_| Mlp::seeded(&mut rng, hc.classes, config.hidden, config.lm_dim))
                    .collect(),
            })
            .collect();
        Ok(Self { config, content_weights, shared_weights, content_mlps, heads })
    }

    pub fn config(&self) -> &ProjectorConfig {
        &self.config
    }

    pub fn lm_dim(&self) -> usize {
        self.config.lm_dim
    }

    /// All trainable matrices in canonical order: content raw, shared raw,
    /// content MLPs, then per head the probe and its token MLPs.
    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> =
            vec![self.content_weights.raw_mut(), self.shared_weights.raw_mut()];
        for m in &mut self.content_mlps {
            out.extend([&mut m.w1, &mut m.b1, &mut m.w2, &mut m.b2]);
        }
        for h in &mut self.heads {
            out.extend([&mut h.head.w, &mut h.head.b]);
            for m in &mut h.token_mlps {
                out.extend([&mut m.w1, &mut m.b1, &mut m.w2, &mut m.b2]);
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Mat> {
        let mut out: Vec<&Mat> = vec![self.content_weights.raw(), self.shared_weights.raw()];
        for m in &self.content_mlps {
            out.extend([&m.w1, &m.b1, &m.w2, &m.b2]);
        }
        for h in &self.heads {
            out.extend([&h.head.w, &h.head.b]);
            for m in &h.token_mlps {
                out.extend([&m.w1, &m.b1, &m.w2, &m.b2]);
            }
        }
        out
    }

    /// Records the complete two-pathway forward pass.
    pub fn build_graph(&self, tape: &mut Tape, h: &LayeredEmbedding) -> Result<ProjectorGraph> {
        if h.layers() != self.config.encoder_layers || h.dim() != self.config.encoder_dim {
            return Err(Error::Shape(format!(
                "embedding [{}, {}, {}] does not fit projector (L={}, D={})",
                h.layers(),
                h.frames(),
                h.dim(),
                self.config.encoder_layers,
                self.config.encoder_dim
            )));
        }
        let layer_mats = h.layer_mats();

        let content_raw = tape.param(self.content_weights.raw().clone());
        let shared_raw = tape.param(self.shared_weights.raw().clone());
        let content_eff = tape.softmax_rows(content_raw);
        let shared_eff = tape.softmax_rows(shared_raw);
        let content_pooled = tape.weighted_layer_sum(content_eff, layer_mats.clone())?;
        let shared_pooled = tape.weighted_layer_sum(shared_eff, layer_mats)?;
        let content_avg = tape.mean_rows(content_pooled);
        let shared_avg = tape.mean_rows(shared_pooled);

        let mut content_mlp_vars = Vec::with_capacity(self.content_mlps.len());
        let mut content_rows = Vec::with_capacity(self.content_mlps.len());
        for mlp in &self.content_mlps {
            let (vars, out) = mlp.forward_on_tape(tape, content_avg)?;
            content_mlp_vars.push(vars);
            content_rows.push(out);
        }
        let content = tape.concat_rows(&content_rows)?;

        let mut head_vars = Vec::with_capacity(self.heads.len());
        let mut logits = Vec::with_capacity(self.heads.len());
        let mut feature_rows = Vec::new();
        for spec in &self.heads {
            let w = tape.param(spec.head.w.clone());
            let b = tape.param(spec.head.b.clone());
            let lin = tape.matmul(shared_avg, w)?;
            let head_logits = tape.add_row(lin, b)?;
            let probs = tape.sigmoid(head_logits);
            let mut mlp_vars = Vec::with_capacity(spec.token_mlps.len());
            for mlp in &spec.token_mlps {
                let (vars, out) = mlp.forward_on_tape(tape, probs)?;
                mlp_vars.push(vars);
                feature_rows.push(out);
            }
            logits.push(head_logits);
            head_vars.push(HeadVars { w, b, token_mlps: mlp_vars });
        }
        let feature = tape.concat_rows(&feature_rows)?;
        let prefix = tape.concat_rows(&[content, feature])?;

        Ok(ProjectorGraph {
            vars: ProjectorVars {
                content_raw,
                shared_raw,
                content_mlps: content_mlp_vars,
                heads: head_vars,
            },
            content,
            logits,
            feature,
            prefix,
        })
    }

    /// Content pathway only: `[M, d]` tokens.
    pub fn content_tokens(&self, h: &LayeredEmbedding) -> Result<TokenBlock> {
        let mut tape = Tape::new();
        let graph = self.build_graph(&mut tape, h)?;
        TokenBlock::new(tape.value(graph.content).clone(), TokenKind::Content)
    }

    /// Shared pathway through every head: K predictions in head order.
    pub fn feature_logits(&self, h: &LayeredEmbedding) -> Result<Vec<FeaturePrediction>> {
        let mut tape = Tape::new();
        let graph = self.build_graph(&mut tape, h)?;
        graph
            .logits
            .iter()
            .map(|&lv| FeaturePrediction::from_logits(tape.value(lv).row(0).to_vec()))
            .collect()
    }

    /// Maps given predictions through the token MLPs, concatenated in head
    /// order; `[Σ N_k, d]`.
    pub fn feature_tokens(&self, preds: &[FeaturePrediction]) -> Result<TokenBlock> {
        if preds.len() != self.heads.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} heads",
                preds.len(),
                self.heads.len()
            )));
        }
        let mut tape = Tape::new();
        let mut rows = Vec::new();
        for (spec, pred) in self.heads.iter().zip(preds) {
            if pred.probabilities.len() != spec.classes {
                return Err(Error::Shape(format!(
                    "head '{}' expects {} classes, prediction has {}",
                    spec.name,
                    spec.classes,
                    pred.probabilities.len()
                )));
            }
            let p = tape.constant(
                Mat::from_shape_vec((1, spec.classes), pred.probabilities.clone())
                    .expect("row vector"),
            );
            for mlp in &spec.token_mlps {
                let (_, out) = mlp.forward_on_tape(&mut tape, p)?;
                rows.push(out);
            }
        }
        let all = tape.concat_rows(&rows)?;
        TokenBlock::new(tape.value(all).clone(), TokenKind::Feature)
    }
}

/// `Σ_l w_l · H[l]` with the effective (simplex) weights; `[T', D]`.
pub fn pool_layers(h: &LayeredEmbedding, w: &LayerWeights) -> Result<Mat> {
    pool_layers_with(h, &w.effective())
}

/// Same pooling over an explicit weight vector.
pub fn pool_layers_with(h: &LayeredEmbedding, weights: &[f64]) -> Result<Mat> {
    if weights.len() != h.layers() {
        return Err(Error::Shape(format!("{} weights for {} layers", weights.len(), h.layers())));
    }
    let mut out = Mat::zeros((h.frames(), h.dim()));
    for (l, &w) in weights.iter().enumerate() {
        out.scaled_add(w, &h.layer(l));
    }
    Ok(out)
}

/// Arithmetic mean over the time axis; `[1, D]`.
pub fn time_average(pooled: &Mat) -> Mat {
    pooled.mean_axis(Axis(0)).expect("pooled matrix has rows").insert_axis(Axis(0))
}

/// Row-wise `[content ‖ feature ‖ query]`; `[(M + N + Q), d]`.
pub fn assemble_tokens(
    content: &TokenBlock,
    feature: &TokenBlock,
    query: &TokenBlock,
) -> Result<Mat> {
    let expected =
        [(content, TokenKind::Content), (feature, TokenKind::Feature), (query, TokenKind::Query)];
    for (block, kind) in &expected {
        if block.kind != *kind {
            return Err(Error::InvalidInput(format!(
                "expected a {kind:?} block, got {:?}",
                block.kind
            )));
        }
    }
    let d = content.dim();
    if feature.dim() != d || query.dim() != d {
        return Err(Error::Shape(format!(
            "token dims differ: content {d}, feature {}, query {}",
            feature.dim(),
            query.dim()
        )));
    }
    let rows = content.n_tokens() + feature.n_tokens() + query.n_tokens();
    let mut out = Mat::zeros((rows, d));
    let mut at = 0;
    for block in [content, feature, query] {
        out.slice_mut(s![at..at + block.n_tokens(), ..]).assign(&block.vectors);
        at += block.n_tokens();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn toy_embedding(l: usize, t: usize, d: usize, seed: u64) -> LayeredEmbedding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LayeredEmbedding::new(Array3::from_shape_fn((l, t, d), |_| rng.random_range(-1.0..1.0)))
            .unwrap()
    }

    fn tiny_config() -> ProjectorConfig {
        ProjectorConfig {
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
        }
    }

    fn default_shaped_config() -> ProjectorConfig {
        ProjectorConfig {
            encoder_layers: 3,
            encoder_dim: 8,
            lm_dim: 16,
            hidden: 16,
            content_tokens: 35,
            heads: ["key", "instrument", "mood_theme", "genre", "vocals"]
                .iter()
                .map(|name| HeadConfig {
                    name: (*name).into(),
                    classes: if *name == "key" { 24 } else { 3 },
                    n_tokens: 5,
                })
                .collect(),
            seed: 11,
        }
    }

    #[test]
    fn pool_layers_one_hot_selects_layer_exactly() {
        let h = toy_embedding(4, 3, 5, 1);
        let w = LayerWeights::one_hot(2, 4).unwrap();
        let pooled = pool_layers(&h, &w).unwrap();
        assert_eq!(pooled, h.layer(2).to_owned());
    }

    #[test]
    fn pool_layers_uniform_is_layer_mean() {
        let h = toy_embedding(4, 3, 5, 2);
        let w = LayerWeights::uniform(4).unwrap();
        let pooled = pool_layers(&h, &w).unwrap();
        let mean = h.data().mean_axis(Axis(0)).unwrap();
        for (a, b) in pooled.iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_layers_matches_double_loop_oracle() {
        let h = toy_embedding(2, 2, 2, 3);
        let w = LayerWeights::from_raw(vec![0.3, -1.2]).unwrap();
        let eff = w.effective();
        let pooled = pool_layers(&h, &w).unwrap();
        for t in 0..2 {
            for d in 0..2 {
                let acc: f64 = eff.iter().enumerate().map(|(l, &e)| e * h.data()[[l, t, d]]).sum();
                assert!((pooled[[t, d]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_layers_rejects_length_mismatch() {
        let h = toy_embedding(3, 2, 2, 4);
        let w = LayerWeights::uniform(4).unwrap();
        assert!(matches!(pool_layers(&h, &w), Err(Error::Shape(_))));
    }

    #[test]
    fn time_average_cases() {
        let constant = Mat::from_elem((5, 3), 2.5);
        assert_eq!(time_average(&constant), Mat::from_elem((1, 3), 2.5));

        let single = array![[1.0, -2.0, 3.0]];
        assert_eq!(time_average(&single), single);

        let two = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(time_average(&two), array![[2.0, 3.0]]);
    }

    #[test]
    fn content_tokens_have_m_rows_of_lm_dim() {
        let config = default_shaped_config();
        let proj = MultiTaskProjector::new(config).unwrap();
        let h = toy_embedding(3, 4, 8, 5);
        let block = proj.content_tokens(&h).unwrap();
        assert_eq!(block.kind, TokenKind::Content);
        assert_eq!((block.n_tokens(), block.dim()), (35, 16));
    }

    #[test]
    fn zeroed_final_layers_emit_zero_content_tokens() {
        let mut proj = MultiTaskProjector::new(tiny_config()).unwrap();
        for mlp in &mut proj.content_mlps {
            mlp.w2.fill(0.0);
            mlp.b2.fill(0.0);
        }
        let h = toy_embedding(3, 4, 8, 6);
        let block = proj.content_tokens(&h).unwrap();
        assert!(block.vectors.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_logits_match_head_layout_and_sigmoid() {
        let proj = MultiTaskProjector::new(default_shaped_config()).unwrap();
        let h = toy_embedding(3, 4, 8, 7);
        let preds = proj.feature_logits(&h).unwrap();
        assert_eq!(preds.len(), 5);
        assert_eq!(preds[0].logits.len(), 24);
        for p in &preds {
            for (&l, &pr) in p.logits.iter().zip(&p.probabilities) {
                let expect = 1.0 / (1.0 + (-l).exp());
                assert!((pr - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_heads_predict_half() {
        let mut proj = MultiTaskProjector::new(tiny_config()).unwrap();
        for head in &mut proj.heads {
            head.head.w.fill(0.0);
            head.head.b.fill(0.0);
        }
        let h = toy_embedding(3, 4, 8, 8);
        for pred in proj.feature_logits(&h).unwrap() {
            assert!(pred.logits.iter().all(|&l| l == 0.0));
            assert!(pred.probabilities.iter().all(|&p| p == 0.5));
        }
    }

    #[test]
    fn feature_tokens_single_head_equals_its_mlp_output() {
        let mut config = tiny_config();
        config.heads.truncate(1);
        config.heads[0].n_tokens = 3;
        let proj = MultiTaskProjector::new(config).unwrap();
        let pred = FeaturePrediction::from_logits(vec![0.2, -1.0, 0.5, 2.0]).unwrap();
        let block = proj.feature_tokens(std::slice::from_ref(&pred)).unwrap();
        assert_eq!((block.n_tokens(), block.dim()), (3, 16));

        let mut tape = Tape::new();
        let p = tape.constant(Mat::from_shape_vec((1, 4), pred.probabilities.clone()).unwrap());
        for (i, mlp) in proj.heads[0].token_mlps.iter().enumerate() {
            let (_, out) = mlp.forward_on_tape(&mut tape, p).unwrap();
            assert_eq!(tape.value(out).row(0), block.vectors.row(i));
        }
    }

    #[test]
    fn permuting_heads_permutes_feature_blocks() {
        let proj = MultiTaskProjector::new(tiny_config()).unwrap();
        let mut swapped = proj.clone();
        swapped.heads.swap(0, 1);
        let pred_a = FeaturePrediction::from_logits(vec![0.1, 0.2, -0.3, 1.0]).unwrap();
        let pred_b = FeaturePrediction::from_logits(vec![-0.5, 0.0, 0.7]).unwrap();
        let fwd = proj.feature_tokens(&[pred_a.clone(), pred_b.clone()]).unwrap();
        let rev = swapped.feature_tokens(&[pred_b, pred_a]).unwrap();
        // head 0 emits 2 tokens, head 1 emits 1: blocks swap wholesale
        assert_eq!(fwd.vectors.slice(s![0..2, ..]), rev.vectors.slice(s![1..3, ..]));
        assert_eq!(fwd.vectors.slice(s![2..3, ..]), rev.vectors.slice(s![0..1, ..]));
    }

    #[test]
    fn assemble_orders_blocks_and_recovers_slices() {
        let content = TokenBlock::new(Mat::from_elem((35, 4), 1.0), TokenKind::Content).unwrap();
        let feature = TokenBlock::new(Mat::from_elem((25, 4), 2.0), TokenKind::Feature).unwrap();
        let query = TokenBlock::new(Mat::from_elem((12, 4), 3.0), TokenKind::Query).unwrap();
        let all = assemble_tokens(&content, &feature, &query).unwrap();
        assert_eq!(all.nrows(), 72);
        assert_eq!(all.row(0), content.vectors.row(0));
        assert_eq!(all.row(60), query.vectors.row(0));
        assert_eq!(all.slice(s![0..35, ..]), content.vectors.view());
        assert_eq!(all.slice(s![35..60, ..]), feature.vectors.view());
        assert_eq!(all.slice(s![60..72, ..]), query.vectors.view());
    }

    #[test]
    fn empty_query_is_rejected() {
        assert!(TokenBlock::new(Mat::zeros((0, 4)), TokenKind::Query).is_err());
    }

    #[test]
    fn assemble_rejects_dim_mismatch_and_wrong_kinds() {
        let content = TokenBlock::new(Mat::zeros((2, 4)), TokenKind::Content).unwrap();
        let feature = TokenBlock::new(Mat::zeros((2, 5)), TokenKind::Feature).unwrap();
        let query = TokenBlock::new(Mat::zeros((1, 4)), TokenKind::Query).unwrap();
        assert!(assemble_tokens(&content, &feature, &query).is_err());

        let feature_ok = TokenBlock::new(Mat::zeros((2, 4)), TokenKind::Feature).unwrap();
        assert!(assemble_tokens(&feature_ok, &content, &query).is_err());
    }

    #[test]
    fn token_budget_default_shape_is_60() {
        assert_eq!(default_shaped_config().token_budget(), 60);
    }

    #[test]
    fn raw_layer_weight_perturbation_moves_content_tokens() {
        let proj = MultiTaskProjector::new(tiny_config()).unwrap();
        let h = toy_embedding(3, 4, 8, 9);
        let base = proj.content_tokens(&h).unwrap();
        let mut bumped = proj.clone();
        bumped.content_weights = LayerWeights::from_raw(vec![1e-3, 0.0, 0.0]).unwrap();
        let moved = bumped.content_tokens(&h).unwrap();
        let diff: f64 =
            base.vectors.iter().zip(moved.vectors.iter()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 0.0, "content tokens insensitive to layer weights");
    }

    #[test]
    fn graph_gradients_match_finite_differences_spotwise() {
        let proj = MultiTaskProjector::new(tiny_config()).unwrap();
        let h = toy_embedding(3, 4, 8, 10);

        let loss_of = |p: &MultiTaskProjector| -> f64 {
            let mut tape = Tape::new();
            let g = p.build_graph(&mut tape, &h).unwrap();
            // scalar probe: sum of prefix entries plus sum of all logits
            let (r, c) = tape.shape(g.prefix);
            let ones_l = tape.constant(Mat::from_elem((1, r), 1.0));
            let ones_r = tape.constant(Mat::from_elem((c, 1), 1.0));
            let rows = tape.matmul(ones_l, g.prefix).unwrap();
            let mut total = tape.matmul(rows, ones_r).unwrap();
            for &lv in &g.logits {
                let (_, ck) = tape.shape(lv);
                let ones = tape.constant(Mat::from_elem((ck, 1), 1.0));
                let s = tape.matmul(lv, ones).unwrap();
                total = tape.add(total, s).unwrap();
            }
            tape.value(total)[[0, 0]]
        };

        let mut tape = Tape::new();
        let g = proj.build_graph(&mut tape, &h).unwrap();
        let (r, c) = tape.shape(g.prefix);
        let ones_l = tape.constant(Mat::from_elem((1, r), 1.0));
        let ones_r = tape.constant(Mat::from_elem((c, 1), 1.0));
        let rows = tape.matmul(ones_l, g.prefix).unwrap();
        let mut total = tape.matmul(rows, ones_r).unwrap();
        for &lv in &g.logits {
            let (_, ck) = tape.shape(lv);
            let ones = tape.constant(Mat::from_elem((ck, 1), 1.0));
            let s = tape.matmul(lv, ones).unwrap();
            total = tape.add(total, s).unwrap();
        }
        let grads = tape.backward(&[(total, Mat::from_elem((1, 1), 1.0))]).unwrap();

        // one representative coordinate from every parameter group
        let probes: Vec<(Var, usize, usize)> = vec![
            (g.vars.content_raw, 0, 1),
            (g.vars.shared_raw, 0, 2),
            (g.vars.content_mlps[0].w1, 2, 3),
            (g.vars.content_mlps[1].b1, 0, 5),
            (g.vars.content_mlps[2].w2, 4, 7),
            (g.vars.content_mlps[3].b2, 0, 0),
            (g.vars.heads[0].w, 3, 1),
            (g.vars.heads[0].b, 0, 0),
            (g.vars.heads[1].token_mlps[0].w1, 1, 2),
            (g.vars.heads[0].token_mlps[1].w2, 6, 4),
        ];
        let h_step = 1e-5;
        for (pi, (var, row, col)) in probes.into_iter().enumerate() {
            let analytic = grads.get(var).map(|m| m[[row, col]]).unwrap_or(0.0);
            let mut plus = proj.clone();
            let mut minus = proj.clone();
            {
                let mut pp = plus.params_mut();
                let mut pm = minus.params_mut();
                // probe index pi maps onto ordered() positions below
                let order = g.vars.ordered();
                let slot = order.iter().position(|&v| v == var).unwrap();
                pp[slot][[row, col]] += h_step;
                pm[slot][[row, col]] -= h_step;
                let _ = pi;
            }
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h_step);
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                ((analytic - numeric) / denom).abs() < 1e-3,
                "param grad mismatch: analytic {analytic}, numeric {numeric}"
            );
        }
    }

    #[test]
    fn params_mut_order_matches_ordered_vars() {
        let mut proj = MultiTaskProjector::new(tiny_config()).unwrap();
        let h = toy_embedding(3, 4, 8, 12);
        let mut tape = Tape::new();
        let g = proj.build_graph(&mut tape, &h).unwrap();
        let order = g.vars.ordered();
        let params = proj.params_mut();
        assert_eq!(order.len(), params.len());
        for (var, mat) in order.iter().zip(&params) {
            assert_eq!(tape.value(*var), **mat);
        }
    }

    #[test]
    fn serde_round_trip_preserves_parameters() {
        let proj = MultiTaskProjector::new(tiny_config()).unwrap();
        let json = serde_json::to_string(&proj).unwrap();
        let back: MultiTaskProjector = serde_json::from_str(&json).unwrap();
        assert_eq!(proj.config(), back.config());
        let a = proj.params();
        let b = back.params();
        assert_eq!(a.len(), b.len());
        for (i, (ma, mb)) in a.iter().zip(&b).enumerate() {
            assert_eq!(ma.dim(), mb.dim(), "param {i} shape");
            for (j, (va, vb)) in ma.iter().zip(mb.iter()).enumerate() {
                assert!(va.to_bits() == vb.to_bits(), "param {i} entry {j}: {va:?} vs {vb:?}");
            }
        }
    }

    #[test]
    fn embedding_shape_mismatch_is_rejected() {
        let proj = MultiTaskProjector::new(tiny_config()).unwrap();
        let wrong = toy_embedding(4, 4, 8, 13);
        assert!(proj.content_tokens(&wrong).is_err());
    }

    proptest! {
        #[test]
        fn effective_weights_stay_on_simplex(raw in proptest::collection::vec(-50.0_f64..50.0, 1..16)) {
            let w = LayerWeights::from_raw(raw).unwrap();
            let eff = w.effective();
            prop_assert!(eff.iter().all(|&v| v >= 0.0));
            let sum: f64 = eff.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
        }
    }
}
