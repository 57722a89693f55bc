//! Caption metrics: BLEU, ROUGE-L, a METEOR variant without lexical
//! resources, an embedding-similarity score behind a pluggable embedder,
//! and the LLM-judged feature-match metrics with a fixed judge prompt.
//!
//! Conventions pinned for reproducibility: tokenization lowercases and
//! splits on any non-alphanumeric character; BLEU runs unsmoothed, so any
//! zero n-gram precision zeroes the score; corpus scores are arithmetic
//! means of per-pair scores.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::chaining::ChatClient;
use crate::error::{Error, Result};
use crate::par;

/// Lowercase, split on non-alphanumeric, keep numbers.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

fn ngram_count(tokens: &[String], gram: &[String]) -> usize {
    tokens.windows(gram.len()).filter(|w| *w == gram).count()
}

/// Unsmoothed BLEU over token lists. Any precision with a zero numerator
/// or zero denominator collapses the geometric mean to 0.
pub fn bleu_tokens(candidate: &[String], references: &[Vec<String>], max_n: usize) -> Result<f64> {
    if !(1..=4).contains(&max_n) {
        return Err(Error::InvalidInput(format!("max_n must be in 1..=4, got {max_n}")));
    }
    if references.is_empty() {
        return Err(Error::InvalidInput("BLEU needs at least one reference".into()));
    }
    if candidate.is_empty() {
        log::warn!("BLEU candidate is empty; scoring 0");
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        if candidate.len() < n {
            return Ok(0.0);
        }
        let total = candidate.len() - n + 1;
        let mut clipped = 0usize;
        let mut seen: Vec<&[String]> = Vec::new();
        for gram in candidate.windows(n) {
            if seen.contains(&gram) {
                continue;
            }
            seen.push(gram);
            let cand_count = ngram_count(candidate, gram);
            let ref_max = references.iter().map(|r| ngram_count(r, gram)).max().unwrap_or(0);
            clipped += cand_count.min(ref_max);
        }
        if clipped == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let precision = (log_sum / max_n as f64).exp();

    // Brevity penalty against the closest reference length (ties favor
    // the shorter reference).
    let c = candidate.len();
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("non-empty reference list");
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok((precision * bp).min(1.0))
}

pub fn bleu(candidate: &str, references: &[&str], max_n: usize) -> Result<f64> {
    let cand = tokenize(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    bleu_tokens(&cand, &refs, max_n)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut prev_diag = 0;
        for (j, y) in b.iter().enumerate() {
            let prev_row = row[j + 1];
            row[j + 1] = if x == y { prev_diag + 1 } else { row[j + 1].max(row[j]) };
            prev_diag = prev_row;
        }
    }
    row[b.len()]
}

/// ROUGE-L with configurable recall weighting:
/// `F = (1 + β²)·P·R / (R + β²·P)`.
pub fn rouge_l_weighted_tokens(candidate: &[String], reference: &[String], beta: f64) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l_tokens(candidate: &[String], reference: &[String]) -> f64 {
    rouge_l_weighted_tokens(candidate, reference, 1.0)
}

pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}

/// Minimum-chunk maximal exact alignment. Returns (matches, chunks).
///
/// Matches is the multiset-intersection size; among all injective
/// alignments of that size the search picks the fewest chunks, where a
/// chunk is a maximal run of candidate tokens mapped to consecutive
/// reference positions. Branch-and-bound with continuation-first ordering;
/// a node cap (never reached on caption-sized inputs) keeps the worst case
/// bounded, falling back to the best alignment found.
pub fn align_tokens(candidate: &[String], reference: &[String]) -> (usize, usize) {
    fn id_of<'a>(types: &mut Vec<&'a str>, tok: &'a str) -> usize {
        match types.iter().position(|t| *t == tok) {
            Some(i) => i,
            None => {
                types.push(tok);
                types.len() - 1
            }
        }
    }
    let mut types: Vec<&str> = Vec::new();
    let c_ids: Vec<usize> = candidate.iter().map(|t| id_of(&mut types, t)).collect();
    let r_ids: Vec<usize> = reference.iter().map(|t| id_of(&mut types, t)).collect();
    let n_types = types.len();

    let mut c_count = vec![0usize; n_types];
    let mut r_count = vec![0usize; n_types];
    for &t in &c_ids {
        c_count[t] += 1;
    }
    for &t in &r_ids {
        r_count[t] += 1;
    }
    let target: usize = (0..n_types).map(|t| c_count[t].min(r_count[t])).sum();
    if target == 0 {
        return (0, 0);
    }

    struct Search {
        c: Vec<usize>,
        r: Vec<usize>,
        target: usize,
        used: Vec<bool>,
        cand_left: Vec<usize>,
        ref_free: Vec<usize>,
        best: usize,
        nodes: usize,
    }

    const NODE_CAP: usize = 500_000;

    impl Search {
        fn run(&mut self, i: usize, matched: usize, chunks: usize, last: Option<usize>) {
            self.nodes += 1;
            if self.nodes > NODE_CAP || chunks >= self.best {
                return;
            }
            let feasible: usize =
                self.cand_left.iter().zip(&self.ref_free).map(|(&c, &r)| c.min(r)).sum();
            if matched + feasible < self.target {
                return;
            }
            if i == self.c.len() {
                if matched == self.target {
                    self.best = chunks;
                }
                return;
            }
            let t = self.c[i];
            // Continuing the current chunk first gives tight bounds early.
            if let Some(lr) = last {
                let j = lr + 1;
                if j < self.r.len() && !self.used[j] && self.r[j] == t {
                    self.step(i, j, matched, chunks, Some(lr));
                }
            }
            for j in 0..self.r.len() {
                if self.used[j] || self.r[j] != t {
                    continue;
                }
                if last == Some(j.wrapping_sub(1)) {
                    continue; // already tried as the continuation
                }
                self.step(i, j, matched, chunks + 1, last);
            }
            // Leave this occurrence unaligned. The gap breaks candidate
            // adjacency, so the current chunk cannot be continued.
            self.cand_left[t] -= 1;
            self.run(i + 1, matched, chunks, None);
            self.cand_left[t] += 1;
        }

        fn step(
            &mut self,
            i: usize,
            j: usize,
            matched: usize,
            chunks: usize,
            _last: Option<usize>,
        ) {
            let t = self.c[i];
            self.used[j] = true;
            self.cand_left[t] -= 1;
            self.ref_free[t] -= 1;
            self.run(i + 1, matched + 1, chunks, Some(j));
            self.used[j] = false;
            self.cand_left[t] += 1;
            self.ref_free[t] += 1;
        }
    }

    let mut search = Search {
        c: c_ids,
        r: r_ids,
        target,
        used: vec![false; reference.len()],
        cand_left: c_count,
        ref_free: r_count,
        best: target + 1,
        nodes: 0,
    };
    // Seed with one chunk per match so a capped search still returns a
    // valid (if pessimistic) chunk count.
    search.run(0, 0, 0, None);
    let chunks = if search.best > target { target } else { search.best };
    (target, chunks)
}

/// METEOR without synonym or stem matching (exact unigrams only):
/// `Fmean·(1 − 0.5·(chunks/matches)³)` with `Fmean = 10PR/(R + 9P)`.
pub fn meteor_lite_tokens(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let (matches, chunks) = align_tokens(candidate, reference);
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let p = m / candidate.len() as f64;
    let r = m / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    fmean * (1.0 - penalty)
}

pub fn meteor_lite(candidate: &str, reference: &str) -> f64 {
    meteor_lite_tokens(&tokenize(candidate), &tokenize(reference))
}

/// Token-sequence embedder; implementations must be deterministic.
pub trait Embedder: Send + Sync {
    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>>;
}

/// Character-trigram hashing embedder: each token becomes a bag of
/// trigrams of `^token$` hashed into a fixed number of buckets.
pub struct TrigramHashEmbedder {
    pub dims: usize,
}

impl Default for TrigramHashEmbedder {
    fn default() -> Self {
        Self { dims: 64 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

impl Embedder for TrigramHashEmbedder {
    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>> {
        if self.dims == 0 {
            return Err(Error::Metric("embedder has zero dimensions".into()));
        }
        Ok(tokens
            .iter()
            .map(|tok| {
                let padded: Vec<char> =
                    std::iter::once('^').chain(tok.chars()).chain(std::iter::once('$')).collect();
                let mut vec = vec![0.0; self.dims];
                for tri in padded.windows(3) {
                    let s: String = tri.iter().collect();
                    vec[(fnv1a(s.as_bytes()) % self.dims as u64) as usize] += 1.0;
                }
                vec
            })
            .collect())
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedy token-matching similarity F1. Cosines are clamped at 0 so the
/// score stays in [0, 1].
pub fn embed_similarity(candidate: &str, reference: &str, embedder: &dyn Embedder) -> Result<f64> {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if cand.is_empty() || refr.is_empty() {
        return Ok(0.0);
    }
    let ce = embedder.embed(&cand)?;
    let re = embedder.embed(&refr)?;
    if ce.len() != cand.len() || re.len() != refr.len() {
        return Err(Error::Metric("embedder returned a mismatched vector count".into()));
    }
    let best = |from: &[Vec<f64>], to: &[Vec<f64>]| -> f64 {
        from.iter()
            .map(|u| to.iter().map(|v| cosine(u, v).max(0.0)).fold(0.0, f64::max))
            .sum::<f64>()
            / from.len() as f64
    };
    let p = best(&ce, &re);
    let r = best(&re, &ce);
    if p + r == 0.0 {
        Ok(0.0)
    } else {
        Ok((2.0 * p * r / (p + r)).min(1.0))
    }
}

/// Per-pair and corpus-mean scores; the corpus value of each metric is the
/// arithmetic mean of its per-pair values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub index: usize,
    pub bleu: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub bert_like: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub bleu: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub bert_like: f64,
    pub pairs: Vec<PairScores>,
}

/// Scores prediction/reference pairs; the headline `bleu` uses max_n = 1
/// and `bleu4` uses max_n = 4.
pub fn score_corpus(
    predictions: &[String],
    references: &[String],
    embedder: &dyn Embedder,
) -> Result<ScoreReport> {
    if predictions.len() != references.len() {
        return Err(Error::validation(format!(
            "{} predictions vs {} references",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::validation("no pairs to score"));
    }
    let indices: Vec<usize> = (0..predictions.len()).collect();
    let pairs = par::map(&indices, |&i| -> Result<PairScores> {
        let pred = predictions[i].as_str();
        let refr = references[i].as_str();
        Ok(PairScores {
            index: i,
            bleu: bleu(pred, &[refr], 1)?,
            bleu4: bleu(pred, &[refr], 4)?,
            meteor: meteor_lite(pred, refr),
            rouge_l: rouge_l(pred, refr),
            bert_like: embed_similarity(pred, refr, embedder)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = pairs.len() as f64;
    let mean = |f: fn(&PairScores) -> f64| pairs.iter().map(f).sum::<f64>() / n;
    Ok(ScoreReport {
        bleu: mean(|p| p.bleu),
        bleu4: mean(|p| p.bleu4),
        meteor: mean(|p| p.meteor),
        rouge_l: mean(|p| p.rouge_l),
        bert_like: mean(|p| p.bert_like),
        pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchAnswer {
    #[serde(rename = "yes")]
    Yes,
    #[serde(rename = "no")]
    No,
    #[serde(rename = "n/a")]
    NotApplicable,
}

/// The six feature comparisons returned by the judge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeVerdict {
    pub key_match: MatchAnswer,
    pub instrument_match: MatchAnswer,
    pub genre_match: MatchAnswer,
    pub mood_match: MatchAnswer,
    pub vocal_presence_match: MatchAnswer,
    pub vocal_gender_match: MatchAnswer,
}

pub const JUDGE_FEATURES: [&str; 6] = [
    "key_match",
    "instrument_match",
    "genre_match",
    "mood_match",
    "vocal_presence_match",
    "vocal_gender_match",
];

impl JudgeVerdict {
    pub fn fields(&self) -> [(&'static str, MatchAnswer); 6] {
        [
            ("key_match", self.key_match),
            ("instrument_match", self.instrument_match),
            ("genre_match", self.genre_match),
            ("mood_match", self.mood_match),
            ("vocal_presence_match", self.vocal_presence_match),
            ("vocal_gender_match", self.vocal_gender_match),
        ]
    }
}

/// Judge prompt template head; byte-exact, including trailing spaces.
const JUDGE_HEAD: &str = "You are tasked with comparing two descriptions of a musical piece. \n\
Evaluate the following aspects:\n\
\n\
1. Key Match: Does the musical key specified in the prediction match that \n\
in the reference? If missing in reference, respond 'n/a'.\n\
2. Instrumentation Match: Do the instruments described in the prediction \n\
correspond to those in the reference? If missing in reference, respond 'n/a'.\n\
3. Genre Match: Does the genre implied by the description in the prediction \n\
match that in the reference? If missing in reference, respond 'n/a'.\n\
4. Mood/Theme Match: Does the mood or theme of the music in the prediction \n\
match that in the reference? If missing in reference, respond 'n/a'.\n\
5. Vocal Presence Match: Does the presence or absence of vocals in the \n\
prediction match that in the reference? \n\
6. Vocal Gender Match: If vocals are present, does the gender of the vocals \n\
(male or female) in the prediction match that in the reference? If missing \n\
in reference, respond 'n/a'\n\
\n\
Return your answer as a JSON object with the following keys:\n    \
'key_match', 'instrument_match', 'genre_match', \n    \
'mood_match', 'vocal_presence_match', 'vocal_gender_match'.\n\
\n\
Values should be 'yes', 'no', or 'n/a' if the attribute is not applicable.\n\
\n\
---\n\
Prediction:\n";

pub fn render_judge_prompt(prediction: &str, reference: &str) -> String {
    format!("{JUDGE_HEAD}{prediction}\n\nReference:\n{reference}")
}

/// First balanced JSON object in the text, tolerating surrounding prose.
fn extract_json_object(text: &str) -> Option<serde_json::Value> {
    let bytes: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != '{' {
            i += 1;
            continue;
        }
        let mut depth = 0usize;
        let mut in_string = false;
        let mut escaped = false;
        for (j, &ch) in bytes.iter().enumerate().skip(i) {
            if in_string {
                if escaped {
                    escaped = false;
                } else if ch == '\\' {
                    escaped = true;
                } else if ch == '"' {
                    in_string = false;
                }
                continue;
            }
            match ch {
                '"' => in_string = true,
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        let slice: String = bytes[i..=j].iter().collect();
                        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&slice) {
                            return Some(v);
                        }
                        break;
                    }
                }
                _ => {}
            }
        }
        i += 1;
    }
    None
}

fn parse_answer(raw: &str) -> Result<MatchAnswer> {
    match raw.trim().to_lowercase().as_str() {
        "yes" => Ok(MatchAnswer::Yes),
        "no" => Ok(MatchAnswer::No),
        "n/a" => Ok(MatchAnswer::NotApplicable),
        other => Err(Error::JudgeParse(format!("unrecognized answer '{other}'"))),
    }
}

/// Parses a judge completion: finds the JSON object, requires exactly the
/// six keys, and normalizes answer case.
pub fn parse_judge_response(text: &str) -> Result<JudgeVerdict> {
    let value = extract_json_object(text)
        .ok_or_else(|| Error::JudgeParse("no JSON object in judge response".into()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::JudgeParse("judge response is not an object".into()))?;
    let mut answers = BTreeMap::new();
    for key in JUDGE_FEATURES {
        let raw = obj
            .get(key)
            .ok_or_else(|| Error::JudgeParse(format!("missing key '{key}'")))?
            .as_str()
            .ok_or_else(|| Error::JudgeParse(format!("key '{key}' is not a string")))?;
        answers.insert(key, parse_answer(raw)?);
    }
    Ok(JudgeVerdict {
        key_match: answers["key_match"],
        instrument_match: answers["instrument_match"],
        genre_match: answers["genre_match"],
        mood_match: answers["mood_match"],
        vocal_presence_match: answers["vocal_presence_match"],
        vocal_gender_match: answers["vocal_gender_match"],
    })
}

/// One judged comparison through the shared chat-client abstraction.
pub fn judge_pair(
    prediction: &str,
    reference: &str,
    client: &dyn ChatClient,
) -> Result<JudgeVerdict> {
    if prediction.trim().is_empty() || reference.trim().is_empty() {
        return Err(Error::InvalidInput("judge_pair requires non-empty texts".into()));
    }
    let prompt = render_judge_prompt(prediction, reference);
    let response = client.complete(&prompt)?;
    parse_judge_response(&response)
}

/// Per feature: yes / (yes + no). Features with no valid pairs are omitted.
pub fn feature_accuracy(verdicts: &[JudgeVerdict]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for (idx, name) in JUDGE_FEATURES.iter().enumerate() {
        let mut yes = 0usize;
        let mut no = 0usize;
        for v in verdicts {
            match v.fields()[idx].1 {
                MatchAnswer::Yes => yes += 1,
                MatchAnswer::No => no += 1,
                MatchAnswer::NotApplicable => {}
            }
        }
        if yes + no > 0 {
            out.insert((*name).to_owned(), yes as f64 / (yes + no) as f64);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeReport {
    pub feature_accuracy: BTreeMap<String, f64>,
    pub judged_pairs: usize,
    pub parse_failures: usize,
}

/// Judges every pair, fanning out concurrently. Parse failures are
/// excluded from the accuracy denominators and counted; transport failures
/// that survive `attempts` retries abort the whole run.
pub fn judge_corpus(
    predictions: &[String],
    references: &[String],
    client: &dyn ChatClient,
    attempts: u32,
) -> Result<JudgeReport> {
    if predictions.len() != references.len() {
        return Err(Error::validation(format!(
            "{} predictions vs {} references",
            predictions.len(),
            references.len()
        )));
    }
    let indices: Vec<usize> = (0..predictions.len()).collect();
    let results = par::map(&indices, |&i| {
        let mut last = None;
        for _ in 0..attempts.max(1) {
            match judge_pair(&predictions[i], &references[i], client) {
                Ok(v) => return Ok(v),
                Err(Error::Chain(msg)) => last = Some(Error::Chain(msg)),
                Err(other) => return Err(other),
            }
        }
        Err(last.expect("at least one attempt ran"))
    });
    let mut verdicts = Vec::new();
    let mut parse_failures = 0usize;
    for result in results {
        match result {
            Ok(v) => verdicts.push(v),
            Err(Error::JudgeParse(msg)) => {
                log::warn!("judge pair excluded: {msg}");
                parse_failures += 1;
            }
            Err(other) => return Err(other),
        }
    }
    Ok(JudgeReport {
        feature_accuracy: feature_accuracy(&verdicts),
        judged_pairs: verdicts.len(),
        parse_failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chaining::StaticClient;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenize_lowercases_splits_and_keeps_numbers() {
        assert_eq!(toks("Hello, World! 10s"), ["hello", "world", "10s"]);
        assert_eq!(toks("tempo: 120 bpm"), ["tempo", "120", "bpm"]);
        assert_eq!(toks("don't-stop"), ["don", "t", "stop"]);
        assert!(toks("  ,. !").is_empty());
    }

    #[test]
    fn bleu_perfect_match_is_one() {
        assert_eq!(bleu("a calm piano piece", &["a calm piano piece"], 4).unwrap(), 1.0);
    }

    #[test]
    fn bleu_unigram_example_is_two_thirds() {
        let score = bleu("a b c", &["a b d"], 1).unwrap();
        assert!((score - 2.0 / 3.0).abs() < 1e-12, "{score}");
    }

    #[test]
    fn bleu_zero_fourgram_annihilates() {
        assert_eq!(bleu("a b c d e", &["e d c b a"], 4).unwrap(), 0.0);
    }

    #[test]
    fn bleu_clips_repeated_candidate_grams() {
        // "the the the" against "the cat": clipped unigram count is 1.
        let score = bleu("the the the", &["the cat"], 1).unwrap();
        assert!((score - 1.0 / 3.0).abs() < 1e-12, "{score}");
    }

    #[test]
    fn bleu_brevity_penalty_applies() {
        // Unigram precision 1 but candidate half the reference length.
        let score = bleu("a b", &["a b c d"], 1).unwrap();
        assert!((score - (1.0_f64 - 2.0).exp()).abs() < 1e-12, "{score}");
    }

    #[test]
    fn bleu_validates_inputs() {
        assert_eq!(bleu("", &["a"], 1).unwrap(), 0.0);
        assert!(bleu("a", &[], 1).is_err());
        assert!(bleu("a", &["a"], 0).is_err());
        assert!(bleu("a", &["a"], 5).is_err());
    }

    #[test]
    fn rouge_identical_is_one_disjoint_is_zero() {
        assert_eq!(rouge_l("x y z", "x y z"), 1.0);
        assert_eq!(rouge_l("a b", "c d"), 0.0);
        assert_eq!(rouge_l("", "a"), 0.0);
    }

    #[test]
    fn rouge_lcs_example_matches_hand_value() {
        // LCS("a b c d", "a c d") = 3; P = 3/4, R = 1, F1 = 6/7.
        let score = rouge_l("a b c d", "a c d");
        assert!((score - 6.0 / 7.0).abs() < 1e-12, "{score}");
    }

    #[test]
    fn rouge_beta_shifts_toward_recall() {
        let c = toks("a b c d e f g h");
        let r = toks("a b");
        // P = 2/8, R = 1: larger beta weights recall harder, raising F.
        let f1 = rouge_l_weighted_tokens(&c, &r, 1.0);
        let f2 = rouge_l_weighted_tokens(&c, &r, 2.0);
        assert!(f2 > f1, "{f2} <= {f1}");
    }

    #[test]
    fn meteor_identical_three_tokens_hits_formula_value() {
        let score = meteor_lite("calm piano piece", "calm piano piece");
        assert!((score - 0.9814814814814815).abs() < 1e-12, "{score}");
    }

    #[test]
    fn meteor_zero_overlap_is_zero() {
        assert_eq!(meteor_lite("a b c", "x y z"), 0.0);
    }

    #[test]
    fn meteor_reversal_scores_lower() {
        let same = meteor_lite("a b c", "a b c");
        let reversed = meteor_lite("c b a", "a b c");
        assert!(reversed < same, "{reversed} vs {same}");
        // Full reversal is three chunks: penalty 0.5 exactly.
        assert!((reversed - 0.5).abs() < 1e-12);
    }

    #[test]
    fn alignment_minimizes_chunks_over_duplicate_tokens() {
        // Greedy left-to-right gives 3 chunks here; the optimum is 2.
        let (m, chunks) = align_tokens(&toks("a b a"), &toks("a a b"));
        assert_eq!((m, chunks), (3, 2));
    }

    #[test]
    fn alignment_counts_multiset_matches() {
        let (m, chunks) = align_tokens(&toks("a a a"), &toks("a a"));
        assert_eq!(m, 2);
        assert_eq!(chunks, 1);
        assert_eq!(align_tokens(&toks("a b"), &toks("c d")), (0, 0));
    }

    #[test]
    fn unmatched_candidate_token_breaks_a_chunk() {
        // "a ? a" vs "a a": the matches sit on candidate positions 0 and
        // 2, which are not adjacent, so one chunk is impossible.
        assert_eq!(align_tokens(&toks("a b a"), &toks("a a")), (2, 2));
    }

    #[test]
    fn embed_similarity_is_one_on_identical_texts() {
        let e = TrigramHashEmbedder::default();
        let s = embed_similarity("warm analog synth pads", "warm analog synth pads", &e).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn embed_similarity_is_symmetric() {
        let e = TrigramHashEmbedder::default();
        let a = embed_similarity("slow sad violin", "fast happy drums", &e).unwrap();
        let b = embed_similarity("fast happy drums", "slow sad violin", &e).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn embed_similarity_separates_unrelated_strings() {
        let e = TrigramHashEmbedder::default();
        let s = embed_similarity("xylophone quartz glow", "mud runway kelp", &e).unwrap();
        assert!(s < 0.5, "{s}");
    }

    #[test]
    fn judge_prompt_is_byte_exact() {
        let p = render_judge_prompt("PRED", "REF");
        assert!(
            p.starts_with("You are tasked with comparing two descriptions of a musical piece. \n")
        );
        assert!(p.contains("prediction match that in the reference? \n6. Vocal Gender Match:"));
        assert!(p.contains("\n    'key_match', 'instrument_match', 'genre_match', \n"));
        assert!(p.contains("    'mood_match', 'vocal_presence_match', 'vocal_gender_match'.\n"));
        assert!(p.contains("\n---\nPrediction:\nPRED\n\nReference:\nREF"));
        assert!(p.ends_with("Reference:\nREF"));
        // Stability: rendering twice yields identical bytes.
        assert_eq!(p, render_judge_prompt("PRED", "REF"));
    }

    fn verdict_json(answer: &str) -> String {
        let fields: Vec<String> =
            JUDGE_FEATURES.iter().map(|k| format!("\"{k}\": \"{answer}\"")).collect();
        format!("{{{}}}", fields.join(", "))
    }

    #[test]
    fn judge_pair_parses_all_yes() {
        let client = StaticClient(verdict_json("yes"));
        let v = judge_pair("a piano piece", "piano music", &client).unwrap();
        assert!(v.fields().iter().all(|(_, a)| *a == MatchAnswer::Yes));
    }

    #[test]
    fn judge_pair_tolerates_wrapping_prose() {
        let wrapped = format!(
            "Sure! Here is my comparison {{in brief}}:\n{}\nHope this helps.",
            verdict_json("no")
        );
        let v = parse_judge_response(&wrapped).unwrap();
        assert_eq!(v.key_match, MatchAnswer::No);
    }

    #[test]
    fn judge_pair_normalizes_case() {
        let json = verdict_json("YES")
            .replace("\"vocal_gender_match\": \"YES\"", "\"vocal_gender_match\": \"N/A\"");
        let v = parse_judge_response(&json).unwrap();
        assert_eq!(v.key_match, MatchAnswer::Yes);
        assert_eq!(v.vocal_gender_match, MatchAnswer::NotApplicable);
    }

    #[test]
    fn judge_pair_rejects_missing_or_bad_keys() {
        let missing = verdict_json("yes").replace("\"mood_match\": \"yes\", ", "");
        assert!(matches!(parse_judge_response(&missing), Err(Error::JudgeParse(_))));
        let bad = verdict_json("maybe");
        assert!(matches!(parse_judge_response(&bad), Err(Error::JudgeParse(_))));
        assert!(matches!(parse_judge_response("no json here"), Err(Error::JudgeParse(_))));
    }

    #[test]
    fn judge_pair_requires_non_empty_texts() {
        let client = StaticClient(verdict_json("yes"));
        assert!(judge_pair(" ", "ref", &client).is_err());
    }

    fn verdict(vals: [MatchAnswer; 6]) -> JudgeVerdict {
        JudgeVerdict {
            key_match: vals[0],
            instrument_match: vals[1],
            genre_match: vals[2],
            mood_match: vals[3],
            vocal_presence_match: vals[4],
            vocal_gender_match: vals[5],
        }
    }

    #[test]
    fn feature_accuracy_is_yes_over_yes_plus_no() {
        use MatchAnswer::{No, NotApplicable as Na, Yes};
        let verdicts = vec![
            verdict([Yes, Yes, Na, Yes, Yes, Na]),
            verdict([Yes, No, Na, Yes, Yes, Na]),
            verdict([No, Yes, Na, Yes, Yes, Na]),
            verdict([Na, No, Na, Yes, Yes, Na]),
        ];
        let acc = feature_accuracy(&verdicts);
        assert_eq!(acc["key_match"], 2.0 / 3.0);
        assert_eq!(acc["instrument_match"], 0.5);
        assert!(!acc.contains_key("genre_match"), "all-n/a column must be omitted");
        assert_eq!(acc["mood_match"], 1.0);
    }

    #[test]
    fn feature_accuracy_ignores_na_rows_exactly() {
        use MatchAnswer::{No, NotApplicable as Na, Yes};
        let base = vec![verdict([Yes, No, Yes, No, Yes, No])];
        let with_na: Vec<JudgeVerdict> =
            base.iter().copied().chain([verdict([Na; 6]), verdict([Na; 6])]).collect();
        assert_eq!(feature_accuracy(&base), feature_accuracy(&with_na));
    }

    #[test]
    fn judge_corpus_counts_parse_failures() {
        let preds = vec!["piano".to_owned(), "drums".to_owned()];
        let refs = vec!["piano".to_owned(), "drums".to_owned()];
        let client = StaticClient("not json at all".into());
        let report = judge_corpus(&preds, &refs, &client, 1).unwrap();
        assert_eq!(report.parse_failures, 2);
        assert_eq!(report.judged_pairs, 0);
        assert!(report.feature_accuracy.is_empty());
    }

    #[test]
    fn score_corpus_on_identical_files() {
        let texts = vec!["a calm piano piece".to_owned(), "loud energetic drums".to_owned()];
        let report = score_corpus(&texts, &texts, &TrigramHashEmbedder::default()).unwrap();
        assert_eq!(report.bleu, 1.0);
        assert_eq!(report.rouge_l, 1.0);
        assert!((report.bert_like - 1.0).abs() < 1e-12);
        assert!(report.meteor > 0.97);
        assert_eq!(report.pairs.len(), 2);
    }

    #[test]
    fn score_corpus_rejects_mismatched_lengths() {
        let a = vec!["x".to_owned()];
        let b = vec!["x".to_owned(), "y".to_owned()];
        assert!(matches!(
            score_corpus(&a, &b, &TrigramHashEmbedder::default()),
            Err(Error::Validation { .. })
        ));
    }

    proptest! {
        #[test]
        fn all_metrics_stay_in_unit_interval(
            c in proptest::collection::vec(0usize..4, 0..7),
            r in proptest::collection::vec(0usize..4, 1..7),
        ) {
            let words = ["a", "b", "c", "d"];
            let cand: Vec<String> = c.iter().map(|&i| words[i].to_owned()).collect();
            let refr: Vec<String> = r.iter().map(|&i| words[i].to_owned()).collect();
            let cs = cand.join(" ");
            let rs = refr.join(" ");
            for n in 1..=2 {
                let b = bleu(&cs, &[rs.as_str()], n).unwrap();
                prop_assert!((0.0..=1.0).contains(&b));
            }
            let rl = rouge_l(&cs, &rs);
            prop_assert!((0.0..=1.0).contains(&rl));
            let m = meteor_lite(&cs, &rs);
            prop_assert!((0.0..=1.0).contains(&m));
            let e = embed_similarity(&cs, &rs, &TrigramHashEmbedder::default()).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
        }
    }
}
