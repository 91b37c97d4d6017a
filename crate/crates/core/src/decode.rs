//! Language-aware, language-agnostic and task-wise decoding.
//!
//! Decoding is written against [`PathScorer`], which hides where the
//! next-token distributions come from. [`ModelScorer`] drives a real model;
//! tests and examples can plug in constructed scorers.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CrossKv, DecoderState, Model};
use crate::numcore::{Matrix, Real};
use crate::surgery::EmbeddingView;
use crate::vocab::{TokenId, Vocabulary, EOT, SOT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Inner beam width per language; 1 is greedy.
    pub beam_width: usize,
    /// Languages kept after LID.
    pub top_n: usize,
    /// Minimum words per path before the guard disables task-wise selection.
    pub min_words: usize,
    /// Maximum words two paths may share before the guard fires.
    pub max_overlap: usize,
    /// LID probabilities from a softmax over LID logits only.
    pub lid_renormalize: bool,
    /// Add the LID token's log-probability to the ASR score.
    pub include_lid_in_score: bool,
    pub guards: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: 1,
            top_n: 2,
            min_words: 5,
            max_overlap: 3,
            lid_renormalize: true,
            include_lid_in_score: false,
            guards: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_n == 0 {
            return Err(Error::Config("decode top_n must be at least 1".into()));
        }
        if self.beam_width == 0 {
            return Err(Error::Config("decode beam_width must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingPath {
    pub language: String,
    pub lid_token: TokenId,
    pub lid_score: f64,
    /// Generated tokens after the LID token, ending with EOT.
    pub tokens: Vec<TokenId>,
    /// Log-probability of each entry of `tokens`.
    pub token_logprobs: Vec<f64>,
    pub asr_score: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub chosen: DecodingPath,
    /// In LID rank order.
    pub candidates: Vec<DecodingPath>,
    pub guard_triggered: bool,
    /// The guard changed the selection away from the best ASR score.
    pub fallback_used: bool,
    pub lid_scores: Vec<(String, f64)>,
}

/// Source of next-token distributions for one utterance.
pub trait PathScorer {
    type State: Clone;

    /// Registered languages in registry order.
    fn languages(&self) -> &[String];
    fn lid_token(&self, language: &str) -> Result<TokenId>;
    /// Probability per registered language after `[SOT]`, aligned with
    /// [`Self::languages`].
    fn lid_probs(&self, renormalize: bool) -> Vec<f64>;
    /// Log-probability of the language's LID token under the full softmax.
    fn lid_logprob(&self, language: &str) -> Result<f64>;
    /// State after `[SOT, LID(language)]`.
    fn begin(&self, language: &str) -> Result<Self::State>;
    /// `(token, log-probability)` for every token that may come next; always
    /// includes EOT.
    fn next(&self, state: &Self::State) -> Result<Vec<(TokenId, f64)>>;
    fn advance(&self, state: &Self::State, token: TokenId) -> Result<Self::State>;
    fn text(&self, tokens: &[TokenId]) -> Result<String>;
    /// Cap on the full sequence length including SOT, LID and EOT.
    fn max_len(&self) -> usize;
}

pub fn count_words(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Size of the multiset intersection of the two texts' words.
pub fn overlap_words(a: &str, b: &str) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in a.split_whitespace() {
        *counts.entry(w).or_default() += 1;
    }
    let mut shared = 0;
    for w in b.split_whitespace() {
        if let Some(c) = counts.get_mut(w) {
            if *c > 0 {
                *c -= 1;
                shared += 1;
            }
        }
    }
    shared
}

pub fn lid_scores<S: PathScorer>(scorer: &S, renormalize: bool) -> Vec<(String, f64)> {
    scorer
        .languages()
        .iter()
        .cloned()
        .zip(scorer.lid_probs(renormalize))
        .collect()
}

/// Languages by descending LID probability; ties keep registry order.
fn ranked(scores: &[(String, f64)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].1.total_cmp(&scores[a].1).then(a.cmp(&b)));
    idx
}

#[derive(Clone)]
struct Hyp<St> {
    state: Option<St>,
    tokens: Vec<TokenId>,
    logprobs: Vec<f64>,
    score: f64,
}

fn better<St>(a: &Hyp<St>, b: &Hyp<St>) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search in one language. Width 1 is a greedy argmax rollout. Ties
/// break towards the lexicographically smaller token sequence.
pub fn decode_language_aware<S: PathScorer>(scorer: &S, language: &str, cfg: &DecodeConfig) -> Result<DecodingPath> {
    let langs = scorer.languages();
    let li = langs
        .iter()
        .position(|l| l == language)
        .ok_or_else(|| Error::UnknownLanguage(language.to_string()))?;
    let lid_score = scorer.lid_probs(cfg.lid_renormalize)[li];
    let width = cfg.beam_width.max(1);
    // SOT and LID are already in the prefix; EOT must fit under the cap.
    let max_generated = scorer.max_len().saturating_sub(2).max(1);

    let mut active = vec![Hyp {
        state: Some(scorer.begin(language)?),
        tokens: Vec::new(),
        logprobs: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Hyp<S::State>> = Vec::new();
    while !active.is_empty() {
        let mut pool = Vec::new();
        for h in &active {
            let state = h.state.as_ref().expect("active hypotheses carry state");
            let dist = scorer.next(state)?;
            let forced = h.tokens.len() + 1 >= max_generated;
            for &(tok, lp) in &dist {
                if forced && tok != EOT {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                let mut logprobs = h.logprobs.clone();
                logprobs.push(lp);
                pool.push((h, tok, Hyp::<S::State> {
                    state: None,
                    tokens,
                    logprobs,
                    score: h.score + lp,
                }));
            }
        }
        pool.sort_by(|a, b| better(&a.2, &b.2));
        pool.truncate(width);
        let mut next_active = Vec::new();
        for (parent, tok, mut hyp) in pool {
            if tok == EOT {
                finished.push(hyp);
            } else {
                let st = parent.state.as_ref().expect("parent state");
                hyp.state = Some(scorer.advance(st, tok)?);
                next_active.push(hyp);
            }
        }
        active = next_active;
        finished.sort_by(better);
        finished.truncate(width);
        if let (Some(best), Some(top)) = (finished.first(), active.first()) {
            // Scores only decrease, so no active hypothesis can overtake.
            if best.score >= top.score {
                break;
            }
        }
    }
    let best = finished.into_iter().next().ok_or_else(|| Error::Invariant("beam search produced no hypothesis".into()))?;
    let mut asr_score: f64 = best.logprobs.iter().sum();
    if cfg.include_lid_in_score {
        asr_score += scorer.lid_logprob(language)?;
    }
    Ok(DecodingPath {
        language: language.to_string(),
        lid_token: scorer.lid_token(language)?,
        lid_score,
        text: scorer.text(&best.tokens)?,
        tokens: best.tokens,
        token_logprobs: best.logprobs,
        asr_score,
    })
}

/// Standard decoding: pick the most likely language, then transcribe in it.
pub fn decode_language_agnostic<S: PathScorer>(scorer: &S, cfg: &DecodeConfig) -> Result<DecodeResult> {
    let scores = lid_scores(scorer, cfg.lid_renormalize);
    let top = *ranked(&scores).first().ok_or_else(|| Error::InvalidArgument("no registered languages".into()))?;
    let path = decode_language_aware(scorer, &scores[top].0, cfg)?;
    Ok(DecodeResult {
        chosen: path.clone(),
        candidates: vec![path],
        guard_triggered: false,
        fallback_used: false,
        lid_scores: scores,
    })
}

/// True when any path is too short or any pair shares too many words.
pub fn guard_fires(paths: &[DecodingPath], min_words: usize, max_overlap: usize) -> bool {
    if paths.iter().any(|p| count_words(&p.text) < min_words) {
        return true;
    }
    paths.iter().enumerate().any(|(i, a)| {
        paths[i + 1..]
            .iter()
            .any(|b| overlap_words(&a.text, &b.text) > max_overlap)
    })
}

/// Index of the highest ASR score; ties go to the earlier registry language.
fn best_asr(paths: &[DecodingPath], registry: &[String]) -> usize {
    let pos = |p: &DecodingPath| registry.iter().position(|l| *l == p.language).unwrap_or(usize::MAX);
    (0..paths.len())
        .min_by(|&a, &b| {
            paths[b]
                .asr_score
                .total_cmp(&paths[a].asr_score)
                .then(pos(&paths[a]).cmp(&pos(&paths[b])))
        })
        .expect("at least one path")
}

/// Decodes in the top-N LID languages and keeps the best-scoring
/// transcription, unless the stability guard falls back to the top-1 LID path.
pub fn task_wise_beam_search<S: PathScorer>(scorer: &S, cfg: &DecodeConfig) -> Result<DecodeResult> {
    cfg.validate()?;
    let scores = lid_scores(scorer, cfg.lid_renormalize);
    let order = ranked(&scores);
    if order.is_empty() {
        return Err(Error::InvalidArgument("no registered languages".into()));
    }
    let candidates = order
        .iter()
        .take(cfg.top_n)
        .map(|&i| decode_language_aware(scorer, &scores[i].0, cfg))
        .collect::<Result<Vec<_>>>()?;
    let best = best_asr(&candidates, scorer.languages());
    let guard_triggered = cfg.guards && guard_fires(&candidates, cfg.min_words, cfg.max_overlap);
    let pick = if guard_triggered { 0 } else { best };
    Ok(DecodeResult {
        chosen: candidates[pick].clone(),
        fallback_used: guard_triggered && pick != best,
        guard_triggered,
        candidates,
        lid_scores: scores,
    })
}

// ---------------------------------------------------------------------------
// Model-backed scorer
// ---------------------------------------------------------------------------

/// Per-model decoding context: every language's view, materialized once.
pub struct ModelDecoder<'m, T: Real> {
    model: &'m Model<T>,
    languages: Vec<String>,
    views: Vec<(EmbeddingView, Matrix<T>)>,
    base: (EmbeddingView, Matrix<T>),
}

impl<'m, T: Real> ModelDecoder<'m, T> {
    pub fn new(model: &'m Model<T>) -> Result<Self> {
        let languages = model.vocab.languages();
        let views = languages
            .iter()
            .map(|l| {
                let v = model.view(l)?;
                let w = v.materialize(&model.params);
                Ok((v, w))
            })
            .collect::<Result<_>>()?;
        let base = model.base_view();
        let w = base.materialize(&model.params);
        Ok(Self {
            model,
            languages,
            views,
            base: (base, w),
        })
    }

    pub fn model(&self) -> &Model<T> {
        self.model
    }

    pub fn scorer(&self, memory: &Matrix<T>) -> Result<ModelScorer<'_, 'm, T>> {
        self.scorer_with_lid_view(memory, None)
    }

    /// Like [`Self::scorer`], taking LID logits under `lid_view`'s language
    /// view instead of the base view.
    pub fn scorer_with_lid_view(&self, memory: &Matrix<T>, lid_view: Option<&str>) -> Result<ModelScorer<'_, 'm, T>> {
        let kv = self.model.cross_kv(memory)?;
        let (view, wview) = match lid_view {
            Some(l) => {
                let i = self.index(l)?;
                (&self.views[i].0, &self.views[i].1)
            }
            None => (&self.base.0, &self.base.1),
        };
        let mut sot_state = self.model.start_state();
        let logits = self.model.step(&kv, &mut sot_state, view.local(SOT)?, wview)?;
        let logits: Vec<f64> = logits.iter().map(|v| v.f64()).collect();
        let lid_logits: Vec<f64> = self
            .languages
            .iter()
            .map(|l| Ok(logits[view.local(self.model.vocab.lid(l)?)?]))
            .collect::<Result<_>>()?;
        let full_lse = log_sum_exp(&logits);
        Ok(ModelScorer {
            dec: self,
            kv,
            sot_state,
            lid_logits,
            full_lse,
        })
    }

    fn index(&self, language: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|l| l == language)
            .ok_or_else(|| Error::UnknownLanguage(language.to_string()))
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Clone)]
pub struct ModelState<T: Real> {
    view: usize,
    dec: DecoderState<T>,
    logits: Vec<T>,
}

pub struct ModelScorer<'d, 'm, T: Real> {
    dec: &'d ModelDecoder<'m, T>,
    kv: CrossKv<T>,
    sot_state: DecoderState<T>,
    lid_logits: Vec<f64>,
    full_lse: f64,
}

impl<T: Real> ModelScorer<'_, '_, T> {
    fn vocab(&self) -> &Vocabulary {
        &self.dec.model.vocab
    }
}

impl<T: Real> PathScorer for ModelScorer<'_, '_, T> {
    type State = ModelState<T>;

    fn languages(&self) -> &[String] {
        &self.dec.languages
    }

    fn lid_token(&self, language: &str) -> Result<TokenId> {
        self.vocab().lid(language)
    }

    fn lid_probs(&self, renormalize: bool) -> Vec<f64> {
        let norm = if renormalize {
            log_sum_exp(&self.lid_logits)
        } else {
            self.full_lse
        };
        self.lid_logits.iter().map(|l| (l - norm).exp()).collect()
    }

    fn lid_logprob(&self, language: &str) -> Result<f64> {
        Ok(self.lid_logits[self.dec.index(language)?] - self.full_lse)
    }

    fn begin(&self, language: &str) -> Result<Self::State> {
        let i = self.dec.index(language)?;
        let (view, wview) = &self.dec.views[i];
        let mut dec = self.sot_state.clone();
        let lid = view.local(self.vocab().lid(language)?)?;
        let logits = self.dec.model.step(&self.kv, &mut dec, lid, wview)?;
        Ok(ModelState { view: i, dec, logits })
    }

    fn next(&self, state: &Self::State) -> Result<Vec<(TokenId, f64)>> {
        let view = &self.dec.views[state.view].0;
        let logits: Vec<f64> = state.logits.iter().map(|v| v.f64()).collect();
        let lse = log_sum_exp(&logits);
        let mut out: Vec<(TokenId, f64)> = Vec::with_capacity(view.vocab_len() + 1);
        out.push((EOT, logits[view.local(EOT)?] - lse));
        let s = view.num_specials();
        for (j, id) in view.vocab_ids().enumerate() {
            out.push((id, logits[s + j] - lse));
        }
        Ok(out)
    }

    fn advance(&self, state: &Self::State, token: TokenId) -> Result<Self::State> {
        let (view, wview) = &self.dec.views[state.view];
        let mut dec = state.dec.clone();
        let logits = self.dec.model.step(&self.kv, &mut dec, view.local(token)?, wview)?;
        Ok(ModelState {
            view: state.view,
            dec,
            logits,
        })
    }

    fn text(&self, tokens: &[TokenId]) -> Result<String> {
        self.vocab().detokenize(tokens)
    }

    fn max_len(&self) -> usize {
        self.dec.model.config.max_decode_len
    }
}

/// Scorer over explicit tables, for tests and worked examples.
///
/// Each language has a fixed LID logit and a function from the generated
/// prefix to next-token log-probabilities.
pub struct TableScorer {
    pub languages: Vec<String>,
    pub lid_logits: Vec<f64>,
    pub words: Vec<String>,
    pub max_len: usize,
    #[allow(clippy::type_complexity)]
    pub next: Box<dyn Fn(usize, &[TokenId]) -> Vec<(TokenId, f64)>>,
}

impl TableScorer {
    /// Token id of word `i` (ids start after SOT/EOT).
    pub fn word_id(i: usize) -> TokenId {
        i + 2
    }

    /// Language `l` emits `scripts[l]` followed by EOT. Step `k` gives the
    /// scripted token log-probability `step_logprobs[l][k]` and every other
    /// token `-1e9`.
    pub fn scripted(
        languages: &[&str],
        lid_probs: &[f64],
        words: &[&str],
        scripts: Vec<Vec<usize>>,
        step_logprobs: Vec<Vec<f64>>,
    ) -> Self {
        let n_words = words.len();
        Self {
            languages: languages.iter().map(|s| s.to_string()).collect(),
            lid_logits: lid_probs.iter().map(|p| p.ln()).collect(),
            words: words.iter().map(|s| s.to_string()).collect(),
            max_len: 64,
            next: Box::new(move |lang, prefix| {
                let k = prefix.len();
                let script = &scripts[lang];
                let lp = step_logprobs[lang][k];
                let target = if k < script.len() { Self::word_id(script[k]) } else { EOT };
                let mut out = vec![(EOT, if target == EOT { lp } else { -1e9 })];
                for w in 0..n_words {
                    let id = Self::word_id(w);
                    out.push((id, if id == target { lp } else { -1e9 }));
                }
                out
            }),
        }
    }
}

impl PathScorer for TableScorer {
    type State = (usize, Vec<TokenId>);

    fn languages(&self) -> &[String] {
        &self.languages
    }

    fn lid_token(&self, language: &str) -> Result<TokenId> {
        let i = self
            .languages
            .iter()
            .position(|l| l == language)
            .ok_or_else(|| Error::UnknownLanguage(language.to_string()))?;
        Ok(1_000_000 + i)
    }

    fn lid_probs(&self, renormalize: bool) -> Vec<f64> {
        let norm = if renormalize { log_sum_exp(&self.lid_logits) } else { 0.0 };
        self.lid_logits.iter().map(|l| (l - norm).exp()).collect()
    }

    fn lid_logprob(&self, language: &str) -> Result<f64> {
        let i = self
            .languages
            .iter()
            .position(|l| l == language)
            .ok_or_else(|| Error::UnknownLanguage(language.to_string()))?;
        Ok(self.lid_logits[i] - log_sum_exp(&self.lid_logits))
    }

    fn begin(&self, language: &str) -> Result<Self::State> {
        let i = self
            .languages
            .iter()
            .position(|l| l == language)
            .ok_or_else(|| Error::UnknownLanguage(language.to_string()))?;
        Ok((i, Vec::new()))
    }

    fn next(&self, state: &Self::State) -> Result<Vec<(TokenId, f64)>> {
        Ok((self.next)(state.0, &state.1))
    }

    fn advance(&self, state: &Self::State, token: TokenId) -> Result<Self::State> {
        let mut p = state.1.clone();
        p.push(token);
        Ok((state.0, p))
    }

    fn text(&self, tokens: &[TokenId]) -> Result<String> {
        Ok(tokens
            .iter()
            .filter(|&&t| t >= 2)
            .map(|&t| self.words[t - 2].as_str())
            .collect::<Vec<_>>()
            .join(" "))
    }

    fn max_len(&self) -> usize {
        self.max_len
    }
}

#[cfg(test)]
mod tests;
