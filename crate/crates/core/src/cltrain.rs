//! Pretraining and continual adaptation: FT, ER, AVG, ER-E and ER-E-part,
//! replay buffering, plateau scheduling and the sequential protocol.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::decode::{decode_language_aware, DecodeConfig, ModelDecoder};
use crate::error::{Error, Result};
use crate::eval::{corpus_wer, CorpusWer};
use crate::model::{Checkpoint, LossTape, Model, Source};
use crate::numcore::{AdamW, AdamWConfig, Grads, Matrix, NewBob, NewBobConfig};
use crate::rng::{substream, Rng};
use crate::surgery::{partial_freeze_mask, EmbeddingView, BASE_NAME, ST_NAME};
use crate::vocab::{TokenSeq, Vocabulary, EOT, SOT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "ft")]
    Ft,
    #[serde(rename = "er")]
    Er,
    #[serde(rename = "avg")]
    Avg,
    #[serde(rename = "er-e")]
    ErE,
    #[serde(rename = "er-e-part")]
    ErEPart,
    /// ER-E weights decoded with task-wise beam search.
    #[serde(rename = "er-e-b")]
    ErEB,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Ft,
        Strategy::Er,
        Strategy::Avg,
        Strategy::ErE,
        Strategy::ErEPart,
        Strategy::ErEB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ft => "ft",
            Strategy::Er => "er",
            Strategy::Avg => "avg",
            Strategy::ErE => "er-e",
            Strategy::ErEPart => "er-e-part",
            Strategy::ErEB => "er-e-b",
        }
    }

    pub fn uses_replay(self) -> bool {
        !matches!(self, Strategy::Ft | Strategy::Avg)
    }

    pub fn uses_surgery(self) -> bool {
        matches!(self, Strategy::ErE | Strategy::ErEB)
    }

    pub fn task_wise_decoding(self) -> bool {
        self == Strategy::ErEB
    }

    /// Strategy whose weights this one decodes with.
    pub fn training_strategy(self) -> Strategy {
        match self {
            Strategy::ErEB => Strategy::ErE,
            s => s,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Passes over the new-language training data.
    pub epochs: f64,
    pub batch_size: usize,
    /// Validation interval as a fraction of an epoch.
    pub val_interval: f64,
    /// Dev utterances used per validation.
    pub val_utterances: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub newbob: NewBobConfig,
    /// Total replay weight, split evenly across replayed languages.
    pub beta: f64,
    /// Share of each language's train split kept for replay.
    pub replay_fraction: f64,
    pub freeze_st: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2.0,
            batch_size: 4,
            val_interval: 1.0 / 32.0,
            val_utterances: 50,
            lr: 1e-3,
            weight_decay: 0.01,
            newbob: NewBobConfig::default(),
            beta: 0.1,
            replay_fraction: 0.1,
            freeze_st: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.epochs > 0.0) || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.val_interval > 0.0) || self.val_utterances == 0 {
            return bad("validation interval and size must be positive");
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative");
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad("beta must be a finite non-negative number");
        }
        if !(self.replay_fraction > 0.0 && self.replay_fraction <= 1.0) {
            return bad("replay_fraction must be in (0, 1]");
        }
        if !(self.newbob.anneal_factor > 0.0 && self.newbob.anneal_factor < 1.0) {
            return bad("newbob anneal factor must be in (0, 1)");
        }
        Ok(())
    }
}

/// One training or evaluation utterance. `input` holds encoder memory when
/// the encoder is frozen, raw features otherwise.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub language: String,
    pub transcript: TokenSeq,
    pub input: Rc<Matrix<f32>>,
}

impl Example {
    /// `[SOT, LID, transcript…, EOT]`.
    pub fn target(&self, vocab: &Vocabulary) -> Result<TokenSeq> {
        let mut t = Vec::with_capacity(self.transcript.len() + 3);
        t.push(SOT);
        t.push(vocab.lid(&self.language)?);
        t.extend_from_slice(&self.transcript);
        t.push(EOT);
        Ok(t)
    }
}

/// Fixed per-language replay subsets plus the mixing weight.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    pub beta: f64,
    entries: Vec<(String, Vec<Example>)>,
}

impl ReplayBuffer {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::Config(format!("invalid replay weight {beta}")));
        }
        Ok(Self {
            beta,
            entries: Vec::new(),
        })
    }

    /// Draws `round(fraction · |train|)` (at least one) utterances without
    /// replacement.
    pub fn add_language(&mut self, language: &str, train: &[Example], fraction: f64, seed: u64) -> Result<()> {
        if train.is_empty() {
            return Err(Error::EmptyCorpus(format!("no replay data for `{language}`")));
        }
        if self.entries.iter().any(|e| e.0 == language) {
            return Err(Error::LanguageExists(language.to_string()));
        }
        let n = ((fraction * train.len() as f64).round() as usize).clamp(1, train.len());
        let mut rng = substream(seed, &format!("replay:{language}"));
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut rng);
        let mut chosen: Vec<usize> = idx[..n].to_vec();
        chosen.sort_unstable();
        self.entries
            .push((language.to_string(), chosen.into_iter().map(|i| train[i].clone()).collect()));
        Ok(())
    }

    pub fn languages(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.0.clone()).collect()
    }

    pub fn examples(&self, language: &str) -> Option<&[Example]> {
        self.entries.iter().find(|e| e.0 == language).map(|e| e.1.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.iter().map(|e| e.1.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchKind {
    New,
    /// Index into the replay buffer's languages.
    Replay(usize),
}

/// Chooses the source of each batch: replay with probability `β/(1+β)`,
/// spread uniformly over replay languages, so replay batches outnumber new
/// ones by a factor of β in expectation.
pub struct BatchSampler {
    rng: Rng,
    p_replay: f64,
    replay_languages: usize,
}

impl BatchSampler {
    pub fn new(beta: f64, replay_languages: usize, rng: Rng) -> Self {
        Self {
            rng,
            p_replay: beta / (1.0 + beta),
            replay_languages,
        }
    }

    pub fn next_kind(&mut self) -> BatchKind {
        let u: f64 = self.rng.gen();
        if self.replay_languages > 0 && u < self.p_replay {
            BatchKind::Replay(self.rng.gen_range(0..self.replay_languages))
        } else {
            BatchKind::New
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub phase: usize,
    pub language: String,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_loss: Option<f64>,
}

pub fn log_to_jsonl(records: &[LogRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Mean teacher-forced loss over `examples`.
pub fn mean_loss(model: &Model<f32>, examples: &[&Example], view: &EmbeddingView, features: bool) -> Result<f64> {
    let mut tape = LossTape::new();
    let mut total = 0.0;
    for ex in examples {
        let target = ex.target(&model.vocab)?;
        let src = if features {
            Source::Features(&ex.input)
        } else {
            Source::Memory(&ex.input)
        };
        total += tape.forward(model, src, &target, view)? as f64;
    }
    Ok(total / examples.len().max(1) as f64)
}

/// One optimizer step on the batch-mean loss. `features` says whether the
/// inputs still need encoding.
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut AdamW<f32>,
    batch: &[&Example],
    view: &EmbeddingView,
    features: bool,
    step: usize,
) -> Result<f64> {
    let mut grads = Grads::for_store(&model.params);
    let mut tape = LossTape::new();
    let mut total = 0.0;
    for ex in batch {
        let target = ex.target(&model.vocab)?;
        let src = if features {
            Source::Features(&ex.input)
        } else {
            Source::Memory(&ex.input)
        };
        let loss = tape.forward(model, src, &target, view)? as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        total += loss;
        tape.backward(model, &mut grads)?;
    }
    grads.scale(1.0 / batch.len() as f32);
    model.params.load_grads(&grads);
    opt.step(&mut model.params)?;
    Ok(total / batch.len() as f64)
}

/// Best-validation bookkeeping shared by pretraining and adaptation.
struct Selector {
    best: Option<(f64, usize, Vec<Matrix<f32>>)>,
    scheduler: NewBob,
}

impl Selector {
    fn new(cfg: &TrainConfig) -> Self {
        Self {
            best: None,
            scheduler: NewBob::new(cfg.lr, cfg.newbob),
        }
    }

    /// Records a validation point; returns the learning rate to use next.
    fn record(&mut self, model: &Model<f32>, val: f64, step: usize) -> f64 {
        if self.best.as_ref().map_or(true, |b| val < b.0) {
            self.best = Some((val, step, model.params.values()));
        }
        self.scheduler.update(val)
    }

    fn restore(self, model: &mut Model<f32>) -> (f64, usize) {
        match self.best {
            Some((v, s, values)) => {
                model.params.restore_values(&values);
                (v, s)
            }
            None => (f64::NAN, 0),
        }
    }
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    /// Maximum test WER (fraction) every old language must reach.
    pub gate_wer: f64,
    /// Test utterances per language decoded for the gate.
    pub gate_utterances: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 8.0,
                val_interval: 0.5,
                lr: 2e-3,
                newbob: NewBobConfig {
                    patience: 1,
                    ..Default::default()
                },
                ..Default::default()
            },
            gate_wer: 0.15,
            gate_utterances: 100,
        }
    }
}

/// Data for one language; inputs are features for pretraining and memory
/// for adaptation.
#[derive(Debug, Clone, Copy)]
pub struct LanguageData<'a> {
    pub language: &'a str,
    pub train: &'a [Example],
    pub dev: &'a [Example],
    pub test: &'a [Example],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub log: Vec<LogRecord>,
    pub best_val_loss: f64,
    pub gate: Vec<(String, f64)>,
    pub encoder_hash: String,
    pub base_hash: String,
}

/// Greedy language-aware WER of `examples`; `features` says whether inputs
/// still need encoding.
pub fn language_aware_wer(model: &Model<f32>, language: &str, examples: &[Example], features: bool) -> Result<CorpusWer> {
    let dec = ModelDecoder::new(model)?;
    let cfg = DecodeConfig::default();
    let mut pairs = Vec::with_capacity(examples.len());
    for ex in examples {
        let memory = if features { model.encode(&ex.input)? } else { (*ex.input).clone() };
        let path = decode_language_aware(&dec.scorer(&memory)?, language, &cfg)?;
        pairs.push((model.vocab.detokenize(&ex.transcript)?, path.text));
    }
    Ok(corpus_wer(pairs.iter().map(|(r, h)| (r.as_str(), h.as_str()))))
}

/// Trains every parameter on the old languages (base view) and checks the
/// learnability gate on their test splits.
pub fn pretrain(model: &mut Model<f32>, languages: &[LanguageData<'_>], cfg: &PretrainConfig, seed: u64) -> Result<PretrainOutcome> {
    cfg.train.validate()?;
    if languages.len() < 2 {
        return Err(Error::Config("pretraining needs at least two languages".into()));
    }
    for l in languages {
        if !model.vocab.has_language(l.language) {
            return Err(Error::UnknownLanguage(l.language.to_string()));
        }
        if l.train.is_empty() || l.dev.is_empty() {
            return Err(Error::EmptyCorpus(l.language.to_string()));
        }
    }
    for p in model.params.iter_mut() {
        p.trainable = true;
        p.freeze_mask = None;
    }
    let tc = &cfg.train;
    let view = model.base_view();
    let mut rng = substream(seed, "pretrain-batches");
    let mut opt = AdamW::new(AdamWConfig {
        lr: tc.lr,
        weight_decay: tc.weight_decay,
        ..Default::default()
    });
    let batches_per_epoch: usize = languages.iter().map(|l| l.train.len().div_ceil(tc.batch_size)).sum();
    let total = ((tc.epochs * batches_per_epoch as f64).round() as usize).max(1);
    let val_every = ((tc.val_interval * batches_per_epoch as f64).round() as usize).max(1);
    let val_sets: Vec<Vec<&Example>> = languages
        .iter()
        .map(|l| l.dev.iter().take(tc.val_utterances).collect())
        .collect();

    let mut selector = Selector::new(tc);
    let mut log = Vec::new();
    let mut queue: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut step = 0;
    while step < total {
        if queue.is_empty() {
            for (li, l) in languages.iter().enumerate() {
                let mut idx: Vec<usize> = (0..l.train.len()).collect();
                idx.shuffle(&mut rng);
                queue.extend(idx.chunks(tc.batch_size).map(|c| (li, c.to_vec())));
            }
            queue.shuffle(&mut rng);
            queue.reverse();
        }
        let (li, idx) = queue.pop().expect("refilled");
        let batch: Vec<&Example> = idx.iter().map(|&i| &languages[li].train[i]).collect();
        let loss = train_step(model, &mut opt, &batch, &view, true, step)?;
        step += 1;
        let mut rec = LogRecord {
            step,
            phase: 0,
            language: languages[li].language.to_string(),
            loss,
            lr: opt.config.lr,
            val_loss: None,
        };
        if step % val_every == 0 || step == total {
            let mut v = 0.0;
            for set in &val_sets {
                v += mean_loss(model, set, &view, true)?;
            }
            v /= val_sets.len() as f64;
            let lr = selector.record(model, v, step);
            opt.set_lr(lr);
            rec.val_loss = Some(v);
        }
        log.push(rec);
    }
    let (best_val_loss, _) = selector.restore(model);

    let mut gate = Vec::new();
    for l in languages {
        let n = cfg.gate_utterances.min(l.test.len());
        let w = language_aware_wer(model, l.language, &l.test[..n], true)?.fraction();
        gate.push((l.language.to_string(), w));
    }
    if let Some((language, wer)) = gate.iter().find(|g| !(g.1 < cfg.gate_wer)) {
        return Err(Error::GateFailed {
            language: language.clone(),
            wer: *wer,
            threshold: cfg.gate_wer,
        });
    }
    Ok(PretrainOutcome {
        log,
        best_val_loss,
        gate,
        encoder_hash: model.encoder_hash(),
        base_hash: model.base_table_hash(),
    })
}

// ---------------------------------------------------------------------------
// Adaptation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptOptions {
    pub strategy: Strategy,
    pub train: TrainConfig,
    pub seed: u64,
    /// With `false`, ER-E trains exactly like ER.
    pub surgery: bool,
    /// 1-based phase index used for logging and random streams.
    pub phase: usize,
}

impl AdaptOptions {
    pub fn new(strategy: Strategy, train: TrainConfig, seed: u64) -> Self {
        Self {
            strategy,
            train,
            seed,
            surgery: true,
            phase: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseOutcome {
    pub phase: usize,
    pub language: String,
    pub strategy: Strategy,
    pub log: Vec<LogRecord>,
    pub best_val_loss: f64,
    pub best_step: usize,
    pub steps: usize,
    pub new_batches: usize,
    pub replay_batches: usize,
    /// Replayed languages in buffer order with their batch counts.
    pub replay_usage: Vec<(String, usize)>,
    pub checkpoint: Checkpoint,
}

/// Element-wise mean of two checkpoints' shared parameters.
///
/// Arrays present only in `after` (new language tables) are taken from it;
/// the special-token table may have grown by new LID columns, which are also
/// taken from `after` while the shared columns are averaged.
pub fn avg_merge(before: &Checkpoint, after: &Checkpoint) -> Result<Checkpoint> {
    if before.config != after.config {
        return Err(Error::MergeMismatch {
            name: "config".into(),
            reason: "model configurations differ".into(),
        });
    }
    for (name, _) in &before.arrays {
        if !after.arrays.iter().any(|a| &a.0 == name) {
            return Err(Error::MergeMismatch {
                name: name.clone(),
                reason: "missing from the adapted checkpoint".into(),
            });
        }
    }
    let mut merged = after.clone();
    for (name, value) in &mut merged.arrays {
        let Some((_, old)) = before.arrays.iter().find(|a| &a.0 == name) else {
            continue;
        };
        let grows = name == ST_NAME && old.rows() == value.rows() && old.cols() <= value.cols();
        if old.shape() != value.shape() && !grows {
            return Err(Error::MergeMismatch {
                name: name.clone(),
                reason: format!("shape {:?} vs {:?}", old.shape(), value.shape()),
            });
        }
        for r in 0..old.rows() {
            for c in 0..old.cols() {
                value.set(r, c, (old.get(r, c) + value.get(r, c)) / 2.0);
            }
        }
    }
    Ok(merged)
}

fn configure_trainable(model: &mut Model<f32>, strategy: Strategy, surgery: bool, language: &str, train: &[Example], freeze_st: bool) {
    let own_table = crate::surgery::lang_table_name(language);
    let mask = (strategy == Strategy::ErEPart).then(|| {
        let corpus: Vec<TokenSeq> = train.iter().map(|e| e.transcript.clone()).collect();
        partial_freeze_mask(&model.vocab, model.model_dim(), &corpus)
    });
    model.embedding.st_frozen = freeze_st;
    for p in model.params.iter_mut() {
        p.freeze_mask = None;
        p.trainable = if p.name.starts_with("enc.") {
            false
        } else if p.name == ST_NAME {
            !freeze_st
        } else if p.name == BASE_NAME {
            !surgery
        } else if p.name.starts_with("emb.lang.") {
            p.name == own_table
        } else {
            true
        };
        if p.name == BASE_NAME {
            p.freeze_mask = mask.clone();
        }
    }
}

fn reset_trainable(model: &mut Model<f32>) {
    for p in model.params.iter_mut() {
        p.trainable = true;
        p.freeze_mask = None;
    }
}

/// One adaptation phase on `data` (inputs are encoder memory). Returns the
/// best-validation checkpoint, which is also loaded into `model`.
pub fn adapt_phase(model: &mut Model<f32>, data: LanguageData<'_>, replay: &ReplayBuffer, opts: &AdaptOptions) -> Result<PhaseOutcome> {
    let tc = &opts.train;
    tc.validate()?;
    let strategy = opts.strategy.training_strategy();
    let surgery = strategy.uses_surgery() && opts.surgery;
    let language = data.language;
    if data.train.is_empty() || data.dev.is_empty() {
        return Err(Error::EmptyCorpus(language.to_string()));
    }
    if strategy.uses_replay() && replay.is_empty() {
        return Err(Error::EmptyReplay);
    }
    if model.is_pretrained(language) {
        return Err(Error::InvalidLanguage {
            name: language.to_string(),
            reason: "already pretrained".into(),
        });
    }
    let beta = if strategy.uses_replay() { replay.beta } else { 0.0 };
    let encoder_hash = model.encoder_hash();
    let before = (strategy == Strategy::Avg).then(|| Checkpoint::from_model(model));

    if !model.vocab.has_language(language) {
        model.add_language(language, opts.seed)?;
    }
    if surgery && model.embedding.table(language).is_none() {
        let corpus: Vec<TokenSeq> = data.train.iter().map(|e| e.transcript.clone()).collect();
        model.spawn_language_table(language, &corpus)?;
    }
    let base_hash = model.base_table_hash();
    let frozen_hashes: Vec<(String, String)> = model
        .params
        .iter()
        .filter(|p| p.name.starts_with("emb.lang.") && p.name != crate::surgery::lang_table_name(language))
        .map(|p| (p.name.clone(), model.hash_params(|n| n == p.name)))
        .collect();
    configure_trainable(model, strategy, surgery, language, data.train, tc.freeze_st);

    let new_view = model.view(language)?;
    let replay_langs = if beta > 0.0 { replay.languages() } else { Vec::new() };
    let replay_views: Vec<EmbeddingView> = replay_langs.iter().map(|l| model.view(l)).collect::<Result<_>>()?;

    let tag = format!("{}:{language}", opts.phase);
    let mut order_rng = substream(opts.seed, &format!("order:{tag}"));
    let mut replay_rng = substream(opts.seed, &format!("replay-batches:{tag}"));
    let mut sampler = BatchSampler::new(beta, replay_langs.len(), substream(opts.seed, &format!("mix:{tag}")));
    let mut opt = AdamW::new(AdamWConfig {
        lr: tc.lr,
        weight_decay: tc.weight_decay,
        ..Default::default()
    });
    let steps_per_epoch = data.train.len().div_ceil(tc.batch_size);
    let total_new = ((tc.epochs * steps_per_epoch as f64).round() as usize).max(1);
    let val_every = ((tc.val_interval * steps_per_epoch as f64).round() as usize).max(1);
    let val_set: Vec<&Example> = data.dev.iter().take(tc.val_utterances).collect();

    let mut selector = Selector::new(tc);
    let mut log = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut new_batches = 0;
    let mut replay_usage: Vec<(String, usize)> = replay_langs.iter().map(|l| (l.clone(), 0)).collect();
    let mut step = 0;
    while new_batches < total_new {
        let kind = sampler.next_kind();
        let (batch, view, batch_lang): (Vec<&Example>, &EmbeddingView, &str) = match kind {
            BatchKind::New => {
                if cursor >= order.len() {
                    order = (0..data.train.len()).collect();
                    order.shuffle(&mut order_rng);
                    cursor = 0;
                }
                let end = (cursor + tc.batch_size).min(order.len());
                let b = order[cursor..end].iter().map(|&i| &data.train[i]).collect();
                cursor = end;
                new_batches += 1;
                (b, &new_view, language)
            }
            BatchKind::Replay(li) => {
                let pool = replay.examples(&replay_langs[li]).expect("replay language");
                let b = (0..tc.batch_size).map(|_| &pool[replay_rng.gen_range(0..pool.len())]).collect();
                replay_usage[li].1 += 1;
                (b, &replay_views[li], replay_langs[li].as_str())
            }
        };
        let loss = train_step(model, &mut opt, &batch, view, false, step)?;
        step += 1;
        let mut rec = LogRecord {
            step,
            phase: opts.phase,
            language: batch_lang.to_string(),
            loss,
            lr: opt.config.lr,
            val_loss: None,
        };
        if kind == BatchKind::New && (new_batches % val_every == 0 || new_batches == total_new) {
            let v = mean_loss(model, &val_set, &new_view, false)?;
            let lr = selector.record(model, v, step);
            opt.set_lr(lr);
            rec.val_loss = Some(v);
        }
        log.push(rec);
    }
    let (best_val_loss, best_step) = selector.restore(model);
    reset_trainable(model);

    if model.encoder_hash() != encoder_hash {
        return Err(Error::Invariant("encoder parameters changed during adaptation".into()));
    }
    if surgery && model.base_table_hash() != base_hash {
        return Err(Error::Invariant("base vocabulary table changed under surgery".into()));
    }
    for (name, h) in &frozen_hashes {
        if &model.hash_params(|n| n == name) != h {
            return Err(Error::Invariant(format!("{name} changed while frozen")));
        }
    }

    let mut checkpoint = Checkpoint::from_model(model);
    if let Some(before) = before {
        checkpoint = avg_merge(&before, &checkpoint)?;
        *model = checkpoint.to_model()?;
    }
    let replay_batches = replay_usage.iter().map(|u| u.1).sum();
    Ok(PhaseOutcome {
        phase: opts.phase,
        language: language.to_string(),
        strategy: opts.strategy,
        log,
        best_val_loss,
        best_step,
        steps: step,
        new_batches,
        replay_batches,
        replay_usage,
        checkpoint,
    })
}

/// Experience replay (and its ER-E variants) for one new language.
pub fn er_adapt(model: &mut Model<f32>, data: LanguageData<'_>, replay: &ReplayBuffer, opts: &AdaptOptions) -> Result<Checkpoint> {
    Ok(adapt_phase(model, data, replay, opts)?.checkpoint)
}

/// Plain decoder fine-tuning on the new language only.
pub fn ft_adapt(model: &mut Model<f32>, data: LanguageData<'_>, opts: &AdaptOptions) -> Result<Checkpoint> {
    let opts = AdaptOptions {
        strategy: Strategy::Ft,
        ..*opts
    };
    Ok(adapt_phase(model, data, &ReplayBuffer::new(0.0)?, &opts)?.checkpoint)
}

/// Adapts to `languages` in order. After each phase the adapted language's
/// train split joins the replay buffer and `after_phase` is called.
pub fn sequential_adapt(
    model: &mut Model<f32>,
    languages: &[LanguageData<'_>],
    mut replay: ReplayBuffer,
    opts: &AdaptOptions,
    mut after_phase: impl FnMut(&Model<f32>, &PhaseOutcome) -> Result<()>,
) -> Result<Vec<PhaseOutcome>> {
    let mut out = Vec::with_capacity(languages.len());
    for (k, data) in languages.iter().enumerate() {
        let phase_opts = AdaptOptions {
            phase: k + 1,
            ..*opts
        };
        let outcome = adapt_phase(model, *data, &replay, &phase_opts)?;
        after_phase(model, &outcome)?;
        if k + 1 < languages.len() {
            replay.add_language(data.language, data.train, opts.train.replay_fraction, opts.seed)?;
        }
        out.push(outcome);
    }
    Ok(out)
}
