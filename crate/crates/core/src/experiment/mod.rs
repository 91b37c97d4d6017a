//! End-to-end runs under one output directory: data generation,
//! pretraining, adaptation, decoding and reporting.
//!
//! ```text
//! <out>/config.txt                         resolved configuration
//! <out>/vocab.txt
//! <out>/data/<lang>.<split>.jsonl
//! <out>/pretrain/ckpt/pretrained.bin       plus train_log.jsonl, summary.json
//! <out>/adapt/<strategy>/ckpt/phase<k>.bin plus train_log.jsonl, phases.json
//! <out>/sequential/<strategy>/...          same layout, longer language list
//! <out>/decode/<method>/phase<k>.jsonl
//! <out>/report/                            report.json, report.csv, confusion_*.csv, summary.txt
//! ```

mod config;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, PlanConfig, SequentialConfig};

use crate::cltrain::{
    log_to_jsonl, pretrain, sequential_adapt, AdaptOptions, Example, LanguageData, PretrainOutcome, ReplayBuffer,
    Strategy,
};
use crate::decode::{
    decode_language_agnostic, decode_language_aware, lid_scores, task_wise_beam_search, ModelDecoder,
};
use crate::error::{Error, Result};
use crate::eval::{corpus_wer, emit_report, ConfusionEntry, EvalReport, Group, LidConfusion, Setting, WerRow};
use crate::langgen::{default_inventory, generate_language, Acoustics, Corpus, LanguageSpec, Split};
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::rng::derive_seed;
use crate::vocab::Vocabulary;

pub const PRETRAINED_CHECKPOINT: &str = "pretrain/ckpt/pretrained.bin";
pub const UNADAPTED: &str = "unadapted";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunKind {
    /// The main plan: every strategy over `plan.languages`.
    Plan,
    /// The longer sequential run over `sequential.languages`.
    Sequential,
}

impl RunKind {
    pub fn dir(self) -> &'static str {
        match self {
            RunKind::Plan => "adapt",
            RunKind::Sequential => "sequential",
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            RunKind::Plan => "",
            RunKind::Sequential => "seq-",
        }
    }
}

/// A decoded system: trained weights plus the language-agnostic decoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Method {
    pub name: String,
    pub run: RunKind,
    pub weights: Strategy,
    pub task_wise: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: usize,
    pub language: String,
    pub strategy: Strategy,
    pub best_val_loss: f64,
    pub best_step: usize,
    pub steps: usize,
    pub new_batches: usize,
    pub replay_batches: usize,
    pub replay_usage: Vec<(String, usize)>,
    pub encoder_hash: String,
    pub base_hash: String,
}

/// One decoded test utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub id: String,
    pub setting: Setting,
    pub true_lang: String,
    pub pred_lang: String,
    pub reference: String,
    pub text: String,
    pub asr_score: f64,
    pub lid_scores: Vec<(String, f64)>,
    pub guard_triggered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub best_val_loss: f64,
    pub gate: Vec<(String, f64)>,
    pub encoder_hash: String,
    pub base_hash: String,
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub vocab: Vocabulary,
    pub specs: Vec<LanguageSpec>,
    pub acoustics: Acoustics,
    cache: RefCell<BTreeMap<String, Rc<Vec<Example>>>>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::new(&default_inventory(), &config.family.old)?;
        let specs = config.family.build(&vocab, config.model.feature_dim, config.seed)?;
        let acoustics = Acoustics::generate(
            &vocab,
            config.model.feature_dim,
            config.model.frames_per_token,
            derive_seed(config.seed, "acoustics"),
        );
        Ok(Self {
            config,
            vocab,
            specs,
            acoustics,
            cache: RefCell::new(BTreeMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.config.out
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.config.out.join(rel)
    }

    fn write(&self, rel: impl AsRef<Path>, body: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Frozen copy of the resolved configuration.
    pub fn write_config(&self) -> Result<PathBuf> {
        self.write("config.txt", self.config.to_text())
    }

    fn spec(&self, language: &str) -> Result<&LanguageSpec> {
        self.specs
            .iter()
            .find(|s| s.name == language)
            .ok_or_else(|| Error::UnknownLanguage(language.to_string()))
    }

    fn is_old(&self, language: &str) -> bool {
        self.config.family.old.iter().any(|l| l == language)
    }

    pub fn languages(&self, run: RunKind) -> &[String] {
        match run {
            RunKind::Plan => &self.config.plan.languages,
            RunKind::Sequential => &self.config.sequential.languages,
        }
    }

    fn run_strategies(&self, run: RunKind) -> &[Strategy] {
        match run {
            RunKind::Plan => &self.config.plan.strategies,
            RunKind::Sequential => &self.config.sequential.strategies,
        }
    }

    /// Strategies that need their own training run.
    pub fn trained_strategies(&self, run: RunKind) -> Vec<Strategy> {
        if self.languages(run).is_empty() {
            return Vec::new();
        }
        let mut out: Vec<Strategy> = Vec::new();
        for s in self.run_strategies(run) {
            let w = s.training_strategy();
            if !out.contains(&w) {
                out.push(w);
            }
        }
        out
    }

    /// Every decoded method. Sequential ER-E also gets its task-wise variant;
    /// when both ER and ER-E-B are planned, ER gets one too as an ablation.
    pub fn methods(&self) -> Vec<Method> {
        let mut out: Vec<Method> = Vec::new();
        for run in [RunKind::Plan, RunKind::Sequential] {
            if self.languages(run).is_empty() {
                continue;
            }
            let planned = self.run_strategies(run);
            let mut push = |name: String, weights: Strategy, task_wise: bool| {
                if !out.iter().any(|m| m.name == name) {
                    out.push(Method {
                        name,
                        run,
                        weights,
                        task_wise,
                    });
                }
            };
            for &s in planned {
                push(format!("{}{}", run.prefix(), s.name()), s.training_strategy(), s.task_wise_decoding());
                if run == RunKind::Sequential && s == Strategy::ErE {
                    push(format!("{}{}", run.prefix(), Strategy::ErEB.name()), Strategy::ErE, true);
                }
            }
            if run == RunKind::Plan && planned.contains(&Strategy::Er) && planned.contains(&Strategy::ErEB) {
                push("er-b".to_string(), Strategy::Er, true);
            }
        }
        out
    }

    // -----------------------------------------------------------------------
    // Data
    // -----------------------------------------------------------------------

    pub fn gen_data(&self) -> Result<()> {
        self.write_config()?;
        self.write("vocab.txt", self.vocab.to_text())?;
        let dir = self.path("data");
        for spec in &self.specs {
            generate_language(spec, self.config.data, &self.vocab)?.save(&dir)?;
        }
        Ok(())
    }

    pub fn corpus(&self, language: &str) -> Result<Corpus> {
        self.spec(language)?;
        Corpus::load(&self.path("data"), language, &self.vocab)
    }

    /// Examples for one split, capped at `limit`. With an encoder the inputs
    /// are its memory, otherwise raw features.
    pub fn examples(&self, encoder: Option<&Model<f32>>, language: &str, split: Split, limit: usize) -> Result<Rc<Vec<Example>>> {
        let key = format!(
            "{}/{language}/{}/{limit}",
            encoder.map_or("features".to_string(), |m| m.encoder_hash()),
            split.name()
        );
        if let Some(hit) = self.cache.borrow().get(&key) {
            return Ok(hit.clone());
        }
        let spec = self.spec(language)?;
        let corpus = self.corpus(language)?;
        let mut out = Vec::new();
        for u in corpus.split(split).iter().take(limit) {
            let features = u.features::<f32>(spec, &self.acoustics, &self.vocab)?;
            let input = match encoder {
                Some(m) => m.encode(&features)?,
                None => features,
            };
            out.push(Example {
                id: u.id.clone(),
                language: language.to_string(),
                transcript: u.tokens.clone(),
                input: Rc::new(input),
            });
        }
        let out = Rc::new(out);
        self.cache.borrow_mut().insert(key, out.clone());
        Ok(out)
    }

    // -----------------------------------------------------------------------
    // Training
    // -----------------------------------------------------------------------

    pub fn pretrain(&self) -> Result<PretrainOutcome> {
        self.write_config()?;
        let cfg = &self.config;
        let mut model = Model::<f32>::new(cfg.model, self.vocab.clone(), derive_seed(cfg.seed, "init"))?;
        let mut sets = Vec::new();
        for l in &cfg.family.old {
            sets.push((
                l.as_str(),
                self.examples(None, l, Split::Train, usize::MAX)?,
                self.examples(None, l, Split::Dev, usize::MAX)?,
                self.examples(None, l, Split::Test, cfg.pretrain.gate_utterances)?,
            ));
        }
        let data: Vec<LanguageData<'_>> = sets
            .iter()
            .map(|(l, tr, dv, te)| LanguageData {
                language: l,
                train: tr,
                dev: dv,
                test: te,
            })
            .collect();
        let outcome = pretrain(&mut model, &data, &cfg.pretrain, derive_seed(cfg.seed, "pretrain"))?;
        save_checkpoint(&model, &self.path(PRETRAINED_CHECKPOINT))?;
        self.write("pretrain/train_log.jsonl", log_to_jsonl(&outcome.log)?)?;
        let summary = PretrainSummary {
            best_val_loss: outcome.best_val_loss,
            gate: outcome.gate.clone(),
            encoder_hash: outcome.encoder_hash.clone(),
            base_hash: outcome.base_hash.clone(),
        };
        self.write("pretrain/summary.json", serde_json::to_string_pretty(&summary)? + "\n")?;
        Ok(outcome)
    }

    pub fn load_pretrained(&self) -> Result<Model<f32>> {
        load_checkpoint(&self.path(PRETRAINED_CHECKPOINT))
    }

    pub fn checkpoint_path(&self, run: RunKind, strategy: Strategy, phase: usize) -> PathBuf {
        self.path(format!("{}/{}/ckpt/phase{phase}.bin", run.dir(), strategy.training_strategy().name()))
    }

    /// Trains `strategy` over the run's languages, saving one checkpoint per
    /// phase.
    pub fn adapt(&self, run: RunKind, strategy: Strategy) -> Result<Vec<PhaseSummary>> {
        let strategy = strategy.training_strategy();
        let cfg = &self.config;
        let languages = self.languages(run).to_vec();
        if languages.is_empty() {
            return Err(Error::Config(format!("no languages configured for the {} run", run.dir())));
        }
        self.write_config()?;
        let mut model = self.load_pretrained()?;
        let encoder = model.clone();

        let mut sets = Vec::new();
        for l in &languages {
            sets.push((
                l.as_str(),
                self.examples(Some(&encoder), l, Split::Train, usize::MAX)?,
                self.examples(Some(&encoder), l, Split::Dev, cfg.plan.train.val_utterances)?,
            ));
        }
        let data: Vec<LanguageData<'_>> = sets
            .iter()
            .map(|(l, tr, dv)| LanguageData {
                language: l,
                train: tr,
                dev: dv,
                test: &[],
            })
            .collect();

        let mut train = cfg.plan.train;
        if run == RunKind::Sequential {
            train.epochs = cfg.sequential.epochs;
        }
        let replay_seed = derive_seed(cfg.seed, "replay");
        let mut replay = ReplayBuffer::new(train.beta)?;
        for l in &cfg.family.old {
            let ex = self.examples(Some(&encoder), l, Split::Train, usize::MAX)?;
            replay.add_language(l, &ex, train.replay_fraction, replay_seed)?;
        }
        let opts = AdaptOptions {
            strategy,
            train,
            seed: derive_seed(cfg.seed, "adapt"),
            surgery: true,
            phase: 1,
        };

        let dir = format!("{}/{}", run.dir(), strategy.name());
        let mut summaries = Vec::new();
        let mut log = Vec::new();
        sequential_adapt(&mut model, &data, replay, &opts, |m, o| {
            save_checkpoint(m, &self.checkpoint_path(run, strategy, o.phase))?;
            log.extend(o.log.iter().cloned());
            summaries.push(PhaseSummary {
                phase: o.phase,
                language: o.language.clone(),
                strategy,
                best_val_loss: o.best_val_loss,
                best_step: o.best_step,
                steps: o.steps,
                new_batches: o.new_batches,
                replay_batches: o.replay_batches,
                replay_usage: o.replay_usage.clone(),
                encoder_hash: m.encoder_hash(),
                base_hash: m.base_table_hash(),
            });
            Ok(())
        })?;
        self.write(format!("{dir}/train_log.jsonl"), log_to_jsonl(&log)?)?;
        self.write(format!("{dir}/phases.json"), serde_json::to_string_pretty(&summaries)? + "\n")?;
        Ok(summaries)
    }

    // -----------------------------------------------------------------------
    // Decoding and evaluation
    // -----------------------------------------------------------------------

    fn decode_path(&self, method: &str, phase: usize) -> PathBuf {
        self.path(format!("decode/{method}/phase{phase}.jsonl"))
    }

    /// Languages evaluated after `phase` of `run` (phase 0 is the
    /// unadapted model).
    pub fn seen_languages(&self, run: RunKind, phase: usize) -> Vec<String> {
        let mut out = self.config.family.old.clone();
        out.extend(self.languages(run)[..phase].iter().cloned());
        out
    }

    fn decode_model(&self, model: &Model<f32>, encoder: &Model<f32>, languages: &[String], task_wise: bool) -> Result<Vec<DecodeRecord>> {
        if model.encoder_hash() != encoder.encoder_hash() {
            return Err(Error::Invariant("adapted encoder differs from the pretrained one".into()));
        }
        let cfg = &self.config.decode;
        let dec = ModelDecoder::new(model)?;
        let mut out = Vec::new();
        for lang in languages {
            let test = self.examples(Some(encoder), lang, Split::Test, self.config.test_utterances)?;
            for ex in test.iter() {
                let reference = self.vocab.detokenize(&ex.transcript)?;
                let scorer = dec.scorer(&ex.input)?;
                let scores = lid_scores(&scorer, cfg.lid_renormalize);
                let aware = decode_language_aware(&scorer, lang, cfg)?;
                out.push(DecodeRecord {
                    id: ex.id.clone(),
                    setting: Setting::LanguageAware,
                    true_lang: lang.clone(),
                    pred_lang: lang.clone(),
                    reference: reference.clone(),
                    text: aware.text,
                    asr_score: aware.asr_score,
                    lid_scores: scores.clone(),
                    guard_triggered: false,
                });
                let agn = if task_wise {
                    task_wise_beam_search(&scorer, cfg)?
                } else {
                    decode_language_agnostic(&scorer, cfg)?
                };
                out.push(DecodeRecord {
                    id: ex.id.clone(),
                    setting: Setting::LanguageAgnostic,
                    true_lang: lang.clone(),
                    pred_lang: agn.chosen.language.clone(),
                    reference,
                    text: agn.chosen.text.clone(),
                    asr_score: agn.chosen.asr_score,
                    lid_scores: scores,
                    guard_triggered: agn.guard_triggered,
                });
            }
        }
        Ok(out)
    }

    fn write_records(&self, method: &str, phase: usize, records: &[DecodeRecord]) -> Result<PathBuf> {
        let mut body = String::new();
        for r in records {
            body.push_str(&serde_json::to_string(r)?);
            body.push('\n');
        }
        let path = self.decode_path(method, phase);
        self.write(path.strip_prefix(self.root()).unwrap_or(&path), body)
    }

    pub fn decode_unadapted(&self) -> Result<()> {
        let model = self.load_pretrained()?;
        let records = self.decode_model(&model, &model, &self.config.family.old, false)?;
        self.write_records(UNADAPTED, 0, &records)?;
        Ok(())
    }

    /// Decodes the test splits of every seen language after each phase.
    pub fn decode(&self, method: &Method) -> Result<()> {
        let encoder = self.load_pretrained()?;
        for phase in 1..=self.languages(method.run).len() {
            let model: Model<f32> = load_checkpoint(&self.checkpoint_path(method.run, method.weights, phase))?;
            let langs = self.seen_languages(method.run, phase);
            let records = self.decode_model(&model, &encoder, &langs, method.task_wise)?;
            self.write_records(&method.name, phase, &records)?;
        }
        Ok(())
    }

    pub fn read_records(&self, method: &str, phase: usize) -> Result<Vec<DecodeRecord>> {
        let path = self.decode_path(method, phase);
        let f = fs::File::open(&path).map_err(|_| Error::MissingArtifact(path.clone()))?;
        let mut out = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }

    fn score(&self, report: &mut EvalReport, method: &str, phase: usize, languages: &[String]) -> Result<()> {
        let records = self.read_records(method, phase)?;
        for setting in Setting::ALL {
            for lang in languages {
                let pairs: Vec<(&str, &str)> = records
                    .iter()
                    .filter(|r| r.setting == setting && &r.true_lang == lang)
                    .map(|r| (r.reference.as_str(), r.text.as_str()))
                    .collect();
                if pairs.is_empty() {
                    return Err(Error::Invariant(format!("no {setting} results for {lang} in {method} phase {phase}")));
                }
                let counts = corpus_wer(pairs);
                report.rows.push(WerRow {
                    method: method.to_string(),
                    phase,
                    language: lang.clone(),
                    group: if self.is_old(lang) { Group::Old } else { Group::New },
                    setting,
                    wer: 100.0 * counts.fraction(),
                    counts,
                });
            }
        }
        let mut matrix = LidConfusion::new(languages);
        for r in records.iter().filter(|r| r.setting == Setting::LanguageAgnostic) {
            matrix.record(&r.true_lang, &r.pred_lang);
        }
        report.confusion.push(ConfusionEntry {
            method: method.to_string(),
            phase,
            matrix,
        });
        Ok(())
    }

    /// Builds the report from decode outputs and writes it to `<out>/report`.
    pub fn evaluate(&self) -> Result<EvalReport> {
        let mut report = EvalReport {
            baseline: self.config.plan.strategies.contains(&Strategy::Ft).then(|| "ft".to_string()),
            ..Default::default()
        };
        self.score(&mut report, UNADAPTED, 0, &self.config.family.old)?;
        for m in self.methods() {
            for phase in 1..=self.languages(m.run).len() {
                self.score(&mut report, &m.name, phase, &self.seen_languages(m.run, phase))?;
            }
        }
        report.compute_awer()?;
        report.notes = self.notes()?;
        let dir = self.path("report");
        emit_report(&report, &dir)?;
        self.write("report/summary.txt", report.summary_table())?;
        Ok(report)
    }

    fn notes(&self) -> Result<Vec<String>> {
        let mut notes = Vec::new();
        let summary_path = self.path("pretrain/summary.json");
        if let Ok(text) = fs::read_to_string(&summary_path) {
            let s: PretrainSummary = serde_json::from_str(&text)?;
            let gate: Vec<String> = s.gate.iter().map(|(l, w)| format!("{l} {:.1}%", 100.0 * w)).collect();
            notes.push(format!("pretrained test WER (greedy, language-aware): {}", gate.join(", ")));
            for run in [RunKind::Plan, RunKind::Sequential] {
                for st in self.trained_strategies(run) {
                    let path = self.path(format!("{}/{}/phases.json", run.dir(), st.name()));
                    let Ok(text) = fs::read_to_string(&path) else { continue };
                    let phases: Vec<PhaseSummary> = serde_json::from_str(&text)?;
                    let enc = phases.iter().all(|p| p.encoder_hash == s.encoder_hash);
                    let base = phases.iter().all(|p| p.base_hash == s.base_hash);
                    notes.push(format!(
                        "{}{}: {} phases, encoder {}, base table {}",
                        run.prefix(),
                        st.name(),
                        phases.len(),
                        if enc { "unchanged" } else { "CHANGED" },
                        if base { "unchanged" } else { "changed" }
                    ));
                }
            }
        }
        Ok(notes)
    }

    /// Every stage in order; returns the report.
    pub fn reproduce(&self, mut progress: impl FnMut(&str)) -> Result<EvalReport> {
        progress("generating data");
        self.gen_data()?;
        progress("pretraining");
        self.pretrain()?;
        for run in [RunKind::Plan, RunKind::Sequential] {
            for s in self.trained_strategies(run) {
                progress(&format!("adapting {}{}", run.prefix(), s.name()));
                self.adapt(run, s)?;
            }
        }
        progress("decoding unadapted");
        self.decode_unadapted()?;
        for m in self.methods() {
            progress(&format!("decoding {}", m.name));
            self.decode(&m)?;
        }
        progress("evaluating");
        self.evaluate()
    }
}

#[cfg(test)]
mod tests;
