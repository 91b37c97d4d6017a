//! Flat `key = value` experiment configuration with dotted section keys.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cltrain::{PretrainConfig, Strategy, TrainConfig};
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::langgen::{LanguageFamily, SplitSizes};
use crate::model::ModelConfig;
use crate::numcore::NewBobConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct PlanConfig {
    /// New languages adapted in order.
    pub languages: Vec<String>,
    pub strategies: Vec<Strategy>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequentialConfig {
    /// Longer sequential run; empty disables it.
    pub languages: Vec<String>,
    pub strategies: Vec<Strategy>,
    pub epochs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub family: LanguageFamily,
    pub data: SplitSizes,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub plan: PlanConfig,
    pub sequential: SequentialConfig,
    pub decode: DecodeConfig,
    /// Test utterances decoded per language.
    pub test_utterances: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let family = LanguageFamily {
            new: vec!["mo".into(), "ni".into(), "pe".into()],
            ..Default::default()
        };
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            family,
            data: SplitSizes::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            plan: PlanConfig {
                languages: vec!["mo".into(), "ni".into()],
                strategies: Strategy::ALL.to_vec(),
                train: TrainConfig::default(),
            },
            sequential: SequentialConfig {
                languages: vec!["mo".into(), "ni".into(), "pe".into()],
                strategies: vec![Strategy::Er, Strategy::ErE],
                epochs: 2.0,
            },
            decode: DecodeConfig::default(),
            test_utterances: 200,
        }
    }
}

impl ExperimentConfig {
    /// Reduced sizes for a run of a few minutes on one core.
    pub fn quick() -> Self {
        let mut c = Self::default();
        c.out = PathBuf::from("runs/quick");
        c.data = SplitSizes {
            train: 300,
            dev: 40,
            test: 200,
        };
        c.model = ModelConfig {
            model_dim: 32,
            encoder_layers: 1,
            ffn_dim: 128,
            ..ModelConfig::default()
        };
        c.pretrain.train.epochs = 8.0;
        c.pretrain.train.lr = 3e-3;
        c.pretrain.gate_utterances = 60;
        // Short phases need a larger step to show forgetting at all.
        c.plan.train.lr = 3e-3;
        c.plan.train.val_interval = 0.125;
        c.plan.train.val_utterances = 40;
        c.sequential.strategies = vec![Strategy::ErE];
        c.sequential.epochs = 1.0;
        c.test_utterances = 200;
        c
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(String, String)> {
        fn list<T: Display>(v: &[T]) -> String {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        }
        let f = &self.family;
        let m = &self.model;
        let p = &self.pretrain.train;
        let t = &self.plan.train;
        let d = &self.decode;
        let fixed: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("languages.old", list(&f.old)),
            ("languages.new", list(&f.new)),
            ("family.subset_size", f.subset_size.to_string()),
            ("family.overlap", f.overlap.to_string()),
            ("family.mean_len", f.mean_len.to_string()),
            ("family.len_spread", f.len_spread.to_string()),
            ("family.syllables_min", f.syllables_per_word.0.to_string()),
            ("family.syllables_max", f.syllables_per_word.1.to_string()),
            ("family.feature_noise", f.feature_noise.to_string()),
            ("family.bias_scale", f.bias_scale.to_string()),
            ("family.bias_similarity", f.bias_similarity.to_string()),
            ("family.grammar_peakiness", f.grammar_peakiness.to_string()),
            ("data.train", self.data.train.to_string()),
            ("data.dev", self.data.dev.to_string()),
            ("data.test", self.data.test.to_string()),
            ("model.feature_dim", m.feature_dim.to_string()),
            ("model.model_dim", m.model_dim.to_string()),
            ("model.encoder_layers", m.encoder_layers.to_string()),
            ("model.decoder_layers", m.decoder_layers.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.ffn_dim", m.ffn_dim.to_string()),
            ("model.max_decode_len", m.max_decode_len.to_string()),
            ("model.frames_per_token", m.frames_per_token.to_string()),
        ];
        let mut e: Vec<(String, String)> = fixed.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        train_entries(&mut e, "pretrain", p);
        e.push(("pretrain.gate_wer".into(), self.pretrain.gate_wer.to_string()));
        e.push(("pretrain.gate_utterances".into(), self.pretrain.gate_utterances.to_string()));
        e.push(("plan.languages".into(), list(&self.plan.languages)));
        e.push(("plan.strategies".into(), list(&self.plan.strategies)));
        train_entries(&mut e, "plan", t);
        e.push(("plan.beta".into(), t.beta.to_string()));
        e.push(("plan.replay_fraction".into(), t.replay_fraction.to_string()));
        e.push(("plan.freeze_st".into(), t.freeze_st.to_string()));
        e.push(("sequential.languages".into(), list(&self.sequential.languages)));
        e.push(("sequential.strategies".into(), list(&self.sequential.strategies)));
        e.push(("sequential.epochs".into(), self.sequential.epochs.to_string()));
        let tail: [(&str, String); 8] = [
            ("decode.beam_width", d.beam_width.to_string()),
            ("decode.top_n", d.top_n.to_string()),
            ("decode.min_words", d.min_words.to_string()),
            ("decode.max_overlap", d.max_overlap.to_string()),
            ("decode.lid_renormalize", d.lid_renormalize.to_string()),
            ("decode.include_lid_in_score", d.include_lid_in_score.to_string()),
            ("decode.guards", d.guards.to_string()),
            ("eval.test_utterances", self.test_utterances.to_string()),
        ];
        e.extend(tail.into_iter().map(|(k, v)| (k.to_string(), v)));
        e
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        if let Some(rest) = key.strip_prefix("pretrain.") {
            match rest {
                "gate_wer" => return parse_into(key, v, &mut self.pretrain.gate_wer),
                "gate_utterances" => return parse_into(key, v, &mut self.pretrain.gate_utterances),
                _ => {
                    if set_train(&mut self.pretrain.train, key, rest, v)? {
                        return Ok(());
                    }
                }
            }
        }
        if let Some(rest) = key.strip_prefix("plan.") {
            let t = &mut self.plan.train;
            match rest {
                "languages" => {
                    self.plan.languages = names(v);
                    return Ok(());
                }
                "strategies" => {
                    self.plan.strategies = strategies(v)?;
                    return Ok(());
                }
                "beta" => return parse_into(key, v, &mut t.beta),
                "replay_fraction" => return parse_into(key, v, &mut t.replay_fraction),
                "freeze_st" => return parse_into(key, v, &mut t.freeze_st),
                _ => {
                    if set_train(t, key, rest, v)? {
                        return Ok(());
                    }
                }
            }
        }
        let f = &mut self.family;
        let m = &mut self.model;
        let d = &mut self.decode;
        match key {
            "seed" => parse_into(key, v, &mut self.seed),
            "out" => {
                self.out = PathBuf::from(v);
                Ok(())
            }
            "languages.old" => {
                f.old = names(v);
                Ok(())
            }
            "languages.new" => {
                f.new = names(v);
                Ok(())
            }
            "family.subset_size" => parse_into(key, v, &mut f.subset_size),
            "family.overlap" => parse_into(key, v, &mut f.overlap),
            "family.mean_len" => parse_into(key, v, &mut f.mean_len),
            "family.len_spread" => parse_into(key, v, &mut f.len_spread),
            "family.syllables_min" => parse_into(key, v, &mut f.syllables_per_word.0),
            "family.syllables_max" => parse_into(key, v, &mut f.syllables_per_word.1),
            "family.feature_noise" => parse_into(key, v, &mut f.feature_noise),
            "family.bias_scale" => parse_into(key, v, &mut f.bias_scale),
            "family.bias_similarity" => parse_into(key, v, &mut f.bias_similarity),
            "family.grammar_peakiness" => parse_into(key, v, &mut f.grammar_peakiness),
            "data.train" => parse_into(key, v, &mut self.data.train),
            "data.dev" => parse_into(key, v, &mut self.data.dev),
            "data.test" => parse_into(key, v, &mut self.data.test),
            "model.feature_dim" => parse_into(key, v, &mut m.feature_dim),
            "model.model_dim" => parse_into(key, v, &mut m.model_dim),
            "model.encoder_layers" => parse_into(key, v, &mut m.encoder_layers),
            "model.decoder_layers" => parse_into(key, v, &mut m.decoder_layers),
            "model.heads" => parse_into(key, v, &mut m.heads),
            "model.ffn_dim" => parse_into(key, v, &mut m.ffn_dim),
            "model.max_decode_len" => parse_into(key, v, &mut m.max_decode_len),
            "model.frames_per_token" => parse_into(key, v, &mut m.frames_per_token),
            "sequential.languages" => {
                self.sequential.languages = names(v);
                Ok(())
            }
            "sequential.strategies" => {
                self.sequential.strategies = strategies(v)?;
                Ok(())
            }
            "sequential.epochs" => parse_into(key, v, &mut self.sequential.epochs),
            "decode.beam_width" => parse_into(key, v, &mut d.beam_width),
            "decode.top_n" => parse_into(key, v, &mut d.top_n),
            "decode.min_words" => parse_into(key, v, &mut d.min_words),
            "decode.max_overlap" => parse_into(key, v, &mut d.max_overlap),
            "decode.lid_renormalize" => parse_into(key, v, &mut d.lid_renormalize),
            "decode.include_lid_in_score" => parse_into(key, v, &mut d.include_lid_in_score),
            "decode.guards" => parse_into(key, v, &mut d.guards),
            "eval.test_utterances" => parse_into(key, v, &mut self.test_utterances),
            _ => Err(Error::Config(format!("unknown key `{key}`"))),
        }
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped; a repeated key is an error.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if seen.insert(k.to_string(), n + 1).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            self.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Parses a config file over `base`. The file must set `seed` unless
    /// `seed_given` says one comes from elsewhere.
    pub fn from_text(base: Self, text: &str, seed_given: bool) -> Result<Self> {
        let mut c = base;
        c.apply_text(text)?;
        let has_seed = text
            .lines()
            .any(|l| l.split('#').next().unwrap_or("").split_once('=').is_some_and(|(k, _)| k.trim() == "seed"));
        if !has_seed && !seed_given {
            return Err(Error::Config("`seed` is required".into()));
        }
        Ok(c)
    }

    pub fn load(path: &Path, base: Self, seed_given: bool) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_text(base, &text, seed_given)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.pretrain.train.validate()?;
        self.plan.train.validate()?;
        self.decode.validate().map_err(|e| Error::Config(e.to_string()))?;
        let f = &self.family;
        if f.old.len() < 2 {
            return bad("at least two old languages are required".into());
        }
        let mut all: Vec<&String> = f.old.iter().chain(&f.new).collect();
        for name in &all {
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return bad(format!("invalid language name `{name}`"));
            }
        }
        all.sort();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return bad("language names must be unique".into());
        }
        for (what, list) in [("plan", &self.plan.languages), ("sequential", &self.sequential.languages)] {
            for l in list {
                if !f.new.contains(l) {
                    return bad(format!("{what}.languages references undefined new language `{l}`"));
                }
            }
            let mut sorted = list.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != list.len() {
                return bad(format!("{what}.languages repeats a language"));
            }
        }
        if self.plan.languages.is_empty() {
            return bad("plan.languages is empty".into());
        }
        if self.plan.strategies.is_empty() {
            return bad("plan.strategies is empty".into());
        }
        if !self.sequential.languages.is_empty() && !(self.sequential.epochs > 0.0) {
            return bad("sequential.epochs must be positive".into());
        }
        if self.model.feature_dim == 0 || self.model.frames_per_token == 0 {
            return bad("feature_dim and frames_per_token must be positive".into());
        }
        if self.data.train == 0 || self.data.dev == 0 || self.data.test == 0 {
            return bad("every data split needs at least one utterance".into());
        }
        if self.test_utterances == 0 {
            return bad("eval.test_utterances must be positive".into());
        }
        if !(self.pretrain.gate_wer > 0.0) {
            return bad("pretrain.gate_wer must be positive".into());
        }
        Ok(())
    }
}

fn train_entries(e: &mut Vec<(String, String)>, section: &str, t: &TrainConfig) {
    let values = [
        ("epochs", t.epochs.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("lr", t.lr.to_string()),
        ("weight_decay", t.weight_decay.to_string()),
        ("val_interval", t.val_interval.to_string()),
        ("val_utterances", t.val_utterances.to_string()),
        ("newbob_threshold", t.newbob.improvement_threshold.to_string()),
        ("newbob_factor", t.newbob.anneal_factor.to_string()),
        ("newbob_patience", t.newbob.patience.to_string()),
    ];
    e.extend(values.into_iter().map(|(k, v)| (format!("{section}.{k}"), v)));
}

fn set_train(t: &mut TrainConfig, key: &str, rest: &str, v: &str) -> Result<bool> {
    let nb: &mut NewBobConfig = &mut t.newbob;
    match rest {
        "epochs" => parse_into(key, v, &mut t.epochs)?,
        "batch_size" => parse_into(key, v, &mut t.batch_size)?,
        "lr" => parse_into(key, v, &mut t.lr)?,
        "weight_decay" => parse_into(key, v, &mut t.weight_decay)?,
        "val_interval" => t.val_interval = parse_fraction(key, v)?,
        "val_utterances" => parse_into(key, v, &mut t.val_utterances)?,
        "newbob_threshold" => parse_into(key, v, &mut nb.improvement_threshold)?,
        "newbob_factor" => parse_into(key, v, &mut nb.anneal_factor)?,
        "newbob_patience" => parse_into(key, v, &mut nb.patience)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn parse_into<T: FromStr>(key: &str, v: &str, slot: &mut T) -> Result<()> {
    *slot = v
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))?;
    Ok(())
}

/// Accepts `0.03125` or `1/32`.
fn parse_fraction(key: &str, v: &str) -> Result<f64> {
    let err = || Error::Config(format!("invalid value `{v}` for `{key}`"));
    match v.split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (a.trim().parse().map_err(|_| err())?, b.trim().parse().map_err(|_| err())?);
            if b == 0.0 {
                return Err(err());
            }
            Ok(a / b)
        }
        None => v.parse().map_err(|_| err()),
    }
}

fn names(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn strategies(v: &str) -> Result<Vec<Strategy>> {
    names(v).iter().map(|s| s.parse()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for c in [ExperimentConfig::default(), ExperimentConfig::quick()] {
            let text = c.to_text();
            let back = ExperimentConfig::from_text(ExperimentConfig::default(), &text, false).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_text(), text);
            c.validate().unwrap();
        }
    }

    #[test]
    fn overrides_and_errors() {
        let c = ExperimentConfig::from_text(
            ExperimentConfig::default(),
            "# demo\nseed = 9\nplan.val_interval = 1/32 # inline\nplan.strategies = ft, er-e\n",
            false,
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.plan.train.val_interval, 1.0 / 32.0);
        assert_eq!(c.plan.strategies, [Strategy::Ft, Strategy::ErE]);

        let err = |t: &str| ExperimentConfig::from_text(ExperimentConfig::default(), t, false).unwrap_err();
        assert!(matches!(err("plan.beta = 0.2"), Error::Config(m) if m.contains("seed")));
        assert!(matches!(err("seed = 1\nbogus = 3"), Error::Config(m) if m.contains("bogus")));
        assert!(matches!(err("seed = 1\nseed = 2"), Error::Config(m) if m.contains("duplicate")));
        assert!(matches!(err("seed = x"), Error::Config(_)));
        assert!(matches!(err("seed = 1\nplan.strategies = sgd"), Error::Config(_)));
        assert!(ExperimentConfig::from_text(ExperimentConfig::default(), "plan.beta = 0.2", true).is_ok());
    }

    #[test]
    fn validation_catches_undefined_languages() {
        let mut c = ExperimentConfig::default();
        c.plan.languages = vec!["zz".into()];
        assert!(matches!(c.validate(), Err(Error::Config(m)) if m.contains("zz")));
        let mut c = ExperimentConfig::default();
        c.family.old = vec!["ka".into()];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.family.new.push("ka".into());
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.model.heads = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
