//! Word error rate, averaged WER, LID confusion and report files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Word-level Levenshtein distance.
pub fn edit_distance<S: PartialEq>(reference: &[S], hypothesis: &[S]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Edit distance divided by the reference word count. An empty reference
/// counts as one word, so any hypothesis words are all errors.
pub fn wer(reference: &str, hypothesis: &str) -> f64 {
    let r = words(reference);
    let h = words(hypothesis);
    edit_distance(&r, &h) as f64 / r.len().max(1) as f64
}

/// Corpus-level WER: total edits over total reference words.
pub fn corpus_wer<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> CorpusWer {
    let mut out = CorpusWer::default();
    for (r, h) in pairs {
        let rw = words(r);
        out.edits += edit_distance(&rw, &words(h));
        out.reference_words += rw.len();
        out.utterances += 1;
        if rw.is_empty() {
            out.empty_references += 1;
            out.reference_words += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusWer {
    pub edits: usize,
    pub reference_words: usize,
    pub utterances: usize,
    pub empty_references: usize,
}

impl CorpusWer {
    pub fn fraction(&self) -> f64 {
        if self.reference_words == 0 {
            0.0
        } else {
            self.edits as f64 / self.reference_words as f64
        }
    }
}

/// Unweighted mean over languages.
pub fn awer(per_language: &[f64]) -> Result<f64> {
    if per_language.is_empty() {
        return Err(Error::InvalidArgument("awer of zero languages".into()));
    }
    Ok(per_language.iter().sum::<f64>() / per_language.len() as f64)
}

/// `(method - baseline) / baseline * 100`.
pub fn relative_change(method: f64, baseline: f64) -> Result<f64> {
    if baseline <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "relative change against non-positive baseline {baseline}"
        )));
    }
    Ok((method - baseline) / baseline * 100.0)
}

/// One decimal with a sign, e.g. `-60.0%`.
pub fn format_relative_change(percent: f64) -> String {
    let s = format!("{percent:.1}");
    let s = if s == "-0.0" { "0.0".to_string() } else { s };
    if percent > 0.0 && s != "0.0" {
        format!("+{s}%")
    } else {
        format!("{s}%")
    }
}

/// `counts[true][predicted]` over a fixed language order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LidConfusion {
    pub languages: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl LidConfusion {
    pub fn new(languages: &[String]) -> Self {
        Self {
            languages: languages.to_vec(),
            counts: vec![vec![0; languages.len()]; languages.len()],
        }
    }

    fn index(&mut self, language: &str) -> usize {
        if let Some(i) = self.languages.iter().position(|l| l == language) {
            return i;
        }
        self.languages.push(language.to_string());
        for row in &mut self.counts {
            row.push(0);
        }
        self.counts.push(vec![0; self.languages.len()]);
        self.languages.len() - 1
    }

    pub fn record(&mut self, truth: &str, predicted: &str) {
        let t = self.index(truth);
        let p = self.index(predicted);
        self.counts[t][p] += 1;
    }

    pub fn count(&self, truth: &str, predicted: &str) -> usize {
        let pos = |l: &str| self.languages.iter().position(|x| x == l);
        match (pos(truth), pos(predicted)) {
            (Some(t), Some(p)) => self.counts[t][p],
            _ => 0,
        }
    }

    pub fn row_sum(&self, truth: &str) -> usize {
        self.languages
            .iter()
            .position(|x| x == truth)
            .map_or(0, |t| self.counts[t].iter().sum())
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Utterances of any language in `truths` identified as any language in
    /// `predictions`.
    pub fn mass(&self, truths: &[String], predictions: &[String]) -> usize {
        truths
            .iter()
            .flat_map(|t| predictions.iter().map(move |p| (t, p)))
            .map(|(t, p)| self.count(t, p))
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for l in &self.languages {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (l, row) in self.languages.iter().zip(&self.counts) {
            out.push_str(l);
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Builds a confusion matrix from `(true, predicted)` pairs.
pub fn lid_confusion<'a>(languages: &[String], results: impl IntoIterator<Item = (&'a str, &'a str)>) -> LidConfusion {
    let mut m = LidConfusion::new(languages);
    for (t, p) in results {
        m.record(t, p);
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Setting {
    #[serde(rename = "language-aware")]
    LanguageAware,
    #[serde(rename = "language-agnostic")]
    LanguageAgnostic,
}

impl Setting {
    pub const ALL: [Setting; 2] = [Setting::LanguageAware, Setting::LanguageAgnostic];
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::LanguageAware => "language-aware",
            Setting::LanguageAgnostic => "language-agnostic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Old,
    New,
    All,
}

/// WER of one language under one method, phase and setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerRow {
    pub method: String,
    pub phase: usize,
    pub language: String,
    pub group: Group,
    pub setting: Setting,
    /// Percent.
    pub wer: f64,
    pub counts: CorpusWer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AwerRow {
    pub method: String,
    pub phase: usize,
    pub setting: Setting,
    pub group: Group,
    /// Percent.
    pub awer: f64,
    /// Percent change against the report's baseline method, if any.
    pub relative_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionEntry {
    pub method: String,
    pub phase: usize,
    pub matrix: LidConfusion,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub baseline: Option<String>,
    pub rows: Vec<WerRow>,
    pub awer: Vec<AwerRow>,
    pub confusion: Vec<ConfusionEntry>,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn wer(&self, method: &str, phase: usize, language: &str, setting: Setting) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.phase == phase && r.language == language && r.setting == setting)
            .map(|r| r.wer)
    }

    pub fn awer_of(&self, method: &str, phase: usize, setting: Setting, group: Group) -> Option<f64> {
        self.awer
            .iter()
            .find(|r| r.method == method && r.phase == phase && r.setting == setting && r.group == group)
            .map(|r| r.awer)
    }

    pub fn confusion_of(&self, method: &str, phase: usize) -> Option<&LidConfusion> {
        self.confusion
            .iter()
            .find(|c| c.method == method && c.phase == phase)
            .map(|c| &c.matrix)
    }

    /// Recomputes the AWER table (old, new, all per method/phase/setting)
    /// from the rows, filling relative changes against `baseline`.
    pub fn compute_awer(&mut self) -> Result<()> {
        let mut keys: Vec<(String, usize, Setting)> = Vec::new();
        for r in &self.rows {
            let k = (r.method.clone(), r.phase, r.setting);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let mut out = Vec::new();
        for (method, phase, setting) in keys {
            for group in [Group::Old, Group::New, Group::All] {
                let w: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.method == method && r.phase == phase && r.setting == setting)
                    .filter(|r| group == Group::All || r.group == group)
                    .map(|r| r.wer)
                    .collect();
                if w.is_empty() {
                    continue;
                }
                out.push(AwerRow {
                    method: method.clone(),
                    phase,
                    setting,
                    group,
                    awer: awer(&w)?,
                    relative_change: None,
                });
            }
        }
        if let Some(base) = &self.baseline {
            let lookup: Vec<AwerRow> = out.clone();
            for row in &mut out {
                let b = lookup.iter().find(|b| {
                    &b.method == base && b.phase == row.phase && b.setting == row.setting && b.group == row.group
                });
                if let Some(b) = b {
                    row.relative_change = relative_change(row.awer, b.awer).ok();
                }
            }
        }
        self.awer = out;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,phase,language,setting,wer\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{:.1}\n", r.method, r.phase, r.language, r.setting, r.wer));
        }
        out
    }

    /// Human-readable AWER table, one line per method and phase.
    pub fn summary_table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>5}  {:>22}  {:>22}  {:>9}  {:>9}\n",
            "method", "phase", "aware old/new/all", "agnostic old/new/all", "rel aware", "rel agn"
        );
        let mut keys: Vec<(String, usize)> = Vec::new();
        for r in &self.awer {
            let k = (r.method.clone(), r.phase);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        for (method, phase) in keys {
            let triple = |s: Setting| {
                [Group::Old, Group::New, Group::All]
                    .iter()
                    .map(|&g| self.awer_of(&method, phase, s, g).map_or("-".into(), |v| format!("{v:.1}")))
                    .collect::<Vec<_>>()
                    .join("/")
            };
            let rel = |s: Setting| {
                self.awer
                    .iter()
                    .find(|r| r.method == method && r.phase == phase && r.setting == s && r.group == Group::All)
                    .and_then(|r| r.relative_change)
                    .map_or("-".into(), format_relative_change)
            };
            out.push_str(&format!(
                "{:<12} {:>5}  {:>22}  {:>22}  {:>9}  {:>9}\n",
                method,
                phase,
                triple(Setting::LanguageAware),
                triple(Setting::LanguageAgnostic),
                rel(Setting::LanguageAware),
                rel(Setting::LanguageAgnostic)
            ));
        }
        out
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("report.json");
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes `report.json`, `report.csv` and one
/// `confusion_<method>_phase<k>.csv` per confusion matrix into `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut write = |name: String, body: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    write("report.json".into(), serde_json::to_string_pretty(report)? + "\n")?;
    write("report.csv".into(), report.to_csv())?;
    for c in &report.confusion {
        write(format!("confusion_{}_phase{}.csv", c.method, c.phase), c.matrix.to_csv())?;
    }
    Ok(written)
}
