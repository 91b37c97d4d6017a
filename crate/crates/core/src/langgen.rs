//! Synthetic languages: Markov grammars over a shared syllable inventory and
//! "acoustic" feature sequences that encode each token almost directly.
//!
//! Every language draws words from its own subset of syllables. A token
//! sounds the same in every language (one shared acoustic embedding per
//! token); each language additionally colours its frames with a bias vector
//! so that language identity is inferable from the input.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Real};
use crate::rng::{derive_seed, substream, Rng};
use crate::vocab::{TokenId, TokenSeq, Vocabulary};

pub const DEFAULT_FEATURE_DIM: usize = 24;
pub const DEFAULT_FRAMES_PER_TOKEN: usize = 4;

/// Consonant-vowel syllables plus the word separator.
pub fn syllable_inventory(consonants: &str, vowels: &str) -> Vec<String> {
    let mut out: Vec<String> = consonants
        .chars()
        .flat_map(|c| vowels.chars().map(move |v| format!("{c}{v}")))
        .collect();
    out.push(" ".to_string());
    out
}

pub fn default_inventory() -> Vec<String> {
    syllable_inventory("klmnprst", "aeiou")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub name: String,
    pub seed: u64,
    /// Syllable token ids (ascending) the grammar draws from.
    pub token_subset: Vec<TokenId>,
    /// Row-stochastic transition matrix over `token_subset`.
    pub bigram_weights: Vec<Vec<f64>>,
    /// Mean number of words per utterance.
    pub mean_len: usize,
    /// Word count is uniform in `mean_len ± len_spread`.
    pub len_spread: usize,
    /// Inclusive range of syllables per word.
    pub syllables_per_word: (usize, usize),
    pub feature_noise: f64,
    /// Language colouring added to every frame.
    pub bias: Vec<f64>,
}

impl LanguageSpec {
    /// Checks the parameters and normalizes transition rows in place.
    pub fn validate(&mut self) -> Result<()> {
        let bad = |reason: String| Error::InvalidLanguage {
            name: self.name.clone(),
            reason,
        };
        let n = self.token_subset.len();
        if n == 0 {
            return Err(bad("empty token subset".into()));
        }
        if self.bigram_weights.len() != n || self.bigram_weights.iter().any(|r| r.len() != n) {
            return Err(bad(format!("bigram matrix must be {n}x{n}")));
        }
        if self.mean_len == 0 || self.len_spread >= self.mean_len {
            return Err(bad("need mean_len >= 1 and len_spread < mean_len".into()));
        }
        let (lo, hi) = self.syllables_per_word;
        if lo == 0 || lo > hi {
            return Err(bad("syllables_per_word must be a non-empty range >= 1".into()));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(bad("feature_noise must be finite and >= 0".into()));
        }
        for (i, row) in self.bigram_weights.iter_mut().enumerate() {
            if row.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(Error::InvalidLanguage {
                    name: self.name.clone(),
                    reason: format!("row {i} has negative or non-finite weights"),
                });
            }
            let total: f64 = row.iter().sum();
            if total <= 0.0 {
                return Err(Error::InvalidLanguage {
                    name: self.name.clone(),
                    reason: format!("row {i} has no outgoing transitions"),
                });
            }
            row.iter_mut().for_each(|w| *w /= total);
        }
        // Irreducible chain: every state reaches every other state.
        let reach = |forward: bool| {
            let mut seen = vec![false; n];
            let mut queue = VecDeque::from([0usize]);
            seen[0] = true;
            while let Some(i) = queue.pop_front() {
                for j in 0..n {
                    let w = if forward {
                        self.bigram_weights[i][j]
                    } else {
                        self.bigram_weights[j][i]
                    };
                    if w > 0.0 && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
            seen.iter().all(|&s| s)
        };
        if !reach(true) || !reach(false) {
            return Err(bad("grammar has an absorbing or unreachable state".into()));
        }
        Ok(())
    }

    /// Samples one utterance text.
    pub fn sample_text(&self, vocab: &Vocabulary, rng: &mut Rng) -> Result<String> {
        let words = rng.gen_range(self.mean_len - self.len_spread..=self.mean_len + self.len_spread);
        let mut state = rng.gen_range(0..self.token_subset.len());
        let mut out = Vec::with_capacity(words);
        for w in 0..words {
            let syllables = rng.gen_range(self.syllables_per_word.0..=self.syllables_per_word.1);
            let mut word = String::new();
            for s in 0..syllables {
                if w > 0 || s > 0 {
                    state = sample_index(&self.bigram_weights[state], rng);
                }
                word.push_str(&vocab.token_text(self.token_subset[state])?);
            }
            out.push(word);
        }
        Ok(out.join(" "))
    }
}

fn sample_index(weights: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Shared acoustic embedding of every vocabulary token.
#[derive(Debug, Clone)]
pub struct Acoustics {
    pub frames_per_token: usize,
    /// `vocab_size × feature_dim`, indexed by vocabulary column.
    table: Matrix<f64>,
}

impl Acoustics {
    pub fn generate(vocab: &Vocabulary, feature_dim: usize, frames_per_token: usize, seed: u64) -> Self {
        let mut rng = substream(seed, "acoustics");
        let table = Matrix::from_fn(vocab.vocab_size(), feature_dim, |_, _| {
            StandardNormal.sample(&mut rng)
        });
        Self {
            frames_per_token,
            table,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.table.cols()
    }
}

/// Frames for a token sequence: `frames_per_token` copies of each token's
/// acoustic embedding plus the language bias plus Gaussian noise.
pub fn synthesize_features<T: Real>(
    tokens: &[TokenId],
    spec: &LanguageSpec,
    acoustics: &Acoustics,
    vocab: &Vocabulary,
    utt_seed: u64,
) -> Result<Matrix<T>> {
    let f = acoustics.feature_dim();
    if spec.bias.len() != f {
        return Err(Error::InvalidLanguage {
            name: spec.name.clone(),
            reason: format!("bias has {} dims, features have {f}", spec.bias.len()),
        });
    }
    let k = acoustics.frames_per_token;
    let mut rng = substream(utt_seed, "frames");
    let mut out = Matrix::zeros(tokens.len() * k, f);
    for (t, &id) in tokens.iter().enumerate() {
        let col = match vocab.kind(id)? {
            crate::vocab::TokenKind::Vocab(c) => c,
            crate::vocab::TokenKind::Special(_) => {
                return Err(Error::InvalidArgument(format!(
                    "special token {id} has no acoustic form"
                )))
            }
        };
        let base = acoustics.table.row(col);
        for j in 0..k {
            let row = out.row_mut(t * k + j);
            for d in 0..f {
                let noise: f64 = if spec.feature_noise > 0.0 {
                    spec.feature_noise * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                } else {
                    0.0
                };
                row[d] = T::c(base[d] + spec.bias[d] + noise);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub language: String,
    pub text: String,
    pub feature_seed: u64,
    #[serde(skip)]
    pub tokens: TokenSeq,
}

impl Utterance {
    pub fn features<T: Real>(
        &self,
        spec: &LanguageSpec,
        acoustics: &Acoustics,
        vocab: &Vocabulary,
    ) -> Result<Matrix<T>> {
        synthesize_features(&self.tokens, spec, acoustics, vocab, self.feature_seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 2000,
            dev: 200,
            test: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub language: String,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn token_seqs(&self, split: Split) -> Vec<TokenSeq> {
        self.split(split).iter().map(|u| u.tokens.clone()).collect()
    }

    /// Writes `<dir>/<language>.<split>.jsonl` for each split.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for split in [Split::Train, Split::Dev, Split::Test] {
            let path = dir.join(format!("{}.{}.jsonl", self.language, split.name()));
            let mut buf = Vec::new();
            for u in self.split(split) {
                serde_json::to_writer(&mut buf, u)?;
                buf.push(b'\n');
            }
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(&buf).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, language: &str, vocab: &Vocabulary) -> Result<Self> {
        let read = |split: Split| -> Result<Vec<Utterance>> {
            let path = dir.join(format!("{language}.{}.jsonl", split.name()));
            let f = fs::File::open(&path).map_err(|_| Error::MissingArtifact(path.clone()))?;
            let mut out = Vec::new();
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.is_empty() {
                    continue;
                }
                let mut u: Utterance = serde_json::from_str(&line)?;
                u.tokens = vocab.tokenize(&u.text)?;
                out.push(u);
            }
            Ok(out)
        };
        Ok(Corpus {
            language: language.to_string(),
            train: read(Split::Train)?,
            dev: read(Split::Dev)?,
            test: read(Split::Test)?,
        })
    }
}

/// Samples train/dev/test utterances; a pure function of `spec.seed`.
pub fn generate_language(spec: &LanguageSpec, sizes: SplitSizes, vocab: &Vocabulary) -> Result<Corpus> {
    let mut spec = spec.clone();
    spec.validate()?;
    let make = |split: Split, n: usize| -> Result<Vec<Utterance>> {
        let mut rng = substream(spec.seed, &format!("text/{}", split.name()));
        (0..n)
            .map(|i| {
                let text = spec.sample_text(vocab, &mut rng)?;
                let tokens = vocab.tokenize(&text)?;
                let id = format!("{}-{}-{i:05}", spec.name, split.name());
                Ok(Utterance {
                    feature_seed: derive_seed(spec.seed, &id),
                    id,
                    language: spec.name.clone(),
                    text,
                    tokens,
                })
            })
            .collect()
    };
    Ok(Corpus {
        language: spec.name.clone(),
        train: make(Split::Train, sizes.train)?,
        dev: make(Split::Dev, sizes.dev)?,
        test: make(Split::Test, sizes.test)?,
    })
}

/// Parameters for building a family of related languages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageFamily {
    pub old: Vec<String>,
    pub new: Vec<String>,
    /// Syllables per language.
    pub subset_size: usize,
    /// Fraction of a new language's syllables shared with its paired old language.
    pub overlap: f64,
    pub mean_len: usize,
    pub len_spread: usize,
    pub syllables_per_word: (usize, usize),
    pub feature_noise: f64,
    /// Per-dimension standard deviation of language bias vectors.
    pub bias_scale: f64,
    /// Correlation between a new language's bias and its paired old language's.
    pub bias_similarity: f64,
    /// Exponent applied to exponential transition weights (higher = peakier).
    pub grammar_peakiness: f64,
}

impl Default for LanguageFamily {
    fn default() -> Self {
        Self {
            old: vec!["ka".into(), "lu".into()],
            new: vec!["mo".into(), "ni".into()],
            subset_size: 14,
            overlap: 0.65,
            mean_len: 6,
            len_spread: 1,
            syllables_per_word: (2, 3),
            feature_noise: 0.3,
            bias_scale: 0.3,
            bias_similarity: 0.5,
            grammar_peakiness: 2.0,
        }
    }
}

impl LanguageFamily {
    /// Paired old language of the `i`-th new language.
    pub fn pair_of(&self, new_index: usize) -> &str {
        &self.old[new_index % self.old.len()]
    }

    /// Builds validated specs: old languages first, then new languages.
    pub fn build(&self, vocab: &Vocabulary, feature_dim: usize, root_seed: u64) -> Result<Vec<LanguageSpec>> {
        if self.old.is_empty() {
            return Err(Error::Config("at least one old language is required".into()));
        }
        let syllables: Vec<TokenId> = vocab
            .vocab_ids()
            .iter()
            .copied()
            .filter(|&id| vocab.token_text(id).map(|t| t != " ").unwrap_or(false))
            .collect();
        let s = self.subset_size;
        if s == 0 || s > syllables.len() {
            return Err(Error::Config(format!(
                "subset_size must be in 1..={}",
                syllables.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.overlap) || !(0.0..=1.0).contains(&self.bias_similarity) {
            return Err(Error::Config("overlap and bias_similarity must lie in [0, 1]".into()));
        }
        let mut specs = Vec::new();
        for name in &self.old {
            let mut rng = substream(root_seed, &format!("lang/{name}"));
            let mut pool = syllables.clone();
            pool.shuffle(&mut rng);
            let subset: BTreeSet<TokenId> = pool[..s].iter().copied().collect();
            let bias = gaussian_vec(&mut rng, feature_dim, self.bias_scale);
            specs.push(self.finish(name, subset, bias, &mut rng, root_seed)?);
        }
        for (i, name) in self.new.iter().enumerate() {
            let mut rng = substream(root_seed, &format!("lang/{name}"));
            let pair = specs
                .iter()
                .find(|sp| sp.name == self.pair_of(i))
                .expect("old languages built first")
                .clone();
            let shared_n = ((self.overlap * s as f64).round() as usize).min(s);
            let mut shared = pair.token_subset.clone();
            shared.shuffle(&mut rng);
            let mut rest: Vec<TokenId> = syllables
                .iter()
                .copied()
                .filter(|id| !pair.token_subset.contains(id))
                .collect();
            rest.shuffle(&mut rng);
            let fresh_n = (s - shared_n).min(rest.len());
            let subset: BTreeSet<TokenId> = shared[..shared_n]
                .iter()
                .chain(&rest[..fresh_n])
                .copied()
                .collect();
            let fresh = gaussian_vec(&mut rng, feature_dim, self.bias_scale);
            let rho = self.bias_similarity;
            let bias = pair
                .bias
                .iter()
                .zip(&fresh)
                .map(|(a, b)| rho * a + (1.0 - rho * rho).sqrt() * b)
                .collect();
            specs.push(self.finish(name, subset, bias, &mut rng, root_seed)?);
        }
        Ok(specs)
    }

    fn finish(
        &self,
        name: &str,
        subset: BTreeSet<TokenId>,
        bias: Vec<f64>,
        rng: &mut Rng,
        root_seed: u64,
    ) -> Result<LanguageSpec> {
        let n = subset.len();
        let bigram_weights = (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        let e: f64 = Exp1.sample(rng);
                        e.powf(self.grammar_peakiness) + 1e-3
                    })
                    .collect()
            })
            .collect();
        let mut spec = LanguageSpec {
            name: name.to_string(),
            seed: derive_seed(root_seed, &format!("corpus/{name}")),
            token_subset: subset.into_iter().collect(),
            bigram_weights,
            mean_len: self.mean_len,
            len_spread: self.len_spread,
            syllables_per_word: self.syllables_per_word,
            feature_noise: self.feature_noise,
            bias,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn gaussian_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>()
}

/// Fraction of `a`'s syllables that `b` also uses.
pub fn subset_overlap(a: &LanguageSpec, b: &LanguageSpec) -> f64 {
    let shared = a.token_subset.iter().filter(|t| b.token_subset.contains(t)).count();
    shared as f64 / a.token_subset.len() as f64
}
