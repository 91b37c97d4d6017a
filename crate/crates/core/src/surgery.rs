//! Embedding layer surgery.
//!
//! The decoder's token table is split in two: a special-token part shared by
//! every language (SOT/EOT/PAD and all LID tokens) and a vocabulary part. The
//! original vocabulary table (`emb.base`) serves the pretrained languages; each
//! adapted language may get its own table holding only the tokens its
//! training data uses, initialised as a copy of the corresponding base
//! columns. An [`EmbeddingView`] pairs the special part with exactly one
//! vocabulary table and is used for both input lookup and the tied output
//! projection.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::numcore::{Matrix, ParamId, ParamStore, Real};
use crate::vocab::{distinct_vocab_tokens, TokenId, TokenKind, TokenSeq, Vocabulary};

pub const ST_NAME: &str = "emb.st";
pub const BASE_NAME: &str = "emb.base";

pub fn lang_table_name(language: &str) -> String {
    format!("emb.lang.{language}")
}

/// A language-specific vocabulary table: column `j` holds the embedding of
/// global token `ids[j]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LangTable {
    pub param: ParamId,
    pub ids: Vec<TokenId>,
}

#[derive(Debug, Clone)]
pub struct SplitEmbedding {
    pub st: ParamId,
    pub base: ParamId,
    tables: BTreeMap<String, LangTable>,
    /// When set, the special-token table is excluded from training.
    pub st_frozen: bool,
}

impl SplitEmbedding {
    pub(crate) fn new(st: ParamId, base: ParamId) -> Self {
        Self {
            st,
            base,
            tables: BTreeMap::new(),
            st_frozen: false,
        }
    }

    pub fn table(&self, language: &str) -> Option<&LangTable> {
        self.tables.get(language)
    }

    pub fn tables(&self) -> impl Iterator<Item = (&String, &LangTable)> {
        self.tables.iter()
    }

    pub(crate) fn insert_table(&mut self, language: &str, table: LangTable) {
        self.tables.insert(language.to_string(), table);
    }

    /// Creates `emb.lang.<language>` holding copies of the base columns of
    /// every vocabulary token that occurs in `train_corpus`.
    pub fn spawn_language_table<T: Real>(
        &mut self,
        params: &mut ParamStore<T>,
        vocab: &Vocabulary,
        language: &str,
        train_corpus: &[TokenSeq],
    ) -> Result<&LangTable> {
        if self.tables.contains_key(language) {
            return Err(Error::TableExists(language.to_string()));
        }
        let ids: Vec<TokenId> = distinct_vocab_tokens(train_corpus, vocab).into_iter().collect();
        if ids.is_empty() {
            return Err(Error::EmptyCorpus(format!(
                "no vocabulary tokens for language `{language}`"
            )));
        }
        let base = params.value(self.base);
        let cols = base_columns(vocab, &ids)?;
        let mut table = Matrix::zeros(base.rows(), ids.len());
        for (j, &c) in cols.iter().enumerate() {
            for r in 0..base.rows() {
                table.set(r, j, base.get(r, c));
            }
        }
        let param = params.add(lang_table_name(language), table)?;
        self.tables.insert(language.to_string(), LangTable { param, ids });
        Ok(&self.tables[language])
    }

    /// View for `language`: its own table if one was spawned, otherwise the
    /// base table.
    pub fn select_view(&self, vocab: &Vocabulary, language: &str) -> Result<EmbeddingView> {
        if !vocab.has_language(language) {
            return Err(Error::UnknownLanguage(language.to_string()));
        }
        match self.tables.get(language) {
            Some(t) => EmbeddingView::new(
                format!("lang:{language}"),
                vocab,
                self.st,
                t.param,
                t.ids.iter().copied().enumerate().map(|(c, id)| (id, c)).collect(),
            ),
            None => Ok(self.base_view(vocab)),
        }
    }

    pub fn base_view(&self, vocab: &Vocabulary) -> EmbeddingView {
        let entries = vocab.vocab_ids().iter().enumerate().map(|(c, &id)| (id, c)).collect();
        EmbeddingView::new("base".into(), vocab, self.st, self.base, entries)
            .expect("base view covers the vocabulary")
    }

    /// Base-table view restricted to `ids`.
    pub fn restricted_base_view(&self, vocab: &Vocabulary, ids: &[TokenId]) -> Result<EmbeddingView> {
        let cols = base_columns(vocab, ids)?;
        EmbeddingView::new(
            "base-restricted".into(),
            vocab,
            self.st,
            self.base,
            ids.iter().copied().zip(cols).collect(),
        )
    }
}

fn base_columns(vocab: &Vocabulary, ids: &[TokenId]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|&id| match vocab.kind(id)? {
            TokenKind::Vocab(c) => Ok(c),
            TokenKind::Special(_) => Err(Error::InvalidArgument(format!(
                "token {id} is a special token"
            ))),
        })
        .collect()
}

/// The special-token table plus exactly one vocabulary table.
///
/// Local token space: `0..S` are special-table columns, `S..S+J` are the
/// view's vocabulary tokens in ascending global-id order.
#[derive(Debug, Clone)]
pub struct EmbeddingView {
    pub name: String,
    pub st: ParamId,
    pub table: ParamId,
    num_specials: usize,
    special_ids: Vec<TokenId>,
    /// `(global id, table column)`, ascending by global id.
    entries: Vec<(TokenId, usize)>,
    local: Vec<Option<usize>>,
}

impl EmbeddingView {
    fn new(
        name: String,
        vocab: &Vocabulary,
        st: ParamId,
        table: ParamId,
        mut entries: Vec<(TokenId, usize)>,
    ) -> Result<Self> {
        entries.sort_unstable();
        let s = vocab.num_specials();
        let mut local = vec![None; vocab.len()];
        for (col, &id) in vocab.special_ids().iter().enumerate() {
            local[id] = Some(col);
        }
        for (j, &(id, _)) in entries.iter().enumerate() {
            if !vocab.is_vocab(id) {
                return Err(Error::InvalidArgument(format!("token {id} is not a vocab token")));
            }
            local[id] = Some(s + j);
        }
        Ok(Self {
            name,
            st,
            table,
            num_specials: s,
            special_ids: vocab.special_ids().to_vec(),
            entries,
            local,
        })
    }

    /// `S + J`.
    pub fn size(&self) -> usize {
        self.num_specials + self.entries.len()
    }

    pub fn num_specials(&self) -> usize {
        self.num_specials
    }

    pub fn vocab_len(&self) -> usize {
        self.entries.len()
    }

    /// Global ids of the view's vocabulary tokens, ascending.
    pub fn vocab_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.local.get(id).is_some_and(|l| l.is_some())
    }

    pub fn local(&self, id: TokenId) -> Result<usize> {
        self.local
            .get(id)
            .copied()
            .flatten()
            .ok_or_else(|| Error::NotInView {
                token: id,
                view: self.name.clone(),
            })
    }

    pub fn global(&self, local: usize) -> TokenId {
        if local < self.num_specials {
            self.special_ids[local]
        } else {
            self.entries[local - self.num_specials].0
        }
    }

    pub fn to_local(&self, ids: &[TokenId]) -> Result<Vec<usize>> {
        ids.iter().map(|&id| self.local(id)).collect()
    }

    /// Table columns of the view's vocabulary tokens.
    pub fn table_columns(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.1).collect()
    }

    /// `E × (S+J)` matrix `[special table | selected vocabulary columns]`.
    pub fn materialize<T: Real>(&self, params: &ParamStore<T>) -> Matrix<T> {
        let st = params.value(self.st);
        let table = params.value(self.table);
        let e = st.rows();
        let mut out = Matrix::zeros(e, self.size());
        for r in 0..e {
            let row = out.row_mut(r);
            row[..self.num_specials].copy_from_slice(st.row(r));
            for (j, &(_, c)) in self.entries.iter().enumerate() {
                row[self.num_specials + j] = table.get(r, c);
            }
        }
        out
    }

    /// Splits a gradient with respect to [`Self::materialize`]'s output back
    /// onto the special table and the vocabulary table.
    pub fn scatter_grad<T: Real>(
        &self,
        params: &ParamStore<T>,
        dview: &Matrix<T>,
        grads: &mut crate::numcore::Grads<T>,
        include_st: bool,
    ) {
        let s = self.num_specials;
        if include_st {
            grads.acc(self.st, &dview.col_slice(0, s));
        }
        let tshape = params.value(self.table).shape();
        let dt = grads.slot(self.table, tshape);
        for r in 0..dview.rows() {
            for (j, &(_, c)) in self.entries.iter().enumerate() {
                let v = dt.get(r, c) + dview.get(r, s + j);
                dt.set(r, c, v);
            }
        }
    }
}

/// `Z = A × V`: column `k` of the result is the embedding of token `k`.
pub fn embed<T: Real>(params: &ParamStore<T>, view: &EmbeddingView, tokens: &[TokenId]) -> Result<Matrix<T>> {
    let a = view.materialize(params);
    let local = view.to_local(tokens)?;
    let mut z = Matrix::zeros(a.rows(), tokens.len());
    for (k, &l) in local.iter().enumerate() {
        for r in 0..a.rows() {
            z.set(r, k, a.get(r, l));
        }
    }
    Ok(z)
}

/// Trainable-entry mask over the base table (`E × U_vocab`, row-major):
/// `true` exactly in the columns of tokens occurring in `train_corpus`.
pub fn partial_freeze_mask(vocab: &Vocabulary, model_dim: usize, train_corpus: &[TokenSeq]) -> Vec<bool> {
    let seen: BTreeSet<usize> = distinct_vocab_tokens(train_corpus, vocab)
        .into_iter()
        .filter_map(|id| match vocab.kind(id) {
            Ok(TokenKind::Vocab(c)) => Some(c),
            _ => None,
        })
        .collect();
    let u = vocab.vocab_size();
    (0..model_dim * u).map(|i| seen.contains(&(i % u))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{SOT, EOT};

    fn setup(u: usize, e: usize) -> (Vocabulary, ParamStore<f64>, SplitEmbedding) {
        let toks: Vec<String> = (0..u).map(|i| format!("t{i}")).collect();
        let vocab = Vocabulary::new(&toks, &["aa".to_string()]).unwrap();
        let mut store = ParamStore::new();
        let s = vocab.num_specials();
        let st = store
            .add(ST_NAME, Matrix::from_fn(e, s, |r, c| (r * 100 + c) as f64 * 0.5))
            .unwrap();
        let base = store
            .add(BASE_NAME, Matrix::from_fn(e, u, |r, c| (r * 1000 + c) as f64 + 0.25))
            .unwrap();
        (vocab, store, SplitEmbedding::new(st, base))
    }

    #[test]
    fn spawn_copies_base_columns() {
        let (mut vocab, mut store, mut split) = setup(12, 3);
        vocab.add_language("bb").unwrap();
        let ids = vocab.vocab_ids().to_vec();
        let corpus = vec![vec![SOT, ids[5], ids[9], ids[5], EOT]];
        let t = split.spawn_language_table(&mut store, &vocab, "bb", &corpus).unwrap().clone();
        assert_eq!(t.ids, vec![ids[5], ids[9]]);
        let table = store.value(t.param);
        assert_eq!(table.shape(), (3, 2));
        let base = store.value(split.base);
        assert_eq!(table.column(0), base.column(5));
        assert_eq!(table.column(1), base.column(9));
        assert!(matches!(
            split.spawn_language_table(&mut store, &vocab, "bb", &corpus),
            Err(Error::TableExists(_))
        ));
    }

    #[test]
    fn spawn_rejects_empty_corpus() {
        let (mut vocab, mut store, mut split) = setup(4, 2);
        vocab.add_language("bb").unwrap();
        assert!(split.spawn_language_table(&mut store, &vocab, "bb", &[]).is_err());
    }

    #[test]
    fn views_cover_expected_tokens() {
        let (mut vocab, mut store, mut split) = setup(10, 2);
        vocab.add_language("bb").unwrap();
        let ids = vocab.vocab_ids().to_vec();
        split
            .spawn_language_table(&mut store, &vocab, "bb", &[vec![ids[1], ids[3]]])
            .unwrap();
        let base = split.select_view(&vocab, "aa").unwrap();
        assert_eq!(base.vocab_len(), 10);
        assert_eq!(base.size(), vocab.num_specials() + 10);
        let v = split.select_view(&vocab, "bb").unwrap();
        assert_eq!(v.size(), vocab.num_specials() + 2);
        assert!(v.contains(ids[3]) && !v.contains(ids[2]));
        assert!(matches!(v.local(ids[2]), Err(Error::NotInView { .. })));
        assert!(matches!(split.select_view(&vocab, "zz"), Err(Error::UnknownLanguage(_))));
        for l in 0..v.size() {
            assert_eq!(v.local(v.global(l)).unwrap(), l);
        }
    }

    #[test]
    fn embed_equals_one_hot_product() {
        let (vocab, store, split) = setup(4, 3);
        let view = split.base_view(&vocab);
        let ids = vocab.vocab_ids().to_vec();
        let seq = vec![ids[2], SOT, ids[2], ids[0]];
        let z = embed(&store, &view, &seq).unwrap();
        let a = view.materialize(&store);
        let v = Matrix::from_fn(view.size(), seq.len(), |r, c| {
            if view.local(seq[c]).unwrap() == r { 1.0 } else { 0.0 }
        });
        assert_eq!(z, a.matmul(&v).unwrap());
        assert_eq!(z.column(0), z.column(2));
        assert_eq!(embed(&store, &view, &[]).unwrap().shape(), (3, 0));
    }

    #[test]
    fn freeze_mask_marks_seen_columns() {
        let toks: Vec<String> = (0..5).map(|i| format!("t{i}")).collect();
        let vocab = Vocabulary::new(&toks, &["aa".to_string()]).unwrap();
        let ids = vocab.vocab_ids().to_vec();
        let m = partial_freeze_mask(&vocab, 2, &[vec![ids[1], ids[4]]]);
        let expect = [false, true, false, false, true];
        assert_eq!(m, expect.iter().chain(&expect).copied().collect::<Vec<_>>());
        assert!(partial_freeze_mask(&vocab, 2, &[ids.clone()]).iter().all(|&b| b));
        assert!(partial_freeze_mask(&vocab, 2, &[vec![SOT]]).iter().all(|&b| !b));
    }
}
