//! Small pre-LN transformer encoder-decoder with hand-written backward passes.
//!
//! The encoder maps `T×F` feature frames to `T×E` memory. The decoder reads
//! token embeddings through an [`EmbeddingView`] and projects its output back
//! onto the same view (tied weights), so logits live in the view's local
//! token space.

mod checkpoint;
mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::ops::{cross_entropy, gather_columns, scatter_columns, sinusoid};
use crate::numcore::{Grads, Matrix, ParamId, ParamStore, Real};
use crate::rng::{substream, Rng};
use crate::surgery::{EmbeddingView, SplitEmbedding, BASE_NAME, ST_NAME};
use crate::vocab::{TokenId, TokenSeq, Vocabulary, PAD, SOT};

use layers::{AttnIds, DecLayer, DecLayerCache, EncLayer, EncLayerCache, LinIds, LnIds};

/// Standard deviation of the initial token embeddings.
pub const EMB_INIT_STD: f64 = 0.3;
/// Standard deviation of LID columns added for new languages.
pub const NEW_LID_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub model_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_decode_len: usize,
    /// Encoder frames per token; sets the scale of the encoder's positional
    /// encoding so that frame `t` and decoder step `t / k` line up.
    pub frames_per_token: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: crate::langgen::DEFAULT_FEATURE_DIM,
            model_dim: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ffn_dim: 256,
            max_decode_len: 48,
            frames_per_token: crate::langgen::DEFAULT_FRAMES_PER_TOKEN,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidModelConfig(m.to_string()));
        if self.feature_dim == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad("model_dim must be divisible by heads");
        }
        if self.max_decode_len < 3 {
            return bad("max_decode_len must be at least 3");
        }
        if self.frames_per_token == 0 {
            return bad("frames_per_token must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Arch {
    enc_in: LinIds,
    enc: Vec<EncLayer>,
    enc_ln: Option<LnIds>,
    dec: Vec<DecLayer>,
    dec_ln: LnIds,
}

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<T>,
    pub embedding: SplitEmbedding,
    /// Languages present at construction time.
    pub pretrained: Vec<String>,
    arch: Arch,
}

/// Cross-attention keys and values of one utterance's memory, per decoder
/// layer.
#[derive(Debug, Clone)]
pub struct CrossKv<T: Real> {
    layers: Vec<(Matrix<T>, Matrix<T>)>,
}

impl<T: Real> CrossKv<T> {
    pub fn frames(&self) -> usize {
        self.layers.first().map_or(0, |l| l.0.rows())
    }
}

/// Incremental decoding state: self-attention keys/values of the positions
/// consumed so far.
#[derive(Debug, Clone)]
pub struct DecoderState<T: Real> {
    keys: Vec<Matrix<T>>,
    values: Vec<Matrix<T>>,
    len: usize,
}

impl<T: Real> DecoderState<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub(crate) struct EncoderCache<T: Real> {
    input: Matrix<T>,
    layers: Vec<EncLayerCache<T>>,
    final_ln: Option<crate::numcore::ops::LayerNormCache<T>>,
}

pub(crate) struct DecoderCache<T: Real> {
    layers: Vec<DecLayerCache<T>>,
    cross: Vec<(Matrix<T>, Matrix<T>)>,
    final_ln: crate::numcore::ops::LayerNormCache<T>,
    out: Matrix<T>,
}

pub(crate) fn normal_matrix<T: Real>(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Matrix::from_fn(rows, cols, |_, _| T::c(dist.sample(rng)))
}

impl<T: Real> Model<T> {
    /// Fresh model over `vocab`, parameters drawn from `seed`.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "init");
        let mut params = ParamStore::new();
        let (e, f, h) = (config.model_dim, config.feature_dim, config.ffn_dim);

        let mut lin = |params: &mut ParamStore<T>, name: &str, i: usize, o: usize| -> Result<LinIds> {
            let w = params.add(format!("{name}.w"), normal_matrix(i, o, 1.0 / (i as f64).sqrt(), &mut rng))?;
            let b = params.add(format!("{name}.b"), Matrix::zeros(1, o))?;
            Ok(LinIds { w, b })
        };
        let ln = |params: &mut ParamStore<T>, name: &str| -> Result<LnIds> {
            let g = params.add(format!("{name}.g"), Matrix::filled(1, e, T::one()))?;
            let b = params.add(format!("{name}.b"), Matrix::zeros(1, e))?;
            Ok(LnIds { g, b })
        };

        let enc_in = lin(&mut params, "enc.in", f, e)?;
        let mut enc = Vec::new();
        for l in 0..config.encoder_layers {
            let p = format!("enc.{l}");
            let ln1 = ln(&mut params, &format!("{p}.ln1"))?;
            let attn = AttnIds {
                q: lin(&mut params, &format!("{p}.attn.q"), e, e)?,
                k: lin(&mut params, &format!("{p}.attn.k"), e, e)?,
                v: lin(&mut params, &format!("{p}.attn.v"), e, e)?,
                o: lin(&mut params, &format!("{p}.attn.o"), e, e)?,
            };
            let ln2 = ln(&mut params, &format!("{p}.ln2"))?;
            let up = lin(&mut params, &format!("{p}.ffn.up"), e, h)?;
            let down = lin(&mut params, &format!("{p}.ffn.down"), h, e)?;
            enc.push(EncLayer { ln1, attn, ln2, up, down });
        }
        let enc_ln = if config.encoder_layers > 0 {
            Some(ln(&mut params, "enc.ln_f")?)
        } else {
            None
        };
        let mut dec = Vec::new();
        for l in 0..config.decoder_layers {
            let p = format!("dec.{l}");
            let ln1 = ln(&mut params, &format!("{p}.ln1"))?;
            let self_attn = AttnIds {
                q: lin(&mut params, &format!("{p}.self.q"), e, e)?,
                k: lin(&mut params, &format!("{p}.self.k"), e, e)?,
                v: lin(&mut params, &format!("{p}.self.v"), e, e)?,
                o: lin(&mut params, &format!("{p}.self.o"), e, e)?,
            };
            let ln2 = ln(&mut params, &format!("{p}.ln2"))?;
            let cross = AttnIds {
                q: lin(&mut params, &format!("{p}.cross.q"), e, e)?,
                k: lin(&mut params, &format!("{p}.cross.k"), e, e)?,
                v: lin(&mut params, &format!("{p}.cross.v"), e, e)?,
                o: lin(&mut params, &format!("{p}.cross.o"), e, e)?,
            };
            let ln3 = ln(&mut params, &format!("{p}.ln3"))?;
            let up = lin(&mut params, &format!("{p}.ffn.up"), e, h)?;
            let down = lin(&mut params, &format!("{p}.ffn.down"), h, e)?;
            dec.push(DecLayer { ln1, self_attn, ln2, cross, ln3, up, down });
        }
        let dec_ln = ln(&mut params, "dec.ln_f")?;
        let st = params.add(ST_NAME, normal_matrix(e, vocab.num_specials(), EMB_INIT_STD, &mut rng))?;
        let base = params.add(BASE_NAME, normal_matrix(e, vocab.vocab_size(), EMB_INIT_STD, &mut rng))?;
        Ok(Self {
            config,
            pretrained: vocab.languages(),
            vocab,
            params,
            embedding: SplitEmbedding::new(st, base),
            arch: Arch { enc_in, enc, enc_ln, dec, dec_ln },
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            let id = params.add(p.name.clone(), p.value.cast()).expect("unique names");
            let t = params.get_mut(id);
            t.trainable = p.trainable;
            t.freeze_mask = p.freeze_mask.clone();
        }
        Model {
            config: self.config,
            vocab: self.vocab.clone(),
            params,
            embedding: self.embedding.clone(),
            pretrained: self.pretrained.clone(),
            arch: self.arch.clone(),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.config.model_dim
    }

    /// Registers a new language: appends its LID token to the vocabulary and
    /// a freshly initialised column to the special-token table.
    pub fn add_language(&mut self, name: &str, seed: u64) -> Result<TokenId> {
        let id = self.vocab.add_language(name)?;
        let mut rng = substream(seed, &format!("lid:{name}"));
        let col: Matrix<T> = normal_matrix(self.model_dim(), 1, NEW_LID_INIT_STD, &mut rng);
        let st = self.params.value(self.embedding.st).hcat(&col)?;
        let tensor = self.params.get_mut(self.embedding.st);
        let trainable = tensor.trainable;
        self.params.replace(self.embedding.st, st);
        self.params.get_mut(self.embedding.st).trainable = trainable;
        Ok(id)
    }

    pub fn is_pretrained(&self, language: &str) -> bool {
        self.pretrained.iter().any(|l| l == language)
    }

    pub fn view(&self, language: &str) -> Result<EmbeddingView> {
        self.embedding.select_view(&self.vocab, language)
    }

    pub fn base_view(&self) -> EmbeddingView {
        self.embedding.base_view(&self.vocab)
    }

    /// Spawns a language-specific vocabulary table from `train_corpus`.
    pub fn spawn_language_table(&mut self, language: &str, train_corpus: &[TokenSeq]) -> Result<()> {
        if !self.vocab.has_language(language) {
            return Err(Error::UnknownLanguage(language.to_string()));
        }
        self.embedding
            .spawn_language_table(&mut self.params, &self.vocab, language, train_corpus)?;
        Ok(())
    }

    /// Ids of all encoder parameters, in canonical order.
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| self.params.get(id).name.starts_with("enc."))
            .collect()
    }

    fn p(&self, id: ParamId) -> &Matrix<T> {
        self.params.value(id)
    }

    // ------------------------------------------------------------------
    // Encoder
    // ------------------------------------------------------------------

    /// `T×F` features to `T×E` memory.
    pub fn encode(&self, features: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.encode_train(features)?.0)
    }

    pub(crate) fn encode_train(&self, features: &Matrix<T>) -> Result<(Matrix<T>, EncoderCache<T>)> {
        if features.cols() != self.config.feature_dim {
            return Err(Error::Shape {
                op: "encode",
                left: features.shape(),
                right: (features.rows(), self.config.feature_dim),
            });
        }
        if !features.is_finite() {
            return Err(Error::InvalidArgument("non-finite features".into()));
        }
        let mut h = self.lin(&self.arch.enc_in, features)?;
        if !self.arch.enc.is_empty() {
            let k = self.config.frames_per_token as f64;
            let mut pe = vec![T::zero(); h.cols()];
            for t in 0..h.rows() {
                sinusoid(t as f64 / k, h.cols(), &mut pe);
                for (x, &p) in h.row_mut(t).iter_mut().zip(&pe) {
                    *x += p;
                }
            }
        }
        let mut caches = Vec::with_capacity(self.arch.enc.len());
        for layer in &self.arch.enc {
            let (out, c) = self.enc_layer(layer, h)?;
            h = out;
            caches.push(c);
        }
        let final_ln = match &self.arch.enc_ln {
            Some(ln) => {
                let (y, c) = self.ln(ln, &h)?;
                h = y;
                Some(c)
            }
            None => None,
        };
        Ok((
            h,
            EncoderCache {
                input: features.clone(),
                layers: caches,
                final_ln,
            },
        ))
    }

    pub(crate) fn encode_backward(&self, cache: &EncoderCache<T>, dmemory: Matrix<T>, grads: &mut Grads<T>) -> Result<()> {
        let mut dh = dmemory;
        if let (Some(ln), Some(c)) = (&self.arch.enc_ln, &cache.final_ln) {
            dh = self.ln_back(ln, c, &dh, grads);
        }
        for (layer, c) in self.arch.enc.iter().zip(&cache.layers).rev() {
            dh = self.enc_layer_back(layer, c, dh, grads)?;
        }
        self.lin_back(&self.arch.enc_in, &cache.input, &dh, grads)?;
        Ok(())
    }

    // ------------------------------------------------------------------
    // Decoder
    // ------------------------------------------------------------------

    pub fn cross_kv(&self, memory: &Matrix<T>) -> Result<CrossKv<T>> {
        if memory.cols() != self.model_dim() {
            return Err(Error::Shape {
                op: "cross_kv",
                left: memory.shape(),
                right: (memory.rows(), self.model_dim()),
            });
        }
        let layers = self
            .arch
            .dec
            .iter()
            .map(|l| Ok((self.lin(&l.cross.k, memory)?, self.lin(&l.cross.v, memory)?)))
            .collect::<Result<_>>()?;
        Ok(CrossKv { layers })
    }

    fn embed_prefix(&self, wview: &Matrix<T>, prefix: &[usize], start: usize) -> Result<Matrix<T>> {
        let mut x = gather_columns(wview, prefix)?;
        let mut pe = vec![T::zero(); x.cols()];
        for p in 0..x.rows() {
            sinusoid((start + p) as f64 - 1.0, x.cols(), &mut pe);
            for (v, &q) in x.row_mut(p).iter_mut().zip(&pe) {
                *v += q;
            }
        }
        Ok(x)
    }

    /// Teacher-forced decoder pass over local ids; returns `P×V` logits.
    pub(crate) fn decode_train(
        &self,
        memory: &Matrix<T>,
        prefix: &[usize],
        wview: &Matrix<T>,
    ) -> Result<(Matrix<T>, DecoderCache<T>)> {
        let kv = self.cross_kv(memory)?;
        let mut h = self.embed_prefix(wview, prefix, 0)?;
        let mut caches = Vec::with_capacity(self.arch.dec.len());
        for (layer, (k, v)) in self.arch.dec.iter().zip(&kv.layers) {
            let (out, c) = self.dec_layer(layer, h, k, v)?;
            h = out;
            caches.push(c);
        }
        let (out, final_ln) = self.ln(&self.arch.dec_ln, &h)?;
        let logits = out.matmul(wview)?;
        Ok((
            logits,
            DecoderCache {
                layers: caches,
                cross: kv.layers,
                final_ln,
                out,
            },
        ))
    }

    /// Backward through the decoder. Accumulates parameter gradients, adds the
    /// view-matrix gradient into `dwview` and returns the memory gradient.
    pub(crate) fn decode_backward(
        &self,
        cache: &DecoderCache<T>,
        memory: &Matrix<T>,
        prefix: &[usize],
        wview: &Matrix<T>,
        dlogits: &Matrix<T>,
        dwview: &mut Matrix<T>,
        grads: &mut Grads<T>,
    ) -> Result<Matrix<T>> {
        dwview.add_assign(&cache.out.matmul_tn(dlogits)?)?;
        let dout = dlogits.matmul_nt(wview)?;
        let mut dh = self.ln_back(&self.arch.dec_ln, &cache.final_ln, &dout, grads);
        let mut dmem = Matrix::zeros(memory.rows(), memory.cols());
        for ((layer, c), (k, v)) in self.arch.dec.iter().zip(&cache.layers).zip(&cache.cross).rev() {
            let (dx, dk, dv) = self.dec_layer_back(layer, c, k, v, dh, grads)?;
            dmem.add_assign(&self.lin_back(&layer.cross.k, memory, &dk, grads)?)?;
            dmem.add_assign(&self.lin_back(&layer.cross.v, memory, &dv, grads)?)?;
            dh = dx;
        }
        scatter_columns(dwview, prefix, &dh);
        Ok(dmem)
    }

    /// Decoder logits at every prefix position (global ids in, local logits
    /// out).
    pub fn decoder_logits(&self, memory: &Matrix<T>, prefix: &[TokenId], view: &EmbeddingView) -> Result<Matrix<T>> {
        let local = view.to_local(prefix)?;
        let wview = view.materialize(&self.params);
        Ok(self.decode_train(memory, &local, &wview)?.0)
    }

    /// Next-token logits over the view's local token space.
    pub fn decode_step(&self, memory: &Matrix<T>, prefix: &[TokenId], view: &EmbeddingView) -> Result<Vec<T>> {
        if prefix.first() != Some(&SOT) {
            return Err(Error::InvalidArgument("prefix must begin with SOT".into()));
        }
        if prefix.len() >= self.config.max_decode_len {
            return Err(Error::InvalidArgument(format!(
                "prefix length {} reaches max_decode_len {}",
                prefix.len(),
                self.config.max_decode_len
            )));
        }
        let logits = self.decoder_logits(memory, prefix, view)?;
        Ok(logits.row(logits.rows() - 1).to_vec())
    }

    pub fn start_state(&self) -> DecoderState<T> {
        let e = self.model_dim();
        DecoderState {
            keys: vec![Matrix::zeros(0, e); self.arch.dec.len()],
            values: vec![Matrix::zeros(0, e); self.arch.dec.len()],
            len: 0,
        }
    }

    /// Feeds one local token and returns the logits for the next position.
    ///
    /// `wview` is [`EmbeddingView::materialize`] of the active view.
    pub fn step(
        &self,
        kv: &CrossKv<T>,
        state: &mut DecoderState<T>,
        token: usize,
        wview: &Matrix<T>,
    ) -> Result<Vec<T>> {
        let mut h = self.embed_prefix(wview, &[token], state.len)?;
        for (l, layer) in self.arch.dec.iter().enumerate() {
            h = self.dec_layer_step(layer, h, &mut state.keys[l], &mut state.values[l], &kv.layers[l])?;
        }
        state.len += 1;
        let (out, _) = self.ln(&self.arch.dec_ln, &h)?;
        Ok(out.matmul(wview)?.into_vec())
    }

    /// Mean teacher-forced cross-entropy of `target` under `view`.
    pub fn sequence_loss(&self, memory: &Matrix<T>, target: &[TokenId], view: &EmbeddingView) -> Result<T> {
        let mut tape = LossTape::new();
        tape.forward(self, Source::Memory(memory), target, view)
    }
}

fn check_target(target: &[TokenId]) -> Result<()> {
    if target.len() < 2 {
        return Err(Error::InvalidTarget("target needs at least SOT and one token".into()));
    }
    if target[0] != SOT {
        return Err(Error::InvalidTarget("target must begin with SOT".into()));
    }
    if target.contains(&PAD) {
        return Err(Error::InvalidTarget("target contains PAD".into()));
    }
    Ok(())
}

/// What a [`LossTape`] starts from.
pub enum Source<'a, T: Real> {
    /// Raw features: the encoder runs and receives gradients.
    Features(&'a Matrix<T>),
    /// Precomputed encoder output: the encoder is treated as frozen.
    Memory(&'a Matrix<T>),
}

struct Pending<T: Real> {
    enc: Option<EncoderCache<T>>,
    memory: Matrix<T>,
    dec: DecoderCache<T>,
    prefix: Vec<usize>,
    wview: Matrix<T>,
    dlogits: Matrix<T>,
    view: EmbeddingView,
}

/// Records one forward pass so its gradient can be taken once.
#[derive(Default)]
pub struct LossTape<T: Real> {
    pending: Option<Pending<T>>,
}

impl<T: Real> LossTape<T> {
    pub fn new() -> Self {
        Self { pending: None }
    }

    /// Teacher-forced loss of `target`; every position after SOT is a target,
    /// including the LID token and EOT.
    pub fn forward(&mut self, model: &Model<T>, source: Source<'_, T>, target: &[TokenId], view: &EmbeddingView) -> Result<T> {
        check_target(target)?;
        let local = view.to_local(target)?;
        let (memory, enc) = match source {
            Source::Features(x) => {
                let (m, c) = model.encode_train(x)?;
                (m, Some(c))
            }
            Source::Memory(m) => (m.clone(), None),
        };
        let wview = view.materialize(&model.params);
        let prefix = local[..local.len() - 1].to_vec();
        let (logits, dec) = model.decode_train(&memory, &prefix, &wview)?;
        let (loss, dlogits) = cross_entropy(&logits, &local[1..])?;
        self.pending = Some(Pending {
            enc,
            memory,
            dec,
            prefix,
            wview,
            dlogits,
            view: view.clone(),
        });
        Ok(loss)
    }

    /// Accumulates gradients of the last forward pass into `grads`.
    pub fn backward(&mut self, model: &Model<T>, grads: &mut Grads<T>) -> Result<()> {
        let p = self.pending.take().ok_or(Error::BackwardBeforeForward)?;
        let mut dwview = Matrix::zeros(p.wview.rows(), p.wview.cols());
        let dmem = model.decode_backward(&p.dec, &p.memory, &p.prefix, &p.wview, &p.dlogits, &mut dwview, grads)?;
        p.view
            .scatter_grad(&model.params, &dwview, grads, !model.embedding.st_frozen);
        if let Some(enc) = &p.enc {
            model.encode_backward(enc, dmem, grads)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
