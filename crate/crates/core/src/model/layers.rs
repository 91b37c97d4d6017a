//! Transformer blocks: forward passes that keep what backward needs.

use crate::error::Result;
use crate::numcore::ops::{
    attention, attention_backward, gelu, gelu_backward, layer_norm, layer_norm_backward, linear,
    linear_backward, AttentionCache, LayerNormCache,
};
use crate::numcore::{Grads, Matrix, ParamId, Real};

use super::Model;

#[derive(Debug, Clone)]
pub(crate) struct LinIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct LnIds {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct AttnIds {
    pub q: LinIds,
    pub k: LinIds,
    pub v: LinIds,
    pub o: LinIds,
}

#[derive(Debug, Clone)]
pub(crate) struct EncLayer {
    pub ln1: LnIds,
    pub attn: AttnIds,
    pub ln2: LnIds,
    pub up: LinIds,
    pub down: LinIds,
}

#[derive(Debug, Clone)]
pub(crate) struct DecLayer {
    pub ln1: LnIds,
    pub self_attn: AttnIds,
    pub ln2: LnIds,
    pub cross: AttnIds,
    pub ln3: LnIds,
    pub up: LinIds,
    pub down: LinIds,
}

pub(crate) struct AttnCache<T: Real> {
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    ctx: Matrix<T>,
    probs: AttentionCache<T>,
}

pub(crate) struct FfnCache<T: Real> {
    x: Matrix<T>,
    pre: Matrix<T>,
    act: Matrix<T>,
}

pub(crate) struct EncLayerCache<T: Real> {
    ln1: LayerNormCache<T>,
    a: Matrix<T>,
    attn: AttnCache<T>,
    ln2: LayerNormCache<T>,
    ffn: FfnCache<T>,
}

pub(crate) struct DecLayerCache<T: Real> {
    ln1: LayerNormCache<T>,
    a: Matrix<T>,
    self_attn: AttnCache<T>,
    ln2: LayerNormCache<T>,
    b: Matrix<T>,
    cross_q: Matrix<T>,
    cross_ctx: Matrix<T>,
    cross_probs: AttentionCache<T>,
    ln3: LayerNormCache<T>,
    ffn: FfnCache<T>,
}

fn push_row<T: Real>(m: &mut Matrix<T>, row: &[T]) {
    let (r, c) = m.shape();
    let mut data = std::mem::replace(m, Matrix::zeros(0, c)).into_vec();
    data.extend_from_slice(row);
    *m = Matrix::from_vec(r + 1, c, data).expect("row width matches");
}

impl<T: Real> Model<T> {
    pub(crate) fn lin(&self, l: &LinIds, x: &Matrix<T>) -> Result<Matrix<T>> {
        linear(x, self.p(l.w), self.p(l.b))
    }

    pub(crate) fn lin_back(&self, l: &LinIds, x: &Matrix<T>, dy: &Matrix<T>, grads: &mut Grads<T>) -> Result<Matrix<T>> {
        let g = linear_backward(x, self.p(l.w), dy)?;
        grads.acc(l.w, &g.dw);
        grads.acc(l.b, &g.db);
        Ok(g.dx)
    }

    pub(crate) fn ln(&self, l: &LnIds, x: &Matrix<T>) -> Result<(Matrix<T>, LayerNormCache<T>)> {
        layer_norm(x, self.p(l.g), self.p(l.b))
    }

    pub(crate) fn ln_back(&self, l: &LnIds, cache: &LayerNormCache<T>, dy: &Matrix<T>, grads: &mut Grads<T>) -> Matrix<T> {
        let g = layer_norm_backward(cache, self.p(l.g), dy);
        grads.acc(l.g, &g.dgain);
        grads.acc(l.b, &g.dbias);
        g.dx
    }

    fn self_attn(&self, ids: &AttnIds, a: &Matrix<T>, causal: bool) -> Result<(Matrix<T>, AttnCache<T>)> {
        let q = self.lin(&ids.q, a)?;
        let k = self.lin(&ids.k, a)?;
        let v = self.lin(&ids.v, a)?;
        let (ctx, probs) = attention(&q, &k, &v, self.config.heads, causal)?;
        let out = self.lin(&ids.o, &ctx)?;
        Ok((out, AttnCache { q, k, v, ctx, probs }))
    }

    fn self_attn_back(&self, ids: &AttnIds, a: &Matrix<T>, c: &AttnCache<T>, dout: &Matrix<T>, grads: &mut Grads<T>) -> Result<Matrix<T>> {
        let dctx = self.lin_back(&ids.o, &c.ctx, dout, grads)?;
        let g = attention_backward(&c.probs, &c.q, &c.k, &c.v, &dctx)?;
        let mut da = self.lin_back(&ids.q, a, &g.dq, grads)?;
        da.add_assign(&self.lin_back(&ids.k, a, &g.dk, grads)?)?;
        da.add_assign(&self.lin_back(&ids.v, a, &g.dv, grads)?)?;
        Ok(da)
    }

    fn ffn(&self, up: &LinIds, down: &LinIds, x: Matrix<T>) -> Result<(Matrix<T>, FfnCache<T>)> {
        let pre = self.lin(up, &x)?;
        let act = gelu(&pre);
        let out = self.lin(down, &act)?;
        Ok((out, FfnCache { x, pre, act }))
    }

    fn ffn_back(&self, up: &LinIds, down: &LinIds, c: &FfnCache<T>, dout: &Matrix<T>, grads: &mut Grads<T>) -> Result<Matrix<T>> {
        let dact = self.lin_back(down, &c.act, dout, grads)?;
        let dpre = gelu_backward(&c.pre, &dact);
        self.lin_back(up, &c.x, &dpre, grads)
    }

    pub(crate) fn enc_layer(&self, l: &EncLayer, h: Matrix<T>) -> Result<(Matrix<T>, EncLayerCache<T>)> {
        let (a, ln1) = self.ln(&l.ln1, &h)?;
        let (sa, attn) = self.self_attn(&l.attn, &a, false)?;
        let h1 = h.add(&sa)?;
        let (b, ln2) = self.ln(&l.ln2, &h1)?;
        let (f, ffn) = self.ffn(&l.up, &l.down, b)?;
        let h2 = h1.add(&f)?;
        Ok((h2, EncLayerCache { ln1, a, attn, ln2, ffn }))
    }

    pub(crate) fn enc_layer_back(&self, l: &EncLayer, c: &EncLayerCache<T>, dh2: Matrix<T>, grads: &mut Grads<T>) -> Result<Matrix<T>> {
        let db = self.ffn_back(&l.up, &l.down, &c.ffn, &dh2, grads)?;
        let mut dh1 = dh2;
        dh1.add_assign(&self.ln_back(&l.ln2, &c.ln2, &db, grads))?;
        let da = self.self_attn_back(&l.attn, &c.a, &c.attn, &dh1, grads)?;
        let mut dh = dh1;
        dh.add_assign(&self.ln_back(&l.ln1, &c.ln1, &da, grads))?;
        Ok(dh)
    }

    pub(crate) fn dec_layer(&self, l: &DecLayer, h: Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<(Matrix<T>, DecLayerCache<T>)> {
        let (a, ln1) = self.ln(&l.ln1, &h)?;
        let (sa, self_attn) = self.self_attn(&l.self_attn, &a, true)?;
        let h1 = h.add(&sa)?;
        let (b, ln2) = self.ln(&l.ln2, &h1)?;
        let cross_q = self.lin(&l.cross.q, &b)?;
        let (cross_ctx, cross_probs) = attention(&cross_q, k, v, self.config.heads, false)?;
        let ca = self.lin(&l.cross.o, &cross_ctx)?;
        let h2 = h1.add(&ca)?;
        let (c, ln3) = self.ln(&l.ln3, &h2)?;
        let (f, ffn) = self.ffn(&l.up, &l.down, c)?;
        let h3 = h2.add(&f)?;
        Ok((
            h3,
            DecLayerCache {
                ln1,
                a,
                self_attn,
                ln2,
                b,
                cross_q,
                cross_ctx,
                cross_probs,
                ln3,
                ffn,
            },
        ))
    }

    /// Returns `(dh, dk, dv)`: gradients for the layer input and for the
    /// cross-attention keys/values.
    pub(crate) fn dec_layer_back(
        &self,
        l: &DecLayer,
        c: &DecLayerCache<T>,
        k: &Matrix<T>,
        v: &Matrix<T>,
        dh3: Matrix<T>,
        grads: &mut Grads<T>,
    ) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
        let dc = self.ffn_back(&l.up, &l.down, &c.ffn, &dh3, grads)?;
        let mut dh2 = dh3;
        dh2.add_assign(&self.ln_back(&l.ln3, &c.ln3, &dc, grads))?;

        let dctx = self.lin_back(&l.cross.o, &c.cross_ctx, &dh2, grads)?;
        let g = attention_backward(&c.cross_probs, &c.cross_q, k, v, &dctx)?;
        let db = self.lin_back(&l.cross.q, &c.b, &g.dq, grads)?;
        let mut dh1 = dh2;
        dh1.add_assign(&self.ln_back(&l.ln2, &c.ln2, &db, grads))?;

        let da = self.self_attn_back(&l.self_attn, &c.a, &c.self_attn, &dh1, grads)?;
        let mut dh = dh1;
        dh.add_assign(&self.ln_back(&l.ln1, &c.ln1, &da, grads))?;
        Ok((dh, g.dk, g.dv))
    }

    /// One-position decoder layer against cached self-attention keys/values.
    pub(crate) fn dec_layer_step(
        &self,
        l: &DecLayer,
        h: Matrix<T>,
        keys: &mut Matrix<T>,
        values: &mut Matrix<T>,
        cross: &(Matrix<T>, Matrix<T>),
    ) -> Result<Matrix<T>> {
        let heads = self.config.heads;
        let (a, _) = self.ln(&l.ln1, &h)?;
        let q = self.lin(&l.self_attn.q, &a)?;
        push_row(keys, self.lin(&l.self_attn.k, &a)?.data());
        push_row(values, self.lin(&l.self_attn.v, &a)?.data());
        let (ctx, _) = attention(&q, keys, values, heads, false)?;
        let h1 = h.add(&self.lin(&l.self_attn.o, &ctx)?)?;
        let (b, _) = self.ln(&l.ln2, &h1)?;
        let cq = self.lin(&l.cross.q, &b)?;
        let (cctx, _) = attention(&cq, &cross.0, &cross.1, heads, false)?;
        let h2 = h1.add(&self.lin(&l.cross.o, &cctx)?)?;
        let (c, _) = self.ln(&l.ln3, &h2)?;
        let f = self.lin(&l.down, &gelu(&self.lin(&l.up, &c)?))?;
        h2.add(&f)
    }
}
