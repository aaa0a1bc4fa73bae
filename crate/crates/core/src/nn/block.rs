//! Pre-norm residual blocks built from attention and a GELU MLP.

use rand::Rng;

use super::activation::{gelu_backward, gelu_forward};
use super::attention::{AttentionCache, AttentionMode, MultiHeadAttention};
use super::linear::{Linear, LinearCache};
use super::norm::{LayerNorm, LayerNormCache};
use crate::error::Result;
use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    c1: LinearCache,
    pre: Tensor,
    c2: LinearCache,
}

impl Mlp {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::register(store, &format!("{name}.fc1"), dim, hidden, true, 1.0 / (dim as f32).sqrt(), rng)?,
            fc2: Linear::register(store, &format!("{name}.fc2"), hidden, dim, true, 1.0 / (hidden as f32).sqrt(), rng)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        let (pre, c1) = self.fc1.forward(store, x)?;
        let act = gelu_forward(&pre);
        let (y, c2) = self.fc2.forward(store, &act)?;
        Ok((y, MlpCache { c1, pre, c2 }))
    }

    pub fn backward(&self, store: &ParamStore, cache: &MlpCache, dy: &Tensor, grads: &mut Grads) -> Result<Tensor> {
        let dact = self.fc2.backward(store, &cache.c2, dy, grads)?;
        let dpre = gelu_backward(&cache.pre, &dact);
        self.fc1.backward(store, &cache.c1, &dpre, grads)
    }
}

/// `h = x + Attn(LN₁(x)); y = h + MLP(LN₂(h))`
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct SelfBlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    mlp: MlpCache,
}

impl SelfAttentionBlock {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::register(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::register(store, name, AttentionMode::SelfAttention, dim, heads, rng)?,
            ln2: LayerNorm::register(store, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::register(store, &format!("{name}.mlp"), dim, hidden, rng)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, SelfBlockCache)> {
        let (n1, ln1) = self.ln1.forward(store, x)?;
        let (a, attn) = self.attn.forward(store, &n1, &n1)?;
        let mut h = x.clone();
        h.add_assign(&a);
        let (n2, ln2) = self.ln2.forward(store, &h)?;
        let (m, mlp) = self.mlp.forward(store, &n2)?;
        h.add_assign(&m);
        Ok((h, SelfBlockCache { ln1, attn, ln2, mlp }))
    }

    pub fn backward(&self, store: &ParamStore, cache: &SelfBlockCache, dy: &Tensor, grads: &mut Grads) -> Result<Tensor> {
        let dn2 = self.mlp.backward(store, &cache.mlp, dy, grads)?;
        let mut dh = self.ln2.backward(store, &cache.ln2, &dn2, grads)?;
        dh.add_assign(dy);
        let (dq, dkv) = self.attn.backward(store, &cache.attn, &dh, grads)?;
        let mut dn1 = dq;
        dn1.add_assign(&dkv);
        let mut dx = self.ln1.backward(store, &cache.ln1, &dn1, grads)?;
        dx.add_assign(&dh);
        Ok(dx)
    }
}

/// `h = q + Attn(LN_q(q), LN_kv(kv)); y = h + MLP(LN₂(h))`
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionBlock {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct CrossBlockCache {
    ln_q: LayerNormCache,
    ln_kv: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    mlp: MlpCache,
}

impl CrossAttentionBlock {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln_q: LayerNorm::register(store, &format!("{name}.ln_q"), dim)?,
            ln_kv: LayerNorm::register(store, &format!("{name}.ln_kv"), dim)?,
            attn: MultiHeadAttention::register(store, name, AttentionMode::Cross, dim, heads, rng)?,
            ln2: LayerNorm::register(store, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::register(store, &format!("{name}.mlp"), dim, hidden, rng)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, q: &Tensor, kv: &Tensor) -> Result<(Tensor, CrossBlockCache)> {
        let (nq, ln_q) = self.ln_q.forward(store, q)?;
        let (nkv, ln_kv) = self.ln_kv.forward(store, kv)?;
        let (a, attn) = self.attn.forward(store, &nq, &nkv)?;
        let mut h = q.clone();
        h.add_assign(&a);
        let (n2, ln2) = self.ln2.forward(store, &h)?;
        let (m, mlp) = self.mlp.forward(store, &n2)?;
        h.add_assign(&m);
        Ok((h, CrossBlockCache { ln_q, ln_kv, attn, ln2, mlp }))
    }

    /// Returns `(dL/dq, dL/dkv)`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &CrossBlockCache,
        dy: &Tensor,
        grads: &mut Grads,
    ) -> Result<(Tensor, Tensor)> {
        let dn2 = self.mlp.backward(store, &cache.mlp, dy, grads)?;
        let mut dh = self.ln2.backward(store, &cache.ln2, &dn2, grads)?;
        dh.add_assign(dy);
        let (dnq, dnkv) = self.attn.backward(store, &cache.attn, &dh, grads)?;
        let mut dq = self.ln_q.backward(store, &cache.ln_q, &dnq, grads)?;
        dq.add_assign(&dh);
        let dkv = self.ln_kv.backward(store, &cache.ln_kv, &dnkv, grads)?;
        Ok((dq, dkv))
    }
}
