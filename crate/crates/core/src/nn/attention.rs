//! Multi-head scaled dot-product attention in self and cross modes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linear::{Linear, LinearCache};
use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionMode {
    /// Queries, keys and values come from one sequence.
    #[serde(rename = "self")]
    SelfAttention,
    /// Queries from one sequence, keys/values from another.
    #[serde(rename = "cross")]
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];

    pub fn suffix(self) -> &'static str {
        match self {
            Projection::Q => "q_proj",
            Projection::K => "k_proj",
            Projection::V => "v_proj",
            Projection::O => "o_proj",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub name: String,
    pub mode: AttentionMode,
    pub num_heads: usize,
    pub dim: usize,
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub o_proj: Linear,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    cq: LinearCache,
    ck: LinearCache,
    cv: LinearCache,
    co: LinearCache,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Softmax probabilities, `[heads × Lq × Lk]`.
    probs: Vec<f32>,
}

impl MultiHeadAttention {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        mode: AttentionMode,
        dim: usize,
        num_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_heads == 0 || !dim.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "model dim {dim} is not divisible by {num_heads} heads"
            )));
        }
        let std = 1.0 / (dim as f32).sqrt();
        // A key bias shifts every score in a row equally, so softmax cancels it.
        let mut proj = |p: Projection, rng: &mut R| {
            Linear::register(store, &format!("{name}.{}", p.suffix()), dim, dim, p != Projection::K, std, rng)
        };
        Ok(Self {
            name: name.to_string(),
            mode,
            num_heads,
            dim,
            q_proj: proj(Projection::Q, rng)?,
            k_proj: proj(Projection::K, rng)?,
            v_proj: proj(Projection::V, rng)?,
            o_proj: proj(Projection::O, rng)?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }

    pub fn projection(&self, p: Projection) -> &Linear {
        match p {
            Projection::Q => &self.q_proj,
            Projection::K => &self.k_proj,
            Projection::V => &self.v_proj,
            Projection::O => &self.o_proj,
        }
    }

    pub fn projection_mut(&mut self, p: Projection) -> &mut Linear {
        match p {
            Projection::Q => &mut self.q_proj,
            Projection::K => &mut self.k_proj,
            Projection::V => &mut self.v_proj,
            Projection::O => &mut self.o_proj,
        }
    }

    /// `softmax(Q·Kᵀ/√dₕ)·V` per head, heads concatenated, then `o_proj`.
    /// In self mode callers pass the same sequence twice.
    pub fn forward(
        &self,
        store: &ParamStore,
        q_in: &Tensor,
        kv_in: &Tensor,
    ) -> Result<(Tensor, AttentionCache)> {
        q_in.ensure_matrix(&self.name, self.dim)?;
        kv_in.ensure_matrix(&self.name, self.dim)?;
        let (lq, lk, d, dh) = (q_in.rows(), kv_in.rows(), self.dim, self.head_dim());
        if lk == 0 {
            return Err(Error::EmptySequence);
        }
        let (q, cq) = self.q_proj.forward(store, q_in)?;
        let (k, ck) = self.k_proj.forward(store, kv_in)?;
        let (v, cv) = self.v_proj.forward(store, kv_in)?;
        let scale = 1.0 / (dh as f32).sqrt();

        let mut probs = vec![0.0; self.num_heads * lq * lk];
        let mut ctx = vec![0.0; lq * d];
        for h in 0..self.num_heads {
            let off = h * dh;
            for i in 0..lq {
                let qi = &q.data()[i * d + off..i * d + off + dh];
                let p = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = tensor::dot(qi, &k.data()[j * d + off..j * d + off + dh]) * scale;
                }
                tensor::softmax_in_place(p);
                let out = &mut ctx[i * d + off..i * d + off + dh];
                for (j, &pj) in p.iter().enumerate() {
                    tensor::axpy(pj, &v.data()[j * d + off..j * d + off + dh], out);
                }
            }
        }
        let ctx = Tensor::new(vec![lq, d], ctx)?;
        let (out, co) = self.o_proj.forward(store, &ctx)?;
        Ok((
            out,
            AttentionCache {
                cq,
                ck,
                cv,
                co,
                q,
                k,
                v,
                probs,
            },
        ))
    }

    /// Softmax matrix of the last forward pass for head `h`, `[Lq × Lk]` row-major.
    pub fn probabilities<'c>(&self, cache: &'c AttentionCache, h: usize) -> &'c [f32] {
        let (lq, lk) = (cache.q.rows(), cache.k.rows());
        &cache.probs[h * lq * lk..(h + 1) * lq * lk]
    }

    /// Returns `(dL/dq_in, dL/dkv_in)`. For self attention the caller sums them.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &AttentionCache,
        dout: &Tensor,
        grads: &mut Grads,
    ) -> Result<(Tensor, Tensor)> {
        let (lq, lk, d, dh) = (cache.q.rows(), cache.k.rows(), self.dim, self.head_dim());
        let scale = 1.0 / (dh as f32).sqrt();
        let dctx = self.o_proj.backward(store, &cache.co, dout, grads)?;
        let (q, k, v) = (cache.q.data(), cache.k.data(), cache.v.data());

        let mut dq = vec![0.0; lq * d];
        let mut dk = vec![0.0; lk * d];
        let mut dv = vec![0.0; lk * d];
        let mut dp = vec![0.0; lk];
        for h in 0..self.num_heads {
            let off = h * dh;
            for i in 0..lq {
                let p = &cache.probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                let dctx_i = &dctx.data()[i * d + off..i * d + off + dh];
                let mut weighted = 0.0;
                for j in 0..lk {
                    dp[j] = tensor::dot(dctx_i, &v[j * d + off..j * d + off + dh]);
                    weighted += dp[j] * p[j];
                    tensor::axpy(p[j], dctx_i, &mut dv[j * d + off..j * d + off + dh]);
                }
                for j in 0..lk {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    tensor::axpy(ds, &k[j * d + off..j * d + off + dh], &mut dq[i * d + off..i * d + off + dh]);
                    tensor::axpy(ds, &q[i * d + off..i * d + off + dh], &mut dk[j * d + off..j * d + off + dh]);
                }
            }
        }
        let dq = Tensor::new(vec![lq, d], dq)?;
        let dk = Tensor::new(vec![lk, d], dk)?;
        let dv = Tensor::new(vec![lk, d], dv)?;
        let dq_in = self.q_proj.backward(store, &cache.cq, &dq, grads)?;
        let mut dkv_in = self.k_proj.backward(store, &cache.ck, &dk, grads)?;
        dkv_in.add_assign(&self.v_proj.backward(store, &cache.cv, &dv, grads)?);
        Ok((dq_in, dkv_in))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_block(dim: usize, heads: usize, mode: AttentionMode) -> (ParamStore, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = MultiHeadAttention::register(&mut store, "attn", mode, dim, heads, &mut rng).unwrap();
        for p in Projection::ALL {
            *store.get_mut(&format!("attn.{}.weight", p.suffix())).unwrap() = Tensor::eye(dim);
        }
        (store, block)
    }

    #[test]
    fn single_key_returns_value() {
        let (store, block) = identity_block(2, 1, AttentionMode::SelfAttention);
        let x = Tensor::from_rows(&[&[1.0, 0.0]]);
        let (y, _) = block.forward(&store, &x, &x).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn equal_values_give_that_value() {
        let (mut store, block) = identity_block(2, 1, AttentionMode::Cross);
        // Keys differ, values are forced equal by zeroing v_proj's weight and using its bias.
        *store.get_mut("attn.v_proj.weight").unwrap() = Tensor::zeros(&[2, 2]);
        *store.get_mut("attn.v_proj.bias").unwrap() = Tensor::vector(&[2.0, 2.0]);
        let q = Tensor::from_rows(&[&[0.3, -1.2]]);
        let kv = Tensor::from_rows(&[&[1.0, 0.5], &[-0.7, 2.0]]);
        let (y, _) = block.forward(&store, &q, &kv).unwrap();
        for v in y.data() {
            assert!((v - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn two_token_case_matches_scalar_formula() {
        let (store, block) = identity_block(2, 1, AttentionMode::SelfAttention);
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[-0.5, 0.25]]);
        let (y, _) = block.forward(&store, &x, &x).unwrap();
        let rows = [[1.0f64, 2.0], [-0.5, 0.25]];
        let scale = 1.0 / 2f64.sqrt();
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| (rows[i][0] * rows[j][0] + rows[i][1] * rows[j][1]) * scale)
                .collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for c in 0..2 {
                let expected: f64 = s.iter().zip(&rows).map(|(sj, row)| sj.exp() / z * row[c]).sum();
                assert!((y.data()[i * 2 + c] as f64 - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn probability_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = MultiHeadAttention::register(&mut store, "a", AttentionMode::Cross, 8, 2, &mut rng).unwrap();
        let q = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let kv = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let (_, cache) = block.forward(&store, &q, &kv).unwrap();
        for h in 0..2 {
            for row in block.probabilities(&cache, h).chunks(5) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn empty_keys_are_rejected() {
        let (store, block) = identity_block(2, 1, AttentionMode::Cross);
        let q = Tensor::from_rows(&[&[1.0, 0.0]]);
        let err = block.forward(&store, &q, &Tensor::zeros(&[0, 2])).unwrap_err();
        assert!(matches!(err, Error::EmptySequence));
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MultiHeadAttention::register(&mut store, "a", AttentionMode::SelfAttention, 6, 4, &mut rng).is_err());
    }
}
