//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Every layer keeps its tensors in a shared [`ParamStore`](crate::params::ParamStore)
//! and is a pure function of that store: `forward` returns the output plus a
//! cache, `backward` consumes the cache and accumulates gradients for
//! trainable parameters only.

pub mod activation;
pub mod attention;
pub mod block;
pub mod linear;
pub mod norm;

pub use attention::{AttentionCache, AttentionMode, MultiHeadAttention, Projection};
pub use block::{CrossAttentionBlock, Mlp, SelfAttentionBlock};
pub use linear::{AdapterSlot, Linear, LinearCache};
pub use norm::{LayerNorm, LayerNormCache};

use crate::tensor::Tensor;

/// Row-wise L2 normalization: returns the normalized vector and the input norm.
pub fn l2_normalize(v: &[f32]) -> (Vec<f32>, f32) {
    let norm = crate::tensor::l2_norm(v);
    (v.iter().map(|x| x / norm).collect(), norm)
}

/// Backward of `y = v/‖v‖`: `dv = (dy − y·(y·dy)) / ‖v‖`.
pub fn l2_normalize_backward(y: &[f32], norm: f32, dy: &[f32]) -> Vec<f32> {
    let proj = crate::tensor::dot(y, dy);
    y.iter().zip(dy).map(|(yi, gi)| (gi - yi * proj) / norm).collect()
}

/// Mean over rows of a `[L × d]` tensor.
pub fn mean_rows(x: &Tensor) -> Vec<f32> {
    let (l, d) = (x.rows(), x.cols());
    let mut out = vec![0.0; d];
    for r in 0..l {
        crate::tensor::axpy(1.0, x.row(r), &mut out);
    }
    let inv = 1.0 / l as f32;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

/// Backward of [`mean_rows`]: broadcasts `dy/L` to every row.
pub fn mean_rows_backward(dy: &[f32], rows: usize) -> Tensor {
    let inv = 1.0 / rows as f32;
    let row: Vec<f32> = dy.iter().map(|g| g * inv).collect();
    let data = row.iter().copied().cycle().take(rows * dy.len()).collect();
    Tensor::new(vec![rows, dy.len()], data).expect("rows > 0")
}
