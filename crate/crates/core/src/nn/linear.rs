use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};
use crate::tensor::{self, Tensor};

/// Low-rank adapter parameters wired into a [`Linear`]. The tensors live in
/// the shared [`ParamStore`] under `{target}.lora_a` / `{target}.lora_b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSlot {
    pub a_key: String,
    pub b_key: String,
    pub rank: usize,
    pub alpha: f32,
}

impl AdapterSlot {
    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }
}

/// `y = x·Wᵀ + b`, plus `(alpha/r)·(x·Aᵀ)·Bᵀ` when an adapter is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub weight_key: String,
    pub bias_key: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub adapter: Option<AdapterSlot>,
}

#[derive(Debug, Clone)]
pub struct LinearCache {
    x: Tensor,
    /// `x·Aᵀ`, kept for the adapter backward.
    ax: Option<Vec<f32>>,
}

impl Linear {
    /// Registers `{name}.weight` (and `{name}.bias`) with the given init std.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f32,
        rng: &mut R,
    ) -> Result<Self> {
        let weight_key = format!("{name}.weight");
        store.insert(&weight_key, Tensor::randn(&[out_dim, in_dim], std, rng), true)?;
        let bias_key = if bias {
            let k = format!("{name}.bias");
            store.insert(&k, Tensor::zeros(&[out_dim]), true)?;
            Some(k)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            weight_key,
            bias_key,
            in_dim,
            out_dim,
            adapter: None,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, LinearCache)> {
        x.ensure_matrix(&self.name, self.in_dim)?;
        let rows = x.rows();
        let w = store.get(&self.weight_key);
        let mut y = tensor::matmul_nt(x.data(), w.data(), rows, self.in_dim, self.out_dim);
        if let Some(bk) = &self.bias_key {
            let b = store.get(bk).data();
            for r in 0..rows {
                for (yv, bv) in y[r * self.out_dim..(r + 1) * self.out_dim].iter_mut().zip(b) {
                    *yv += bv;
                }
            }
        }
        let ax = match &self.adapter {
            Some(slot) => {
                let a = store.get(&slot.a_key);
                let b = store.get(&slot.b_key);
                let ax = tensor::matmul_nt(x.data(), a.data(), rows, self.in_dim, slot.rank);
                let delta = tensor::matmul_nt(&ax, b.data(), rows, slot.rank, self.out_dim);
                let s = slot.scaling();
                for (yv, dv) in y.iter_mut().zip(&delta) {
                    *yv += s * dv;
                }
                Some(ax)
            }
            None => None,
        };
        let y = Tensor::new(vec![rows, self.out_dim], y)?;
        Ok((y, LinearCache { x: x.clone(), ax }))
    }

    /// Forward without recording a cache.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.forward(store, x).map(|(y, _)| y)
    }

    /// Accumulates parameter gradients for trainable tensors and returns `dL/dx`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &LinearCache,
        dy: &Tensor,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        dy.ensure_matrix(&self.name, self.out_dim)?;
        let rows = cache.x.rows();
        if dy.rows() != rows {
            return Err(Error::dim(&self.name, &[rows, self.out_dim], dy.shape()));
        }
        let x = cache.x.data();
        let w = store.get(&self.weight_key);

        if store.is_trainable(&self.weight_key) {
            let g = grads.entry(&self.weight_key, w.shape());
            tensor::matmul_tn_acc(dy.data(), x, rows, self.out_dim, self.in_dim, g.data_mut());
        }
        if let Some(bk) = &self.bias_key {
            if store.is_trainable(bk) {
                let g = grads.entry(bk, &[self.out_dim]);
                for r in 0..rows {
                    tensor::axpy(1.0, &dy.data()[r * self.out_dim..(r + 1) * self.out_dim], g.data_mut());
                }
            }
        }

        let mut dx = tensor::matmul(dy.data(), w.data(), rows, self.out_dim, self.in_dim);

        if let (Some(slot), Some(ax)) = (&self.adapter, &cache.ax) {
            let s = slot.scaling();
            let a = store.get(&slot.a_key);
            let b = store.get(&slot.b_key);
            if store.is_trainable(&slot.b_key) {
                let g = grads.entry(&slot.b_key, b.shape());
                let mut gb = tensor::matmul_tn(dy.data(), ax, rows, self.out_dim, slot.rank);
                for (gv, v) in g.data_mut().iter_mut().zip(gb.iter_mut()) {
                    *gv += s * *v;
                }
            }
            // dh = s·dy·B  [rows × r]
            let mut dh = tensor::matmul(dy.data(), b.data(), rows, self.out_dim, slot.rank);
            for v in &mut dh {
                *v *= s;
            }
            if store.is_trainable(&slot.a_key) {
                let g = grads.entry(&slot.a_key, a.shape());
                tensor::matmul_tn_acc(&dh, x, rows, slot.rank, self.in_dim, g.data_mut());
            }
            let dxa = tensor::matmul(&dh, a.data(), rows, slot.rank, self.in_dim);
            for (d, v) in dx.iter_mut().zip(&dxa) {
                *d += v;
            }
        }
        Tensor::new(vec![rows, self.in_dim], dx)
    }

    /// Parameter names owned by the base projection (not the adapter).
    pub fn base_keys(&self) -> Vec<&str> {
        let mut keys = vec![self.weight_key.as_str()];
        if let Some(b) = &self.bias_key {
            keys.push(b.as_str());
        }
        keys
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(store: &mut ParamStore, w: Tensor, b: Option<Tensor>) -> Linear {
        let (out_dim, in_dim) = (w.rows(), w.cols());
        store.insert("fc.weight", w, true).unwrap();
        let bias_key = b.map(|b| {
            store.insert("fc.bias", b, true).unwrap();
            "fc.bias".to_string()
        });
        Linear {
            name: "fc".into(),
            weight_key: "fc.weight".into(),
            bias_key,
            in_dim,
            out_dim,
            adapter: None,
        }
    }

    #[test]
    fn identity_weight_passes_input_through() {
        let mut store = ParamStore::new();
        let fc = layer(&mut store, Tensor::eye(2), Some(Tensor::zeros(&[2])));
        let y = fc.apply(&store, &Tensor::from_rows(&[&[3.0, 4.0]])).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn hand_multiplied_example() {
        let mut store = ParamStore::new();
        let w = Tensor::from_rows(&[&[1.0, 1.0], &[1.0, -1.0]]);
        let fc = layer(&mut store, w, Some(Tensor::vector(&[0.5, 0.0])));
        let y = fc.apply(&store, &Tensor::from_rows(&[&[2.0, 1.0]])).unwrap();
        // [2+1+0.5, 2-1+0]
        assert_eq!(y.data(), &[3.5, 1.0]);
    }

    #[test]
    fn zero_weight_yields_bias_per_row() {
        let mut store = ParamStore::new();
        let fc = layer(&mut store, Tensor::zeros(&[1, 3]), Some(Tensor::vector(&[7.0])));
        let x = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[-4.0, 5.0, 0.5]]);
        let y = fc.apply(&store, &x).unwrap();
        assert_eq!(y.data(), &[7.0, 7.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut store = ParamStore::new();
        let fc = layer(&mut store, Tensor::eye(2), None);
        let err = fc.apply(&store, &Tensor::from_rows(&[&[1.0, 2.0, 3.0]])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[1, 3]"), "{msg}");
    }

    #[test]
    fn sum_loss_gradient_is_broadcast_input() {
        // loss = sum(x·Wᵀ) → dL/dW[o][i] = x[i] for every output row o.
        let mut store = ParamStore::new();
        let fc = layer(&mut store, Tensor::from_rows(&[&[0.3, -0.2], &[0.1, 0.9], &[2.0, 1.0]]), None);
        let x = Tensor::from_rows(&[&[1.5, -2.5]]);
        let (y, cache) = fc.forward(&store, &x).unwrap();
        let mut grads = Grads::new();
        fc.backward(&store, &cache, &Tensor::filled(y.shape(), 1.0), &mut grads).unwrap();
        assert_eq!(grads.get("fc.weight").unwrap().data(), &[1.5, -2.5, 1.5, -2.5, 1.5, -2.5]);
    }

    #[test]
    fn frozen_weight_receives_no_gradient() {
        let mut store = ParamStore::new();
        let fc = layer(&mut store, Tensor::eye(2), Some(Tensor::zeros(&[2])));
        store.set_trainable("fc.weight", false);
        let x = Tensor::from_rows(&[&[1.0, 2.0]]);
        let (y, cache) = fc.forward(&store, &x).unwrap();
        let mut grads = Grads::new();
        let dx = fc.backward(&store, &cache, &Tensor::filled(y.shape(), 1.0), &mut grads).unwrap();
        assert!(!grads.contains("fc.weight"));
        assert!(grads.contains("fc.bias"));
        assert_eq!(dx.data(), &[1.0, 1.0]);
    }
}
