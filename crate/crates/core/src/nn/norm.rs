use crate::error::Result;
use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Per-row layer normalization with learnable gain and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub name: String,
    pub gamma_key: String,
    pub beta_key: String,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    rows: usize,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma_key = format!("{name}.weight");
        let beta_key = format!("{name}.bias");
        store.insert(&gamma_key, Tensor::filled(&[dim], 1.0), true)?;
        store.insert(&beta_key, Tensor::zeros(&[dim]), true)?;
        Ok(Self {
            name: name.to_string(),
            gamma_key,
            beta_key,
            dim,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        x.ensure_matrix(&self.name, self.dim)?;
        let rows = x.rows();
        let d = self.dim;
        let gamma = store.get(&self.gamma_key).data();
        let beta = store.get(&self.beta_key).data();
        let mut y = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().map(|v| f64::from(*v)).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (f64::from(*v) - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + f64::from(LAYER_NORM_EPS)).sqrt();
            inv_std[r] = is as f32;
            for c in 0..d {
                let h = (f64::from(row[c]) - mean) * is;
                xhat[r * d + c] = h as f32;
                y[r * d + c] = (f64::from(gamma[c]) * h + f64::from(beta[c])) as f32;
            }
        }
        Ok((
            Tensor::new(vec![rows, d], y)?,
            LayerNormCache { xhat, inv_std, rows },
        ))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &LayerNormCache,
        dy: &Tensor,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        dy.ensure_matrix(&self.name, self.dim)?;
        let d = self.dim;
        let gamma = store.get(&self.gamma_key).data();
        if store.is_trainable(&self.gamma_key) {
            let g = grads.entry(&self.gamma_key, &[d]).data_mut();
            for (dyr, xh) in dy.data().chunks_exact(d).zip(cache.xhat.chunks_exact(d)) {
                for ((gc, &dv), &xv) in g.iter_mut().zip(dyr).zip(xh) {
                    *gc += dv * xv;
                }
            }
        }
        if store.is_trainable(&self.beta_key) {
            let g = grads.entry(&self.beta_key, &[d]).data_mut();
            for dyr in dy.data().chunks_exact(d) {
                for (gc, &dv) in g.iter_mut().zip(dyr) {
                    *gc += dv;
                }
            }
        }
        let mut dx = vec![0.0; cache.rows * d];
        for r in 0..cache.rows {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let dyr = &dy.data()[r * d..(r + 1) * d];
            let mut mean_dxh = 0.0;
            let mut mean_dxh_xh = 0.0;
            for c in 0..d {
                let dxh = dyr[c] * gamma[c];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[c];
            }
            mean_dxh /= d as f32;
            mean_dxh_xh /= d as f32;
            for c in 0..d {
                let dxh = dyr[c] * gamma[c];
                dx[r * d + c] = cache.inv_std[r] * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
            }
        }
        Tensor::new(vec![cache.rows, d], dx)
    }
}
