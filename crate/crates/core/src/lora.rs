//! Low-rank adapters on attention projections.
//!
//! An adapter on a projection `W [out × in]` adds `(alpha/r)·B·A` with
//! `A [r × in]` drawn from N(0, 0.02²) and `B [out × r]` zero, so a fresh
//! adapter leaves every output unchanged. Injection freezes the whole base
//! model; only `A`, `B` and the logit scale stay trainable.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::nn::{AdapterSlot, AttentionMode, Linear, Projection};
use crate::tensor::{self, Tensor};

pub const DEFAULT_RANK: usize = 4;
pub const DEFAULT_ALPHA: f32 = 8.0;
pub const A_INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTargets {
    #[serde(rename = "self")]
    SelfAttention,
    #[serde(rename = "cross")]
    CrossAttention,
    Both,
}

impl LoraTargets {
    pub const ALL: [LoraTargets; 3] = [LoraTargets::SelfAttention, LoraTargets::CrossAttention, LoraTargets::Both];

    pub fn includes(self, mode: AttentionMode) -> bool {
        matches!(
            (self, mode),
            (LoraTargets::Both, _)
                | (LoraTargets::SelfAttention, AttentionMode::SelfAttention)
                | (LoraTargets::CrossAttention, AttentionMode::Cross)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LoraTargets::SelfAttention => "self",
            LoraTargets::CrossAttention => "cross",
            LoraTargets::Both => "both",
        }
    }
}

impl fmt::Display for LoraTargets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LoraTargets {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" | "self_attention" => Ok(LoraTargets::SelfAttention),
            "cross" | "cross_attention" => Ok(LoraTargets::CrossAttention),
            "both" => Ok(LoraTargets::Both),
            other => Err(Error::Config(format!("unknown LoRA target set {other:?} (self, cross, both)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub targets: LoraTargets,
    pub rank: usize,
    pub alpha: f32,
    pub projections: BTreeSet<Projection>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            targets: LoraTargets::Both,
            rank: DEFAULT_RANK,
            alpha: DEFAULT_ALPHA,
            projections: Projection::ALL.into_iter().collect(),
        }
    }
}

impl LoraConfig {
    pub fn with_targets(targets: LoraTargets) -> Self {
        Self {
            targets,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("LoRA alpha {} must be positive", self.alpha)));
        }
        if self.projections.is_empty() {
            return Err(Error::Config("LoRA needs at least one projection".into()));
        }
        Ok(())
    }
}

/// A detached adapter: what `merge` folds into the base and `unmerge` takes back out.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f32,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn num_params(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// `(alpha/r)·B·A`, `[out × in]`.
    pub fn delta(&self) -> Tensor {
        let (out, r, inp) = (self.b.rows(), self.rank, self.a.cols());
        let mut d = tensor::matmul(self.b.data(), self.a.data(), out, r, inp);
        let s = self.scaling();
        d.iter_mut().for_each(|v| *v *= s);
        Tensor::new(vec![out, inp], d).expect("shape from operands")
    }
}

/// Adapter descriptor stored alongside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub target: String,
    pub rank: usize,
    pub alpha: f32,
}

/// Names of the projections `cfg` selects, in model order.
pub fn target_names(model: &EncoderModel, cfg: &LoraConfig) -> Vec<String> {
    model
        .attention_blocks()
        .filter(|a| cfg.targets.includes(a.mode))
        .flat_map(|a| {
            Projection::ALL
                .into_iter()
                .filter(|p| cfg.projections.contains(p))
                .map(|p| a.projection(p).name.clone())
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Trainable scalars `cfg` would add: `Σ r·(in + out)` over selected projections.
pub fn count_params(model: &EncoderModel, cfg: &LoraConfig) -> usize {
    model
        .attention_blocks()
        .filter(|a| cfg.targets.includes(a.mode))
        .flat_map(|a| Projection::ALL.into_iter().filter(|p| cfg.projections.contains(p)).map(move |p| a.projection(p)))
        .map(|l| cfg.rank * (l.in_dim + l.out_dim))
        .sum()
}

fn find_linear_mut<'m>(model: &'m mut EncoderModel, target: &str) -> Option<&'m mut Linear> {
    model
        .attention_blocks_mut()
        .flat_map(|a| {
            let [q, k, v, o] = [&mut a.q_proj, &mut a.k_proj, &mut a.v_proj, &mut a.o_proj];
            [q, k, v, o]
        })
        .find(|l| l.name == target)
}

impl EncoderModel {
    pub fn adapters(&self) -> Vec<AdapterSpec> {
        self.attention_blocks()
            .flat_map(|a| Projection::ALL.into_iter().map(move |p| a.projection(p)))
            .filter_map(|l| {
                l.adapter.as_ref().map(|s| AdapterSpec {
                    target: l.name.clone(),
                    rank: s.rank,
                    alpha: s.alpha,
                })
            })
            .collect()
    }

    pub fn has_adapters(&self) -> bool {
        !self.adapters().is_empty()
    }

    /// Copy with every adapter detached and unmerged (the base model).
    pub fn without_adapters(&self) -> EncoderModel {
        let mut base = self.clone();
        let names: Vec<String> = base.adapters().into_iter().map(|s| s.target).collect();
        for name in names {
            let slot = find_linear_mut(&mut base, &name).and_then(|l| l.adapter.take());
            if let Some(slot) = slot {
                base.params.remove(&slot.a_key);
                base.params.remove(&slot.b_key);
            }
        }
        base
    }

    /// Attaches zero-delta adapters to the projections selected by `cfg`
    /// and freezes every base parameter.
    pub fn inject_lora(&mut self, cfg: &LoraConfig, seed: u64) -> Result<usize> {
        cfg.validate()?;
        let targets = target_names(self, cfg);
        for t in &targets {
            let l = find_linear_mut(self, t).expect("target from model");
            if l.adapter.is_some() {
                return Err(Error::Conflict(t.clone()));
            }
            if cfg.rank > l.in_dim.min(l.out_dim) {
                return Err(Error::Config(format!(
                    "rank {} exceeds min(in, out) = {} for {t}",
                    cfg.rank,
                    l.in_dim.min(l.out_dim)
                )));
            }
        }
        self.params.freeze_all();
        let logit = self.logit_scale_key().to_string();
        self.params.set_trainable(&logit, true);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &targets {
            let (in_dim, out_dim) = {
                let l = find_linear_mut(self, t).expect("target from model");
                (l.in_dim, l.out_dim)
            };
            let adapter = LoraAdapter {
                target: t.clone(),
                a: Tensor::randn(&[cfg.rank, in_dim], A_INIT_STD, &mut rng),
                b: Tensor::zeros(&[out_dim, cfg.rank]),
                rank: cfg.rank,
                alpha: cfg.alpha,
            };
            self.attach(adapter, true)?;
        }
        Ok(targets.len())
    }

    fn attach(&mut self, adapter: LoraAdapter, trainable: bool) -> Result<()> {
        let a_key = format!("{}.lora_a", adapter.target);
        let b_key = format!("{}.lora_b", adapter.target);
        let l = find_linear_mut(self, &adapter.target)
            .ok_or_else(|| Error::Config(format!("no projection named {}", adapter.target)))?;
        if l.adapter.is_some() {
            return Err(Error::Conflict(adapter.target));
        }
        if adapter.a.shape() != [adapter.rank, l.in_dim] || adapter.b.shape() != [l.out_dim, adapter.rank] {
            return Err(Error::dim(
                format!("adapter for {}", adapter.target),
                &[l.out_dim, adapter.rank, l.in_dim],
                &[adapter.b.rows(), adapter.a.rows(), adapter.a.cols()],
            ));
        }
        l.adapter = Some(AdapterSlot {
            a_key: a_key.clone(),
            b_key: b_key.clone(),
            rank: adapter.rank,
            alpha: adapter.alpha,
        });
        self.params.insert(a_key, adapter.a, trainable)?;
        self.params.insert(b_key, adapter.b, trainable)?;
        Ok(())
    }

    /// Folds every adapter into its base weight and detaches it.
    /// Returns the detached adapters so [`EncoderModel::unmerge_lora`] can undo it.
    pub fn merge_lora(&mut self) -> Result<Vec<LoraAdapter>> {
        let specs = self.adapters();
        if specs.is_empty() {
            return Err(Error::State("no adapters to merge".into()));
        }
        let mut merged = Vec::with_capacity(specs.len());
        for spec in specs {
            let l = find_linear_mut(self, &spec.target).expect("adapter target");
            let slot = l.adapter.take().expect("spec lists attached adapters");
            let weight_key = l.weight_key.clone();
            let a = self.params.remove(&slot.a_key).expect("adapter a").value;
            let b = self.params.remove(&slot.b_key).expect("adapter b").value;
            let adapter = LoraAdapter {
                target: spec.target,
                a,
                b,
                rank: slot.rank,
                alpha: slot.alpha,
            };
            let delta = adapter.delta();
            self.params.get_mut(&weight_key).expect("weight").add_assign(&delta);
            merged.push(adapter);
        }
        Ok(merged)
    }

    /// Subtracts each adapter's delta from its base weight and re-attaches it.
    pub fn unmerge_lora(&mut self, adapters: &[LoraAdapter]) -> Result<()> {
        for ad in adapters {
            let l = find_linear_mut(self, &ad.target)
                .ok_or_else(|| Error::Config(format!("no projection named {}", ad.target)))?;
            if l.adapter.is_some() {
                return Err(Error::State(format!("{} already has an attached adapter", ad.target)));
            }
            if ad.a.shape() != [ad.rank, l.in_dim] || ad.b.shape() != [l.out_dim, ad.rank] {
                return Err(Error::dim(
                    format!("adapter for {}", ad.target),
                    &[l.out_dim, ad.rank, l.in_dim],
                    &[ad.b.rows(), ad.a.rows(), ad.a.cols()],
                ));
            }
        }
        for ad in adapters {
            let weight_key = find_linear_mut(self, &ad.target).expect("checked").weight_key.clone();
            let mut delta = ad.delta();
            delta.scale_assign(-1.0);
            self.params.get_mut(&weight_key).expect("weight").add_assign(&delta);
            self.attach(ad.clone(), true)?;
        }
        Ok(())
    }

    /// Re-creates adapter slots (with zero tensors) from descriptors; used when loading checkpoints.
    pub fn attach_adapter_specs(&mut self, specs: &[AdapterSpec]) -> Result<()> {
        for s in specs {
            let l = find_linear_mut(self, &s.target)
                .ok_or_else(|| Error::Checkpoint(format!("no projection named {}", s.target)))?;
            let (in_dim, out_dim) = (l.in_dim, l.out_dim);
            self.attach(
                LoraAdapter {
                    target: s.target.clone(),
                    a: Tensor::zeros(&[s.rank, in_dim]),
                    b: Tensor::zeros(&[out_dim, s.rank]),
                    rank: s.rank,
                    alpha: s.alpha,
                },
                true,
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::tokenizer::Tokenizer;

    fn model() -> EncoderModel {
        EncoderModel::new(EncoderConfig::default(), Tokenizer::build(["a b c"], 2048), 1).unwrap()
    }

    #[test]
    fn adapter_counts_over_default_architecture() {
        let m = model();
        let n = |t| target_names(&m, &LoraConfig::with_targets(t)).len();
        assert_eq!(n(LoraTargets::SelfAttention), 16);
        assert_eq!(n(LoraTargets::CrossAttention), 4);
        assert_eq!(n(LoraTargets::Both), 20);
    }

    #[test]
    fn both_is_union_of_self_and_cross() {
        let m = model();
        let names = |t| target_names(&m, &LoraConfig::with_targets(t)).into_iter().collect::<BTreeSet<_>>();
        let union: BTreeSet<_> = names(LoraTargets::SelfAttention)
            .union(&names(LoraTargets::CrossAttention))
            .cloned()
            .collect();
        assert_eq!(names(LoraTargets::Both), union);
        let c = |t| count_params(&m, &LoraConfig::with_targets(t));
        assert_eq!(c(LoraTargets::Both), c(LoraTargets::SelfAttention) + c(LoraTargets::CrossAttention));
        // 20 adapters × r(in+out) = 20 × 4 × 128
        assert_eq!(c(LoraTargets::Both), 10_240);
    }

    #[test]
    fn injection_freezes_base_and_counts_trainables() {
        let mut m = model();
        let cfg = LoraConfig::default();
        m.inject_lora(&cfg, 0).unwrap();
        assert_eq!(m.params().num_trainable_scalars(), count_params(&m, &cfg) + 1);
        assert!(!m.params().is_trainable("text.self.0.q_proj.weight"));
        assert!(m.params().is_trainable("text.self.0.q_proj.lora_a"));
    }

    #[test]
    fn duplicate_injection_conflicts() {
        let mut m = model();
        m.inject_lora(&LoraConfig::with_targets(LoraTargets::CrossAttention), 0).unwrap();
        let err = m.inject_lora(&LoraConfig::with_targets(LoraTargets::Both), 0).unwrap_err();
        assert!(matches!(err, Error::Conflict(_)));
        // Self-only does not touch the fusion block, so it may still be added.
        m.inject_lora(&LoraConfig::with_targets(LoraTargets::SelfAttention), 0).unwrap();
    }

    #[test]
    fn rank_above_min_dim_is_rejected() {
        let mut m = model();
        let cfg = LoraConfig {
            rank: 65,
            ..LoraConfig::default()
        };
        assert!(m.inject_lora(&cfg, 0).is_err());
    }

    #[test]
    fn merging_zero_adapters_keeps_weights_bitwise() {
        let base = model();
        let mut m = base.clone();
        m.inject_lora(&LoraConfig::default(), 3).unwrap();
        m.merge_lora().unwrap();
        for (name, p) in base.params().iter() {
            assert_eq!(m.params().get(name).data(), p.value.data(), "{name}");
        }
    }

    #[test]
    fn unmerge_with_zero_b_changes_nothing_and_double_unmerge_fails() {
        let mut m = model();
        m.inject_lora(&LoraConfig::default(), 3).unwrap();
        let before = m.without_adapters();
        let recorded = m.merge_lora().unwrap();
        m.unmerge_lora(&recorded).unwrap();
        for (name, p) in before.params().iter() {
            assert_eq!(m.params().get(name).data(), p.value.data(), "{name}");
        }
        assert!(matches!(m.unmerge_lora(&recorded), Err(Error::State(_))));
    }

    #[test]
    fn mismatched_adapter_shape_is_a_dimension_error() {
        let mut m = model();
        let bad = LoraAdapter {
            target: "text.self.0.q_proj".into(),
            a: Tensor::zeros(&[4, 10]),
            b: Tensor::zeros(&[64, 4]),
            rank: 4,
            alpha: 8.0,
        };
        assert!(matches!(m.unmerge_lora(&[bad]), Err(Error::Dimension { .. })));
    }
}
