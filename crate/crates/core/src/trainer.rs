//! Symmetric contrastive fine-tuning, top-k retrieval accuracy and the
//! adapter-target ablation.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, SketchPair};
use crate::encoder::{EncoderModel, ImageCache, TextCache, MAX_LOGIT_SCALE};
use crate::error::{Error, Result};
use crate::lora::{LoraConfig, LoraTargets};
use crate::params::Grads;
use crate::tensor::{self, Tensor};

/// The k values tracked per epoch.
pub const TOP_K: [usize; 4] = [1, 5, 10, 25];

/// Which parameters a run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Adapters and the logit scale only; base weights stay frozen.
    #[default]
    Lora,
    /// Every parameter except the conditioning projection.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub seed: u64,
    pub split_ratio: f64,
    pub lora: LoraConfig,
    pub mode: TrainMode,
    /// Also score retrieval on the training set after every epoch.
    #[serde(default)]
    pub track_train_accuracy: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            split_ratio: dataset::DEFAULT_SPLIT_RATIO,
            lora: LoraConfig::default(),
            mode: TrainMode::Lora,
            track_train_accuracy: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size {} leaves no negatives; need at least 2",
                self.batch_size
            )));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split ratio {} must be in (0, 1)", self.split_ratio)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.mode == TrainMode::Lora {
            self.lora.validate()?;
        }
        Ok(())
    }
}

// ----- loss -----------------------------------------------------------------

/// Loss value plus gradients with respect to both embedding matrices and the
/// similarity multiplier.
#[derive(Debug, Clone)]
pub struct ContrastiveLoss {
    pub loss: f64,
    pub d_text: Tensor,
    pub d_image: Tensor,
    pub d_scale: f64,
}

fn check_pair(text: &Tensor, image: &Tensor) -> Result<usize> {
    if text.shape().len() != 2 || text.shape() != image.shape() {
        return Err(Error::dim("contrastive embeddings", text.shape(), image.shape()));
    }
    let n = text.rows();
    if n < 2 {
        return Err(Error::Validation(format!("contrastive loss needs at least 2 pairs, got {n}")));
    }
    Ok(n)
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `½[CE(rows of S) + CE(columns of S)]` with `S = scale·T·Iᵀ` and the
/// diagonal as targets.
pub fn contrastive_loss(text: &Tensor, image: &Tensor, scale: f32) -> Result<f64> {
    Ok(contrastive_loss_grad(text, image, scale)?.loss)
}

pub fn contrastive_loss_grad(text: &Tensor, image: &Tensor, scale: f32) -> Result<ContrastiveLoss> {
    let n = check_pair(text, image)?;
    let e = text.cols();
    let scale = f64::from(scale);
    let sims: Vec<f64> = (0..n * n)
        .map(|ij| {
            let (i, j) = (ij / n, ij % n);
            text.row(i)
                .iter()
                .zip(image.row(j))
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum()
        })
        .collect();
    let s = |i: usize, j: usize| scale * sims[i * n + j];

    let row_lse: Vec<f64> = (0..n).map(|i| logsumexp((0..n).map(move |j| s(i, j)))).collect();
    let col_lse: Vec<f64> = (0..n).map(|j| logsumexp((0..n).map(move |i| s(i, j)))).collect();
    let row_loss: f64 = (0..n).map(|i| row_lse[i] - s(i, i)).sum::<f64>() / n as f64;
    let col_loss: f64 = (0..n).map(|j| col_lse[j] - s(j, j)).sum::<f64>() / n as f64;
    let loss = 0.5 * (row_loss + col_loss);

    // dL/dS_ij = (P_ij + Q_ij − 2δ_ij) / 2N, P row-softmax, Q column-softmax.
    let mut d_text = Tensor::zeros(&[n, e]);
    let mut d_image = Tensor::zeros(&[n, e]);
    let mut d_scale = 0.0;
    for i in 0..n {
        for j in 0..n {
            let p = (s(i, j) - row_lse[i]).exp();
            let q = (s(i, j) - col_lse[j]).exp();
            let delta = if i == j { 2.0 } else { 0.0 };
            let g = (p + q - delta) / (2.0 * n as f64);
            d_scale += g * sims[i * n + j];
            let gs = (g * scale) as f32;
            tensor::axpy(gs, image.row(j), d_text.row_mut(i));
            tensor::axpy(gs, text.row(i), d_image.row_mut(j));
        }
    }
    Ok(ContrastiveLoss {
        loss,
        d_text,
        d_image,
        d_scale,
    })
}

// ----- retrieval ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub accuracy: f64,
    /// k after clamping to the number of candidates.
    pub k: usize,
    pub clamped: bool,
}

/// Rank of each text's own image among all images (0 = best); ties go to
/// the lower index.
pub fn paired_ranks(text: &Tensor, image: &Tensor) -> Result<Vec<usize>> {
    if text.shape().len() != 2 || text.shape() != image.shape() {
        return Err(Error::dim("retrieval embeddings", text.shape(), image.shape()));
    }
    let m = text.rows();
    if m == 0 {
        return Err(Error::Validation("retrieval needs at least one pair".into()));
    }
    Ok((0..m)
        .map(|i| {
            let sim: Vec<f32> = (0..m).map(|j| tensor::dot(text.row(i), image.row(j))).collect();
            let own = sim[i];
            sim.iter()
                .enumerate()
                .filter(|&(j, &v)| v > own || (v == own && j < i))
                .count()
        })
        .collect())
}

fn accuracy_from_ranks(ranks: &[usize], k: usize) -> TopK {
    let m = ranks.len();
    let k_used = k.min(m);
    let hits = ranks.iter().filter(|&&r| r < k_used).count();
    TopK {
        accuracy: hits as f64 / m as f64,
        k: k_used,
        clamped: k > m,
    }
}

/// Fraction of texts whose paired image is among the `k` most similar.
pub fn topk_accuracy(text: &Tensor, image: &Tensor, k: usize) -> Result<TopK> {
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    Ok(accuracy_from_ranks(&paired_ranks(text, image)?, k))
}

/// Text and image embedding matrices for a set of pairs.
pub fn embed_pairs(model: &EncoderModel, pairs: &[SketchPair]) -> Result<(Tensor, Tensor)> {
    let e = model.config().embed_dim;
    let rows: Vec<(Vec<f32>, Vec<f32>)> = pairs
        .par_iter()
        .map(|p| {
            let t = model.encode_prompt(&p.description)?.values;
            let i = model.encode_image(&p.image)?.values;
            Ok((t, i))
        })
        .collect::<Result<_>>()?;
    let (t, i): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok((
        Tensor::new(vec![pairs.len(), e], t.concat())?,
        Tensor::new(vec![pairs.len(), e], i.concat())?,
    ))
}

/// acc@1, acc@5, acc@10 and acc@25 of text→image retrieval over `pairs`.
pub fn retrieval_accuracy(model: &EncoderModel, pairs: &[SketchPair]) -> Result<[f64; 4]> {
    let (t, i) = embed_pairs(model, pairs)?;
    let ranks = paired_ranks(&t, &i)?;
    Ok(TOP_K.map(|k| accuracy_from_ranks(&ranks, k).accuracy))
}

// ----- one optimization step -------------------------------------------------

/// Forward/backward over one batch. `backward` consumes the recorded forward.
#[derive(Default)]
pub struct ContrastiveStep {
    recorded: Option<Recorded>,
}

struct Recorded {
    text: Vec<TextCache>,
    image: Vec<ImageCache>,
    loss: ContrastiveLoss,
    scale: f32,
}

impl ContrastiveStep {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, model: &EncoderModel, tokens: &[Vec<u32>], images: &[crate::GrayImage]) -> Result<f64> {
        if tokens.len() != images.len() {
            return Err(Error::dim("batch", &[tokens.len()], &[images.len()]));
        }
        let e = model.config().embed_dim;
        let text: Vec<(Vec<f32>, TextCache)> = tokens.par_iter().map(|t| model.text_forward(t)).collect::<Result<_>>()?;
        let image: Vec<(Vec<f32>, ImageCache)> = images.par_iter().map(|im| model.image_forward(im)).collect::<Result<_>>()?;
        let n = tokens.len();
        let t = Tensor::new(vec![n, e], text.iter().flat_map(|(v, _)| v.iter().copied()).collect())?;
        let i = Tensor::new(vec![n, e], image.iter().flat_map(|(v, _)| v.iter().copied()).collect())?;
        let scale = model.logit_scale();
        let loss = contrastive_loss_grad(&t, &i, scale)?;
        let value = loss.loss;
        self.recorded = Some(Recorded {
            text: text.into_iter().map(|(_, c)| c).collect(),
            image: image.into_iter().map(|(_, c)| c).collect(),
            loss,
            scale,
        });
        Ok(value)
    }

    pub fn backward(&mut self, model: &EncoderModel) -> Result<Grads> {
        let r = self
            .recorded
            .take()
            .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
        let parts: Vec<Grads> = (0..r.text.len())
            .into_par_iter()
            .map(|k| {
                let mut g = Grads::new();
                model.text_backward(&r.text[k], r.loss.d_text.row(k), &mut g)?;
                model.image_backward(&r.image[k], r.loss.d_image.row(k), &mut g)?;
                Ok(g)
            })
            .collect::<Result<_>>()?;
        let mut grads = Grads::new();
        for g in parts {
            grads.merge(g);
        }
        let key = model.logit_scale_key();
        if model.params().is_trainable(key) {
            // S = exp(s)·T·Iᵀ, so dL/ds = scale · dL/dscale.
            let ds = (r.loss.d_scale * f64::from(r.scale)) as f32;
            grads.accumulate(key, &[ds], &[1]);
        }
        Ok(grads)
    }
}

// ----- optimizer -------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32, eps: f32) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, model: &mut EncoderModel, grads: &Grads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let mut names: Vec<&str> = grads.names().collect();
        names.sort_unstable();
        for name in names {
            if !model.params().is_trainable(name) {
                continue;
            }
            let g = grads.get(name).expect("listed gradient");
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            let w = model.params_mut().get_mut(name).expect("trainable parameter exists");
            for (((w, &g), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
        let key = model.logit_scale_key().to_string();
        if let Some(s) = model.params_mut().get_mut(&key) {
            let max = MAX_LOGIT_SCALE.ln();
            for v in s.data_mut() {
                *v = v.clamp(0.0, max);
            }
        }
    }
}

// ----- training log ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Validation acc@1, acc@5, acc@10, acc@25.
    pub acc: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// Fraction of consecutive epochs whose loss went down.
    pub fn descent_fraction(&self) -> f64 {
        let l = self.losses();
        if l.len() < 2 {
            return 1.0;
        }
        l.windows(2).filter(|w| w[1] < w[0]).count() as f64 / (l.len() - 1) as f64
    }

    /// One line per epoch: `epoch loss acc1 acc5 acc10 acc25`, tab separated.
    pub fn to_records(&self) -> String {
        self.epochs
            .iter()
            .map(|e| {
                format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\n",
                    e.epoch, e.loss, e.acc[0], e.acc[1], e.acc[2], e.acc[3]
                )
            })
            .collect()
    }

    pub fn from_records(text: &str) -> Result<Self> {
        let mut epochs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Validation(format!("train log line {}: {line:?}", n + 1));
            if fields.len() != 6 {
                return Err(bad());
            }
            let f = |i: usize| fields[i].parse::<f64>().map_err(|_| bad());
            epochs.push(EpochRecord {
                epoch: fields[0].parse().map_err(|_| bad())?,
                loss: f(1)?,
                acc: [f(2)?, f(3)?, f(4)?, f(5)?],
            });
        }
        Ok(Self { epochs })
    }
}

impl FromStr for TrainLog {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_records(s)
    }
}

// ----- training loop ---------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the best validation accuracy.
    pub model: EncoderModel,
    pub log: TrainLog,
    pub best_epoch: usize,
    /// Per-epoch training-set acc@k, when tracked.
    pub train_acc: Vec<[f64; 4]>,
}

/// Shuffled batches of indices; a trailing singleton joins the previous batch.
fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

/// Lexicographic: acc@1, acc@5, acc@10, acc@25, then lower loss.
fn better(a: &EpochRecord, b: &EpochRecord) -> bool {
    for k in 0..4 {
        if a.acc[k] != b.acc[k] {
            return a.acc[k] > b.acc[k];
        }
    }
    a.loss < b.loss
}

/// Splits `pairs` by `cfg.seed` and trains on the training side.
pub fn train(model: EncoderModel, pairs: &[SketchPair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::Validation("cannot train on an empty dataset".into()));
    }
    let (train_set, val_set) = dataset::split(pairs, cfg.split_ratio, cfg.seed)?;
    train_with_validation(model, &train_set, &val_set, cfg)
}

/// Trains on `train_set`, scoring retrieval on `val_set` after every epoch.
pub fn train_with_validation(
    mut model: EncoderModel,
    train_set: &[SketchPair],
    val_set: &[SketchPair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.len() < 2 {
        return Err(Error::Validation(format!(
            "training set has {} pair(s); need at least 2",
            train_set.len()
        )));
    }
    if val_set.is_empty() {
        return Err(Error::Validation("validation set is empty".into()));
    }
    match cfg.mode {
        TrainMode::Lora => {
            if !model.has_adapters() {
                model.inject_lora(&cfg.lora, cfg.seed)?;
            }
        }
        TrainMode::Full => model.unfreeze_all(),
    }

    let tokens: Vec<Vec<u32>> = train_set
        .iter()
        .map(|p| model.tokenize(&p.description))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::from_config(cfg);
    let mut step = ContrastiveStep::new();
    let mut log = TrainLog::default();
    let mut best: Option<(EpochRecord, EncoderModel)> = None;
    let mut train_acc = Vec::new();

    for epoch in 1..=cfg.epochs {
        let (mut total, mut count) = (0.0, 0usize);
        for (b, batch) in batches(train_set.len(), cfg.batch_size, &mut rng).into_iter().enumerate() {
            let toks: Vec<Vec<u32>> = batch.iter().map(|&i| tokens[i].clone()).collect();
            let imgs: Vec<_> = batch.iter().map(|&i| train_set[i].image.clone()).collect();
            let loss = step.forward(&model, &toks, &imgs)?;
            let grads = step.backward(&model)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch} batch {b}: loss {loss}, logit scale {}, gradients finite: {}",
                    model.logit_scale(),
                    grads.all_finite()
                )));
            }
            adam.step(&mut model, &grads);
            total += loss * batch.len() as f64;
            count += batch.len();
        }
        let record = EpochRecord {
            epoch,
            loss: total / count as f64,
            acc: retrieval_accuracy(&model, val_set)?,
        };
        log.epochs.push(record);
        if cfg.track_train_accuracy {
            train_acc.push(retrieval_accuracy(&model, train_set)?);
        }
        if best.as_ref().is_none_or(|(b, _)| better(&record, b)) {
            best = Some((record, model.clone()));
        }
    }
    let (record, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        log,
        best_epoch: record.epoch,
        train_acc,
    })
}

// ----- ablation --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub targets: LoraTargets,
    pub final_loss: f64,
    pub acc: [f64; 4],
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub logs: Vec<(LoraTargets, TrainLog)>,
}

impl AblationReport {
    pub fn row(&self, targets: LoraTargets) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.targets == targets)
    }

    /// Tab-separated table with a header line.
    pub fn to_table(&self) -> String {
        let mut out = String::from("targets\tloss\tacc1\tacc5\tacc10\tacc25\tparams\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.targets, r.final_loss, r.acc[0], r.acc[1], r.acc[2], r.acc[3], r.params
            ));
        }
        out
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>9} {:>6} {:>6} {:>6} {:>6} {:>8}", "targets", "loss", "acc@1", "acc@5", "acc@10", "acc@25", "params")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<8} {:>9.4} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>8}",
                r.targets.as_str(),
                r.final_loss,
                r.acc[0],
                r.acc[1],
                r.acc[2],
                r.acc[3],
                r.params
            )?;
        }
        Ok(())
    }
}

/// Trains self, cross and both adapters from the same base and seed.
pub fn run_ablation(
    base: &EncoderModel,
    train_set: &[SketchPair],
    val_set: &[SketchPair],
    base_cfg: &TrainConfig,
) -> Result<AblationReport> {
    if base.has_adapters() {
        return Err(Error::State("ablation needs a base model without adapters".into()));
    }
    let mut rows = Vec::with_capacity(3);
    let mut logs = Vec::with_capacity(3);
    for targets in LoraTargets::ALL {
        let cfg = TrainConfig {
            lora: LoraConfig {
                targets,
                ..base_cfg.lora.clone()
            },
            mode: TrainMode::Lora,
            ..base_cfg.clone()
        };
        let params = crate::lora::count_params(base, &cfg.lora);
        let outcome = train_with_validation(base.clone(), train_set, val_set, &cfg)?;
        let last = *outcome.log.last().expect("at least one epoch");
        rows.push(AblationRow {
            targets,
            final_loss: last.loss,
            acc: last.acc,
            params,
        });
        logs.push((targets, outcome.log));
    }
    Ok(AblationReport { rows, logs })
}
