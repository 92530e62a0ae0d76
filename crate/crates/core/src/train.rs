//! Training loop, optimizer, patient-level splits and evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{Graph, ParamGrads, ParamStore};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::event_store::{EventWindow, Normalizer};
use crate::metrics::Metrics;
use crate::model::{sample_key, Ablation, ForwardOptions, Model, ModelConfig, RouteMode};
use crate::tokenizer::{flatten, TokenSequence};

/// Samples whose gradients are summed sequentially before the cross-chunk
/// reduction. Fixed so results do not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seeds: Vec<u64>,
    pub split_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5.904e-4,
            weight_decay: 1.709e-6,
            dropout: 0.032,
            grad_clip: 0.5,
            batch_size: 64,
            max_epochs: 50,
            patience: 10,
            seeds: vec![0, 1, 2, 3, 4],
            split_seed: 17,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "lr",
        "weight_decay",
        "dropout",
        "grad_clip",
        "batch_size",
        "max_epochs",
        "patience",
        "seeds",
        "split_seed",
    ];

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            lr: kv.get_or("lr", d.lr)?,
            weight_decay: kv.get_or("weight_decay", d.weight_decay)?,
            dropout: kv.get_or("dropout", d.dropout)?,
            grad_clip: kv.get_or("grad_clip", d.grad_clip)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            max_epochs: kv.get_or("max_epochs", d.max_epochs)?,
            patience: kv.get_or("patience", d.patience)?,
            seeds: kv.get_list("seeds")?.unwrap_or(d.seeds),
            split_seed: kv.get_or("split_seed", d.split_seed)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("lr", self.lr);
        kv.set("weight_decay", self.weight_decay);
        kv.set("dropout", self.dropout);
        kv.set("grad_clip", self.grad_clip);
        kv.set("batch_size", self.batch_size);
        kv.set("max_epochs", self.max_epochs);
        kv.set("patience", self.patience);
        kv.set_list("seeds", &self.seeds);
        kv.set("split_seed", self.split_seed);
        kv
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// `p <- p - lr*wd*p`, then the bias-corrected Adam step.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64, weight_decay: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads.get(id).data();
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * weight_decay * p[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / (norm + 1e-12));
    }
    norm
}

/// Patient-level train/validation/test indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// 0.70 / 0.10 / 0.20 split, stratified by label so each part keeps the
/// cohort prevalence. Indices within each part are ascending.
pub fn split_patients(labels: &[u8], seed: u64) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = (n as f64 * 0.7).round() as usize;
        let n_val = (n as f64 * 0.1).round() as usize;
        split.train.extend_from_slice(&idx[..n_train]);
        split.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        split.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    for part in [&mut split.train, &mut split.val, &mut split.test] {
        part.sort_unstable();
    }
    for (name, part) in [("train", &split.train), ("validation", &split.val), ("test", &split.test)] {
        let pos = part.iter().filter(|&&i| labels[i] == 1).count();
        if pos == 0 || pos == part.len() {
            return Err(Error::InvalidInput(format!("{name} split has a single class; cohort too small")));
        }
    }
    Ok(split)
}

/// Normalized, flattened samples ready for the model.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub seqs: Vec<TokenSequence>,
    pub labels: Vec<u8>,
    pub keys: Vec<u64>,
}

impl Prepared {
    pub fn new(windows: &[&EventWindow], norm: &Normalizer) -> Result<Self> {
        let seqs = windows
            .par_iter()
            .map(|w| flatten(&norm.apply(w)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seqs,
            labels: windows.iter().map(|w| w.label).collect(),
            keys: windows.iter().map(|w| sample_key(&w.patient_id)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }
}

/// Hard-routed probabilities for every sample, in order.
pub fn predict_all(model: &Model, data: &Prepared) -> Result<Vec<f64>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| model.predict(&data.seqs[i], data.keys[i]))
        .collect()
}

pub fn evaluate(model: &Model, data: &Prepared) -> Result<(Vec<f64>, Metrics)> {
    let probs = predict_all(model, data)?;
    let m = Metrics::compute(&probs, &data.labels)?;
    Ok((probs, m))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub grad_norm: f64,
    pub val_auroc: f64,
    pub val_auprc: f64,
    pub best: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model holding the best-validation parameters.
    pub model: Model,
    pub normalizer: Normalizer,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_auprc: f64,
}

fn sample_grads(
    model: &Model,
    store: &ParamStore,
    data: &Prepared,
    i: usize,
    dropout: f64,
    stream: u64,
) -> Result<(f64, ParamGrads)> {
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    rng.set_stream(stream);
    let mut g = Graph::new();
    let opts = ForwardOptions { mode: RouteMode::Soft, dropout, sample_key: data.keys[i] };
    let f = model.forward_with(store, &mut g, &data.seqs[i], &opts, Some(&mut rng))?;
    let loss = g.bce_with_logits(f.logit, f64::from(data.labels[i]));
    let lv = g.value(loss).item();
    let mut grads = ParamGrads::zeros_like(store);
    g.backward(loss)?.accumulate_into(&mut grads);
    Ok((lv, grads))
}

/// Mean loss and gradient over `batch`, reduced in a fixed order.
pub fn batch_gradient(
    model: &Model,
    store: &ParamStore,
    data: &Prepared,
    batch: &[usize],
    dropout: f64,
    epoch: usize,
) -> Result<(f64, ParamGrads)> {
    let stream_of = |i: usize| ((epoch as u64) << 32) | i as u64;
    let partial: Vec<(f64, ParamGrads)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut loss = 0.0;
            let mut acc = ParamGrads::zeros_like(store);
            for &i in chunk {
                let (l, g) = sample_grads(model, store, data, i, dropout, stream_of(i))?;
                loss += l;
                acc.add(&g);
            }
            Ok((loss, acc))
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut total = ParamGrads::zeros_like(store);
    for (l, g) in &partial {
        loss += l;
        total.add(g);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    Ok((loss * inv, total))
}

/// Trains one model. Normalization statistics come from the training split
/// only; the returned model carries the parameters of the epoch with the best
/// validation AUPRC (earliest on ties). `log_sink` receives one JSON object
/// per epoch.
pub fn train(
    windows: &[EventWindow],
    split: &Split,
    model_config: &ModelConfig,
    ablation: Ablation,
    cfg: &TrainConfig,
    seed: u64,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n_vars = windows
        .first()
        .ok_or_else(|| Error::InvalidInput("no samples to train on".into()))?
        .n_vars;
    let pick = |idx: &[usize]| idx.iter().map(|&i| &windows[i]).collect::<Vec<_>>();
    let train_w = pick(&split.train);
    let normalizer = Normalizer::fit(&train_w.iter().map(|w| (*w).clone()).collect::<Vec<_>>())?;
    let train_data = Prepared::new(&train_w, &normalizer)?;
    let val_data = Prepared::new(&pick(&split.val), &normalizer)?;

    let mut model = Model::new(model_config.clone(), ablation, n_vars, seed)?;
    let initial = model.store.clone();
    let mut opt = AdamW::new(&model.store);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(u64::MAX);

    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut log = Vec::new();
    let mut since_best = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut norm_max: f64 = 0.0;
        let diverged = |msg: String, best: &Option<(usize, f64, ParamStore)>| Error::Diverged {
            epoch,
            msg,
            last_good: Box::new(best.as_ref().map_or_else(|| initial.clone(), |b| b.2.clone())),
        };
        for batch in order.chunks(cfg.batch_size) {
            let (loss, mut grads) = match batch_gradient(&model, &model.store, &train_data, batch, cfg.dropout, epoch) {
                Ok(r) => r,
                Err(Error::NonFinite(msg)) => return Err(diverged(msg, &best)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || !grads.is_finite() {
                return Err(diverged(format!("non-finite loss or gradient (loss {loss})"), &best));
            }
            norm_max = norm_max.max(clip_global_norm(&mut grads, cfg.grad_clip));
            opt.step(&mut model.store, &grads, cfg.lr, cfg.weight_decay);
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / train_data.len() as f64;
        if !model.store.is_finite() {
            return Err(diverged("parameters became non-finite".into(), &best));
        }
        let (_, val) = match evaluate(&model, &val_data) {
            Ok(r) => r,
            Err(Error::NonFinite(msg)) => return Err(diverged(msg, &best)),
            Err(e) => return Err(e),
        };
        let improved = best.as_ref().map_or(true, |b| val.auprc > b.1);
        if improved {
            best = Some((epoch, val.auprc, model.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let entry = EpochLog {
            epoch,
            train_loss,
            grad_norm: norm_max,
            val_auroc: val.auroc,
            val_auprc: val.auprc,
            best: improved,
        };
        log::info!(
            "seed {seed} epoch {epoch}: loss {train_loss:.5} val auroc {:.4} auprc {:.4}",
            val.auroc,
            val.auprc
        );
        if let Some(sink) = log_sink.as_deref_mut() {
            let line = serde_json::to_string(&entry).map_err(|e| Error::InvalidInput(e.to_string()))?;
            writeln!(sink, "{line}").map_err(|e| Error::io("run log", e))?;
        }
        log.push(entry);
        if since_best >= cfg.patience.max(1) {
            break;
        }
    }
    let (best_epoch, best_val_auprc, store) = best.expect("at least one epoch");
    model.store = store;
    Ok(TrainOutcome { model, normalizer, log, best_epoch, best_val_auprc })
}
