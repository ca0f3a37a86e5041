//! AdamW and the four training regimes.
//!
//! | regime     | trainable                     |
//! |------------|-------------------------------|
//! | `TI`       | nothing                       |
//! | `FE`       | head                          |
//! | `MADATION` | LoRA factors and head         |
//! | `VIT_FS`   | backbone and head             |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::{augment_flip, Example};
use crate::error::{Error, Result};
use crate::head::BCE_EPS;
use crate::label::Label;
use crate::lora::LoraConfig;
use crate::metrics::{eer, ScoreSet};
use crate::model::MadModel;
use crate::nn::{derive_seed, seeded_rng, ForwardCtx, Module};
use crate::tensor::{Param, ParamId, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    /// Zero-shot similarity to label embeddings.
    Ti,
    /// Frozen feature extractor with a trained head.
    Fe,
    /// Backbone trained from scratch.
    VitFs,
    /// Frozen backbone, trained LoRA adapters and head.
    Madation,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Ti, Regime::Fe, Regime::VitFs, Regime::Madation];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Ti => "TI",
            Regime::Fe => "FE",
            Regime::VitFs => "VIT_FS",
            Regime::Madation => "MADATION",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown regime {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    /// Backbone or adapter learning rate.
    pub model_lr: f64,
    pub head_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub flip_prob: f64,
    pub seed: u64,
    /// Fixed-order gradient reduction. Reduction is always ordered, so this
    /// is recorded for the run config only.
    pub deterministic: bool,
}

impl TrainConfig {
    fn base(regime: Regime) -> Self {
        TrainConfig {
            regime,
            epochs: 40,
            batch_size: 256,
            model_lr: 1e-5,
            head_lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lora_rank: 2,
            lora_alpha: 4.0,
            lora_dropout: 0.4,
            flip_prob: 0.5,
            seed: 0,
            deterministic: true,
        }
    }

    pub fn madation_vit_b() -> Self {
        Self::base(Regime::Madation)
    }

    pub fn madation_vit_l() -> Self {
        TrainConfig {
            lora_alpha: 8.0,
            lora_dropout: 0.2,
            ..Self::base(Regime::Madation)
        }
    }

    pub fn fe() -> Self {
        TrainConfig {
            head_lr: 1e-2,
            ..Self::base(Regime::Fe)
        }
    }

    pub fn vit_fs_b() -> Self {
        TrainConfig {
            model_lr: 1e-5,
            head_lr: 5e-5,
            ..Self::base(Regime::VitFs)
        }
    }

    pub fn vit_fs_l() -> Self {
        TrainConfig {
            model_lr: 1e-4,
            head_lr: 1e-4,
            ..Self::base(Regime::VitFs)
        }
    }

    pub fn ti() -> Self {
        Self::base(Regime::Ti)
    }

    /// 15 epochs of batch 32 for the TINY backbone, with learning rates
    /// raised to match the shorter schedule.
    pub fn desk(regime: Regime) -> Self {
        let (model_lr, head_lr) = match regime {
            Regime::Madation => (3e-3, 1e-2),
            Regime::Fe => (1e-5, 1e-2),
            Regime::VitFs => (1e-3, 1e-3),
            Regime::Ti => (1e-5, 1e-4),
        };
        TrainConfig {
            epochs: 15,
            batch_size: 32,
            model_lr,
            head_lr,
            lora_dropout: 0.1,
            ..Self::base(regime)
        }
    }

    /// `madation-b`, `madation-l`, `fe`, `vit-fs-b`, `vit-fs-l`, `ti`, or
    /// `desk-<regime>`.
    pub fn preset(name: &str) -> Result<Self> {
        if let Some(regime) = name.strip_prefix("desk-") {
            return Ok(Self::desk(regime.replace('-', "_").parse()?));
        }
        Ok(match name {
            "madation-b" => Self::madation_vit_b(),
            "madation-l" => Self::madation_vit_l(),
            "fe" => Self::fe(),
            "vit-fs-b" => Self::vit_fs_b(),
            "vit-fs-l" => Self::vit_fs_l(),
            "ti" => Self::ti(),
            _ => return Err(Error::Config(format!("unknown training preset {name:?}"))),
        })
    }

    pub fn lora(&self) -> LoraConfig {
        LoraConfig::new(self.lora_rank, self.lora_alpha, self.lora_dropout)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::Config(format!("{what} = {v} is out of range")));
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        for (what, v) in [("model_lr", self.model_lr), ("head_lr", self.head_lr), ("eps", self.eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(what, v);
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", self.weight_decay);
        }
        for (what, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(what, v);
            }
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob", self.flip_prob);
        }
        Ok(())
    }
}

/// Adam moments of every parameter seen so far and the step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamWState {
    pub t: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl AdamWState {
    pub fn moments(&self, id: ParamId) -> Option<(&Tensor, &Tensor)> {
        self.moments.get(&id).map(|(m, v)| (m, v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Parameters sharing one learning rate.
pub struct ParamGroup<'a> {
    pub lr: f64,
    pub params: Vec<&'a mut Param>,
}

/// One bias-corrected Adam step with decoupled weight decay
/// `p ← p − lr·wd·p`, applied to every unfrozen parameter from its `grad`.
pub fn adamw_step(groups: &mut [ParamGroup<'_>], state: &mut AdamWState, hyper: &AdamWHyper) -> Result<()> {
    for g in groups.iter() {
        for p in g.params.iter().filter(|p| !p.is_frozen()) {
            match &p.grad {
                None => return Err(Error::Contract(format!("{} has no gradient", p.name()))),
                Some(grad) if grad.shape() != p.value.shape() => {
                    return Err(Error::Contract(format!(
                        "{} gradient shape {:?} does not match {:?}",
                        p.name(),
                        grad.shape(),
                        p.value.shape()
                    )))
                }
                Some(_) => {}
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for g in groups.iter_mut() {
        let lr = g.lr;
        for p in g.params.iter_mut().filter(|p| !p.is_frozen()) {
            let grad = p.grad.as_ref().expect("checked above");
            let (m, v) = state
                .moments
                .entry(p.id())
                .or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
            let decay = 1.0 - lr * hyper.weight_decay;
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * gi;
                *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + hyper.eps);
            }
        }
    }
    Ok(())
}

/// Trainable parameters of a regime, split into the two optimizer groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainableSet {
    pub model: BTreeSet<ParamId>,
    pub head: BTreeSet<ParamId>,
    /// Total scalar count.
    pub count: usize,
}

impl TrainableSet {
    pub fn is_empty(&self) -> bool {
        self.model.is_empty() && self.head.is_empty()
    }
}

/// Sets the frozen flags of `model` for `regime` and returns what trains.
pub fn build_trainable_set(model: &mut MadModel, regime: Regime) -> Result<TrainableSet> {
    match (regime, model.adapters.is_some()) {
        (Regime::Madation, false) => {
            return Err(Error::State("MADATION needs a model with injected adapters".into()))
        }
        (Regime::Fe | Regime::VitFs, true) => {
            return Err(Error::State(format!("{regime} does not train a model with adapters")))
        }
        _ => {}
    }
    model.backbone.set_frozen(regime != Regime::VitFs);
    if let Some(a) = &mut model.adapters {
        a.set_frozen(regime != Regime::Madation);
    }
    model.head.set_frozen(regime == Regime::Ti);

    let live = |ps: Vec<&Param>| -> (BTreeSet<ParamId>, usize) {
        let ps: Vec<_> = ps.into_iter().filter(|p| !p.is_frozen()).collect();
        (ps.iter().map(|p| p.id()).collect(), ps.iter().map(|p| p.numel()).sum())
    };
    let mut body = model.backbone.params();
    if let Some(a) = &model.adapters {
        body.extend(a.params());
    }
    let (model_ids, n_model) = live(body);
    let (head_ids, n_head) = live(model.head.params());
    Ok(TrainableSet {
        model: model_ids,
        head: head_ids,
        count: n_model + n_head,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    /// EER of the training-mode scores seen during the epoch.
    pub train_eer: f64,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,mean_loss,train_eer\n");
    for e in log {
        out.push_str(&format!("{},{:?},{:?}\n", e.epoch, e.mean_loss, e.train_eer));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub steps: usize,
    /// Epoch with the lowest mean loss.
    pub best_epoch: usize,
    pub trainable: TrainableSet,
}

struct SampleResult {
    loss: f64,
    score: f64,
    grads: Vec<(ParamId, Tensor)>,
}

fn sample_pass(model: &MadModel, example: &Example, flip_prob: f64, seed: u64) -> Result<SampleResult> {
    let mut rng = seeded_rng(seed, 0);
    let image = augment_flip(&example.image, &mut rng, flip_prob);
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::train(&mut rng);
    let p = model.attack_probability_on(&mut tape, &image, &mut ctx)?;
    let score = tape.value(p).data()[0];
    let loss = tape.bce(p, &[example.label.target()], BCE_EPS)?;
    let value = tape.value(loss).data()[0];
    Ok(SampleResult {
        loss: value,
        score,
        grads: tape.backward(loss)?.into_param_grads(),
    })
}

pub fn train(model: &mut MadModel, data: &[Example], config: &TrainConfig) -> Result<TrainReport> {
    train_with(model, data, config, |_, _, _| Ok(()))
}

/// Runs the epoch loop, calling `on_epoch(log, model, is_best)` after every
/// epoch.
pub fn train_with(
    model: &mut MadModel,
    data: &[Example],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &MadModel, bool) -> Result<()>,
) -> Result<TrainReport> {
    config.validate()?;
    if config.regime == Regime::Ti {
        return Err(Error::Contract("regime performs no training".into()));
    }
    let bona = data.iter().filter(|e| e.label == Label::BonaFide).count();
    if bona == 0 || bona == data.len() {
        return Err(Error::Data(format!(
            "training needs both classes, got {bona} bona-fide of {}",
            data.len()
        )));
    }
    let trainable = build_trainable_set(model, config.regime)?;
    let hyper = AdamWHyper {
        beta1: config.beta1,
        beta2: config.beta2,
        eps: config.eps,
        weight_decay: config.weight_decay,
    };
    let mut state = AdamWState::default();
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    let mut best: Option<(usize, f64)> = None;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seeded_rng(derive_seed(config.seed, &[epoch as u64]), 1));
        let mut loss_sum = 0.0;
        let mut scores = vec![0.0; data.len()];
        for batch in order.chunks(config.batch_size) {
            let frozen_view: &MadModel = model;
            let results = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let seed = derive_seed(config.seed, &[epoch as u64, step as u64, j as u64]);
                    sample_pass(frozen_view, &data[i], config.flip_prob, seed)
                })
                .collect::<Result<Vec<_>>>()?;

            let mut summed: BTreeMap<ParamId, Tensor> = BTreeMap::new();
            let mut batch_loss = 0.0;
            for (r, &i) in results.iter().zip(batch) {
                batch_loss += r.loss;
                scores[i] = r.score;
                for (id, g) in &r.grads {
                    match summed.get_mut(id) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            summed.insert(*id, g.clone());
                        }
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numeric {
                    step,
                    reason: format!("loss is {batch_loss}"),
                });
            }
            loss_sum += batch_loss;
            let n = batch.len() as f64;
            let (mut body, mut head) = (Vec::new(), Vec::new());
            for p in model.params_mut() {
                if p.is_frozen() {
                    continue;
                }
                let g = summed
                    .remove(&p.id())
                    .map(|g| g.scale(1.0 / n))
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                if g.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric {
                        step,
                        reason: format!("gradient of {} is not finite", p.name()),
                    });
                }
                p.grad = Some(g);
                if trainable.head.contains(&p.id()) {
                    head.push(p);
                } else {
                    body.push(p);
                }
            }
            let mut groups = [
                ParamGroup {
                    lr: config.model_lr,
                    params: body,
                },
                ParamGroup {
                    lr: config.head_lr,
                    params: head,
                },
            ];
            adamw_step(&mut groups, &mut state, &hyper)?;
            step += 1;
        }
        let labels: Vec<Label> = data.iter().map(|e| e.label).collect();
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            train_eer: eer(&ScoreSet::new(scores, labels)?)?,
        };
        let is_best = best.is_none_or(|(_, l)| entry.mean_loss < l);
        if is_best {
            best = Some((epoch, entry.mean_loss));
        }
        on_epoch(&entry, model, is_best)?;
        log.push(entry);
    }
    for p in model.params_mut() {
        p.grad = None;
    }
    Ok(TrainReport {
        log,
        steps: step,
        best_epoch: best.map_or(0, |(e, _)| e),
        trainable,
    })
}
