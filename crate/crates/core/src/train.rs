//! Joint CTC/attention training with Adadelta, and the transfer workflows.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionMode};
use crate::lm::LanguageModel;
use crate::model::{attach_fusion, AsrModel, Regularization};
use crate::par::{self, Exec};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::{Gradients, Graph, ParamStore, TrainableMask, Var};

/// One utterance ready for training or decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub lang: String,
    /// Normalized `frames × dim` features.
    pub feats: Vec<f64>,
    pub frames: usize,
    /// `[langID, chars…]`.
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub epsilon: f64,
    pub rho: f64,
    /// Multiplier applied to epsilon when validation accuracy stalls.
    pub epsilon_decay: f64,
    /// Leading epochs during which stalls neither decay epsilon nor count
    /// toward patience.
    #[serde(default)]
    pub decay_grace: usize,
    pub batch_size: usize,
    pub ctc_weight: f64,
    pub sampling: f64,
    pub dropout: f64,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            epsilon: 1e-8,
            rho: 0.95,
            epsilon_decay: 0.01,
            decay_grace: 0,
            batch_size: 15,
            ctc_weight: 0.5,
            sampling: 0.0,
            dropout: 0.2,
            epochs: 15,
            patience: 3,
            clip_norm: 5.0,
            seed: 1,
        }
    }
}

impl OptimizerConfig {
    /// Adaptation defaults: scheduled sampling 0.4 on top of the base config.
    pub fn adaptation(self) -> Self {
        OptimizerConfig { sampling: 0.4, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.ctc_weight) || !unit(self.sampling) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("ctc_weight and sampling must lie in [0, 1], dropout in [0, 1)".into()));
        }
        if self.batch_size == 0 || !(self.epsilon > 0.0) || !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config("batch_size >= 1, epsilon > 0 and 0 <= rho < 1 required".into()));
        }
        Ok(())
    }
}

/// Adadelta with per-parameter running averages of squared gradients and
/// squared updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adadelta {
    pub rho: f64,
    pub epsilon: f64,
    sq_grad: Vec<Vec<f64>>,
    sq_delta: Vec<Vec<f64>>,
}

impl Adadelta {
    pub fn new(params: &ParamStore, rho: f64, epsilon: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect();
        Adadelta {
            rho,
            epsilon,
            sq_grad: zeros.clone(),
            sq_delta: zeros,
        }
    }

    /// Updates every trainable parameter that received a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, mask: &TrainableMask) {
        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        for id in ids {
            if !mask.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let (eg, ed) = (&mut self.sq_grad[id.index()], &mut self.sq_delta[id.index()]);
            let theta = params.data_mut(id);
            for i in 0..g.len() {
                eg[i] = self.rho * eg[i] + (1.0 - self.rho) * g[i] * g[i];
                let delta = -((ed[i] + self.epsilon).sqrt() / (eg[i] + self.epsilon).sqrt()) * g[i];
                ed[i] = self.rho * ed[i] + (1.0 - self.rho) * delta * delta;
                theta[i] += delta;
            }
        }
    }
}

/// Tracks the best validation accuracy and shrinks epsilon on stalls.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonSchedule {
    pub epsilon: f64,
    pub decay: f64,
    pub best: Option<f64>,
    pub stalls: usize,
    pub grace: usize,
    observed: usize,
}

impl EpsilonSchedule {
    pub fn new(epsilon: f64, decay: f64) -> Self {
        EpsilonSchedule {
            epsilon,
            decay,
            best: None,
            stalls: 0,
            grace: 0,
            observed: 0,
        }
    }

    pub fn with_grace(self, grace: usize) -> Self {
        EpsilonSchedule { grace, ..self }
    }

    /// Records one epoch's accuracy; returns true when it is a new best.
    pub fn observe(&mut self, accuracy: f64) -> bool {
        self.observed += 1;
        if self.best.is_none_or(|b| accuracy > b) {
            self.best = Some(accuracy);
            self.stalls = 0;
            true
        } else if self.observed <= self.grace {
            false
        } else {
            self.epsilon *= self.decay;
            self.stalls += 1;
            false
        }
    }
}

/// Loss, gradients and counts of one mini-batch.
#[derive(Clone, Debug)]
pub struct BatchResult {
    pub loss: f64,
    pub grads: Gradients,
    pub targets: usize,
    pub correct: usize,
    /// Utterances whose CTC term was dropped as unrealizable.
    pub ctc_excluded: usize,
    /// Per-utterance loss contributions (already divided by `targets`).
    pub per_utt: Vec<f64>,
}

fn combine(g: &mut Graph, att: Var, ctc: Option<Var>, w: f64) -> Result<Option<Var>> {
    Ok(match (w, ctc) {
        (w, _) if w == 0.0 => Some(att),
        (w, None) if w == 1.0 => None,
        (w, Some(c)) if w == 1.0 => Some(c),
        (w, None) => Some(g.scale(att, 1.0 - w)),
        (w, Some(c)) => {
            let a = g.scale(att, 1.0 - w);
            let c = g.scale(c, w);
            Some(g.add(a, c)?)
        }
    })
}

/// The joint objective over a batch built in one graph:
/// `[(1−w)·Σ attention NLL + w·Σ CTC] / Σ targets`.
pub fn joint_loss(g: &mut Graph, model: &AsrModel, batch: &[&Utterance], w: f64) -> Result<Var> {
    let mut parts = Vec::new();
    let mut targets = 0;
    for u in batch {
        let t = model.utterance_terms(g, &u.feats, u.frames, &u.tokens, None)?;
        targets += t.targets;
        if let Some(v) = combine(g, t.att_nll, t.ctc_nll, w)? {
            parts.push(v);
        }
    }
    if parts.is_empty() {
        return g.input(1, 1, vec![0.0]);
    }
    let all = g.concat_cols(&parts)?;
    let s = g.sum(all);
    Ok(g.scale(s, 1.0 / targets as f64))
}

/// The same objective as [`joint_loss`], with one graph per utterance run
/// under `exec` and gradients reduced in batch order.
pub fn batch_gradients(model: &AsrModel, mask: &TrainableMask, batch: &[&Utterance], w: f64, reg: Option<(f64, f64, u64)>, exec: Exec) -> Result<BatchResult> {
    let targets: usize = batch.iter().map(|u| u.tokens.len() + 1).sum();
    let indexed: Vec<(usize, &Utterance)> = batch.iter().copied().enumerate().collect();
    let parts = par::map(exec, &indexed, |&(i, u)| -> Result<(Gradients, f64, usize, bool)> {
        let mut g = Graph::with_mask(&model.params, mask);
        let r = reg.map(|(dropout, sampling, seed)| Regularization {
            dropout,
            sampling,
            seed: derive_seed(seed, i as u64),
        });
        let t = model.utterance_terms(&mut g, &u.feats, u.frames, &u.tokens, r)?;
        let excluded = t.ctc_nll.is_none() && w > 0.0;
        match combine(&mut g, t.att_nll, t.ctc_nll, w)? {
            Some(loss) => {
                let loss = g.scale(loss, 1.0 / targets as f64);
                let value = g.scalar(loss);
                let grads = if value.is_finite() {
                    g.backward(loss)?.params
                } else {
                    Gradients::new(model.params.len())
                };
                Ok((grads, value, t.correct, excluded))
            }
            None => Ok((Gradients::new(model.params.len()), 0.0, t.correct, excluded)),
        }
    });
    let mut out = BatchResult {
        loss: 0.0,
        grads: Gradients::new(model.params.len()),
        targets,
        correct: 0,
        ctc_excluded: 0,
        per_utt: Vec::with_capacity(batch.len()),
    };
    for p in parts {
        let (g, v, c, x) = p?;
        out.grads.accumulate(&g);
        out.loss += v;
        out.correct += c;
        out.ctc_excluded += usize::from(x);
        out.per_utt.push(v);
    }
    Ok(out)
}

/// Teacher-forced per-token argmax accuracy.
pub fn teacher_forcing_accuracy(model: &AsrModel, data: &[Utterance], exec: Exec) -> Result<f64> {
    let counts = par::map(exec, data, |u| -> Result<(usize, usize)> {
        let mut g = Graph::inference(&model.params);
        let t = model.utterance_terms(&mut g, &u.feats, u.frames, &u.tokens, None)?;
        Ok((t.correct, t.targets))
    });
    let (mut hit, mut total) = (0, 0);
    for c in counts {
        let (h, t) = c?;
        hit += h;
        total += t;
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub per_language_loss: BTreeMap<String, f64>,
    pub valid_accuracy: f64,
    pub epsilon: f64,
    pub ctc_excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_accuracy: f64,
}

/// Runs the epoch loop and returns the best-by-validation model. `on_epoch`
/// sees each epoch's log and whether it produced a new best model.
pub fn train(
    mut model: AsrModel,
    mask: &TrainableMask,
    train_set: &[Utterance],
    valid_set: &[Utterance],
    cfg: &OptimizerConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochLog, &AsrModel, bool) -> Result<()>,
) -> Result<(AsrModel, TrainReport)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let valid_set = if valid_set.is_empty() { train_set } else { valid_set };
    let mut opt = Adadelta::new(&model.params, cfg.rho, cfg.epsilon);
    let mut sched = EpsilonSchedule::new(cfg.epsilon, cfg.epsilon_decay).with_grace(cfg.decay_grace);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut logs = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let reg = (cfg.dropout > 0.0 || cfg.sampling > 0.0).then_some((cfg.dropout, cfg.sampling));
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng_for(cfg.seed, epoch as u64));
        let mut total = 0.0;
        let mut batches = 0usize;
        let mut excluded = 0;
        let mut lang_loss: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Utterance> = chunk.iter().map(|&i| &train_set[i]).collect();
            let seed = derive_seed(cfg.seed, ((epoch as u64) << 32) | b as u64);
            let mut r = batch_gradients(&model, mask, &batch, cfg.ctc_weight, reg.map(|(d, s)| (d, s, seed)), exec)?;
            if !r.loss.is_finite() || !r.grads.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            r.grads.clip_norm(cfg.clip_norm);
            opt.epsilon = sched.epsilon;
            opt.step(&mut model.params, &r.grads, mask);
            total += r.loss;
            batches += 1;
            excluded += r.ctc_excluded;
            for (u, v) in batch.iter().zip(&r.per_utt) {
                let e = lang_loss.entry(u.lang.clone()).or_default();
                e.0 += v * r.targets as f64;
                e.1 += u.tokens.len() + 1;
            }
        }
        let acc = teacher_forcing_accuracy(&model, valid_set, exec)?;
        let improved = sched.observe(acc);
        let log = EpochLog {
            epoch,
            train_loss: total / batches as f64,
            per_language_loss: lang_loss.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            valid_accuracy: acc,
            epsilon: sched.epsilon,
            ctc_excluded: excluded,
        };
        if improved {
            best = model.clone();
            best_epoch = epoch;
        }
        on_epoch(&log, &best, improved)?;
        logs.push(log);
        if sched.stalls >= cfg.patience {
            break;
        }
    }
    let report = TrainReport {
        epochs: logs,
        best_epoch,
        best_accuracy: sched.best.unwrap_or(0.0),
    };
    Ok((best, report))
}

/// Result of preparing a seed model for adaptation.
#[derive(Clone, Debug)]
pub struct TransferInit {
    pub model: AsrModel,
    pub mask: TrainableMask,
    /// Copied verbatim from the seed.
    pub copied: Vec<String>,
    /// Seed rows kept, rows for new tokens appended.
    pub extended: Vec<String>,
    /// Freshly initialized.
    pub reinitialized: Vec<String>,
    pub frozen: Vec<String>,
}

/// Copies the seed model, grows it to `vocab`, and for cold fusion attaches
/// a fresh gated head with the LM frozen. Deep fusion is only set up here;
/// its head is attached after the first adaptation stage.
pub fn transfer_init(seed_model: &AsrModel, vocab: &Vocabulary, mode: FusionMode, lm: Option<&LanguageModel>, dims: &FusionConfig, seed: u64) -> Result<TransferInit> {
    if seed_model.fusion_mode().is_gated() {
        return Err(Error::Topology("seed model already carries a fusion head".into()));
    }
    if mode == FusionMode::Cold && lm.is_none() {
        return Err(Error::Config("cold fusion needs a language model".into()));
    }
    let (grown, extended) = seed_model.with_vocabulary(vocab, seed)?;
    let (model, mask) = match (mode, lm) {
        (FusionMode::Cold, Some(lm)) => attach_fusion(&grown, lm, mode, dims, seed)?,
        _ => {
            let mask = grown.default_mask();
            (grown, mask)
        }
    };
    let mut copied = Vec::new();
    let mut reinitialized = Vec::new();
    let mut frozen = Vec::new();
    for (id, p) in model.params.iter() {
        if !mask.is_trainable(id) {
            frozen.push(p.name.clone());
        }
        if p.name.starts_with("fusion.") {
            reinitialized.push(p.name.clone());
        } else if seed_model.params.by_name(&p.name).is_some() && !extended.contains(&p.name) {
            copied.push(p.name.clone());
        }
    }
    Ok(TransferInit {
        model,
        mask,
        copied,
        extended,
        reinitialized,
        frozen,
    })
}

/// Adaptation with cold fusion from the first update; the LM stays frozen.
pub fn cf_transfer(
    seed_model: &AsrModel,
    lm: &LanguageModel,
    train_set: &[Utterance],
    valid_set: &[Utterance],
    cfg: &OptimizerConfig,
    dims: &FusionConfig,
    exec: Exec,
) -> Result<(AsrModel, TrainReport)> {
    let init = transfer_init(seed_model, &lm.vocab, FusionMode::Cold, Some(lm), dims, cfg.seed)?;
    train(init.model, &init.mask, train_set, valid_set, cfg, exec, |_, _, _| Ok(()))
}

/// Outputs of the two deep-fusion stages.
#[derive(Clone, Debug)]
pub struct DeepTransfer {
    pub stage1: AsrModel,
    pub stage1_report: TrainReport,
    pub stage2: AsrModel,
    pub stage2_report: TrainReport,
}

/// Stage 1 adapts every parameter without fusion; stage 2 attaches a fresh
/// gated head and trains only `fusion.*`.
pub fn df_transfer(
    seed_model: &AsrModel,
    lm: &LanguageModel,
    train_set: &[Utterance],
    valid_set: &[Utterance],
    cfg: &OptimizerConfig,
    stage2_cfg: &OptimizerConfig,
    dims: &FusionConfig,
    exec: Exec,
) -> Result<DeepTransfer> {
    let init = transfer_init(seed_model, &lm.vocab, FusionMode::None, None, dims, cfg.seed)?;
    let (stage1, stage1_report) = train(init.model, &init.mask, train_set, valid_set, cfg, exec, |_, _, _| Ok(()))?;
    let (fused, mask) = attach_fusion(&stage1, lm, FusionMode::Deep, dims, stage2_cfg.seed)?;
    let (stage2, stage2_report) = train(fused, &mask, train_set, valid_set, stage2_cfg, exec, |_, _, _| Ok(()))?;
    Ok(DeepTransfer {
        stage1,
        stage1_report,
        stage2,
        stage2_report,
    })
}
