//! Character-level LSTM language model over the universal vocabulary.
//!
//! Sentences are framed as `sos → langID c_1 … c_n eos`: the model reads `sos`
//! followed by every token but the last prediction target, and predicts the
//! language ID, each character, and `eos`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Vocabulary, EOS, SOS};
use crate::error::{Error, Result};
use crate::nn::{Linear, LstmStack, LstmState, LstmValues};
use crate::par::{self, Exec};
use crate::rng::rng_for;
use crate::tensor::{Gradients, Graph, ParamId, ParamStore, TrainableMask, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub cells: usize,
    pub layers: usize,
}

impl LmConfig {
    pub fn desk(vocab_size: usize) -> Self {
        LmConfig {
            vocab_size,
            embed_dim: 32,
            cells: 64,
            layers: 2,
        }
    }

    pub fn full(vocab_size: usize) -> Self {
        LmConfig {
            vocab_size,
            embed_dim: 650,
            cells: 650,
            layers: 2,
        }
    }
}

/// Parameter handles under `lm.*`.
#[derive(Clone, Debug)]
pub struct LmNet {
    pub embed: ParamId,
    pub lstm: LstmStack,
    pub output: Linear,
}

impl LmNet {
    pub fn init<R: rand::Rng>(store: &mut ParamStore, cfg: &LmConfig, rng: &mut R) -> Result<Self> {
        let embed = store.insert_uniform("lm.embed", vec![cfg.vocab_size, cfg.embed_dim], 1, rng)?;
        let lstm = LstmStack::init(store, "lm.lstm", cfg.embed_dim, cfg.cells, cfg.layers, rng)?;
        let output = Linear::init(store, "lm.output", cfg.cells, cfg.vocab_size, true, rng)?;
        Ok(LmNet { embed, lstm, output })
    }

    pub fn bind(store: &ParamStore, cfg: &LmConfig) -> Result<Self> {
        Ok(LmNet {
            embed: store.id("lm.embed")?,
            lstm: LstmStack::bind(store, "lm.lstm", cfg.layers)?,
            output: Linear::bind(store, "lm.output")?,
        })
    }

    /// Consumes `token`; returns the new state (its top row is the LM feature)
    /// and the unnormalized next-token scores.
    pub fn step(&self, g: &mut Graph, state: &LstmState, token: usize) -> Result<(LstmState, Var)> {
        let table = g.param(self.embed);
        let x = g.embedding(table, &[token])?;
        let next = self.lstm.step(g, x, state)?;
        let logits = self.output.forward(g, next.top())?;
        Ok((next, logits))
    }

    /// Summed negative log-likelihood of one framed sentence.
    pub fn sentence_nll(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let mut state = self.lstm.zero_state(g);
        let mut terms = Vec::with_capacity(tokens.len() + 1);
        let mut prev = SOS;
        for &target in tokens.iter().chain(std::iter::once(&EOS)) {
            let (next, logits) = self.step(g, &state, prev)?;
            let lp = g.log_softmax(logits);
            terms.push(g.gather(lp, &[target])?);
            state = next;
            prev = target;
        }
        let all = g.concat_cols(&terms)?;
        let s = g.sum(all);
        Ok(g.scale(s, -1.0))
    }
}

/// LM recurrent state; [`LmState::feature`] is the top-layer hidden output.
#[derive(Clone, Debug, PartialEq)]
pub struct LmState(pub LstmValues);

impl LmState {
    pub fn feature(&self) -> &[f64] {
        self.0.top()
    }
}

/// Read-only view of an LM living in some parameter store (its own, or the
/// `lm.*` block of a fused acoustic model).
#[derive(Clone, Copy, Debug)]
pub struct LmView<'a> {
    pub config: &'a LmConfig,
    pub net: &'a LmNet,
    pub params: &'a ParamStore,
}

impl LmView<'_> {
    pub fn initial_state(&self) -> LmState {
        LmState(LstmValues::zeros(self.config.layers, self.config.cells))
    }

    /// `(new state, log-probs over the vocabulary, LM feature)`.
    pub fn step(&self, state: &LmState, token: usize) -> Result<(LmState, Vec<f64>, Vec<f64>)> {
        let mut g = Graph::inference(self.params);
        let st = state.0.load(&mut g)?;
        let (next, logits) = self.net.step(&mut g, &st, token)?;
        let lp = g.log_softmax(logits);
        let next = LmState(LstmValues::capture(&g, &next));
        let feature = next.feature().to_vec();
        Ok((next, g.value(lp).to_vec(), feature))
    }

    /// Log-probability of `sos tokens eos` by stepping one token at a time.
    pub fn sentence_logprob(&self, tokens: &[usize]) -> Result<f64> {
        let mut state = self.initial_state();
        let mut prev = SOS;
        let mut total = 0.0;
        for &t in tokens.iter().chain(std::iter::once(&EOS)) {
            let (next, lp, _) = self.step(&state, prev)?;
            total += lp[t];
            state = next;
            prev = t;
        }
        Ok(total)
    }

    /// Per-token perplexity over framed sentences (language ID, characters, eos).
    pub fn perplexity(&self, sentences: &[Vec<usize>], exec: Exec) -> Result<f64> {
        let nlls = par::map(exec, sentences, |s| -> Result<f64> {
            let mut g = Graph::inference(self.params);
            let nll = self.net.sentence_nll(&mut g, s)?;
            Ok(g.scalar(nll))
        });
        let mut total = 0.0;
        for n in nlls {
            total += n?;
        }
        let tokens: usize = sentences.iter().map(|s| s.len() + 1).sum();
        Ok((total / tokens.max(1) as f64).exp())
    }
}

/// A stand-alone language model with its own parameters.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub config: LmConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub net: LmNet,
}

impl LanguageModel {
    pub fn new(vocab: Vocabulary, config: LmConfig, seed: u64) -> Result<Self> {
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "LM vocabulary size {} does not match vocabulary of {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut params = ParamStore::new();
        let net = LmNet::init(&mut params, &config, &mut rng_for(seed, 0x1A))?;
        Ok(LanguageModel {
            config,
            vocab,
            params,
            net,
        })
    }

    pub fn from_params(vocab: Vocabulary, config: LmConfig, params: ParamStore) -> Result<Self> {
        let net = LmNet::bind(&params, &config)?;
        Ok(LanguageModel {
            config,
            vocab,
            params,
            net,
        })
    }

    pub fn view(&self) -> LmView<'_> {
        LmView {
            config: &self.config,
            net: &self.net,
            params: &self.params,
        }
    }

    pub fn initial_state(&self) -> LmState {
        self.view().initial_state()
    }

    pub fn lm_step(&self, state: &LmState, token: usize) -> Result<(LmState, Vec<f64>, Vec<f64>)> {
        self.view().step(state, token)
    }
}

/// Encodes one-sentence-per-line text as `[langID, chars…]`, skipping blank lines.
pub fn encode_corpus<S: AsRef<str>>(vocab: &Vocabulary, lang: &str, lines: &[S]) -> Result<Vec<Vec<usize>>> {
    let out: Vec<Vec<usize>> = lines
        .iter()
        .map(|l| l.as_ref().trim())
        .filter(|l| !l.is_empty())
        .map(|l| vocab.encode(l, lang))
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::EmptyTranscripts(lang.to_string()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            epochs: 15,
            batch_size: 16,
            learning_rate: 0.5,
            clip_norm: 5.0,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmEpoch {
    pub epoch: usize,
    pub train_ppl: f64,
    pub valid_ppl: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmReport {
    pub epochs: Vec<LmEpoch>,
    pub best_valid_ppl: f64,
}

/// Summed gradients and NLL of a batch of sentences, reduced in input order.
fn batch_gradients(lm: &LanguageModel, mask: &TrainableMask, batch: &[&Vec<usize>], exec: Exec) -> Result<(Gradients, f64, usize)> {
    let parts = par::map(exec, batch, |s| -> Result<(Gradients, f64)> {
        let mut g = Graph::with_mask(&lm.params, mask);
        let nll = lm.net.sentence_nll(&mut g, s)?;
        let value = g.scalar(nll);
        Ok((g.backward(nll)?.params, value))
    });
    let mut grads = Gradients::new(lm.params.len());
    let mut nll = 0.0;
    for p in parts {
        let (g, v) = p?;
        grads.accumulate(&g);
        nll += v;
    }
    let tokens = batch.iter().map(|s| s.len() + 1).sum();
    Ok((grads, nll, tokens))
}

/// Plain SGD update `θ ← θ − lr·∇`.
pub(crate) fn sgd_step(params: &mut ParamStore, grads: &Gradients, lr: f64) {
    let ids: Vec<ParamId> = params.iter().map(|(id, _)| id).collect();
    for id in ids {
        if let Some(g) = grads.get(id) {
            let g = g.to_vec();
            params.data_mut(id).iter_mut().zip(&g).for_each(|(p, d)| *p -= lr * d);
        }
    }
}

/// SGD with norm clipping; the learning rate halves whenever validation
/// perplexity fails to improve. Returns the best-by-validation model.
pub fn train_lm(mut lm: LanguageModel, train: &[Vec<usize>], valid: &[Vec<usize>], cfg: &LmTrainConfig, exec: Exec) -> Result<(LanguageModel, LmReport)> {
    if train.is_empty() {
        return Err(Error::Invalid("LM training corpus is empty".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("LM training needs batch_size >= 1 and a positive learning rate".into()));
    }
    let valid = if valid.is_empty() { train } else { valid };
    let mask = TrainableMask::all(&lm.params);
    let mut lr = cfg.learning_rate;
    let mut best = lm.view().perplexity(valid, exec)?;
    let mut best_params = lm.params.clone();
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng_for(cfg.seed, epoch as u64));
        let (mut nll, mut tokens) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Vec<usize>> = chunk.iter().map(|&i| &train[i]).collect();
            let (mut grads, batch_nll, batch_tokens) = batch_gradients(&lm, &mask, &batch, exec)?;
            if !batch_nll.is_finite() || !grads.is_finite() {
                lm.params = best_params;
                return Err(Error::Diverged { epoch });
            }
            grads.scale(1.0 / batch_tokens as f64);
            grads.clip_norm(cfg.clip_norm);
            sgd_step(&mut lm.params, &grads, lr);
            nll += batch_nll;
            tokens += batch_tokens;
        }
        let valid_ppl = lm.view().perplexity(valid, exec)?;
        epochs.push(LmEpoch {
            epoch,
            train_ppl: (nll / tokens as f64).exp(),
            valid_ppl,
            learning_rate: lr,
        });
        if valid_ppl < best {
            best = valid_ppl;
            best_params = lm.params.clone();
        } else {
            lr *= 0.5;
        }
    }
    lm.params = best_params;
    Ok((
        lm,
        LmReport {
            epochs,
            best_valid_ppl: best,
        },
    ))
}
