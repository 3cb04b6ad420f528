//! The complete recognizer: acoustic model, optional embedded LM and fusion
//! head, plus the vocabulary they share.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc;
use crate::data::{Vocabulary, EOS, SOS};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionHead, FusionMode};
use crate::lm::{LanguageModel, LmConfig, LmNet, LmView};
use crate::nn::LstmValues;
use crate::rng::rng_for;
use crate::s2s::{AttentionCache, DropoutCtx, ModelConfig, S2sNet};
use crate::tensor::{Graph, ParamStore, TrainableMask, Var};

/// Everything needed to rebuild parameter handles from a store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub model: ModelConfig,
    pub fusion: FusionMode,
    /// Present for cold and deep fusion.
    pub lm: Option<LmConfig>,
    pub fusion_dims: Option<FusionConfig>,
}

#[derive(Clone, Debug)]
pub struct AsrModel {
    pub topology: Topology,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub net: S2sNet,
    pub lm_net: Option<LmNet>,
    pub head: Option<FusionHead>,
}

/// Eval-mode encoder output of one utterance, kept as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub frames: usize,
    pub enc: Vec<f64>,
    pub enc_proj: Vec<f64>,
    /// `[frames, vocab]` CTC log-probabilities.
    pub ctc_logprobs: Vec<f64>,
}

/// Decoder recurrence carried between steps outside any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderSnapshot {
    pub lstm: LstmValues,
    pub alpha: Vec<f64>,
}

/// Training-time noise: encoder dropout and scheduled sampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Regularization {
    pub dropout: f64,
    pub sampling: f64,
    pub seed: u64,
}

/// Per-utterance loss pieces built inside a graph.
#[derive(Clone, Debug)]
pub struct UttTerms {
    /// Summed attention negative log-likelihood, language ID and eos included.
    pub att_nll: Var,
    /// Summed CTC loss, `None` when the labels cannot be aligned to the frames.
    pub ctc_nll: Option<Var>,
    /// Attention prediction targets (`tokens.len() + 1`).
    pub targets: usize,
    /// Teacher-forced argmax hits.
    pub correct: usize,
}

/// Separately accumulated scores of one token sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceScores {
    pub att: f64,
    pub ctc: f64,
    pub lm: f64,
}

fn sample_from_logprobs(rng: &mut ChaCha8Rng, lp: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, l) in lp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return i;
        }
    }
    lp.len() - 1
}

/// CTC labels: the transcript without language-ID tokens.
pub fn ctc_labels(vocab: &Vocabulary, tokens: &[usize]) -> Vec<usize> {
    tokens.iter().copied().filter(|&t| !vocab.is_lang_id(t)).collect()
}

impl AsrModel {
    pub fn new(vocab: Vocabulary, config: ModelConfig, seed: u64) -> Result<Self> {
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model vocabulary size {} does not match vocabulary of {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut params = ParamStore::new();
        let net = S2sNet::init(&mut params, &config, &mut rng_for(seed, 0xA5))?;
        Ok(AsrModel {
            topology: Topology {
                model: config,
                fusion: FusionMode::None,
                lm: None,
                fusion_dims: None,
            },
            vocab,
            params,
            net,
            lm_net: None,
            head: None,
        })
    }

    /// Rebinds handles over an existing store, checking every shape.
    pub fn from_parts(topology: Topology, vocab: Vocabulary, params: ParamStore) -> Result<Self> {
        let cfg = &topology.model;
        if cfg.vocab_size != vocab.len() {
            return Err(Error::Topology(format!("vocabulary of {} for a model of {}", vocab.len(), cfg.vocab_size)));
        }
        let mut expected = ParamStore::new();
        let mut rng = rng_for(0, 0);
        S2sNet::init(&mut expected, cfg, &mut rng)?;
        let gated = topology.fusion.is_gated();
        if gated {
            let (lm, dims) = match (&topology.lm, &topology.fusion_dims) {
                (Some(l), Some(d)) => (l, d),
                _ => return Err(Error::Topology(format!("{} fusion without LM or head dimensions", topology.fusion))),
            };
            LmNet::init(&mut expected, lm, &mut rng)?;
            FusionHead::init(&mut expected, cfg.dec_cells, lm.cells, cfg.vocab_size, dims, &mut rng)?;
        }
        let mut diffs = Vec::new();
        for (_, p) in expected.iter() {
            match params.by_name(&p.name) {
                None => diffs.push(format!("{}: missing", p.name)),
                Some(q) if q.shape != p.shape => diffs.push(format!("{}: {:?} vs expected {:?}", p.name, q.shape, p.shape)),
                _ => {}
            }
        }
        for name in params.names() {
            if expected.by_name(name).is_none() {
                diffs.push(format!("{name}: unexpected"));
            }
        }
        if !diffs.is_empty() {
            return Err(Error::Topology(diffs.join("; ")));
        }
        let net = S2sNet::bind(&params, cfg)?;
        let (lm_net, head) = if gated {
            (
                Some(LmNet::bind(&params, topology.lm.as_ref().expect("checked above"))?),
                Some(FusionHead::bind(&params)?),
            )
        } else {
            (None, None)
        };
        Ok(AsrModel {
            topology,
            vocab,
            params,
            net,
            lm_net,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.topology.model
    }

    pub fn fusion_mode(&self) -> FusionMode {
        self.topology.fusion
    }

    /// The embedded LM of a cold- or deep-fused model.
    pub fn embedded_lm(&self) -> Option<LmView<'_>> {
        match (&self.lm_net, &self.topology.lm) {
            (Some(net), Some(config)) => Some(LmView {
                config,
                net,
                params: &self.params,
            }),
            _ => None,
        }
    }

    /// Parameters the optimizer may touch for this model's fusion mode.
    pub fn default_mask(&self) -> TrainableMask {
        match self.topology.fusion {
            FusionMode::Cold => TrainableMask::from_fn(&self.params, |n| !n.starts_with("lm.")),
            FusionMode::Deep => TrainableMask::from_fn(&self.params, |n| n.starts_with("fusion.")),
            _ => TrainableMask::all(&self.params),
        }
    }

    /// Appends rows for tokens that `vocab` adds to the current vocabulary.
    /// Returns the model and the names of the grown parameters.
    pub fn with_vocabulary(&self, vocab: &Vocabulary, seed: u64) -> Result<(AsrModel, Vec<String>)> {
        if !vocab.extends(&self.vocab) {
            return Err(Error::Topology("new vocabulary does not extend the model's vocabulary".into()));
        }
        let added = vocab.len() - self.vocab.len();
        let mut model = self.clone();
        if added == 0 {
            return Ok((model, Vec::new()));
        }
        let mut rng = rng_for(seed, 0xE7);
        let mut grown = Vec::new();
        // (name, fan-in of the new rows)
        let mut rows: Vec<(String, usize)> = Vec::new();
        for (_, p) in self.params.iter() {
            let n = &p.name;
            let per_token = matches!(
                n.as_str(),
                "decoder.embed" | "lm.embed" | "output.att.weight" | "output.att.bias" | "output.ctc.weight" | "output.ctc.bias" | "lm.output.weight" | "lm.output.bias" | "fusion.out.weight" | "fusion.out.bias"
            );
            if per_token {
                let fan_in = if n.ends_with("embed") {
                    1
                } else {
                    let w = self.params.by_name(&n.replace(".bias", ".weight")).expect("weight of a biased layer");
                    w.shape[1]
                };
                rows.push((n.clone(), fan_in));
            }
        }
        for (name, fan_in) in rows {
            let id = model.params.id(&name)?;
            let p = model.params.get(id);
            let mut shape = p.shape.clone();
            let width: usize = shape[1..].iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut data = p.data.clone();
            data.extend((0..added * width).map(|_| rng.random_range(-bound..bound)));
            shape[0] += added;
            model.params.replace(id, shape, data)?;
            grown.push(name);
        }
        model.vocab = vocab.clone();
        model.topology.model.vocab_size = vocab.len();
        if let Some(lm) = model.topology.lm.as_mut() {
            lm.vocab_size = vocab.len();
        }
        let model = AsrModel::from_parts(model.topology, model.vocab, model.params)?;
        Ok((model, grown))
    }

    // ---- graph-level pieces ---------------------------------------------------

    /// Output log-probabilities from the decoder state, through the gated
    /// head when `lm_feature` is given and the model is fused.
    pub fn output_logprobs(&self, g: &mut Graph, s: Var, lm_feature: Option<Var>) -> Result<Var> {
        let logits = match (&self.head, lm_feature) {
            (Some(head), Some(d)) => head.logits(g, s, d)?,
            (Some(_), None) => return Err(Error::Invalid("fused model stepped without an LM feature".into())),
            (None, _) => self.net.output_logits(g, s)?,
        };
        Ok(g.log_softmax(logits))
    }

    /// Attention and CTC loss terms for one utterance. `tokens` is the
    /// transcript `[langID, chars…]`; `reg` enables dropout and scheduled
    /// sampling.
    pub fn utterance_terms(&self, g: &mut Graph, feats: &[f64], frames: usize, tokens: &[usize], reg: Option<Regularization>) -> Result<UttTerms> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(Error::TokenOutOfRange {
                index: bad,
                size: self.vocab.len(),
            });
        }
        let cfg = &self.topology.model;
        let mut dropout = reg.filter(|r| r.dropout > 0.0).map(|r| DropoutCtx::new(rng_for(r.seed, 1).random(), r.dropout));
        let mut sampler = reg.filter(|r| r.sampling > 0.0).map(|r| (r.sampling, rng_for(r.seed, 2)));
        let enc = self.net.encoder.forward(g, cfg, feats, frames, dropout.as_mut())?;

        let ctc_lp = self.net.ctc_logprobs(g, enc)?;
        let (ctc_loss, realizable) = ctc::ctc_loss(g, ctc_lp, &ctc_labels(&self.vocab, tokens))?;

        let cache = self.net.attention.precompute(g, enc)?;
        let mut state = self.net.initial_state(g, &cache)?;
        let lm = self.embedded_lm();
        let mut lm_state = lm.map(|l| l.net.lstm.zero_state(g));
        let mut prev = SOS;
        let mut picks = Vec::with_capacity(tokens.len() + 1);
        let mut correct = 0;
        for (u, &target) in tokens.iter().chain(std::iter::once(&EOS)).enumerate() {
            state = self.net.decoder_step(g, &cache, &state, prev)?;
            let feature = match (lm, lm_state.as_ref()) {
                (Some(l), Some(ls)) => {
                    let (next, _) = l.net.step(g, ls, prev)?;
                    let f = next.top();
                    lm_state = Some(next);
                    Some(f)
                }
                _ => None,
            };
            let lp = self.output_logprobs(g, state.lstm.top(), feature)?;
            let values = g.value(lp);
            let best = argmax(values);
            if best == target {
                correct += 1;
            }
            prev = target;
            if let Some((p, rng)) = sampler.as_mut() {
                if u + 1 < tokens.len() + 1 && rng.random::<f64>() < *p {
                    prev = sample_from_logprobs(rng, values);
                }
            }
            picks.push(g.gather(lp, &[target])?);
        }
        let all = g.concat_cols(&picks)?;
        let sum = g.sum(all);
        Ok(UttTerms {
            att_nll: g.scale(sum, -1.0),
            ctc_nll: realizable.then_some(ctc_loss),
            targets: tokens.len() + 1,
            correct,
        })
    }

    // ---- value-level decoding ---------------------------------------------------

    pub fn encode(&self, feats: &[f64], frames: usize) -> Result<Encoded> {
        let mut g = Graph::inference(&self.params);
        let enc = self.net.encoder.forward(&mut g, &self.topology.model, feats, frames, None)?;
        let cache = self.net.attention.precompute(&mut g, enc)?;
        let ctc_lp = self.net.ctc_logprobs(&mut g, enc)?;
        Ok(Encoded {
            frames: cache.frames,
            enc: g.value(enc).to_vec(),
            enc_proj: g.value(cache.enc_proj).to_vec(),
            ctc_logprobs: g.value(ctc_lp).to_vec(),
        })
    }

    pub fn initial_snapshot(&self, enc: &Encoded) -> DecoderSnapshot {
        let cfg = &self.topology.model;
        DecoderSnapshot {
            lstm: LstmValues::zeros(cfg.dec_layers, cfg.dec_cells),
            alpha: vec![1.0 / enc.frames as f64; enc.frames],
        }
    }

    /// One decoder step on plain values: `(next snapshot, output log-probs)`.
    pub fn decode_step(&self, enc: &Encoded, snap: &DecoderSnapshot, prev: usize, lm_feature: Option<&[f64]>) -> Result<(DecoderSnapshot, Vec<f64>)> {
        let cfg = &self.topology.model;
        let mut g = Graph::inference(&self.params);
        let h = g.input(enc.frames, cfg.enc_dim(), enc.enc.clone())?;
        let hp = g.input(enc.frames, cfg.att_dim, enc.enc_proj.clone())?;
        let cache = AttentionCache {
            enc: h,
            enc_proj: hp,
            frames: enc.frames,
        };
        let lstm = snap.lstm.load(&mut g)?;
        let alpha = g.input(1, enc.frames, snap.alpha.clone())?;
        let context = g.zeros(1, cfg.enc_dim());
        let state = crate::s2s::DecoderState { lstm, alpha, context };
        let next = self.net.decoder_step(&mut g, &cache, &state, prev)?;
        let feature = lm_feature.map(|f| g.input(1, f.len(), f.to_vec())).transpose()?;
        let lp = self.output_logprobs(&mut g, next.lstm.top(), feature)?;
        Ok((
            DecoderSnapshot {
                lstm: LstmValues::capture(&g, &next.lstm),
                alpha: g.value(next.alpha).to_vec(),
            },
            g.value(lp).to_vec(),
        ))
    }

    /// Independent teacher-forced scores of `tokens` (`[langID?, chars…]`,
    /// eos implied): attention log-probability, CTC log-likelihood of the
    /// character labels, and LM log-probability under `lm` (or the embedded
    /// LM when `lm` is `None`).
    pub fn rescore(&self, feats: &[f64], frames: usize, tokens: &[usize], lm: Option<LmView<'_>>) -> Result<SequenceScores> {
        let mut g = Graph::inference(&self.params);
        let terms = self.utterance_terms(&mut g, feats, frames, tokens, None)?;
        let att = -g.scalar(terms.att_nll);
        let enc = self.encode(feats, frames)?;
        let ctc = ctc::ctc_log_likelihood(&enc.ctc_logprobs, enc.frames, self.vocab.len(), &ctc_labels(&self.vocab, tokens))?;
        let lm = match lm.or(self.embedded_lm()) {
            Some(l) => l.sentence_logprob(tokens)?,
            None => 0.0,
        };
        Ok(SequenceScores { att, ctc, lm })
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Returns a fused copy of `model` plus its trainability mask. Cold fusion
/// freezes the LM; deep fusion freezes everything but the fusion head. Shallow
/// and none leave the model unchanged (all trainable).
pub fn attach_fusion(model: &AsrModel, lm: &LanguageModel, mode: FusionMode, dims: &FusionConfig, seed: u64) -> Result<(AsrModel, TrainableMask)> {
    if lm.vocab != model.vocab {
        return Err(Error::Config(format!(
            "LM vocabulary ({}) differs from the acoustic model's ({})",
            lm.vocab.hash(),
            model.vocab.hash()
        )));
    }
    if !mode.is_gated() {
        let mut m = model.clone();
        m.topology.fusion = mode;
        let mask = m.default_mask();
        return Ok((m, mask));
    }
    if model.fusion_mode().is_gated() {
        return Err(Error::Config("model already carries a fusion head".into()));
    }
    let mut params = model.params.clone();
    for (_, p) in lm.params.iter() {
        params.insert(&p.name, p.shape.clone(), p.data.clone())?;
    }
    let cfg = &model.topology.model;
    FusionHead::init(&mut params, cfg.dec_cells, lm.config.cells, cfg.vocab_size, dims, &mut rng_for(seed, 0xF0))?;
    let topology = Topology {
        model: cfg.clone(),
        fusion: mode,
        lm: Some(lm.config.clone()),
        fusion_dims: Some(dims.clone()),
    };
    let fused = AsrModel::from_parts(topology, model.vocab.clone(), params)?;
    let mask = fused.default_mask();
    Ok((fused, mask))
}
