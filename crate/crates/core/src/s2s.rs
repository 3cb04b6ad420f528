//! Attention encoder-decoder: VGG-style convolution blocks and a BLSTM stack
//! (time reduction ×4), a location-aware attention, and an LSTM decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, LstmCell, LstmStack, LstmState};
use crate::par::{self, Exec};
use crate::tensor::{Graph, ParamId, ParamStore, Var};

/// Layer sizes of the acoustic model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub vocab_size: usize,
    pub conv_channels: [usize; 2],
    pub blstm_layers: usize,
    pub blstm_cells: usize,
    pub att_dim: usize,
    pub loc_channels: usize,
    pub loc_width: usize,
    pub embed_dim: usize,
    pub dec_layers: usize,
    pub dec_cells: usize,
}

impl ModelConfig {
    pub fn desk(feat_dim: usize, vocab_size: usize) -> Self {
        ModelConfig {
            feat_dim,
            vocab_size,
            conv_channels: [16, 32],
            blstm_layers: 2,
            blstm_cells: 64,
            att_dim: 64,
            loc_channels: 4,
            loc_width: 5,
            embed_dim: 32,
            dec_layers: 2,
            dec_cells: 64,
        }
    }

    /// Layer sizes of the full-scale system (5×1024 BLSTM, 2×1024 decoder).
    pub fn full(feat_dim: usize, vocab_size: usize) -> Self {
        ModelConfig {
            feat_dim,
            vocab_size,
            conv_channels: [64, 128],
            blstm_layers: 5,
            blstm_cells: 1024,
            att_dim: 1024,
            loc_channels: 10,
            loc_width: 201,
            embed_dim: 1024,
            dec_layers: 2,
            dec_cells: 1024,
        }
    }

    /// Width of one encoder output frame.
    pub fn enc_dim(&self) -> usize {
        2 * self.blstm_cells
    }

    pub fn pooled_freq(&self) -> usize {
        self.feat_dim.div_ceil(2).div_ceil(2)
    }
}

/// Encoder frame count after two stride-2 pools.
pub fn subsampled_len(frames: usize) -> usize {
    frames.div_ceil(2).div_ceil(2)
}

/// Seeded dropout for training-mode forward passes.
pub struct DropoutCtx {
    pub rng: ChaCha8Rng,
    pub p: f64,
}

impl DropoutCtx {
    pub fn new(seed: u64, p: f64) -> Self {
        DropoutCtx {
            rng: ChaCha8Rng::seed_from_u64(seed),
            p,
        }
    }

    fn mask(&mut self, n: usize) -> Vec<f64> {
        let keep = 1.0 / (1.0 - self.p);
        (0..n)
            .map(|_| if self.rng.random::<f64>() < self.p { 0.0 } else { keep })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub convs: Vec<Linear>,
    pub blstm: Vec<(LstmCell, LstmCell)>,
}

impl Encoder {
    fn conv_name(block: usize, i: usize) -> String {
        format!("encoder.conv{block}.{i}")
    }

    fn init<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (block, &c_out) in cfg.conv_channels.iter().enumerate() {
            for i in 0..2 {
                convs.push(Linear::init(store, &Self::conv_name(block, i), 9 * c_in, c_out, true, rng)?);
                c_in = c_out;
            }
        }
        let mut blstm = Vec::new();
        let mut input = cfg.pooled_freq() * cfg.conv_channels[1];
        for l in 0..cfg.blstm_layers {
            let f = LstmCell::init(store, &format!("encoder.blstm{l}.fwd"), input, cfg.blstm_cells, rng)?;
            let b = LstmCell::init(store, &format!("encoder.blstm{l}.bwd"), input, cfg.blstm_cells, rng)?;
            blstm.push((f, b));
            input = 2 * cfg.blstm_cells;
        }
        Ok(Encoder { convs, blstm })
    }

    fn bind(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let mut convs = Vec::new();
        for block in 0..2 {
            for i in 0..2 {
                convs.push(Linear::bind(store, &Self::conv_name(block, i))?);
            }
        }
        let blstm = (0..cfg.blstm_layers)
            .map(|l| {
                Ok((
                    LstmCell::bind(store, &format!("encoder.blstm{l}.fwd"))?,
                    LstmCell::bind(store, &format!("encoder.blstm{l}.bwd"))?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Encoder { convs, blstm })
    }

    /// `feats` is a row-major `frames × feat_dim` matrix. Returns `[T', 2·cells]`.
    pub fn forward(&self, g: &mut Graph, cfg: &ModelConfig, feats: &[f64], frames: usize, mut dropout: Option<&mut DropoutCtx>) -> Result<Var> {
        if frames == 0 {
            return Err(Error::Invalid("cannot encode a zero-length utterance".into()));
        }
        if feats.len() != frames * cfg.feat_dim {
            return Err(Error::Invalid(format!(
                "expected {frames}x{} features, got {} values",
                cfg.feat_dim,
                feats.len()
            )));
        }
        let mut x = g.input(frames, cfg.feat_dim, feats.to_vec())?;
        let (mut t, mut f, mut c) = (frames, cfg.feat_dim, 1usize);
        for block in 0..2 {
            for i in 0..2 {
                let conv = &self.convs[block * 2 + i];
                let cols = g.im2col3x3(x, t, f, c)?;
                let y = conv.forward(g, cols)?;
                x = g.relu(y);
                c = conv.out_dim;
            }
            x = g.max_pool2x2(x, t, f, c)?;
            t = t.div_ceil(2);
            f = f.div_ceil(2);
        }
        let mut h = g.reshape(x, t, f * c)?;
        for (fwd, bwd) in &self.blstm {
            let hf = run_direction(g, fwd, h, t, false)?;
            let hb = run_direction(g, bwd, h, t, true)?;
            h = g.concat_cols(&[hf, hb])?;
            if let Some(d) = dropout.as_deref_mut() {
                if d.p > 0.0 {
                    let (r, cc) = g.shape(h);
                    let mask = d.mask(r * cc);
                    h = g.dropout(h, mask)?;
                }
            }
        }
        Ok(h)
    }
}

fn run_direction(g: &mut Graph, cell: &LstmCell, x: Var, t: usize, reverse: bool) -> Result<Var> {
    let proj = cell.project(g, x)?;
    let mut h = g.zeros(1, cell.hidden);
    let mut c = g.zeros(1, cell.hidden);
    let mut outs = vec![h; t];
    let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
    for ti in order {
        let xp = g.slice_rows(proj, ti, 1)?;
        let (hn, cn) = cell.step_projected(g, xp, h, c)?;
        h = hn;
        c = cn;
        outs[ti] = h;
    }
    g.concat_rows(&outs)
}

/// Location-aware additive attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub dec_proj: Linear,
    pub enc_proj: Linear,
    pub loc_conv: ParamId,
    pub loc_proj: Linear,
    pub score: Linear,
}

/// Per-utterance quantities reused at every decoder step.
#[derive(Clone, Copy, Debug)]
pub struct AttentionCache {
    pub enc: Var,
    pub enc_proj: Var,
    pub frames: usize,
}

impl Attention {
    fn init<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(Attention {
            dec_proj: Linear::init(store, "attention.dec_proj", cfg.dec_cells, cfg.att_dim, false, rng)?,
            enc_proj: Linear::init(store, "attention.enc_proj", cfg.enc_dim(), cfg.att_dim, true, rng)?,
            loc_conv: store.insert_uniform("attention.loc_conv.weight", vec![cfg.loc_channels, cfg.loc_width], cfg.loc_width, rng)?,
            loc_proj: Linear::init(store, "attention.loc_proj", cfg.loc_channels, cfg.att_dim, false, rng)?,
            score: Linear::init(store, "attention.score", cfg.att_dim, 1, false, rng)?,
        })
    }

    fn bind(store: &ParamStore) -> Result<Self> {
        Ok(Attention {
            dec_proj: Linear::bind(store, "attention.dec_proj")?,
            enc_proj: Linear::bind(store, "attention.enc_proj")?,
            loc_conv: store.id("attention.loc_conv.weight")?,
            loc_proj: Linear::bind(store, "attention.loc_proj")?,
            score: Linear::bind(store, "attention.score")?,
        })
    }

    pub fn precompute(&self, g: &mut Graph, enc: Var) -> Result<AttentionCache> {
        let enc_proj = self.enc_proj.forward(g, enc)?;
        Ok(AttentionCache {
            enc,
            enc_proj,
            frames: g.shape(enc).0,
        })
    }

    /// `e_t = g·tanh(W s + V h_t + U (F ∗ α_prev)_t + b)`, `α = softmax(e)`,
    /// `c = Σ_t α_t h_t`. Returns `(c [1,H], α [1,T'])`.
    pub fn attend(&self, g: &mut Graph, cache: &AttentionCache, s_prev: Var, alpha_prev: Var) -> Result<(Var, Var)> {
        if cache.frames == 0 {
            return Err(Error::Invalid("attention over zero frames".into()));
        }
        if g.shape(alpha_prev) != (1, cache.frames) {
            return Err(Error::Invalid(format!(
                "previous attention weights {:?} do not cover {} frames",
                g.shape(alpha_prev),
                cache.frames
            )));
        }
        let ws = self.dec_proj.forward(g, s_prev)?;
        let kernel = g.param(self.loc_conv);
        let loc = g.conv1d(alpha_prev, kernel)?;
        let uf = self.loc_proj.forward(g, loc)?;
        let pre = g.add(cache.enc_proj, uf)?;
        let pre = g.add_row(pre, ws)?;
        let act = g.tanh(pre);
        let e = self.score.forward(g, act)?;
        let e = g.reshape(e, 1, cache.frames)?;
        let alpha = g.softmax(e);
        let context = g.matmul(alpha, cache.enc)?;
        Ok((context, alpha))
    }
}

/// Decoder recurrence state: LSTM stack, previous attention weights and context.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub lstm: LstmState,
    pub alpha: Var,
    pub context: Var,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: ParamId,
    pub lstm: LstmStack,
    pub output: Linear,
}

impl Decoder {
    fn init<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let embed = store.insert_uniform("decoder.embed", vec![cfg.vocab_size, cfg.embed_dim], 1, rng)?;
        let lstm = LstmStack::init(store, "decoder.lstm", cfg.embed_dim + cfg.enc_dim(), cfg.dec_cells, cfg.dec_layers, rng)?;
        let output = Linear::init(store, "output.att", cfg.dec_cells, cfg.vocab_size, true, rng)?;
        Ok(Decoder { embed, lstm, output })
    }

    fn bind(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(Decoder {
            embed: store.id("decoder.embed")?,
            lstm: LstmStack::bind(store, "decoder.lstm", cfg.dec_layers)?,
            output: Linear::bind(store, "output.att")?,
        })
    }
}

/// Parameter handles of the acoustic model.
#[derive(Clone, Debug)]
pub struct S2sNet {
    pub encoder: Encoder,
    pub attention: Attention,
    pub decoder: Decoder,
    pub ctc_head: Linear,
}

impl S2sNet {
    pub fn init<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::init(store, cfg, rng)?;
        let attention = Attention::init(store, cfg, rng)?;
        let decoder = Decoder::init(store, cfg, rng)?;
        let ctc_head = Linear::init(store, "output.ctc", cfg.enc_dim(), cfg.vocab_size, true, rng)?;
        Ok(S2sNet {
            encoder,
            attention,
            decoder,
            ctc_head,
        })
    }

    pub fn bind(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(S2sNet {
            encoder: Encoder::bind(store, cfg)?,
            attention: Attention::bind(store)?,
            decoder: Decoder::bind(store, cfg)?,
            ctc_head: Linear::bind(store, "output.ctc")?,
        })
    }

    /// Zero LSTM state and context, uniform initial attention.
    pub fn initial_state(&self, g: &mut Graph, cache: &AttentionCache) -> Result<DecoderState> {
        let lstm = self.decoder.lstm.zero_state(g);
        let alpha = g.input(1, cache.frames, vec![1.0 / cache.frames as f64; cache.frames])?;
        let context = g.zeros(1, g.shape(cache.enc).1);
        Ok(DecoderState { lstm, alpha, context })
    }

    /// Attends with the previous state, then feeds `[embed(prev); c_u]` to the
    /// LSTM stack. Returns the new state; its top hidden row is `s_u`.
    pub fn decoder_step(&self, g: &mut Graph, cache: &AttentionCache, state: &DecoderState, prev_token: usize) -> Result<DecoderState> {
        let (context, alpha) = self.attention.attend(g, cache, state.lstm.top(), state.alpha)?;
        let table = g.param(self.decoder.embed);
        let emb = g.embedding(table, &[prev_token])?;
        let x = g.concat_cols(&[emb, context])?;
        let lstm = self.decoder.lstm.step(g, x, &state.lstm)?;
        Ok(DecoderState { lstm, alpha, context })
    }

    /// Plain output layer `W^o s_u + b^o`.
    pub fn output_logits(&self, g: &mut Graph, s: Var) -> Result<Var> {
        self.decoder.output.forward(g, s)
    }

    /// CTC log-probabilities `[T', V]` over the encoder output.
    pub fn ctc_logprobs(&self, g: &mut Graph, enc: Var) -> Result<Var> {
        let logits = self.ctc_head.forward(g, enc)?;
        Ok(g.log_softmax(logits))
    }
}

/// Padded batch of encoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `[batch, max_len, dim]`, zero beyond each utterance's length.
    pub padded: Vec<f64>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
    pub dim: usize,
}

impl EncoderOutput {
    pub fn frame(&self, utt: usize, t: usize) -> &[f64] {
        let off = (utt * self.max_len + t) * self.dim;
        &self.padded[off..off + self.dim]
    }

    pub fn is_valid(&self, utt: usize, t: usize) -> bool {
        t < self.lengths[utt]
    }
}

/// Eval-mode encoding of a batch of `(features, frames)`; utterances are
/// encoded independently, so results do not depend on batch composition.
pub fn encode_batch(store: &ParamStore, net: &S2sNet, cfg: &ModelConfig, batch: &[(Vec<f64>, usize)], exec: Exec) -> Result<EncoderOutput> {
    let outs = par::map(exec, batch, |(feats, frames)| -> Result<(Vec<f64>, usize)> {
        let mut g = Graph::inference(store);
        let h = net.encoder.forward(&mut g, cfg, feats, *frames, None)?;
        Ok((g.value(h).to_vec(), g.shape(h).0))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let dim = cfg.enc_dim();
    let max_len = outs.iter().map(|o| o.1).max().unwrap_or(0);
    let mut padded = vec![0.0; batch.len() * max_len * dim];
    for (i, (h, len)) in outs.iter().enumerate() {
        padded[i * max_len * dim..i * max_len * dim + len * dim].copy_from_slice(h);
    }
    Ok(EncoderOutput {
        padded,
        lengths: outs.iter().map(|o| o.1).collect(),
        max_len,
        dim,
    })
}
