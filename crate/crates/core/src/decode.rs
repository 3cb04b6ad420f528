//! Joint attention + CTC + LM beam search.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::ctc::{CtcPrefixScorer, CtcPrefixState};
use crate::data::{Vocabulary, BLANK, EOS, SOS};
use crate::error::{Error, Result};
use crate::lm::{LmState, LmView};
use crate::model::{AsrModel, DecoderSnapshot, Encoded};
use crate::par::{self, Exec};
use crate::train::Utterance;

/// How the language-ID prefix is chosen.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LangPolicy {
    /// Every hypothesis starts `[sos, langID(lang)]`.
    Forced(String),
    /// The first expansion is restricted to language-ID tokens.
    #[default]
    Free,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    pub ctc_weight: f64,
    pub lm_weight: f64,
    /// Character budget relative to encoder frames.
    pub max_len_ratio: f64,
    /// Absolute character budget; overrides the ratio when set.
    pub max_len: Option<usize>,
    pub length_penalty: f64,
    pub policy: LangPolicy,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 20,
            ctc_weight: 0.3,
            lm_weight: 0.3,
            max_len_ratio: 1.5,
            max_len: None,
            length_penalty: 0.0,
            policy: LangPolicy::Free,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(Error::Config(format!("CTC weight {} outside [0, 1]", self.ctc_weight)));
        }
        if !self.lm_weight.is_finite() || self.lm_weight < 0.0 || !self.max_len_ratio.is_finite() {
            return Err(Error::Config("LM weight must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Maximum number of characters after the language ID.
    pub fn char_budget(&self, frames: usize) -> usize {
        self.max_len.unwrap_or_else(|| (self.max_len_ratio * frames as f64).ceil() as usize + 2)
    }
}

/// A weighted term; zero weight drops the term even when it is `-inf`.
fn weighted(w: f64, x: f64) -> f64 {
    if w == 0.0 {
        0.0
    } else {
        w * x
    }
}

/// `(1−λ)·att + λ·ctc + β·lm`.
pub fn combined_score(att: f64, ctc: f64, lm: f64, ctc_weight: f64, lm_weight: f64) -> f64 {
    weighted(1.0 - ctc_weight, att) + weighted(ctc_weight, ctc) + weighted(lm_weight, lm)
}

#[derive(Clone, Debug)]
struct Hyp {
    /// Output tokens after `sos`.
    tokens: Vec<usize>,
    chars: usize,
    att: f64,
    ctc: f64,
    lm: f64,
    score: f64,
    dec: DecoderSnapshot,
    ctc_state: Option<CtcPrefixState>,
    /// Embedded LM of a fused model (feature source).
    fused_lm: Option<LmState>,
    /// External LM used only for the score term.
    score_lm: Option<LmState>,
}

/// One finished hypothesis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// `[langID, chars…]` without `sos`/`eos`.
    pub tokens: Vec<usize>,
    pub att: f64,
    pub ctc: f64,
    pub lm: f64,
    pub score: f64,
}

struct Searcher<'a> {
    model: &'a AsrModel,
    enc: Encoded,
    ctc: Option<CtcPrefixScorer<'a>>,
    fused_lm: Option<LmView<'a>>,
    score_lm: Option<LmView<'a>>,
    cfg: &'a DecodeConfig,
}

struct Expansion {
    dec: DecoderSnapshot,
    att: Vec<f64>,
    lm: Option<Vec<f64>>,
    fused_lm: Option<LmState>,
    score_lm: Option<LmState>,
}

impl Searcher<'_> {
    fn expand(&self, h: &Hyp) -> Result<Expansion> {
        let prev = h.tokens.last().copied().unwrap_or(SOS);
        let mut lm_lp = None;
        let mut fused_state = None;
        let mut feature = None;
        if let (Some(view), Some(st)) = (self.fused_lm, h.fused_lm.as_ref()) {
            let (next, lp, feat) = view.step(st, prev)?;
            fused_state = Some(next);
            feature = Some(feat);
            lm_lp = Some(lp);
        }
        let mut score_state = None;
        if let (Some(view), Some(st)) = (self.score_lm, h.score_lm.as_ref()) {
            let (next, lp, _) = view.step(st, prev)?;
            score_state = Some(next);
            lm_lp = Some(lp);
        }
        let (dec, att) = self.model.decode_step(&self.enc, &h.dec, prev, feature.as_deref())?;
        Ok(Expansion {
            dec,
            att,
            lm: if self.cfg.lm_weight == 0.0 { None } else { lm_lp },
            fused_lm: fused_state,
            score_lm: score_state,
        })
    }

    fn extend(&self, h: &Hyp, x: &Expansion, token: usize, vocab: &Vocabulary) -> Result<Hyp> {
        let att = h.att + x.att[token];
        let lm = h.lm + x.lm.as_ref().map_or(0.0, |l| l[token]);
        let (ctc, ctc_state) = match (&self.ctc, &h.ctc_state) {
            (Some(scorer), Some(st)) if token == EOS => (h.ctc + scorer.finish(st), Some(st.clone())),
            (Some(_), Some(st)) if vocab.is_lang_id(token) => (h.ctc, Some(st.clone())),
            (Some(scorer), Some(st)) => {
                let (next, inc) = scorer.extend(st, token)?;
                (h.ctc + inc, Some(next))
            }
            _ => (0.0, None),
        };
        let mut tokens = h.tokens.clone();
        tokens.push(token);
        let chars = h.chars + usize::from(token != EOS && !vocab.is_lang_id(token));
        let score = combined_score(att, ctc, lm, self.cfg.ctc_weight, self.cfg.lm_weight) + self.cfg.length_penalty * chars as f64;
        Ok(Hyp {
            tokens,
            chars,
            att,
            ctc,
            lm,
            score,
            dec: x.dec.clone(),
            ctc_state,
            fused_lm: x.fused_lm.clone(),
            score_lm: x.score_lm.clone(),
        })
    }
}

fn rank(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

/// Beam search over one utterance. `lm` is an external LM for the score term;
/// fused models fall back to their embedded LM. Returns up to `beam`
/// finished hypotheses, best first.
pub fn beam_search(model: &AsrModel, lm: Option<LmView<'_>>, feats: &[f64], frames: usize, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    if frames == 0 || feats.is_empty() {
        return Err(Error::Invalid("cannot decode an empty utterance".into()));
    }
    let vocab = &model.vocab;
    if let Some(l) = lm {
        if l.config.vocab_size != vocab.len() {
            return Err(Error::Config("LM and acoustic model vocabularies differ".into()));
        }
    }
    let fused_lm = model.embedded_lm();
    let score_lm = lm.filter(|_| cfg.lm_weight > 0.0);
    if cfg.lm_weight > 0.0 && score_lm.is_none() && fused_lm.is_none() {
        return Err(Error::Config("LM weight is positive but no language model is available".into()));
    }
    let enc = model.encode(feats, frames)?;
    let mut s = Searcher {
        model,
        ctc: None,
        fused_lm,
        score_lm,
        cfg,
        enc,
    };
    let ctc_logprobs = std::mem::take(&mut s.enc.ctc_logprobs);
    let scorer = (cfg.ctc_weight > 0.0).then(|| CtcPrefixScorer::new(&ctc_logprobs, s.enc.frames, vocab.len())).transpose()?;
    s.ctc = scorer;
    let budget = cfg.char_budget(s.enc.frames);

    let root = Hyp {
        tokens: Vec::new(),
        chars: 0,
        att: 0.0,
        ctc: 0.0,
        lm: 0.0,
        score: 0.0,
        dec: model.initial_snapshot(&s.enc),
        ctc_state: s.ctc.as_ref().map(|c| c.initial()),
        fused_lm: fused_lm.map(|l| l.initial_state()),
        score_lm: score_lm.map(|l| l.initial_state()),
    };
    let lang_ids = vocab.lang_ids();
    let mut live = match &cfg.policy {
        LangPolicy::Forced(lang) => {
            let id = vocab.lang_id(lang)?;
            let x = s.expand(&root)?;
            vec![s.extend(&root, &x, id, vocab)?]
        }
        LangPolicy::Free => vec![root],
    };
    let mut pool: Vec<Hyp> = Vec::new();
    while !live.is_empty() {
        let expansions = live.iter().map(|h| s.expand(h)).collect::<Result<Vec<_>>>()?;
        // (score, token, hyp) candidates
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        let mut partial: Vec<Option<Hyp>> = Vec::new();
        let mut index = std::collections::HashMap::new();
        for (hi, (h, x)) in live.iter().zip(&expansions).enumerate() {
            let tokens: Vec<usize> = if h.tokens.is_empty() {
                lang_ids.clone()
            } else if h.chars >= budget {
                vec![EOS]
            } else {
                (0..vocab.len()).filter(|&t| t != BLANK && t != SOS && !vocab.is_lang_id(t)).collect()
            };
            for t in tokens {
                let nh = s.extend(h, x, t, vocab)?;
                if !nh.score.is_nan() {
                    index.insert((hi, t), partial.len());
                    cands.push((nh.score, t, hi));
                    partial.push(Some(nh));
                }
            }
        }
        cands.sort_by(rank);
        cands.truncate(cfg.beam);
        let mut next = Vec::new();
        for (_, t, hi) in cands {
            let h = partial[index[&(hi, t)]].take().expect("each candidate taken once");
            if t == EOS {
                pool.push(h);
            } else {
                next.push(h);
            }
        }
        pool.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.tokens.cmp(&b.tokens)));
        pool.truncate(cfg.beam);
        live = next;
        if cfg.length_penalty <= 0.0 && pool.len() >= cfg.beam {
            let worst = pool.last().map_or(f64::INFINITY, |h| h.score);
            if live.first().is_none_or(|h| h.score <= worst) {
                break;
            }
        }
    }
    Ok(pool
        .into_iter()
        .map(|h| Hypothesis {
            tokens: h.tokens[..h.tokens.len() - 1].to_vec(),
            att: h.att,
            ctc: h.ctc,
            lm: h.lm,
            score: h.score,
        })
        .collect())
}

/// One line of the n-best file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NBestRecord {
    pub utt_id: String,
    pub rank: usize,
    pub lang: Option<String>,
    pub text: String,
    pub att: f64,
    pub ctc: f64,
    pub lm: f64,
    pub score: f64,
}

pub fn to_records(vocab: &Vocabulary, utt_id: &str, hyps: &[Hypothesis]) -> Vec<NBestRecord> {
    hyps.iter()
        .enumerate()
        .map(|(rank, h)| NBestRecord {
            utt_id: utt_id.to_string(),
            rank: rank + 1,
            lang: h.tokens.first().and_then(|&t| vocab.lang_name(t)).map(str::to_string),
            text: vocab.decode_text(&h.tokens),
            att: h.att,
            ctc: h.ctc,
            lm: h.lm,
            score: h.score,
        })
        .collect()
}

/// Decodes every utterance (in parallel under `exec`), ordered by `utt_id`.
/// `policy_for` picks the language policy per utterance.
pub fn decode_corpus(
    model: &AsrModel,
    lm: Option<LmView<'_>>,
    utts: &[Utterance],
    cfg: &DecodeConfig,
    nbest: usize,
    exec: Exec,
) -> Result<Vec<NBestRecord>> {
    let mut sorted: Vec<&Utterance> = utts.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let results = par::map(exec, &sorted, |u| -> Result<Vec<NBestRecord>> {
        let hyps = beam_search(model, lm, &u.feats, u.frames, cfg)?;
        let mut recs = to_records(&model.vocab, &u.id, &hyps);
        recs.truncate(nbest.max(1));
        Ok(recs)
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

pub fn write_nbest(path: &std::path::Path, records: &[NBestRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).map_err(|e| Error::Invalid(e.to_string()))?);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_nbest(path: &std::path::Path) -> Result<Vec<NBestRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.into(),
                msg: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{FusionConfig, FusionMode};
    use crate::model::attach_fusion;
    use crate::model::tests::{feats, tiny_config, tiny_lm, tiny_vocab};
    use crate::data::UNK;

    fn cfg(beam: usize, lambda: f64, beta: f64) -> DecodeConfig {
        DecodeConfig {
            beam,
            ctc_weight: lambda,
            lm_weight: beta,
            max_len: Some(3),
            policy: LangPolicy::Forced("p".into()),
            ..Default::default()
        }
    }

    #[test]
    fn config_checks() {
        assert!(cfg(0, 0.3, 0.0).validate().is_err());
        assert!(cfg(2, 1.5, 0.0).validate().is_err());
        assert_eq!(DecodeConfig::default().char_budget(4), 8);
        let v = tiny_vocab();
        let m = AsrModel::new(v.clone(), tiny_config(v.len()), 1).unwrap();
        assert!(matches!(beam_search(&m, None, &feats(8, 1), 8, &cfg(2, 0.3, 0.3)), Err(Error::Config(_))));
        assert!(beam_search(&m, None, &[], 0, &cfg(2, 0.3, 0.0)).is_err());
        let mut bad = cfg(2, 0.3, 0.0);
        bad.policy = LangPolicy::Forced("zz".into());
        assert!(matches!(beam_search(&m, None, &feats(8, 1), 8, &bad), Err(Error::UnknownLanguage(_))));
    }

    #[test]
    fn outputs_are_well_formed_and_rescorable() {
        let v = tiny_vocab();
        let lm = tiny_lm(&v, 3);
        let m = AsrModel::new(v.clone(), tiny_config(v.len()), 2).unwrap();
        let (cold, _) = attach_fusion(&m, &lm, FusionMode::Cold, &FusionConfig::default(), 1).unwrap();
        let f = feats(14, 5);
        for (model, ext) in [(&m, Some(lm.view())), (&cold, None)] {
            let mut c = cfg(4, 0.3, 0.3);
            c.max_len = None;
            c.policy = LangPolicy::Free;
            let hyps = beam_search(model, ext, &f, 14, &c).unwrap();
            assert!(!hyps.is_empty());
            for h in &hyps {
                assert!(v.is_lang_id(h.tokens[0]));
                assert!(h.tokens[1..].iter().all(|&t| t != BLANK && t != SOS && t != EOS && !v.is_lang_id(t)));
                let r = model.rescore(&f, 14, &h.tokens, ext).unwrap();
                let again = combined_score(r.att, r.ctc, r.lm, 0.3, 0.3);
                assert!((again - h.score).abs() < 1e-6, "{again} vs {}", h.score);
            }
            assert!(hyps.windows(2).all(|w| w[0].score >= w[1].score));
        }
    }

    #[test]
    fn zero_lm_weight_ignores_the_lm() {
        let v = tiny_vocab();
        let m = AsrModel::new(v.clone(), tiny_config(v.len()), 2).unwrap();
        let lm = tiny_lm(&v, 3);
        let f = feats(12, 1);
        let a = beam_search(&m, Some(lm.view()), &f, 12, &cfg(4, 0.3, 0.0)).unwrap();
        let b = beam_search(&m, None, &f, 12, &cfg(4, 0.3, 0.0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unit_beam_is_greedy_attention() {
        let v = tiny_vocab();
        for seed in 0..5 {
            let m = AsrModel::new(v.clone(), tiny_config(v.len()), seed).unwrap();
            let f = feats(12, seed);
            let mut c = cfg(1, 0.0, 0.0);
            c.max_len = Some(6);
            let best = &beam_search(&m, None, &f, 12, &c).unwrap()[0];
            let enc = m.encode(&f, 12).unwrap();
            let p = v.lang_id("p").unwrap();
            let mut snap = m.initial_snapshot(&enc);
            let mut prev = SOS;
            let mut out = vec![p];
            // forced language step, then argmax over the allowed tokens
            let (s1, _) = m.decode_step(&enc, &snap, prev, None).unwrap();
            snap = s1;
            prev = p;
            loop {
                let (next, lp) = m.decode_step(&enc, &snap, prev, None).unwrap();
                let allowed = [UNK, EOS, 5, 6];
                let mut tok = if out.len() > 6 { EOS } else { allowed[0] };
                if out.len() <= 6 {
                    for &t in &allowed {
                        if lp[t] > lp[tok] || (lp[t] == lp[tok] && t < tok) {
                            tok = t;
                        }
                    }
                }
                if tok == EOS {
                    break;
                }
                out.push(tok);
                snap = next;
                prev = tok;
            }
            assert_eq!(best.tokens, out);
        }
    }

    /// Best combined score over every forced-language sequence of at most
    /// `max_chars` characters, each scored by independent rescoring.
    fn exhaustive(m: &AsrModel, lm: Option<LmView<'_>>, f: &[f64], frames: usize, lambda: f64, beta: f64, max_chars: usize) -> (Vec<usize>, f64) {
        let p = m.vocab.lang_id("p").unwrap();
        let alphabet = [UNK, 5, 6];
        let mut frontier = vec![vec![p]];
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        for len in 0..=max_chars {
            let mut next = Vec::new();
            for seq in &frontier {
                let r = m.rescore(f, frames, seq, lm).unwrap();
                let sc = combined_score(r.att, r.ctc, r.lm, lambda, beta);
                if sc > best.1 {
                    best = (seq.clone(), sc);
                }
                if len < max_chars {
                    for &c in &alphabet {
                        let mut s2 = seq.clone();
                        s2.push(c);
                        next.push(s2);
                    }
                }
            }
            frontier = next;
        }
        best
    }

    #[test]
    fn wide_beam_matches_exhaustive_search() {
        let v = tiny_vocab();
        for seed in 0..4u64 {
            let m = AsrModel::new(v.clone(), tiny_config(v.len()), seed).unwrap();
            let lm = tiny_lm(&v, seed + 100);
            let frames = 4 + (seed as usize * 3) % 9;
            let f = feats(frames, seed);
            for lambda in [0.0, 0.3, 1.0] {
                for beta in [0.0, 0.3] {
                    let hyps = beam_search(&m, Some(lm.view()), &f, frames, &cfg(64, lambda, beta)).unwrap();
                    let (seq, score) = exhaustive(&m, Some(lm.view()), &f, frames, lambda, beta, 3);
                    assert_eq!(hyps[0].tokens, seq, "seed {seed} λ {lambda} β {beta}");
                    assert!((hyps[0].score - score).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn best_score_is_monotone_in_beam() {
        let v = tiny_vocab();
        for seed in 0..6u64 {
            let m = AsrModel::new(v.clone(), tiny_config(v.len()), seed).unwrap();
            let f = feats(12, seed);
            let mut c = cfg(1, 0.3, 0.0);
            c.max_len = Some(5);
            let mut prev = f64::NEG_INFINITY;
            for beam in 1..=8 {
                c.beam = beam;
                let best = beam_search(&m, None, &f, 12, &c).unwrap()[0].score;
                assert!(best >= prev - 1e-12, "seed {seed} beam {beam}: {best} < {prev}");
                prev = best;
            }
        }
    }
}
