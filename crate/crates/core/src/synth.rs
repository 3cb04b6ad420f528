//! Synthetic "languages": a shared pool of phone templates, per-language
//! alphabets mapped onto the pool, and low-entropy bigram grammars. Corpora
//! drawn from languages built on the same pool share acoustics, which is what
//! makes cross-lingual transfer measurable.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::data::{write_manifest, FeatureMatrix, UtteranceRecord};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::rng_for;

const CHAR_WINDOW: u32 = 64;
const CHAR_BASE: u32 = 0x4E00;

/// Generation parameters for one language.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LanguageSpec {
    pub name: String,
    pub pool_seed: u64,
    pub lang_seed: u64,
    pub alphabet_size: usize,
    pub dim: usize,
    pub pool_size: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub noise_sigma: f64,
    /// Dirichlet concentration of bigram rows; small values give low entropy.
    pub concentration: f64,
    /// Whether a character may directly follow itself. Without repeats every
    /// character boundary is a change of template.
    #[serde(default)]
    pub repeats: bool,
}

impl LanguageSpec {
    pub fn desk(name: &str, pool_seed: u64, lang_seed: u64) -> Self {
        LanguageSpec {
            name: name.to_string(),
            pool_seed,
            lang_seed,
            alphabet_size: 8,
            dim: 8,
            pool_size: 20,
            min_duration: 5,
            max_duration: 8,
            noise_sigma: 0.1,
            concentration: 0.2,
            repeats: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticLanguage {
    pub name: String,
    pub alphabet: Vec<char>,
    /// Template index for each alphabet entry.
    pub phone_of: Vec<usize>,
    /// The shared pool, `pool_size` vectors of length `dim`.
    pub templates: Vec<Vec<f64>>,
    /// Distribution of the first character.
    pub initial: Vec<f64>,
    /// `bigram[i][j] = P(next = j | current = i)`.
    pub bigram: Vec<Vec<f64>>,
    pub min_duration: usize,
    pub max_duration: usize,
    pub noise_sigma: f64,
}

/// Template pool shared by every language with the same `pool_seed`.
pub fn phone_pool(pool_seed: u64, pool_size: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = rng_for(pool_seed, 0x900D);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..pool_size)
        .map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect())
        .collect()
}

fn dirichlet<R: Rng>(rng: &mut R, n: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let mut w: Vec<f64> = (0..n).map(|_| gamma.sample(rng).max(1e-300)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mixes a little uniform mass into the allowed entries so every allowed
/// transition stays possible.
fn smooth(row: Vec<f64>, allowed: &[bool]) -> Vec<f64> {
    let n = allowed.iter().filter(|&&a| a).count() as f64;
    let row: Vec<f64> = row
        .into_iter()
        .zip(allowed)
        .map(|(p, &a)| if a { 0.95 * p + 0.05 / n } else { 0.0 })
        .collect();
    let s: f64 = row.iter().sum();
    row.into_iter().map(|p| p / s).collect()
}

fn bigram_row<R: Rng>(rng: &mut R, n: usize, from: usize, spec: &LanguageSpec) -> Vec<f64> {
    let allowed: Vec<bool> = (0..n).map(|j| spec.repeats || n == 1 || j != from).collect();
    let k = allowed.iter().filter(|&&a| a).count();
    let mut draws = dirichlet(rng, k, spec.concentration).into_iter();
    let row = allowed.iter().map(|&a| if a { draws.next().expect("one draw per allowed entry") } else { 0.0 }).collect();
    smooth(row, &allowed)
}

pub fn make_language(spec: &LanguageSpec) -> Result<SyntheticLanguage> {
    if spec.alphabet_size == 0 || spec.alphabet_size > spec.pool_size {
        return Err(Error::Invalid(format!(
            "alphabet of {} characters does not fit a pool of {} templates",
            spec.alphabet_size, spec.pool_size
        )));
    }
    if spec.alphabet_size as u32 > CHAR_WINDOW {
        return Err(Error::Invalid(format!("alphabet larger than {CHAR_WINDOW}")));
    }
    if spec.min_duration == 0 || spec.min_duration > spec.max_duration {
        return Err(Error::Invalid("duration range must satisfy 1 <= min <= max".into()));
    }
    let templates = phone_pool(spec.pool_seed, spec.pool_size, spec.dim);
    let mut rng = rng_for(spec.lang_seed, 0x1A46);

    let base = CHAR_BASE + (spec.lang_seed % 256) as u32 * CHAR_WINDOW;
    let mut offsets: Vec<u32> = (0..CHAR_WINDOW).collect();
    offsets.shuffle(&mut rng);
    let mut alphabet: Vec<char> = offsets[..spec.alphabet_size]
        .iter()
        .map(|o| char::from_u32(base + o).expect("CJK block code point"))
        .collect();
    alphabet.sort_unstable();

    let mut phones: Vec<usize> = (0..spec.pool_size).collect();
    phones.shuffle(&mut rng);
    let phone_of = phones[..spec.alphabet_size].to_vec();

    let n = spec.alphabet_size;
    let initial = smooth(dirichlet(&mut rng, n, 1.0), &vec![true; n]);
    let bigram = (0..n).map(|i| bigram_row(&mut rng, n, i, spec)).collect();

    Ok(SyntheticLanguage {
        name: spec.name.clone(),
        alphabet,
        phone_of,
        templates,
        initial,
        bigram,
        min_duration: spec.min_duration,
        max_duration: spec.max_duration,
        noise_sigma: spec.noise_sigma,
    })
}

fn sample_index<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

impl SyntheticLanguage {
    /// Character indices of one sentence drawn from the chain.
    pub fn sample_indices<R: Rng>(&self, rng: &mut R, len: usize) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::with_capacity(len);
        for i in 0..len {
            let next = if i == 0 {
                sample_index(rng, &self.initial)
            } else {
                sample_index(rng, &self.bigram[out[i - 1]])
            };
            out.push(next);
        }
        out
    }

    pub fn render(&self, indices: &[usize]) -> String {
        indices.iter().map(|&i| self.alphabet[i]).collect()
    }

    pub fn dim(&self) -> usize {
        self.templates.first().map_or(0, Vec::len)
    }

    /// One utterance: transcript and its frames.
    pub fn sample_utterance(&self, len_range: (usize, usize), seed: u64, index: u64) -> (String, FeatureMatrix) {
        let mut rng = rng_for(seed, index);
        let len = rng.random_range(len_range.0..=len_range.1);
        let chars = self.sample_indices(&mut rng, len);
        let dim = self.dim();
        let noise = Normal::new(0.0, self.noise_sigma.max(0.0)).expect("valid sigma");
        let mut data = Vec::new();
        for &c in &chars {
            let dur = rng.random_range(self.min_duration..=self.max_duration);
            let template = &self.templates[self.phone_of[c]];
            for _ in 0..dur {
                for &v in template {
                    let n = if self.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    data.push((v + n) as f32);
                }
            }
        }
        let frames = data.len() / dim.max(1);
        let feats = FeatureMatrix {
            frames,
            dim,
            data,
        };
        (self.render(&chars), feats)
    }

    /// Text-only sentences for LM training.
    pub fn sample_text(&self, n: usize, len_range: (usize, usize), seed: u64) -> Vec<String> {
        (0..n as u64)
            .map(|i| {
                let mut rng = rng_for(seed, i);
                let len = rng.random_range(len_range.0..=len_range.1);
                self.render(&self.sample_indices(&mut rng, len))
            })
            .collect()
    }

    /// Per-token entropy rate oracle: exact perplexity, under this chain,
    /// of the token stream `langID c_1 … c_n eos` when `n` is uniform on
    /// `len_range` and the language ID is known in advance (zero cost).
    pub fn framed_perplexity(&self, len_range: (usize, usize)) -> f64 {
        let (lo, hi) = len_range;
        assert!(lo >= 1 && lo <= hi, "sentence lengths must be in 1..=hi");
        let entropy = |p: &[f64]| -> f64 { p.iter().filter(|&&x| x > 0.0).map(|x| -x * x.ln()).sum() };
        let row_h: Vec<f64> = self.bigram.iter().map(|r| entropy(r)).collect();
        let count = (hi - lo + 1) as f64;
        let mut total_h = 0.0;
        // lengths are at least one, so the first character is always emitted
        total_h += entropy(&self.initial);
        let mut marginal = self.initial.clone();
        // P(length >= k) for k >= lo
        let reach = |k: usize| -> f64 { (hi + 1 - k) as f64 / count };
        let mut alive = 1.0;
        for k in 1..=hi {
            // after k characters: stop with hazard h_k, otherwise emit next char
            let hazard = if k < lo { 0.0 } else { (1.0 / count) / reach(k) };
            let expected_row_h: f64 = marginal.iter().zip(&row_h).map(|(p, h)| p * h).sum();
            total_h += alive * (binary(hazard) + (1.0 - hazard) * expected_row_h);
            let mut next = vec![0.0; marginal.len()];
            for (i, p) in marginal.iter().enumerate() {
                for (j, q) in self.bigram[i].iter().enumerate() {
                    next[j] += p * q;
                }
            }
            marginal = next;
            alive *= 1.0 - hazard;
        }
        let mean_len = (lo + hi) as f64 / 2.0;
        // tokens per sentence: language ID + characters + eos
        (total_h / (mean_len + 2.0)).exp()
    }
}

fn binary(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
    }
}

/// Writes `n_utts` utterances under `dir/feats/` and a manifest at
/// `dir/<name>.jsonl`. Feature paths in the manifest are relative to `dir`.
pub fn write_corpus(
    lang: &SyntheticLanguage,
    n_utts: usize,
    len_range: (usize, usize),
    seed: u64,
    dir: &Path,
    name: &str,
) -> Result<Vec<UtteranceRecord>> {
    if n_utts == 0 {
        return Err(Error::Invalid("corpus needs at least one utterance".into()));
    }
    let feat_dir = dir.join("feats");
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let indices: Vec<u64> = (0..n_utts as u64).collect();
    let records = par::map(par::Exec::Auto, &indices, |&i| -> Result<UtteranceRecord> {
        let (text, feats) = lang.sample_utterance(len_range, seed, i);
        let utt_id = format!("{name}-{i:05}");
        let rel = Path::new("feats").join(format!("{utt_id}.fea"));
        feats.write(&dir.join(&rel))?;
        Ok(UtteranceRecord {
            utt_id,
            lang: lang.name.clone(),
            feat_path: rel,
            text,
            num_frames: feats.frames,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    write_manifest(&dir.join(format!("{name}.jsonl")), &records)?;
    Ok(records)
}

/// One sentence per line.
pub fn write_text(path: &Path, lines: &[String]) -> Result<()> {
    let mut s = String::new();
    for l in lines {
        s.push_str(l);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
