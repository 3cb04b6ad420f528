//! File-based experiment driver: configuration, stage artifacts and the
//! stage runners behind the command-line tool.
//!
//! Layout under the output directory:
//!
//! ```text
//! data/      manifests, feature files, LM text, languages.json
//! prep/      vocab.txt, stats.json
//! seed/      model.ckpt, train_log.jsonl
//! lm/        lm.ckpt, train_log.jsonl
//! adapt-<fusion>/   model.ckpt (+ stage1.ckpt for deep), train_log.jsonl
//! decode-<fusion>/  nbest.jsonl
//! score-<fusion>/   score.json
//! ```
//!
//! Every stage directory also receives the resolved `config.toml`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainMeta};
use crate::data::{read_manifest, resolve_feat_path, FeatureMatrix, FeatureStats, UtteranceRecord, Vocabulary};
use crate::decode::{decode_corpus, read_nbest, write_nbest, DecodeConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionMode};
use crate::lm::{encode_corpus, train_lm, LanguageModel, LmConfig, LmTrainConfig};
use crate::model::AsrModel;
use crate::par::Exec;
use crate::rng::derive_seed;
use crate::s2s::ModelConfig;
use crate::score::{score, ScoreReport};
use crate::synth::{make_language, write_corpus, write_text, LanguageSpec, SyntheticLanguage};
use crate::train::{df_transfer, train, transfer_init, EpochLog, OptimizerConfig, TrainReport, Utterance};

/// Model scale.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Full,
}

impl Preset {
    pub fn model(self, feat_dim: usize, vocab_size: usize) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::desk(feat_dim, vocab_size),
            Preset::Full => ModelConfig::full(feat_dim, vocab_size),
        }
    }

    pub fn lm(self, vocab_size: usize) -> LmConfig {
        match self {
            Preset::Desk => LmConfig::desk(vocab_size),
            Preset::Full => LmConfig::full(vocab_size),
        }
    }
}

/// Synthetic corpus sizes and generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed_languages: Vec<String>,
    pub target_language: String,
    pub seed_train_utts: usize,
    pub seed_valid_utts: usize,
    pub target_train_utts: usize,
    pub target_valid_utts: usize,
    pub target_test_utts: usize,
    /// LM-only sentences as a multiple of the paired target utterances.
    pub lm_text_factor: usize,
    pub min_chars: usize,
    pub max_chars: usize,
    pub alphabet_size: usize,
    pub feat_dim: usize,
    pub pool_size: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub noise_sigma: f64,
    pub concentration: f64,
    /// Allow a character to directly follow itself.
    pub repeats: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let spec = LanguageSpec::desk("", 0, 0);
        DataConfig {
            seed_languages: vec!["seed1".into(), "seed2".into(), "seed3".into()],
            target_language: "target".into(),
            seed_train_utts: 200,
            seed_valid_utts: 20,
            target_train_utts: 30,
            target_valid_utts: 10,
            target_test_utts: 100,
            lm_text_factor: 5,
            min_chars: 3,
            max_chars: 8,
            alphabet_size: spec.alphabet_size,
            feat_dim: spec.dim,
            pool_size: spec.pool_size,
            min_duration: spec.min_duration,
            max_duration: spec.max_duration,
            noise_sigma: spec.noise_sigma,
            concentration: spec.concentration,
            repeats: spec.repeats,
        }
    }
}

impl DataConfig {
    pub fn len_range(&self) -> (usize, usize) {
        (self.min_chars, self.max_chars)
    }

    /// Every language, seed languages first.
    pub fn languages(&self) -> Vec<&str> {
        self.seed_languages.iter().map(String::as_str).chain([self.target_language.as_str()]).collect()
    }

    fn validate(&self) -> Result<()> {
        let mut names = self.languages();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.seed_languages.len() + 1 || names.iter().any(|n| n.is_empty() || n.contains(['<', '>', ' '])) {
            return Err(Error::Config("language names must be distinct, non-empty and free of `<`, `>` and spaces".into()));
        }
        if self.seed_languages.is_empty() || self.seed_train_utts == 0 || self.target_train_utts == 0 || self.target_test_utts == 0 {
            return Err(Error::Config("need at least one seed language and non-empty train/test splits".into()));
        }
        if self.min_chars == 0 || self.min_chars > self.max_chars || self.min_duration == 0 || self.min_duration > self.max_duration {
            return Err(Error::Config("character and duration ranges must satisfy 1 <= min <= max".into()));
        }
        Ok(())
    }
}

/// A fully resolved experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub out: PathBuf,
    pub fusion: FusionMode,
    /// Hypotheses kept per utterance in the n-best file.
    pub nbest: usize,
    /// Overrides `<out>/seed/model.ckpt` as the adaptation starting point.
    pub seed_checkpoint: Option<PathBuf>,
    /// Overrides `<out>/lm/lm.ckpt`.
    pub lm_checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub train_seed: OptimizerConfig,
    pub adapt: OptimizerConfig,
    pub lm: LmTrainConfig,
    pub fusion_dims: FusionConfig,
    pub decode: DecodeConfig,
}

const STREAM_DATA: u64 = 1;
const STREAM_SEED_TRAIN: u64 = 2;
const STREAM_LM: u64 = 3;
const STREAM_ADAPT: u64 = 4;

/// Stage seeds stay below 2^63 so they fit TOML integers.
fn stage_seed(seed: u64, stream: u64) -> u64 {
    derive_seed(seed, stream) >> 1
}

impl ExperimentConfig {
    /// Defaults for a preset before seeds are derived.
    pub fn preset(preset: Preset) -> Self {
        let (train_seed, adapt, data, lm) = match preset {
            Preset::Desk => {
                let base = OptimizerConfig {
                    epsilon: 1e-6,
                    batch_size: 5,
                    decay_grace: 15,
                    epochs: 40,
                    ..OptimizerConfig::default()
                };
                let adapt = OptimizerConfig {
                    batch_size: 2,
                    epochs: 60,
                    decay_grace: 30,
                    ..base.clone().adaptation()
                };
                let data = DataConfig {
                    noise_sigma: 3.0,
                    target_valid_utts: 40,
                    target_test_utts: 200,
                    ..DataConfig::default()
                };
                let lm = LmTrainConfig {
                    epochs: 30,
                    batch_size: 4,
                    ..LmTrainConfig::default()
                };
                (OptimizerConfig { dropout: 0.0, ..base }, adapt, data, lm)
            }
            Preset::Full => (
                OptimizerConfig::default(),
                OptimizerConfig::default().adaptation(),
                DataConfig::default(),
                LmTrainConfig::default(),
            ),
        };
        let mut cfg = ExperimentConfig {
            preset,
            seed: 1,
            out: PathBuf::from("runs/experiment"),
            fusion: FusionMode::None,
            nbest: 5,
            seed_checkpoint: None,
            lm_checkpoint: None,
            data,
            train_seed,
            adapt,
            lm,
            fusion_dims: FusionConfig::default(),
            decode: DecodeConfig::default(),
        };
        cfg.derive_seeds();
        cfg
    }

    /// Parses TOML, overlaying it on the defaults of its `preset`.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| Error::Config(format!("config: {e}")))?;
        let preset = match user.get("preset") {
            None => Preset::Desk,
            Some(v) => v.clone().try_into().map_err(|e| Error::Config(format!("preset: {e}")))?,
        };
        let mut defaults = Self::preset(preset);
        if let Some(seed) = user.get("seed").and_then(toml::Value::as_integer).filter(|s| *s >= 0) {
            defaults.seed = seed as u64;
            defaults.derive_seeds();
        }
        let mut base = toml::Table::try_from(defaults).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, user);
        let cfg: ExperimentConfig = toml::Value::Table(base).try_into().map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Recomputes every stage seed from the master seed.
    pub fn derive_seeds(&mut self) {
        self.train_seed.seed = stage_seed(self.seed, STREAM_SEED_TRAIN);
        self.lm.seed = stage_seed(self.seed, STREAM_LM);
        self.adapt.seed = stage_seed(self.seed, STREAM_ADAPT);
    }

    pub fn data_seed(&self) -> u64 {
        stage_seed(self.seed, STREAM_DATA)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config("seed must be below 2^63".into()));
        }
        self.data.validate()?;
        self.train_seed.validate()?;
        self.adapt.validate()?;
        self.decode.validate()?;
        if self.lm.batch_size == 0 || !(self.lm.learning_rate > 0.0) {
            return Err(Error::Config("LM batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Prep,
    TrainSeed,
    TrainLm,
    Adapt,
    Decode,
    Score,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenData,
        Stage::Prep,
        Stage::TrainSeed,
        Stage::TrainLm,
        Stage::Adapt,
        Stage::Decode,
        Stage::Score,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Prep => "prep",
            Stage::TrainSeed => "train-seed",
            Stage::TrainLm => "train-lm",
            Stage::Adapt => "adapt",
            Stage::Decode => "decode",
            Stage::Score => "score",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`; expected one of gen-data, prep, train-seed, train-lm, adapt, decode, score, all")))
    }
}

/// The stages `all` expands to: the LM is trained only when the fusion mode
/// uses one.
pub fn full_run(fusion: FusionMode) -> Vec<Stage> {
    Stage::ALL.into_iter().filter(|s| *s != Stage::TrainLm || fusion.needs_lm()).collect()
}

/// Artifact paths for one output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout { root: root.to_path_buf() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self, lang: &str, split: &str) -> PathBuf {
        self.data_dir().join(format!("{lang}-{split}.jsonl"))
    }

    pub fn lm_text(&self, lang: &str) -> PathBuf {
        self.data_dir().join(format!("{lang}-lm.txt"))
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("prep/vocab.txt")
    }

    pub fn stats(&self) -> PathBuf {
        self.root.join("prep/stats.json")
    }

    pub fn seed_model(&self) -> PathBuf {
        self.root.join("seed/model.ckpt")
    }

    pub fn lm(&self) -> PathBuf {
        self.root.join("lm/lm.ckpt")
    }

    pub fn adapt_dir(&self, mode: FusionMode) -> PathBuf {
        self.root.join(format!("adapt-{mode}"))
    }

    pub fn adapted_model(&self, mode: FusionMode) -> PathBuf {
        self.adapt_dir(mode).join("model.ckpt")
    }

    pub fn nbest(&self, mode: FusionMode) -> PathBuf {
        self.root.join(format!("decode-{mode}/nbest.jsonl"))
    }

    pub fn score(&self, mode: FusionMode) -> PathBuf {
        self.root.join(format!("score-{mode}/score.json"))
    }
}

fn require(path: &Path, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            stage,
        })
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn json_lines<T: Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).map_err(|e| Error::Invalid(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

/// Files produced by one stage run.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    pub stage: Stage,
    pub artifacts: Vec<PathBuf>,
}

/// Runs one stage against the artifacts already present under `cfg.out`.
pub fn run_stage(cfg: &ExperimentConfig, stage: Stage) -> Result<StageOutput> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out);
    let (dir, artifacts) = match stage {
        Stage::GenData => (layout.data_dir(), gen_data(cfg, &layout)?),
        Stage::Prep => (layout.root.join("prep"), prep(cfg, &layout)?),
        Stage::TrainSeed => (layout.root.join("seed"), train_seed(cfg, &layout)?),
        Stage::TrainLm => (layout.root.join("lm"), train_language_model(cfg, &layout)?),
        Stage::Adapt => (layout.adapt_dir(cfg.fusion), adapt(cfg, &layout)?),
        Stage::Decode => (layout.root.join(format!("decode-{}", cfg.fusion)), decode(cfg, &layout)?),
        Stage::Score => (layout.root.join(format!("score-{}", cfg.fusion)), score_stage(cfg, &layout)?),
    };
    let resolved = dir.join("config.toml");
    write_file(&resolved, cfg.to_toml()?)?;
    let mut artifacts = artifacts;
    artifacts.push(resolved);
    Ok(StageOutput { stage, artifacts })
}

/// Runs stages in order, stopping at the first failure.
pub fn run_pipeline(cfg: &ExperimentConfig, stages: &[Stage]) -> Result<Vec<StageOutput>> {
    stages
        .iter()
        .map(|&s| {
            log::info!("stage {s}");
            run_stage(cfg, s)
        })
        .collect()
}

/// The synthetic languages of an experiment, seed languages first.
pub fn languages(cfg: &ExperimentConfig) -> Result<Vec<SyntheticLanguage>> {
    let d = &cfg.data;
    let pool_seed = derive_seed(cfg.data_seed(), 0);
    d.languages()
        .iter()
        .enumerate()
        .map(|(i, name)| {
            make_language(&LanguageSpec {
                name: name.to_string(),
                pool_seed,
                lang_seed: derive_seed(cfg.data_seed(), 1 + i as u64),
                alphabet_size: d.alphabet_size,
                dim: d.feat_dim,
                pool_size: d.pool_size,
                min_duration: d.min_duration,
                max_duration: d.max_duration,
                noise_sigma: d.noise_sigma,
                concentration: d.concentration,
                repeats: d.repeats,
            })
        })
        .collect()
}

fn gen_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let d = &cfg.data;
    let dir = layout.data_dir();
    let langs = languages(cfg)?;
    let mut out = Vec::new();
    for (i, lang) in langs.iter().enumerate() {
        let is_target = i == langs.len() - 1;
        let splits: &[(&str, usize)] = if is_target {
            &[("train", d.target_train_utts), ("valid", d.target_valid_utts), ("test", d.target_test_utts)]
        } else {
            &[("train", d.seed_train_utts), ("valid", d.seed_valid_utts)]
        };
        for (j, &(split, n)) in splits.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let seed = derive_seed(cfg.data_seed(), 100 + 10 * i as u64 + j as u64);
            write_corpus(lang, n, d.len_range(), seed, &dir, &format!("{}-{split}", lang.name))?;
            out.push(layout.manifest(&lang.name, split));
        }
        if is_target && d.lm_text_factor > 0 {
            let seed = derive_seed(cfg.data_seed(), 100 + 10 * i as u64 + 9);
            let text = lang.sample_text(d.lm_text_factor * d.target_train_utts, d.len_range(), seed);
            let path = layout.lm_text(&lang.name);
            write_text(&path, &text)?;
            out.push(path);
        }
    }
    let specs: Vec<_> = langs
        .iter()
        .map(|l| serde_json::json!({"name": l.name, "alphabet": l.alphabet.iter().collect::<String>(), "initial": l.initial, "bigram": l.bigram}))
        .collect();
    let path = dir.join("languages.json");
    write_file(&path, serde_json::to_string_pretty(&specs).map_err(|e| Error::Invalid(e.to_string()))?)?;
    out.push(path);
    Ok(out)
}

fn read_split(layout: &Layout, lang: &str, split: &str) -> Result<Vec<UtteranceRecord>> {
    let path = layout.manifest(lang, split);
    if !path.exists() {
        return Ok(Vec::new());
    }
    read_manifest(&path)
}

fn require_split(layout: &Layout, lang: &str, split: &str) -> Result<Vec<UtteranceRecord>> {
    let path = layout.manifest(lang, split);
    require(&path, Stage::GenData.name())?;
    read_manifest(&path)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

fn prep(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let d = &cfg.data;
    let mut corpora = Vec::new();
    for lang in d.languages() {
        let mut texts: Vec<String> = require_split(layout, lang, "train")?.into_iter().map(|r| r.text).collect();
        let lm_text = layout.lm_text(lang);
        if lm_text.exists() {
            texts.extend(read_lines(&lm_text)?);
        }
        corpora.push((lang.to_string(), texts));
    }
    let vocab = Vocabulary::build(&corpora)?;
    let mut mats = Vec::new();
    for lang in &d.seed_languages {
        let path = layout.manifest(lang, "train");
        for r in read_manifest(&path)? {
            mats.push(FeatureMatrix::read(&resolve_feat_path(&path, &r))?);
        }
    }
    let stats = FeatureStats::compute(&mats)?;
    let dir = layout.root.join("prep");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    vocab.save(&layout.vocab())?;
    stats.save(&layout.stats())?;
    Ok(vec![layout.vocab(), layout.stats()])
}

/// Vocabulary and normalization statistics written by `prep`.
pub fn load_prep(layout: &Layout) -> Result<(Vocabulary, FeatureStats)> {
    require(&layout.vocab(), Stage::Prep.name())?;
    require(&layout.stats(), Stage::Prep.name())?;
    Ok((Vocabulary::load(&layout.vocab())?, FeatureStats::load(&layout.stats())?))
}

/// Normalized, tokenized utterances of a manifest.
pub fn load_utterances(manifest: &Path, records: &[UtteranceRecord], vocab: &Vocabulary, stats: &FeatureStats) -> Result<Vec<Utterance>> {
    records
        .iter()
        .map(|r| {
            let m = FeatureMatrix::read(&resolve_feat_path(manifest, r))?;
            Ok(Utterance {
                id: r.utt_id.clone(),
                lang: r.lang.clone(),
                feats: stats.apply(&m)?,
                frames: m.frames,
                tokens: vocab.encode(&r.text, &r.lang)?,
            })
        })
        .collect()
}

/// Utterances of one split, empty when the split was not generated.
pub fn load_split(layout: &Layout, lang: &str, split: &str, vocab: &Vocabulary, stats: &FeatureStats) -> Result<Vec<Utterance>> {
    let records = read_split(layout, lang, split)?;
    load_utterances(&layout.manifest(lang, split), &records, vocab, stats)
}

fn meta(stage: Stage, seed: u64, report: &TrainReport) -> TrainMeta {
    TrainMeta {
        stage: stage.name().into(),
        epoch: report.best_epoch,
        seed,
        valid_accuracy: Some(report.best_accuracy),
        valid_perplexity: None,
        epsilon: report.epochs.last().map(|e| e.epsilon),
    }
}

fn log_epoch(stage: &str, log: &EpochLog) {
    log::info!(
        "{stage} epoch {}: loss {:.4} valid acc {:.4} eps {:e}",
        log.epoch,
        log.train_loss,
        log.valid_accuracy,
        log.epsilon
    );
}

fn train_seed(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let (vocab, stats) = load_prep(layout)?;
    let mut train_set = Vec::new();
    let mut valid_set = Vec::new();
    for lang in &cfg.data.seed_languages {
        require(&layout.manifest(lang, "train"), Stage::GenData.name())?;
        train_set.extend(load_split(layout, lang, "train", &vocab, &stats)?);
        valid_set.extend(load_split(layout, lang, "valid", &vocab, &stats)?);
    }
    let oc = &cfg.train_seed;
    let model = AsrModel::new(vocab.clone(), cfg.preset.model(stats.dim(), vocab.len()), oc.seed)?;
    let mask = model.default_mask();
    let (best, report) = train(model, &mask, &train_set, &valid_set, oc, Exec::Auto, |l, _, _| {
        log_epoch("train-seed", l);
        Ok(())
    })?;
    let ckpt = layout.seed_model();
    Checkpoint::from_asr(&best, meta(Stage::TrainSeed, oc.seed, &report)).save(&ckpt)?;
    let log = ckpt.with_file_name("train_log.jsonl");
    write_file(&log, json_lines(&report.epochs)?)?;
    Ok(vec![ckpt, log])
}

fn train_language_model(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let (vocab, _) = load_prep(layout)?;
    let lang = cfg.data.target_language.as_str();
    let mut lines: Vec<String> = require_split(layout, lang, "train")?.into_iter().map(|r| r.text).collect();
    let lm_text = layout.lm_text(lang);
    if lm_text.exists() {
        lines.extend(read_lines(&lm_text)?);
    }
    let valid_lines: Vec<String> = read_split(layout, lang, "valid")?.into_iter().map(|r| r.text).collect();
    let train_set = encode_corpus(&vocab, lang, &lines)?;
    let valid_set = if valid_lines.is_empty() { Vec::new() } else { encode_corpus(&vocab, lang, &valid_lines)? };
    let lm = LanguageModel::new(vocab.clone(), cfg.preset.lm(vocab.len()), cfg.lm.seed)?;
    let (lm, report) = train_lm(lm, &train_set, &valid_set, &cfg.lm, Exec::Auto)?;
    for e in &report.epochs {
        log::info!("train-lm epoch {}: train ppl {:.3} valid ppl {:.3}", e.epoch, e.train_ppl, e.valid_ppl);
    }
    let meta = TrainMeta {
        stage: Stage::TrainLm.name().into(),
        epoch: report.epochs.len(),
        seed: cfg.lm.seed,
        valid_perplexity: Some(report.best_valid_ppl),
        ..TrainMeta::default()
    };
    let ckpt = layout.lm();
    Checkpoint::from_lm(&lm, meta).save(&ckpt)?;
    let log = ckpt.with_file_name("train_log.jsonl");
    write_file(&log, json_lines(&report.epochs)?)?;
    Ok(vec![ckpt, log])
}

/// The LM named by the config, or the one trained by `train-lm`.
pub fn lm_path(cfg: &ExperimentConfig, layout: &Layout) -> PathBuf {
    cfg.lm_checkpoint.clone().unwrap_or_else(|| layout.lm())
}

fn load_lm(cfg: &ExperimentConfig, layout: &Layout) -> Result<LanguageModel> {
    let path = lm_path(cfg, layout);
    require(&path, Stage::TrainLm.name())?;
    Checkpoint::load(&path)?.into_lm()
}

fn adapt(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let mode = cfg.fusion;
    let seed_path = cfg.seed_checkpoint.clone().unwrap_or_else(|| layout.seed_model());
    require(&seed_path, Stage::TrainSeed.name())?;
    let lm = if mode.is_gated() { Some(load_lm(cfg, layout)?) } else { None };
    let (vocab, stats) = load_prep(layout)?;
    let seed_model = Checkpoint::load(&seed_path)?.into_asr()?;
    let lang = cfg.data.target_language.as_str();
    require(&layout.manifest(lang, "train"), Stage::GenData.name())?;
    let train_set = load_split(layout, lang, "train", &vocab, &stats)?;
    let valid_set = load_split(layout, lang, "valid", &vocab, &stats)?;
    let oc = &cfg.adapt;
    let dir = layout.adapt_dir(mode);
    let ckpt = dir.join("model.ckpt");
    let log = dir.join("train_log.jsonl");
    let report = |l: &EpochLog, _: &AsrModel, _: bool| {
        log_epoch("adapt", l);
        Ok(())
    };
    match (mode, lm) {
        (FusionMode::Deep, Some(lm)) => {
            let stage2 = OptimizerConfig {
                seed: derive_seed(oc.seed, 2) >> 1,
                ..oc.clone()
            };
            let r = df_transfer(&seed_model, &lm, &train_set, &valid_set, oc, &stage2, &cfg.fusion_dims, Exec::Auto)?;
            let stage1_path = dir.join("stage1.ckpt");
            Checkpoint::from_asr(&r.stage1, meta(Stage::Adapt, oc.seed, &r.stage1_report)).save(&stage1_path)?;
            Checkpoint::from_asr(&r.stage2, meta(Stage::Adapt, stage2.seed, &r.stage2_report)).save(&ckpt)?;
            let mut epochs = r.stage1_report.epochs.clone();
            epochs.extend(r.stage2_report.epochs.iter().cloned());
            write_file(&log, json_lines(&epochs)?)?;
            Ok(vec![stage1_path, ckpt, log])
        }
        (mode, lm) => {
            let init_mode = if mode == FusionMode::Cold { mode } else { FusionMode::None };
            let init = transfer_init(&seed_model, &vocab, init_mode, lm.as_ref(), &cfg.fusion_dims, oc.seed)?;
            log::info!(
                "adapt: {} copied, {} extended, {} reinitialized, {} frozen",
                init.copied.len(),
                init.extended.len(),
                init.reinitialized.len(),
                init.frozen.len()
            );
            let (best, rep) = train(init.model, &init.mask, &train_set, &valid_set, oc, Exec::Auto, report)?;
            Checkpoint::from_asr(&best, meta(Stage::Adapt, oc.seed, &rep)).save(&ckpt)?;
            write_file(&log, json_lines(&rep.epochs)?)?;
            Ok(vec![ckpt, log])
        }
    }
}

/// Decoding settings actually used for a fusion mode: without fusion no LM
/// is consulted.
pub fn effective_decode(cfg: &ExperimentConfig) -> DecodeConfig {
    let mut d = cfg.decode.clone();
    if cfg.fusion == FusionMode::None {
        d.lm_weight = 0.0;
    }
    d
}

fn decode(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let model_path = layout.adapted_model(cfg.fusion);
    require(&model_path, Stage::Adapt.name())?;
    let dc = effective_decode(cfg);
    let lm = if dc.lm_weight > 0.0 { Some(load_lm(cfg, layout)?) } else { None };
    let (vocab, stats) = load_prep(layout)?;
    let model = Checkpoint::load(&model_path)?.into_asr()?;
    let lang = cfg.data.target_language.as_str();
    let test_manifest = layout.manifest(lang, "test");
    require(&test_manifest, Stage::GenData.name())?;
    let test = load_split(layout, lang, "test", &vocab, &stats)?;
    let records = decode_corpus(&model, lm.as_ref().map(LanguageModel::view), &test, &dc, cfg.nbest, Exec::Auto)?;
    let path = layout.nbest(cfg.fusion);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_nbest(&path, &records)?;
    Ok(vec![path])
}

fn score_stage(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let nbest = layout.nbest(cfg.fusion);
    require(&nbest, Stage::Decode.name())?;
    let refs = require_split(layout, &cfg.data.target_language, "test")?;
    let report = score(&refs, &read_nbest(&nbest)?)?;
    log::info!("score: CER {:.4} WER {:.4}", report.corpus.cer, report.corpus.wer);
    let path = layout.score(cfg.fusion);
    write_file(&path, serde_json::to_string_pretty(&report).map_err(|e| Error::Invalid(e.to_string()))? + "\n")?;
    Ok(vec![path])
}

/// Reads a score report written by the `score` stage.
pub fn read_score(path: &Path) -> Result<ScoreReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.into(),
        msg: e.to_string(),
    })
}
