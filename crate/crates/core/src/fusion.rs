//! LM integration: score interpolation (shallow) and the gated output head
//! shared by cold and deep fusion.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    None,
    Shallow,
    Cold,
    Deep,
}

impl FusionMode {
    /// Cold and deep fusion replace the output layer with the gated head.
    pub fn is_gated(self) -> bool {
        matches!(self, FusionMode::Cold | FusionMode::Deep)
    }

    pub fn needs_lm(self) -> bool {
        self != FusionMode::None
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::None => "none",
            FusionMode::Shallow => "shallow",
            FusionMode::Cold => "cold",
            FusionMode::Deep => "deep",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionMode::None),
            "shallow" => Ok(FusionMode::Shallow),
            "cold" => Ok(FusionMode::Cold),
            "deep" => Ok(FusionMode::Deep),
            other => Err(Error::Config(format!("unknown fusion mode `{other}` (expected none|shallow|cold|deep)"))),
        }
    }
}

/// Widths of the gated head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Width of the projected LM feature; also the gate width.
    pub lm_proj_dim: usize,
    pub bottleneck_dim: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            lm_proj_dim: 64,
            bottleneck_dim: 64,
        }
    }
}

/// Parameters under `fusion.*`.
#[derive(Clone, Debug)]
pub struct FusionHead {
    pub lm_proj: Linear,
    pub gate: Linear,
    pub bottleneck: Linear,
    pub out: Linear,
}

impl FusionHead {
    pub fn init<R: Rng>(store: &mut ParamStore, dec_dim: usize, lm_dim: usize, vocab_size: usize, cfg: &FusionConfig, rng: &mut R) -> Result<Self> {
        let f = cfg.lm_proj_dim;
        Ok(FusionHead {
            lm_proj: Linear::init(store, "fusion.lm_proj", lm_dim, f, true, rng)?,
            gate: Linear::init(store, "fusion.gate", dec_dim + f, f, true, rng)?,
            bottleneck: Linear::init(store, "fusion.bottleneck", dec_dim + f, cfg.bottleneck_dim, true, rng)?,
            out: Linear::init(store, "fusion.out", cfg.bottleneck_dim, vocab_size, true, rng)?,
        })
    }

    pub fn bind(store: &ParamStore) -> Result<Self> {
        Ok(FusionHead {
            lm_proj: Linear::bind(store, "fusion.lm_proj")?,
            gate: Linear::bind(store, "fusion.gate")?,
            bottleneck: Linear::bind(store, "fusion.bottleneck")?,
            out: Linear::bind(store, "fusion.out")?,
        })
    }

    /// Pre-softmax scores `ReLU(W_out s_cf + b_out)` from the decoder state
    /// `s` and the LM feature `d`:
    ///
    /// ```text
    /// s_lm = W_lm d + b_lm
    /// g    = σ(W_g [s; s_lm] + b_g)
    /// s_cf = W_cf [s; g ⊙ s_lm] + b_cf
    /// ```
    pub fn logits(&self, g: &mut Graph, s: Var, d: Var) -> Result<Var> {
        if g.shape(d).1 != self.lm_proj.in_dim || g.shape(s).1 + self.lm_proj.out_dim != self.gate.in_dim {
            return Err(Error::Invalid(format!(
                "fusion head expects decoder width {} and LM width {}, got {} and {}",
                self.gate.in_dim - self.lm_proj.out_dim,
                self.lm_proj.in_dim,
                g.shape(s).1,
                g.shape(d).1
            )));
        }
        let s_lm = self.lm_proj.forward(g, d)?;
        let joined = g.concat_cols(&[s, s_lm])?;
        let pre_gate = self.gate.forward(g, joined)?;
        let gate = g.sigmoid(pre_gate);
        let gated = g.mul(gate, s_lm)?;
        let joined = g.concat_cols(&[s, gated])?;
        let s_cf = self.bottleneck.forward(g, joined)?;
        let out = self.out.forward(g, s_cf)?;
        Ok(g.relu(out))
    }
}

/// Log-probabilities of the gated head.
pub fn cold_fusion_output(g: &mut Graph, head: &FusionHead, s: Var, d: Var) -> Result<Var> {
    let logits = head.logits(g, s, d)?;
    Ok(g.log_softmax(logits))
}

/// `ln P_asr + β ln P_lm`.
pub fn shallow_fusion_combine(asr: f64, lm: f64, beta: f64) -> f64 {
    if beta == 0.0 {
        asr
    } else {
        asr + beta * lm
    }
}
