use std::path::Path;

use serde::{Deserialize, Serialize};

use super::features::FeatureMatrix;
use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

/// Global per-dimension mean/std over a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub frame_count: usize,
}

impl FeatureStats {
    /// Accumulates statistics over every frame of every matrix.
    pub fn compute<'a, I>(mats: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a FeatureMatrix>,
    {
        let mut dim = None;
        let mut sum = Vec::new();
        let mut sumsq = Vec::new();
        let mut count = 0usize;
        for m in mats {
            match dim {
                None => {
                    dim = Some(m.dim);
                    sum = vec![0.0f64; m.dim];
                    sumsq = vec![0.0f64; m.dim];
                }
                Some(d) if d != m.dim => {
                    return Err(Error::Invalid(format!("feature dimension {} differs from {d}", m.dim)));
                }
                _ => {}
            }
            for t in 0..m.frames {
                for (k, &v) in m.row(t).iter().enumerate() {
                    sum[k] += v as f64;
                    sumsq[k] += (v as f64) * (v as f64);
                }
            }
            count += m.frames;
        }
        let dim = dim.ok_or_else(|| Error::Invalid("no feature files to normalize".into()))?;
        if count == 0 {
            return Err(Error::Invalid("training set has no frames".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = (0..dim)
            .map(|k| (sumsq[k] / n - mean[k] * mean[k]).max(0.0).sqrt().max(STD_FLOOR))
            .collect();
        Ok(FeatureStats {
            mean,
            std,
            frame_count: count,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `(x − mean) / std`, returned row-major in double precision.
    pub fn apply(&self, m: &FeatureMatrix) -> Result<Vec<f64>> {
        if m.dim != self.dim() {
            return Err(Error::Invalid(format!(
                "feature dimension {} does not match statistics dimension {}",
                m.dim,
                self.dim()
            )));
        }
        Ok(m.data
            .chunks(m.dim.max(1))
            .flat_map(|row| row.iter().enumerate().map(|(k, &v)| (v as f64 - self.mean[k]) / self.std[k]))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Parse {
            path: path.into(),
            msg: e.to_string(),
        })
    }
}
