//! Model and training configuration, plus the flat key-value config format.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Architecture hyperparameters. Serialized into the weights file header.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Feature width; equals the descriptor dimension.
    pub d: usize,
    /// Attention heads; must divide `d`.
    pub heads: usize,
    /// Stacked self/cross layers in the complete-graph initialization module.
    pub init_depth: usize,
    /// Cluster counts per stage, coarse to fine.
    pub stage_schedule: Vec<usize>,
    /// Cluster-attention layers per stage.
    pub layers_per_stage: usize,
    /// Query chunks for the initialization module's dense attention.
    pub chunk_queries: usize,
    /// EMA weight for cluster-center updates.
    pub beta: f64,
    /// Lloyd iterations when seeding cluster centers.
    pub kmeans_iters: usize,
    /// Weight of the clustering loss.
    pub gamma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 256,
            heads: 4,
            init_depth: 3,
            stage_schedule: vec![16, 32, 64, 128],
            layers_per_stage: 2,
            chunk_queries: 4,
            beta: 0.99,
            kmeans_iters: 10,
            gamma: 0.1,
        }
    }
}

impl ModelConfig {
    /// Desk-scale profile used by the training harness and tests.
    pub fn tiny() -> Self {
        ModelConfig {
            d: 32,
            heads: 4,
            init_depth: 2,
            stage_schedule: vec![4, 8],
            ..ModelConfig::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 {
            return Err(Error::config("d and heads must be positive"));
        }
        if self.d % self.heads != 0 {
            return Err(Error::config(format!(
                "heads {} must divide feature dim {}",
                self.heads, self.d
            )));
        }
        if self.stage_schedule.is_empty() {
            return Err(Error::config("stage_schedule must not be empty"));
        }
        for w in self.stage_schedule.windows(2) {
            if w[1] < w[0] {
                return Err(Error::config(format!(
                    "stage_schedule must be monotone non-decreasing, got {:?}",
                    self.stage_schedule
                )));
            }
        }
        if self.stage_schedule.iter().any(|&k| k < 2) {
            return Err(Error::config("cluster counts must be at least 2"));
        }
        if self.layers_per_stage == 0 {
            return Err(Error::config("layers_per_stage must be positive"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config("beta must lie in [0, 1]"));
        }
        if self.gamma < 0.0 {
            return Err(Error::config("gamma must be nonnegative"));
        }
        Ok(())
    }
}

/// Training run parameters on top of the architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub batch_size: usize,
    pub n_keypoints: usize,
    pub noise_px: f64,
    pub outlier_frac: f64,
    pub descriptor_noise: f64,
    pub image_w: u32,
    pub image_h: u32,
    pub eval_pairs: usize,
    pub match_threshold: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.lr <= 0.0 {
            return Err(Error::config("lr must be positive"));
        }
        if self.epochs == 0 || self.pairs_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs, pairs_per_epoch, batch_size must be positive"));
        }
        if self.n_keypoints == 0 {
            return Err(Error::config("n_keypoints must be positive"));
        }
        if !(0.0..1.0).contains(&self.outlier_frac) {
            return Err(Error::config("outlier_frac must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Flat `key = value` file with `#` comments. Unknown keys are rejected so
/// typos fail loudly; required keys must be present.
pub struct KvFile {
    entries: BTreeMap<String, String>,
    path: String,
}

impl KvFile {
    pub fn parse(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "{}:{}: expected `key = value`, got `{raw}`",
                    path.display(),
                    ln + 1
                )));
            };
            if entries.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::config(format!(
                    "{}:{}: duplicate key `{}`",
                    path.display(),
                    ln + 1,
                    k.trim()
                )));
            }
        }
        Ok(KvFile { entries, path: path.display().to_string() })
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::config(format!("{}: missing config key `{key}`", self.path)))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, raw: &str) -> Result<T> {
        raw.parse().map_err(|_| {
            Error::config(format!("{}: invalid value `{raw}` for key `{key}`", self.path))
        })
    }

    pub fn required<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        self.parse_as(key, raw)
    }

    pub fn optional<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.entries.get(key) {
            Some(raw) => self.parse_as(key, raw),
            None => Ok(default),
        }
    }

    pub fn optional_list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.entries.get(key) {
            Some(raw) => raw
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| {
                        Error::config(format!("{}: invalid value `{raw}` for key `{key}`", self.path))
                    })
                })
                .collect(),
            None => Ok(default.to_vec()),
        }
    }

    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        for key in self.entries.keys() {
            if !known.contains(&key.as_str()) {
                return Err(Error::config(format!("{}: unknown config key `{key}`", self.path)));
            }
        }
        Ok(())
    }
}

const TRAIN_KEYS: &[&str] = &[
    "d",
    "heads",
    "init_depth",
    "stage_schedule",
    "layers_per_stage",
    "chunk_queries",
    "beta",
    "kmeans_iters",
    "gamma",
    "lr",
    "epochs",
    "pairs_per_epoch",
    "batch_size",
    "n_keypoints",
    "noise_px",
    "outlier_frac",
    "descriptor_noise",
    "image_w",
    "image_h",
    "eval_pairs",
    "match_threshold",
];

/// Loads a training config. `d`, `stage_schedule`, `lr`, `epochs`,
/// `pairs_per_epoch`, and `n_keypoints` are required; the rest default.
pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let kv = KvFile::parse(path)?;
    kv.reject_unknown(TRAIN_KEYS)?;
    let defaults = ModelConfig::default();
    let model = ModelConfig {
        d: kv.required("d")?,
        heads: kv.optional("heads", defaults.heads)?,
        init_depth: kv.optional("init_depth", defaults.init_depth)?,
        stage_schedule: {
            let raw = kv.require("stage_schedule")?.to_string();
            raw.split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| {
                        Error::config(format!("invalid stage_schedule `{raw}`"))
                    })
                })
                .collect::<Result<Vec<usize>>>()?
        },
        layers_per_stage: kv.optional("layers_per_stage", defaults.layers_per_stage)?,
        chunk_queries: kv.optional("chunk_queries", defaults.chunk_queries)?,
        beta: kv.optional("beta", defaults.beta)?,
        kmeans_iters: kv.optional("kmeans_iters", defaults.kmeans_iters)?,
        gamma: kv.optional("gamma", defaults.gamma)?,
    };
    let cfg = TrainConfig {
        model,
        lr: kv.required("lr")?,
        epochs: kv.required("epochs")?,
        pairs_per_epoch: kv.required("pairs_per_epoch")?,
        batch_size: kv.optional("batch_size", 4)?,
        n_keypoints: kv.required("n_keypoints")?,
        noise_px: kv.optional("noise_px", 1.0)?,
        outlier_frac: kv.optional("outlier_frac", 0.2)?,
        descriptor_noise: kv.optional("descriptor_noise", 0.5)?,
        image_w: kv.optional("image_w", 640)?,
        image_h: kv.optional("image_h", 480)?,
        eval_pairs: kv.optional("eval_pairs", 200)?,
        match_threshold: kv.optional("match_threshold", 0.2)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_is_paper_schedule() {
        assert_eq!(ModelConfig::default().stage_schedule, vec![16, 32, 64, 128]);
        assert_eq!(ModelConfig::default().heads, 4);
    }

    #[test]
    fn non_monotone_schedule_rejected() {
        let cfg = ModelConfig {
            stage_schedule: vec![32, 16],
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fixed_schedule_allowed() {
        let cfg = ModelConfig {
            stage_schedule: vec![64, 64, 64, 64],
            ..ModelConfig::default()
        };
        cfg.validate().unwrap();
    }

    #[test]
    fn missing_key_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.cfg");
        std::fs::write(&path, "d = 32\nstage_schedule = 4,8\nlr = 0.001\nepochs = 1\n").unwrap();
        let err = load_train_config(&path).unwrap_err().to_string();
        assert!(err.contains("pairs_per_epoch"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.cfg");
        std::fs::write(&path, "d = 32\nstage_schedul = 4,8\n").unwrap();
        let err = load_train_config(&path).unwrap_err().to_string();
        assert!(err.contains("stage_schedul"), "{err}");
    }

    #[test]
    fn full_config_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.cfg");
        std::fs::write(
            &path,
            "# tiny profile\nd = 32\nheads = 4\nstage_schedule = 4, 8\nlr = 1e-3\n\
             epochs = 2\npairs_per_epoch = 16\nn_keypoints = 64\noutlier_frac = 0.2\n",
        )
        .unwrap();
        let cfg = load_train_config(&path).unwrap();
        assert_eq!(cfg.model.stage_schedule, vec![4, 8]);
        assert_eq!(cfg.n_keypoints, 64);
        assert_eq!(cfg.model.gamma, 0.1);
    }
}
