//! Hyperparameters and ablation switches.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Where token representations come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncoderProvider {
    /// Trainable token + position embeddings with a windowed mixing layer.
    Toy,
    /// Frozen vectors read from an embedding archive at this path.
    Archive(String),
}

impl core::fmt::Display for EncoderProvider {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EncoderProvider::Toy => f.write_str("toy"),
            EncoderProvider::Archive(p) => write!(f, "archive:{p}"),
        }
    }
}

impl FromStr for EncoderProvider {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            _ => match s.strip_prefix("archive:") {
                Some(p) if !p.is_empty() => Ok(Self::Archive(p.to_string())),
                _ => Err(Error::InvalidConfig(format!(
                    "encoder_provider must be `toy` or `archive:<path>`, got `{s}`"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CareConfig {
    pub d_model: usize,
    pub d_task: usize,
    pub d_share: usize,
    /// Width of the relative distance embedding; 0 drops the distance slice.
    pub d_dist: usize,
    pub distance_clamp_k: usize,
    pub n_layers: usize,
    pub kernel_size: usize,
    pub use_distance: bool,
    pub use_shared_in_classifier: bool,
    pub use_coattention: bool,
    pub encoder_provider: EncoderProvider,
    /// Longest sentence the toy encoder's position table covers.
    pub max_len: usize,
    pub lr: Real,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub threshold: Real,
}

impl Default for CareConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_task: 64,
            d_share: 64,
            d_dist: 16,
            distance_clamp_k: 10,
            n_layers: 3,
            kernel_size: 3,
            use_distance: true,
            use_shared_in_classifier: true,
            use_coattention: true,
            encoder_provider: EncoderProvider::Toy,
            max_len: 128,
            lr: 1e-3,
            batch_size: 8,
            epochs: 200,
            seed: 0,
            threshold: 0.5,
        }
    }
}

/// Field names in serialization order.
pub const FIELDS: &[&str] = &[
    "d_model",
    "d_task",
    "d_share",
    "d_dist",
    "distance_clamp_k",
    "n_layers",
    "kernel_size",
    "use_distance",
    "use_shared_in_classifier",
    "use_coattention",
    "encoder_provider",
    "max_len",
    "lr",
    "batch_size",
    "epochs",
    "seed",
    "threshold",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("cannot parse `{value}` for {key}")))
}

impl CareConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(1..=4).contains(&self.n_layers) {
            return bad(format!("n_layers must be in 1..=4, got {}", self.n_layers));
        }
        if self.kernel_size != 1 && self.kernel_size != 3 {
            return bad(format!("kernel_size must be 1 or 3, got {}", self.kernel_size));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("d_task", self.d_task),
            ("d_share", self.d_share),
            ("max_len", self.max_len),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        Ok(())
    }

    /// Distance slice width actually fed to the pair grid.
    pub fn effective_d_dist(&self) -> usize {
        if self.use_distance {
            self.d_dist
        } else {
            0
        }
    }

    pub fn distance_buckets(&self) -> usize {
        2 * self.distance_clamp_k + 1
    }

    /// Channel count of the pair grid fed to the shared convolution.
    pub fn grid_channels(&self) -> usize {
        2 * self.d_task + self.effective_d_dist()
    }

    /// Width of each classifier input cell.
    pub fn pair_feature_width(&self) -> usize {
        2 * self.d_task + if self.use_shared_in_classifier { self.d_share } else { 0 }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "d_model" => self.d_model = parse(key, value)?,
            "d_task" => self.d_task = parse(key, value)?,
            "d_share" => self.d_share = parse(key, value)?,
            "d_dist" => self.d_dist = parse(key, value)?,
            "distance_clamp_k" => self.distance_clamp_k = parse(key, value)?,
            "n_layers" => self.n_layers = parse(key, value)?,
            "kernel_size" => self.kernel_size = parse(key, value)?,
            "use_distance" => self.use_distance = parse(key, value)?,
            "use_shared_in_classifier" => self.use_shared_in_classifier = parse(key, value)?,
            "use_coattention" => self.use_coattention = parse(key, value)?,
            "encoder_provider" => self.encoder_provider = value.parse()?,
            "max_len" => self.max_len = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "d_model" => self.d_model.to_string(),
            "d_task" => self.d_task.to_string(),
            "d_share" => self.d_share.to_string(),
            "d_dist" => self.d_dist.to_string(),
            "distance_clamp_k" => self.distance_clamp_k.to_string(),
            "n_layers" => self.n_layers.to_string(),
            "kernel_size" => self.kernel_size.to_string(),
            "use_distance" => self.use_distance.to_string(),
            "use_shared_in_classifier" => self.use_shared_in_classifier.to_string(),
            "use_coattention" => self.use_coattention.to_string(),
            "encoder_provider" => self.encoder_provider.to_string(),
            "max_len" => self.max_len.to_string(),
            "lr" => format!("{:?}", self.lr),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "threshold" => format!("{:?}", self.threshold),
            _ => return None,
        })
    }

    /// `key=value` lines; `#` starts a comment, blank lines are skipped.
    /// Keys absent from the text keep their value in `base`.
    pub fn from_kv(base: CareConfig, text: &str) -> Result<Self> {
        let mut cfg = base;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key=value", lineno + 1)))?;
            cfg.set(k.trim(), v)
                .map_err(|e| Error::InvalidConfig(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for key in FIELDS {
            let _ = writeln!(out, "{key}={}", self.get(key).expect("known key"));
        }
        out
    }

    /// Names of the fields whose values differ from `other`.
    pub fn diff_fields(&self, other: &CareConfig) -> Vec<&'static str> {
        FIELDS.iter().copied().filter(|k| self.get(k) != other.get(k)).collect()
    }

    /// The component ablation rows: default, then one switch flipped each.
    pub fn ablation_settings(&self) -> Vec<(String, CareConfig)> {
        let mut rows = vec![("default".to_string(), self.clone())];
        let mut push = |name: &str, f: &dyn Fn(&mut CareConfig)| {
            let mut c = self.clone();
            f(&mut c);
            rows.push((name.to_string(), c));
        };
        push("-distance", &|c| c.use_distance = false);
        push("-shared", &|c| c.use_shared_in_classifier = false);
        push("1x1-conv", &|c| c.kernel_size = 1);
        push("-coattention", &|c| c.use_coattention = false);
        rows
    }

    /// Co-attention depth sweep `N = 1..=4`.
    pub fn depth_sweep(&self) -> Vec<(String, CareConfig)> {
        (1..=4)
            .map(|n| {
                let mut c = self.clone();
                c.n_layers = n;
                (format!("depth={n}"), c)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = CareConfig::default();
        c.validate().unwrap();
        assert_eq!(c.n_layers, 3);
        assert_eq!(c.grid_channels(), 2 * 64 + 16);
    }

    #[test]
    fn kv_round_trip() {
        let mut c = CareConfig::default();
        c.lr = 3.7e-4;
        c.use_distance = false;
        c.encoder_provider = EncoderProvider::Archive("/tmp/x.emb".into());
        let back = CareConfig::from_kv(CareConfig::default(), &c.to_kv()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_values_rejected() {
        let mut c = CareConfig::default();
        assert!(c.set("n_layers", "x").is_err());
        assert!(c.set("bogus", "1").is_err());
        c.n_layers = 5;
        assert!(c.validate().is_err());
        c.n_layers = 0;
        assert!(c.validate().is_err());
        let c = CareConfig {
            kernel_size: 5,
            ..CareConfig::default()
        };
        assert!(c.validate().is_err());
        assert!("archive:".parse::<EncoderProvider>().is_err());
    }

    #[test]
    fn ablation_rows_flip_one_field() {
        let base = CareConfig::default();
        let rows = base.ablation_settings();
        assert_eq!(rows.len(), 5);
        assert!(rows[0].1.diff_fields(&base).is_empty());
        for (_, c) in &rows[1..] {
            assert_eq!(c.diff_fields(&base).len(), 1);
        }
        for (_, c) in base.depth_sweep() {
            assert!(c.diff_fields(&base).iter().all(|&f| f == "n_layers"));
        }
    }
}
