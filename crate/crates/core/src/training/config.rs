use std::fmt::Write as _;
use std::path::Path;

use crate::diffcore::{AdamConfig, Precision};
use crate::error::{invalid, Error, Result};
use crate::kv::{parse_bool, parse_num, KvFile};

/// Optimisation, schedule and augmentation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub rotate_z: bool,
    /// Rotate the first three channels with the coordinates.
    pub rotate_normals: bool,
    pub jitter_sigma: f64,
    /// Clip each jitter draw to `[-clip, clip]` when set.
    pub jitter_clip: Option<f64>,
    pub seed: u64,
    pub precision: Precision,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr0: 1e-3,
            lr_decay: 0.7,
            lr_step: 20,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            rotate_z: true,
            rotate_normals: true,
            jitter_sigma: 0.02,
            jitter_clip: None,
            seed: 0,
            precision: Precision::F32,
            eval_batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 || self.lr_step == 0 {
            invalid!("epochs, batch sizes and lr_step must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            invalid!("lr_decay must be in (0, 1], got {}", self.lr_decay);
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            invalid!("lr0 must be positive");
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            invalid!("jitter_sigma must be non-negative");
        }
        if matches!(self.jitter_clip, Some(c) if !(c > 0.0)) {
            invalid!("jitter_clip must be positive");
        }
        Ok(())
    }

    /// `lr0 · lr_decay^floor(epoch / lr_step)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((epoch / self.lr_step) as i32)
    }

    pub fn adam(&self, epoch: usize) -> AdamConfig {
        AdamConfig {
            lr: self.lr_at(epoch),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let mut c = Self::default();
        kv.set("epochs", &mut c.epochs, parse_num)?;
        kv.set("batch_size", &mut c.batch_size, parse_num)?;
        kv.set("eval_batch_size", &mut c.eval_batch_size, parse_num)?;
        kv.set("lr0", &mut c.lr0, parse_num)?;
        kv.set("lr_decay", &mut c.lr_decay, parse_num)?;
        kv.set("lr_step", &mut c.lr_step, parse_num)?;
        kv.set("beta1", &mut c.beta1, parse_num)?;
        kv.set("beta2", &mut c.beta2, parse_num)?;
        kv.set("eps", &mut c.eps, parse_num)?;
        kv.set("rotate_z", &mut c.rotate_z, parse_bool)?;
        kv.set("rotate_normals", &mut c.rotate_normals, parse_bool)?;
        kv.set("jitter_sigma", &mut c.jitter_sigma, parse_num)?;
        kv.set("jitter_clip", &mut c.jitter_clip, |s| match s {
            "none" => Some(None),
            _ => parse_num(s).map(Some),
        })?;
        kv.set("seed", &mut c.seed, parse_num)?;
        kv.set("precision", &mut c.precision, |s| {
            parse_num(s).and_then(|b| Precision::from_bits(b).ok())
        })?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { location, message } => Error::parse(format!("{}: {location}", path.display()), message),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "eval_batch_size = {}", self.eval_batch_size);
        let _ = writeln!(s, "lr0 = {}", self.lr0);
        let _ = writeln!(s, "lr_decay = {}", self.lr_decay);
        let _ = writeln!(s, "lr_step = {}", self.lr_step);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "eps = {}", self.eps);
        let _ = writeln!(s, "rotate_z = {}", self.rotate_z);
        let _ = writeln!(s, "rotate_normals = {}", self.rotate_normals);
        let _ = writeln!(s, "jitter_sigma = {}", self.jitter_sigma);
        let clip = self.jitter_clip.map_or("none".to_string(), |c| c.to_string());
        let _ = writeln!(s, "jitter_clip = {clip}");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "precision = {}", self.precision.bits());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-3);
        assert_eq!(c.lr_at(19), 1e-3);
        assert!((c.lr_at(20) - 7e-4).abs() < 1e-18);
        assert!((c.lr_at(40) - 4.9e-4).abs() < 1e-18);
    }

    #[test]
    fn text_round_trip() {
        let c = TrainConfig {
            jitter_clip: Some(0.05),
            precision: Precision::F64,
            seed: 42,
            ..Default::default()
        };
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(TrainConfig::parse("").unwrap(), TrainConfig::default());
    }

    #[test]
    fn rejects_invalid() {
        assert!(TrainConfig::parse("lr_decay = 0").is_err());
        assert!(TrainConfig::parse("lr_decay = 1.5").is_err());
        assert!(TrainConfig::parse("jitter_sigma = -1").is_err());
        assert!(TrainConfig::parse("precision = 16").is_err());
        assert!(TrainConfig::parse("epochs = 0").is_err());
    }
}
