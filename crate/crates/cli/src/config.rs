//! `key = value` run configuration. Every key has a default; unknown keys
//! are rejected. Files allow `#` comments and blank lines.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use ragnet::losses::{ExclusionScale, Reduction};
use ragnet::model::{ModelConfig, RagVariant, Width};
use ragnet::synthesis::{BlendMode, SynthesisParams};
use ragnet::trainer::TrainConfig;
use ragnet::{Error, Result};

/// A documented configuration key.
#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub name: &'static str,
    pub help: &'static str,
}

macro_rules! keys {
    ($($name:literal => $help:literal),* $(,)?) => {
        pub const KEYS: &[Key] = &[$(Key { name: $name, help: $help }),*];
    };
}

keys! {
    "seed" => "seed for initialization, shuffling and synthesis",
    "width" => "channel width multiplier as a fraction, e.g. 1/8",
    "variant" => "full, no_mask, mask_no_renorm, two_channel_mask, no_diff or one_stage",
    "adversarial" => "train with the discriminator term",
    "lambda_rec" => "reconstruction loss weight",
    "lambda_percep" => "perceptual loss weight",
    "lambda_excl" => "exclusion loss weight",
    "lambda_adv" => "adversarial loss weight",
    "lambda_mask" => "mask loss weight",
    "phi" => "heavy-reflection threshold on reflection intensity",
    "xi" => "reflection-free threshold on reflection intensity",
    "tau" => "weak/strong split on the finest difference mask",
    "lr" => "Adam learning rate",
    "beta1" => "Adam first-moment decay",
    "beta2" => "Adam second-moment decay",
    "adam_eps" => "Adam denominator guard",
    "phase1_epochs" => "epochs training the reflection network alone",
    "phase2_epochs" => "epochs of joint training",
    "batch_size" => "samples per step",
    "rec_reduction" => "sum or mean for the reconstruction loss",
    "mask_reduction" => "sum or mean for the mask loss",
    "exclusion_scale" => "adaptive, or a fixed positive reflection gradient weight",
    "detach_reflection" => "stop joint-training gradients at the reflection estimate",
    "blend_mode" => "linear_clip or overexpose",
    "blur_sigma_min" => "smallest reflection blur sigma in pixels",
    "blur_sigma_max" => "largest reflection blur sigma in pixels",
    "decay_min" => "smallest reflection intensity decay",
    "decay_max" => "largest reflection intensity decay",
    "patch_size" => "side of synthesized patches, a multiple of 16",
    "scale_min" => "smallest scene size as a multiple of patch_size",
    "scale_max" => "largest scene size as a multiple of patch_size",
    "boost" => "over-exposure gain on the excess above 1",
    "saturation" => "sum above which over-exposed pixels clip to white",
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub seed: u64,
    pub train: TrainConfig,
    pub synthesis: SynthesisParams,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "key `{key}`: expected true or false, got `{value}`"
        ))),
    }
}

fn parse_reduction(key: &str, value: &str) -> Result<Reduction> {
    match value {
        "sum" => Ok(Reduction::Sum),
        "mean" => Ok(Reduction::Mean),
        _ => Err(Error::Config(format!(
            "key `{key}`: expected sum or mean, got `{value}`"
        ))),
    }
}

fn reduction_name(r: Reduction) -> &'static str {
    match r {
        Reduction::Sum => "sum",
        Reduction::Mean => "mean",
    }
}

fn finite(key: &str, value: &str) -> Result<f64> {
    let v: f64 = parse(key, value)?;
    if !v.is_finite() {
        return Err(Error::Config(format!("key `{key}`: `{value}` is not finite")));
    }
    Ok(v)
}

impl RunConfig {
    /// Assigns one key; the value is type-checked but cross-key constraints
    /// are left to [`RunConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        let s = &mut self.synthesis;
        match key {
            "seed" => {
                self.seed = parse(key, value)?;
                t.model.seed = self.seed;
                s.seed = self.seed;
            }
            "width" => t.model.width = parse::<Width>(key, value)?,
            "variant" => t.model.variant = parse::<RagVariant>(key, value)?,
            "adversarial" => t.model.use_adversarial = parse_bool(key, value)?,
            "lambda_rec" => t.weights.rec = finite(key, value)?,
            "lambda_percep" => t.weights.percep = finite(key, value)?,
            "lambda_excl" => t.weights.excl = finite(key, value)?,
            "lambda_adv" => t.weights.adv = finite(key, value)?,
            "lambda_mask" => t.weights.mask = finite(key, value)?,
            "phi" => t.thresholds.phi = finite(key, value)?,
            "xi" => t.thresholds.xi = finite(key, value)?,
            "tau" => t.thresholds.tau = finite(key, value)?,
            "lr" => t.adam.lr = finite(key, value)?,
            "beta1" => t.adam.beta1 = finite(key, value)?,
            "beta2" => t.adam.beta2 = finite(key, value)?,
            "adam_eps" => t.adam.eps = finite(key, value)?,
            "phase1_epochs" => t.schedule.phase1_epochs = parse(key, value)?,
            "phase2_epochs" => t.schedule.phase2_epochs = parse(key, value)?,
            "batch_size" => t.schedule.batch_size = parse(key, value)?,
            "rec_reduction" => t.rec_reduction = parse_reduction(key, value)?,
            "mask_reduction" => t.mask_reduction = parse_reduction(key, value)?,
            "exclusion_scale" => {
                t.exclusion_scale = if value == "adaptive" {
                    ExclusionScale::Adaptive
                } else {
                    ExclusionScale::Fixed(finite(key, value)?)
                }
            }
            "detach_reflection" => t.detach_reflection = parse_bool(key, value)?,
            "blend_mode" => s.mode = parse::<BlendMode>(key, value)?,
            "blur_sigma_min" => s.blur_sigma.0 = finite(key, value)?,
            "blur_sigma_max" => s.blur_sigma.1 = finite(key, value)?,
            "decay_min" => s.decay.0 = finite(key, value)?,
            "decay_max" => s.decay.1 = finite(key, value)?,
            "patch_size" => s.patch_size = parse(key, value)?,
            "scale_min" => s.scale_range.0 = finite(key, value)?,
            "scale_max" => s.scale_range.1 = finite(key, value)?,
            "boost" => s.boost = finite(key, value)?,
            "saturation" => s.saturation = finite(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let s = &self.synthesis;
        Some(match key {
            "seed" => self.seed.to_string(),
            "width" => t.model.width.to_string(),
            "variant" => t.model.variant.to_string(),
            "adversarial" => t.model.use_adversarial.to_string(),
            "lambda_rec" => t.weights.rec.to_string(),
            "lambda_percep" => t.weights.percep.to_string(),
            "lambda_excl" => t.weights.excl.to_string(),
            "lambda_adv" => t.weights.adv.to_string(),
            "lambda_mask" => t.weights.mask.to_string(),
            "phi" => t.thresholds.phi.to_string(),
            "xi" => t.thresholds.xi.to_string(),
            "tau" => t.thresholds.tau.to_string(),
            "lr" => t.adam.lr.to_string(),
            "beta1" => t.adam.beta1.to_string(),
            "beta2" => t.adam.beta2.to_string(),
            "adam_eps" => t.adam.eps.to_string(),
            "phase1_epochs" => t.schedule.phase1_epochs.to_string(),
            "phase2_epochs" => t.schedule.phase2_epochs.to_string(),
            "batch_size" => t.schedule.batch_size.to_string(),
            "rec_reduction" => reduction_name(t.rec_reduction).to_string(),
            "mask_reduction" => reduction_name(t.mask_reduction).to_string(),
            "exclusion_scale" => match t.exclusion_scale {
                ExclusionScale::Adaptive => "adaptive".to_string(),
                ExclusionScale::Fixed(v) => v.to_string(),
            },
            "detach_reflection" => t.detach_reflection.to_string(),
            "blend_mode" => s.mode.to_string(),
            "blur_sigma_min" => s.blur_sigma.0.to_string(),
            "blur_sigma_max" => s.blur_sigma.1.to_string(),
            "decay_min" => s.decay.0.to_string(),
            "decay_max" => s.decay.1.to_string(),
            "patch_size" => s.patch_size.to_string(),
            "scale_min" => s.scale_range.0.to_string(),
            "scale_max" => s.scale_range.1.to_string(),
            "boost" => s.boost.to_string(),
            "saturation" => s.saturation.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines over the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        self.apply_text(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_prefix(&e))))
    }

    /// Every key with its current value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{} = {}\n", k.name, self.get(k.name).expect("every key has a value")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synthesis.validate()
    }

    pub fn model(&self) -> ModelConfig {
        self.train.model
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_table_matches_published_values() {
        let c = RunConfig::default();
        let expect = [
            ("phi", "0.3"),
            ("xi", "0.01"),
            ("tau", "0.4"),
            ("lambda_rec", "1"),
            ("lambda_percep", "1"),
            ("lambda_excl", "0.2"),
            ("lambda_adv", "0.01"),
            ("lambda_mask", "1"),
            ("lr", "0.0001"),
            ("beta1", "0.9"),
            ("beta2", "0.999"),
            ("adam_eps", "0.00000001"),
            ("width", "1/8"),
            ("variant", "full"),
            ("phase1_epochs", "2"),
            ("phase2_epochs", "8"),
            ("batch_size", "4"),
            ("blur_sigma_min", "2"),
            ("blur_sigma_max", "5"),
            ("decay_min", "0.6"),
            ("decay_max", "1"),
            ("patch_size", "32"),
            ("boost", "0.5"),
            ("saturation", "1.3"),
        ];
        for (k, v) in expect {
            assert_eq!(c.get(k).unwrap(), v, "{k}");
        }
        assert_eq!(c.train.adam.eps, 1e-8);
    }

    #[test]
    fn every_key_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        for k in KEYS {
            assert!(c.get(k.name).is_some(), "{}", k.name);
        }
    }

    #[test]
    fn file_syntax() {
        let c = RunConfig::parse("# comment\n\nseed = 7  # trailing\nwidth=1/4\nvariant = no_diff\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.synthesis.seed, 7);
        assert_eq!(c.train.model.width, Width::new(1, 4).unwrap());
        assert_eq!(c.train.model.variant, RagVariant::NoDiff);
        let err = RunConfig::parse("seed = 1\nbogus = 2\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("bogus"), "{err}");
        assert!(RunConfig::parse("lr\n").is_err());
        assert!(RunConfig::parse("lr = fast\n").is_err());
        assert!(RunConfig::parse("lr = inf\n").is_err());
    }
}
