//! Run configuration and its flat `key = value` text form.

use serde::{Deserialize, Serialize};

use crate::datagen::{Corruption, ShiftMode, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, StyleObjective};
use crate::models::ModelDims;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub num_seeds: usize,
    /// Seeds `seed, seed+1, ..` are used for the runs of one experiment.
    pub seed: u64,
    /// Samples per class in the held-out split used for the `|cos(z, v)|`
    /// measurement.
    pub heldout_per_class: usize,
    /// Build the style encoder at all. Without it the run is the plain
    /// baseline and `w` must be zero.
    pub with_style_encoder: bool,
    pub loss: LossConfig,
    pub model: ModelDims,
    /// Dataset recipe; its `seed` is replaced by one derived from each run
    /// seed.
    pub data: SyntheticSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            lr0: 0.01,
            lr_min: 1e-5,
            momentum: 0.9,
            weight_decay: 5e-5,
            num_seeds: 5,
            seed: 0,
            heldout_per_class: 20,
            with_style_encoder: true,
            loss: LossConfig::default(),
            model: ModelDims::default(),
            data: SyntheticSpec::default(),
        }
    }
}

/// Every key accepted by [`TrainConfig::set`], with a short description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("epochs", "training epochs"),
    ("batch_size", "rows per step, labeled and unlabeled together"),
    ("lr0", "initial learning rate"),
    ("lr_min", "final learning rate of the cosine schedule"),
    ("momentum", "SGD momentum"),
    ("weight_decay", "L2 weight decay"),
    ("num_seeds", "runs per experiment"),
    ("seed", "first run seed"),
    ("heldout_per_class", "held-out samples per class"),
    ("with_style_encoder", "true or false"),
    ("tau_u", "unsupervised contrastive temperature"),
    ("tau_c", "supervised contrastive temperature"),
    ("tau_s", "student temperature"),
    ("tau_t", "teacher temperature"),
    ("lambda", "supervised share of the objective"),
    ("eps_reg", "mean-entropy weight"),
    ("w", "style-removal weight"),
    ("lambda_a", "inner-product objective selector"),
    ("lambda_b", "cosine objective selector"),
    ("lambda_c", "correlation objective selector"),
    ("style", "orth, cossimi or corr; sets the three selectors"),
    ("image_size", "image side in pixels"),
    ("num_classes", "total classes, half of them seen"),
    ("samples_per_class", "training samples per class"),
    ("corruption", "gaussian_blur, jpeg_like, impulse_noise or none"),
    ("severity", "corruption severity 1..5"),
    ("shift_mode", "cmix, call or none"),
    ("conv1_channels", "backbone first convolution width"),
    ("conv2_channels", "backbone second convolution width"),
    ("hidden", "backbone MLP width"),
    ("latent", "backbone output size"),
    ("embed", "projection and style embedding size"),
    ("style_conv1_channels", "style encoder first convolution width"),
    ("style_conv2_channels", "style encoder second convolution width"),
];

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    /// The desk preset: 50 epochs on 16×16 images with 100 samples per
    /// class.
    pub fn desk() -> Self {
        Self { epochs: 50, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr_min < self.lr0) || self.lr_min < 0.0 {
            return Err(Error::Config(format!("need 0 <= lr_min < lr0, got {} and {}", self.lr_min, self.lr0)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay non-negative".into()));
        }
        if self.num_seeds == 0 {
            return Err(Error::Config("num_seeds must be positive".into()));
        }
        if self.heldout_per_class == 0 {
            return Err(Error::Config("heldout_per_class must be positive".into()));
        }
        self.loss.validate()?;
        self.model.validate()?;
        self.data.validate()?;
        if !self.with_style_encoder && self.loss.w != 0.0 {
            return Err(Error::Config("w > 0 needs the style encoder".into()));
        }
        if self.model.image_size != self.data.image_size
            || self.model.num_seen != self.data.num_seen()
            || self.model.num_classes() != self.data.num_classes
        {
            return Err(Error::Config("model dims disagree with the dataset recipe".into()));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let l = &mut self.loss;
        let m = &mut self.model;
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr0" => self.lr0 = parse(key, value)?,
            "lr_min" => self.lr_min = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "num_seeds" => self.num_seeds = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "heldout_per_class" => self.heldout_per_class = parse(key, value)?,
            "with_style_encoder" => self.with_style_encoder = parse(key, value)?,
            "tau_u" => l.tau_u = parse(key, value)?,
            "tau_c" => l.tau_c = parse(key, value)?,
            "tau_s" => l.tau_s = parse(key, value)?,
            "tau_t" => l.tau_t = parse(key, value)?,
            "lambda" => l.lambda = parse(key, value)?,
            "eps_reg" => l.eps_reg = parse(key, value)?,
            "w" => l.w = parse(key, value)?,
            "lambda_a" => l.lambda_a = parse(key, value)?,
            "lambda_b" => l.lambda_b = parse(key, value)?,
            "lambda_c" => l.lambda_c = parse(key, value)?,
            "style" => {
                let (a, b, c) = StyleObjective::parse(value)?.selector();
                (l.lambda_a, l.lambda_b, l.lambda_c) = (a, b, c);
            }
            "image_size" => {
                let s = parse(key, value)?;
                self.data.image_size = s;
                m.image_size = s;
            }
            "num_classes" => {
                let k: usize = parse(key, value)?;
                self.data.num_classes = k;
                m.num_seen = k / 2;
                m.num_novel = k - k / 2;
            }
            "samples_per_class" => self.data.samples_per_class = parse(key, value)?,
            "corruption" => self.data.corruption = Corruption::parse(value)?,
            "severity" => self.data.severity = parse(key, value)?,
            "shift_mode" => self.data.shift_mode = ShiftMode::parse(value)?,
            "conv1_channels" => m.conv1_channels = parse(key, value)?,
            "conv2_channels" => m.conv2_channels = parse(key, value)?,
            "hidden" => m.hidden = parse(key, value)?,
            "latent" => m.latent = parse(key, value)?,
            "embed" => m.embed = parse(key, value)?,
            "style_conv1_channels" => m.style_conv1_channels = parse(key, value)?,
            "style_conv2_channels" => m.style_conv2_channels = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every line of a `key = value` file on top of `self`. Blank
    /// lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Renders every key in [`CONFIG_KEYS`] order; `from_text` of the
    /// result reproduces `self`.
    pub fn to_text(&self) -> String {
        let l = &self.loss;
        let m = &self.model;
        let d = &self.data;
        let values: Vec<String> = vec![
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.lr0.to_string(),
            self.lr_min.to_string(),
            self.momentum.to_string(),
            self.weight_decay.to_string(),
            self.num_seeds.to_string(),
            self.seed.to_string(),
            self.heldout_per_class.to_string(),
            self.with_style_encoder.to_string(),
            l.tau_u.to_string(),
            l.tau_c.to_string(),
            l.tau_s.to_string(),
            l.tau_t.to_string(),
            l.lambda.to_string(),
            l.eps_reg.to_string(),
            l.w.to_string(),
            l.lambda_a.to_string(),
            l.lambda_b.to_string(),
            l.lambda_c.to_string(),
            String::new(),
            d.image_size.to_string(),
            d.num_classes.to_string(),
            d.samples_per_class.to_string(),
            d.corruption.name().to_string(),
            d.severity.to_string(),
            d.shift_mode.name().to_string(),
            m.conv1_channels.to_string(),
            m.conv2_channels.to_string(),
            m.hidden.to_string(),
            m.latent.to_string(),
            m.embed.to_string(),
            m.style_conv1_channels.to_string(),
            m.style_conv2_channels.to_string(),
        ];
        CONFIG_KEYS
            .iter()
            .zip(values)
            .filter(|((key, _), _)| *key != "style")
            .map(|((key, _), value)| format!("{key} = {value}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.num_seeds), (200, 64, 5));
        assert_eq!((c.lr0, c.lr_min, c.momentum, c.weight_decay), (0.01, 1e-5, 0.9, 5e-5));
        assert_eq!(TrainConfig::desk().epochs, 50);
        assert_eq!(TrainConfig::desk().data.samples_per_class, 100);
        assert_eq!(TrainConfig::desk().data.image_size, 16);
        c.validate().unwrap();
    }

    #[test]
    fn text_roundtrip() {
        let mut c = TrainConfig::desk();
        c.apply_text("w = 0.01\nstyle = corr\nseverity=2 # comment\n\nshift_mode = call\nnum_classes = 6\n").unwrap();
        assert_eq!((c.loss.lambda_a, c.loss.lambda_b, c.loss.lambda_c), (0.0, 0.0, 1.0));
        assert_eq!((c.model.num_seen, c.model.num_novel), (3, 3));
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_settings() {
        let mut c = TrainConfig::desk();
        assert!(matches!(c.set("learning_rate", "1"), Err(Error::Config(_))));
        assert!(matches!(c.set("epochs", "many"), Err(Error::Config(_))));
        assert!(TrainConfig::from_text("lr_min = 0.02").is_err());
        assert!(TrainConfig::from_text("epochs = 0").is_err());
        assert!(TrainConfig::from_text("lambda_a = 0.5").is_err());
        assert!(TrainConfig::from_text("with_style_encoder = false\nw = 0.01").is_err());
        assert!(TrainConfig::from_text("just words").is_err());
    }
}
