use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, BandwidthMode, GradNorm, LabelMode, LossKind};
use crate::error::{Error, Result};
use crate::harness::c_grid;
use crate::model::Architecture;
use crate::statalign::SplitStrategy;

/// Every setting a command may read. Loaded from a flat TOML file, then
/// overridden by command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// IDX images used for training.
    pub dataset_images: Option<PathBuf>,
    pub dataset_labels: Option<PathBuf>,
    /// IDX images that supply attack sources and gallery candidates; the
    /// training set is used when unset.
    pub pool_images: Option<PathBuf>,
    pub pool_labels: Option<PathBuf>,
    pub num_classes: usize,
    pub checkpoint_dir: PathBuf,
    pub out: PathBuf,
    pub seed: u64,

    pub models: Vec<String>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,

    pub white_box: String,
    pub black_boxes: Vec<String>,
    pub eps: f64,
    pub iters: usize,
    /// Defaults to `eps / iters`.
    pub alpha: Option<f64>,
    pub decay: f64,
    pub loss: LossKind,
    pub kernel_c: f64,
    pub kernel_d: u32,
    pub tap: usize,
    pub label_mode: String,
    pub gallery_k: usize,
    pub split: String,
    pub grad_norm: GradNorm,
    pub bandwidth: BandwidthMode,
    pub n_images: usize,
    pub attack_batch: usize,
    /// Attack runs per configuration; run `i` uses seed `seed + i`.
    pub n_seeds: usize,
    pub record_runtime: bool,

    /// Taps for `sweep-layers`; every tap of the white box when unset.
    pub taps: Option<Vec<usize>>,
    pub ranks: Vec<usize>,
    pub c_values: Vec<f64>,

    pub demo_image: usize,
    pub demo_shift: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let a = AttackConfig::default();
        Self {
            dataset_images: None,
            dataset_labels: None,
            pool_images: None,
            pool_labels: None,
            num_classes: 10,
            checkpoint_dir: PathBuf::from("checkpoints"),
            out: PathBuf::from("runs"),
            seed: 0,
            models: vec!["vgg".into(), "resnet".into(), "inception".into()],
            epochs: 8,
            lr: 0.05,
            batch: 32,
            white_box: "vgg".into(),
            black_boxes: vec!["resnet".into(), "inception".into()],
            eps: a.epsilon,
            iters: a.iters,
            alpha: None,
            decay: a.decay,
            loss: a.loss,
            kernel_c: a.kernel_c,
            kernel_d: a.kernel_d,
            tap: a.tap,
            label_mode: a.label_mode.to_string(),
            gallery_k: 20,
            split: "point".into(),
            grad_norm: a.grad_norm,
            bandwidth: a.bandwidth,
            n_images: 100,
            attack_batch: 16,
            n_seeds: 3,
            record_runtime: false,
            taps: None,
            ranks: vec![2, 4, 6, 8, 10],
            c_values: c_grid(),
            demo_image: 0,
            demo_shift: 1,
        }
    }
}

/// Flags that override config-file values.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// Flat TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dataset_images: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dataset_labels: Option<PathBuf>,
    #[arg(long, global = true)]
    pub pool_images: Option<PathBuf>,
    #[arg(long, global = true)]
    pub pool_labels: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub eps: Option<f64>,
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub decay: Option<f64>,
    /// paa_l, paa_p, paa_g, gaa, euclid or mifgsm.
    #[arg(long, global = true)]
    pub loss: Option<String>,
    #[arg(long, global = true)]
    pub kernel_c: Option<f64>,
    #[arg(long, global = true)]
    pub kernel_d: Option<u32>,
    #[arg(long, global = true)]
    pub tap: Option<usize>,
    /// `random` or `rank:K`.
    #[arg(long, global = true)]
    pub label_mode: Option<String>,
    #[arg(long, global = true)]
    pub gallery_k: Option<usize>,
    /// `point` or `channel`.
    #[arg(long, global = true)]
    pub split: Option<String>,
    #[arg(long, global = true)]
    pub white_box: Option<String>,
    /// Comma-separated model names.
    #[arg(long, global = true, value_delimiter = ',')]
    pub black_boxes: Option<Vec<String>>,
    #[arg(long, global = true)]
    pub n_images: Option<usize>,
    #[arg(long, global = true)]
    pub n_seeds: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Fill the runtime column of result files.
    #[arg(long, global = true)]
    pub record_runtime: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads the config file named by `--config` (if any), applies the flags
    /// and validates the result.
    pub fn load(o: &Overrides) -> Result<Self> {
        let mut cfg = match &o.config {
            Some(p) => Self::from_toml(&read_text(p)?)?,
            None => Self::default(),
        };
        cfg.apply(o)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = &o.$f {
                    self.$f = v.clone().into();
                }
            )*};
        }
        set!(
            dataset_images,
            dataset_labels,
            pool_images,
            pool_labels,
            checkpoint_dir,
            out,
            seed,
            eps,
            iters
        );
        set!(
            decay,
            kernel_c,
            kernel_d,
            tap,
            label_mode,
            gallery_k,
            split,
            white_box,
            black_boxes,
            n_images
        );
        set!(n_seeds, epochs);
        if let Some(a) = o.alpha {
            self.alpha = Some(a);
        }
        if let Some(l) = &o.loss {
            self.loss = l.parse()?;
        }
        self.record_runtime |= o.record_runtime;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dataset_images.is_some() != self.dataset_labels.is_some() {
            return bad("dataset_images and dataset_labels must be given together".into());
        }
        if self.pool_images.is_some() != self.pool_labels.is_some() {
            return bad("pool_images and pool_labels must be given together".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        for name in self.models.iter().chain(&self.black_boxes).chain([&self.white_box]) {
            Architecture::by_name(name)?;
        }
        if self.black_boxes.contains(&self.white_box) {
            return bad(format!("{} is both white box and black box", self.white_box));
        }
        if self.epochs == 0 || self.batch < 2 || self.lr.is_nan() || self.lr < 0.0 {
            return bad("training needs epochs >= 1, batch >= 2 and lr >= 0".into());
        }
        if self.gallery_k == 0 || self.n_images == 0 || self.attack_batch == 0 || self.n_seeds == 0 {
            return bad("gallery_k, n_images, attack_batch and n_seeds must be positive".into());
        }
        if self.ranks.is_empty() || self.c_values.is_empty() {
            return bad("ranks and c_values must not be empty".into());
        }
        if let Some(&c) = self.c_values.iter().find(|&&c| c.is_nan() || c < 0.0) {
            return bad(format!("c_values must be >= 0, got {c}"));
        }
        self.attack()?.validate()
    }

    pub fn strategy(&self) -> Result<SplitStrategy> {
        match self.split.as_str() {
            "point" => Ok(SplitStrategy::PointWise),
            "channel" => Ok(SplitStrategy::ChannelWise),
            s => Err(Error::Config(format!("split `{s}` is not `point` or `channel`"))),
        }
    }

    /// Attack settings for the base seed.
    pub fn attack(&self) -> Result<AttackConfig> {
        let label_mode: LabelMode = self.label_mode.parse()?;
        Ok(AttackConfig {
            epsilon: self.eps,
            iters: self.iters,
            alpha: self.alpha.unwrap_or(self.eps / self.iters.max(1) as f64),
            decay: self.decay,
            loss: self.loss,
            kernel_c: self.kernel_c,
            kernel_d: self.kernel_d,
            tap: self.tap,
            strategy: self.strategy()?,
            label_mode,
            seed: self.seed,
            grad_norm: self.grad_norm,
            bandwidth: self.bandwidth,
        })
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::Missing {
            what: "config file",
            path: path.to_path_buf(),
            hint: "pass an existing file to --config",
        });
    }
    Ok(std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        let a = c.attack().unwrap();
        assert_eq!(a, AttackConfig::default());
        assert_eq!(c.c_values.len(), 21);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("epsilon = 0.1"), Err(Error::Config(_))));
        let c = RunConfig::from_toml("eps = 0.03\nloss = \"gaa\"\nlabel_mode = \"rank:2\"").unwrap();
        assert_eq!(c.eps, 0.03);
        assert_eq!(c.loss, LossKind::Gaa);
        assert_eq!(c.attack().unwrap().label_mode, LabelMode::Rank(2));
    }

    #[test]
    fn flags_override_file() {
        let mut c = RunConfig::from_toml("eps = 0.03\ntap = 2").unwrap();
        c.apply(&Overrides {
            eps: Some(0.05),
            loss: Some("euclid".into()),
            split: Some("channel".into()),
            ..Default::default()
        })
        .unwrap();
        assert_eq!((c.eps, c.tap, c.loss), (0.05, 2, LossKind::Euclid));
        assert_eq!(c.strategy().unwrap(), SplitStrategy::ChannelWise);
        assert!((c.attack().unwrap().alpha - 0.0025).abs() < 1e-15);
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "eps = 1.5",
            "label_mode = \"rank:0\"",
            "split = \"rows\"",
            "white_box = \"alexnet\"",
            "black_boxes = [\"vgg\"]",
            "c_values = [-0.1]",
            "kernel_c = -1.0",
            "dataset_images = \"a.idx\"",
        ] {
            let c = RunConfig::from_toml(text).unwrap();
            assert!(c.validate().is_err(), "{text}");
        }
        assert!(RunConfig::from_toml("loss = \"paa\"").is_err());
    }
}
