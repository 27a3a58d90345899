//! Momentum sign attack driven by feature-alignment or logit losses, with
//! gallery-based target selection.

pub(crate) mod gallery;
mod run;
mod select;
mod step;

pub use gallery::{build_gallery, Gallery, GalleryEntry};
pub use run::{run_attack, run_attack_batch, AdversarialResult, AttackRequest, FeatureObjective, LogitObjective};
pub use select::{select_target_image, select_target_label};
pub use step::{attack_step, momentum_attack, MomentumState, Objective, StepReport, Trajectory};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::statalign::{Bandwidth, FeatureLoss, KernelSpec, SplitStrategy};

/// Attack objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    /// Pair-wise alignment, linear kernel.
    #[serde(rename = "paa_l")]
    PaaLinear,
    /// Pair-wise alignment, polynomial kernel.
    #[serde(rename = "paa_p")]
    PaaPoly,
    /// Pair-wise alignment, Gaussian kernel.
    #[serde(rename = "paa_g")]
    PaaGauss,
    /// Global-wise (channel mean and variance) alignment.
    #[serde(rename = "gaa")]
    Gaa,
    /// Position-by-position Euclidean feature distance.
    #[serde(rename = "euclid")]
    Euclid,
    /// Targeted cross-entropy on the logits, no feature target.
    #[serde(rename = "mifgsm")]
    Mifgsm,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        Self::PaaLinear,
        Self::PaaPoly,
        Self::PaaGauss,
        Self::Gaa,
        Self::Euclid,
        Self::Mifgsm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::PaaLinear => "paa_l",
            Self::PaaPoly => "paa_p",
            Self::PaaGauss => "paa_g",
            Self::Gaa => "gaa",
            Self::Euclid => "euclid",
            Self::Mifgsm => "mifgsm",
        }
    }

    pub fn is_feature_loss(self) -> bool {
        self != Self::Mifgsm
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            Error::InvalidArgument(format!("unknown loss `{s}` (paa_l, paa_p, paa_g, gaa, euclid, mifgsm)"))
        })
    }
}

/// How the target label is chosen for each source image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelMode {
    /// Uniform over the labels other than the true one.
    Random,
    /// The label with the k-th highest white-box logit on the clean image.
    Rank(usize),
}

impl fmt::Display for LabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Random => f.write_str("random"),
            Self::Rank(k) => write!(f, "rank:{k}"),
        }
    }
}

impl FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "random" {
            return Ok(Self::Random);
        }
        s.strip_prefix("rank:")
            .and_then(|k| k.parse().ok())
            .filter(|&k| k >= 1)
            .map(Self::Rank)
            .ok_or_else(|| Error::InvalidArgument(format!("label mode `{s}` is not `random` or `rank:K`")))
    }
}

/// Norm used to normalise the gradient before momentum accumulation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradNorm {
    #[default]
    L1,
    L2,
}

/// When the automatic Gaussian bandwidth is estimated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthMode {
    /// From the current source and target features at every iteration.
    #[default]
    Recompute,
    /// Once, from the clean source feature and the chosen target.
    FixedFromClean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// ℓ∞ budget in pixel units on `[0, 1]`.
    pub epsilon: f64,
    pub iters: usize,
    pub alpha: f64,
    /// Momentum decay μ.
    pub decay: f64,
    pub loss: LossKind,
    pub kernel_c: f64,
    pub kernel_d: u32,
    pub tap: usize,
    pub strategy: SplitStrategy,
    pub label_mode: LabelMode,
    pub seed: u64,
    pub grad_norm: GradNorm,
    pub bandwidth: BandwidthMode,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.07,
            iters: 20,
            alpha: 0.07 / 20.0,
            decay: 1.0,
            loss: LossKind::PaaPoly,
            kernel_c: 0.0,
            kernel_d: 2,
            tap: 1,
            strategy: SplitStrategy::PointWise,
            label_mode: LabelMode::Random,
            seed: 0,
            grad_norm: GradNorm::L1,
            bandwidth: BandwidthMode::Recompute,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must lie in [0, 1), got {}", self.epsilon));
        }
        if self.iters == 0 {
            return bad("iters must be at least 1".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return bad(format!("decay must be >= 0, got {}", self.decay));
        }
        if let LabelMode::Rank(0) = self.label_mode {
            return bad("rank must be at least 1".into());
        }
        if let Some(FeatureLoss::Paa { kernel, .. }) = self.feature_loss() {
            kernel.validate()?;
        }
        Ok(())
    }

    pub fn kernel(&self) -> Option<KernelSpec> {
        match self.loss {
            LossKind::PaaLinear => Some(KernelSpec::linear()),
            LossKind::PaaPoly => Some(KernelSpec::polynomial(self.kernel_c, self.kernel_d)),
            LossKind::PaaGauss => Some(KernelSpec::gaussian(Bandwidth::Auto)),
            _ => None,
        }
    }

    /// The feature-space loss, or `None` for the logit attack.
    pub fn feature_loss(&self) -> Option<FeatureLoss> {
        match self.loss {
            LossKind::Gaa => Some(FeatureLoss::Gaa),
            LossKind::Euclid => Some(FeatureLoss::Euclid),
            LossKind::Mifgsm => None,
            _ => Some(FeatureLoss::Paa {
                kernel: self.kernel().expect("paa kernel"),
                strategy: self.strategy,
            }),
        }
    }
}
