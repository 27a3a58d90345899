use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::model::Model;
use crate::statalign::{euclid_loss, gaa_loss, paa_loss, Bandwidth, FeatureMap, KernelSpec, SplitStrategy};
use crate::tensor::Tensor;

/// Every loss evaluated between one pair of feature maps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossDistances {
    pub euclid: f64,
    pub paa_linear: f64,
    pub paa_poly: f64,
    pub paa_gauss: f64,
    pub gaa: f64,
}

impl LossDistances {
    pub fn between(a: &FeatureMap, b: &FeatureMap) -> Result<Self> {
        let pw = SplitStrategy::PointWise;
        Ok(Self {
            euclid: euclid_loss(a, b)?,
            paa_linear: paa_loss(a, b, &KernelSpec::linear(), pw)?,
            paa_poly: paa_loss(a, b, &KernelSpec::polynomial(0.0, 2), pw)?,
            paa_gauss: paa_loss(a, b, &KernelSpec::gaussian(Bandwidth::Auto), pw)?,
            gaa: gaa_loss(a, b)?,
        })
    }

    /// Largest magnitude among the alignment losses.
    pub fn max_alignment(&self) -> f64 {
        [self.paa_linear, self.paa_poly, self.paa_gauss, self.gaa]
            .into_iter()
            .map(f64::abs)
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationReport {
    pub model: String,
    pub tap: usize,
    /// Features of the image against features of its horizontal mirror.
    pub flip: LossDistances,
    pub shift: usize,
    /// A feature map against its own circular shift along the position axis.
    pub shifted: LossDistances,
    /// Alignment losses vanish (≤ 1e-9) under the shift while the Euclidean
    /// distance does not (> 1e-3).
    pub shift_invariant: bool,
}

/// Mirrors a `[n, c, h, w]` batch left to right.
pub fn hflip(images: &Tensor) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(shape_err("hflip", format!("expected [n, c, h, w], got {s:?}")));
    }
    let w = s[3];
    let src = images.data();
    Tensor::new(
        s.to_vec(),
        (0..src.len()).map(|i| src[i - i % w + (w - 1 - i % w)]).collect(),
    )
}

/// Compares each loss on a mirrored image and on a position-shifted feature
/// map at `tap`.
pub fn translation_demo(model: &Model, image: &Tensor, tap: usize, shift: usize) -> Result<TranslationReport> {
    let fm = model.forward_to_tap(image, tap)?;
    let flipped = model.forward_to_tap(&hflip(image)?, tap)?;
    let flip = LossDistances::between(&fm, &flipped)?;
    let shifted = LossDistances::between(&fm, &fm.circular_shift(shift))?;
    Ok(TranslationReport {
        model: model.name().to_string(),
        tap,
        flip,
        shift,
        shifted,
        shift_invariant: shifted.max_alignment() <= 1e-9 && shifted.euclid > 1e-3,
    })
}
