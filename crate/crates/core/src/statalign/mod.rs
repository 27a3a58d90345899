//! Statistic-alignment mathematics over intermediate feature maps.
//!
//! A [`FeatureMap`] is the `channels × positions` activation matrix of one
//! image at one tap. Splitting it into a [`SampleSet`] turns the map into a
//! bag of vectors, so every loss here except [`euclid_loss`] depends only on
//! the multiset of spatial positions and not on where they sit.

mod kernel;
mod loss;
mod mmd;
mod moments;

pub use kernel::{kernel_eval, Bandwidth, KernelFamily, KernelSpec};
pub use loss::{euclid_loss, euclid_loss_grad, paa_loss, paa_loss_grad, FeatureLoss};
pub use mmd::{
    gaussian_bandwidth, gaussian_bandwidth_linear_time, mmd2_biased, mmd2_biased_grad, mmd2_linear_time,
    BandwidthEstimate, Pairing, BANDWIDTH_FLOOR,
};
pub use moments::{gaa_loss, gaa_loss_grad, gaa_moments, MomentSummary};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// `channels × positions` activation matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    positions: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, positions: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || positions == 0 {
            return Err(shape_err("FeatureMap", "channels and positions must be at least 1"));
        }
        if values.len() != channels * positions {
            return Err(shape_err(
                "FeatureMap",
                format!("{channels}x{positions} map given {} values", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("FeatureMap"));
        }
        Ok(Self {
            channels,
            positions,
            values,
        })
    }

    /// Views a `[1, C, H, W]` or `[C, H, W]` activation as a `C × HW` map.
    pub fn from_activation(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [1, c, h, w] | [c, h, w] => Self::new(c, h * w, t.data().to_vec()),
            ref s => Err(shape_err(
                "FeatureMap::from_activation",
                format!("expected a single CHW activation, got {s:?}"),
            )),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let channels = rows.len();
        let positions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != positions) {
            return Err(shape_err("FeatureMap::from_rows", "ragged rows"));
        }
        Self::new(channels, positions, rows.concat())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, channel: usize, position: usize) -> f64 {
        self.values[channel * self.positions + position]
    }

    pub fn row(&self, channel: usize) -> &[f64] {
        &self.values[channel * self.positions..(channel + 1) * self.positions]
    }

    /// Column `j` of the result is column `perm[j]` of `self`.
    pub fn permute_columns(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.positions];
        if perm.len() != self.positions
            || perm
                .iter()
                .any(|&p| p >= self.positions || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::InvalidArgument(format!(
                "not a permutation of {} positions",
                self.positions
            )));
        }
        let mut values = Vec::with_capacity(self.values.len());
        for c in 0..self.channels {
            let row = self.row(c);
            values.extend(perm.iter().map(|&p| row[p]));
        }
        Ok(Self { values, ..*self })
    }

    /// Rotates the position axis: column `j` moves to `(j + shift) mod M`.
    pub fn circular_shift(&self, shift: usize) -> Self {
        let m = self.positions;
        let perm: Vec<usize> = (0..m).map(|j| (j + m - shift % m) % m).collect();
        self.permute_columns(&perm).expect("rotation is a permutation")
    }
}

/// How a feature map is cut into sample vectors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    /// One vector per spatial position, of dimension `channels`.
    #[default]
    PointWise,
    /// One vector per channel, of dimension `positions`.
    ChannelWise,
}

/// Equal-dimension vectors stored row-major (`len × dim`).
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    dim: usize,
    data: Vec<f64>,
    strategy: SplitStrategy,
}

impl SampleSet {
    pub fn from_vectors(vectors: &[Vec<f64>]) -> Result<Self> {
        let dim = vectors.first().map_or(0, Vec::len);
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(shape_err("SampleSet", "vectors of unequal dimension"));
        }
        Ok(Self {
            dim,
            data: vectors.concat(),
            strategy: SplitStrategy::PointWise,
        })
    }

    pub(crate) fn from_raw(dim: usize, data: Vec<f64>, strategy: SplitStrategy) -> Self {
        debug_assert!(dim == 0 || data.len().is_multiple_of(dim));
        Self { dim, data, strategy }
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn strategy(&self) -> SplitStrategy {
        self.strategy
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim.max(1))
    }

    #[cfg(test)]
    pub(crate) fn raw(&self) -> &[f64] {
        &self.data
    }

    /// Scales every vector by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

pub fn split(fm: &FeatureMap, strategy: SplitStrategy) -> SampleSet {
    let (n, m) = (fm.channels, fm.positions);
    match strategy {
        SplitStrategy::ChannelWise => SampleSet::from_raw(m, fm.values.clone(), strategy),
        SplitStrategy::PointWise => {
            let mut data = vec![0.0; n * m];
            for c in 0..n {
                for p in 0..m {
                    data[p * n + c] = fm.values[c * m + p];
                }
            }
            SampleSet::from_raw(n, data, strategy)
        }
    }
}

/// Inverse of [`split`] for a gradient laid out like the sample set.
pub(crate) fn unsplit(grad: &[f64], channels: usize, positions: usize, strategy: SplitStrategy) -> Vec<f64> {
    match strategy {
        SplitStrategy::ChannelWise => grad.to_vec(),
        SplitStrategy::PointWise => {
            let mut out = vec![0.0; channels * positions];
            for p in 0..positions {
                for c in 0..channels {
                    out[c * positions + p] = grad[p * channels + c];
                }
            }
            out
        }
    }
}
