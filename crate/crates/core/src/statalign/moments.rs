//! Channel moment matching (global-wise alignment).

use super::FeatureMap;
use crate::error::{shape_err, Result};

/// Per-channel mean and population variance.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentSummary {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

pub fn gaa_moments(fm: &FeatureMap) -> MomentSummary {
    let m = fm.positions() as f64;
    let mut means = Vec::with_capacity(fm.channels());
    let mut variances = Vec::with_capacity(fm.channels());
    for c in 0..fm.channels() {
        let row = fm.row(c);
        let mean = row.iter().sum::<f64>() / m;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        means.push(mean);
        variances.push(var);
    }
    MomentSummary { means, variances }
}

fn check(s: &FeatureMap, t: &FeatureMap) -> Result<()> {
    if s.channels() != t.channels() {
        return Err(shape_err(
            "gaa_loss",
            format!("source has {} channels, target {}", s.channels(), t.channels()),
        ));
    }
    Ok(())
}

/// `δ_μ + δ_σ`, each the mean over channels of the squared moment gap.
pub fn gaa_loss(s: &FeatureMap, t: &FeatureMap) -> Result<f64> {
    check(s, t)?;
    let (ms, mt) = (gaa_moments(s), gaa_moments(t));
    let n = s.channels() as f64;
    let delta_mu: f64 = ms
        .means
        .iter()
        .zip(&mt.means)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let delta_sigma: f64 = ms
        .variances
        .iter()
        .zip(&mt.variances)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    Ok(delta_mu + delta_sigma)
}

/// [`gaa_loss`] and its gradient with respect to `s` (row-major like `s`).
pub fn gaa_loss_grad(s: &FeatureMap, t: &FeatureMap) -> Result<(f64, Vec<f64>)> {
    let value = gaa_loss(s, t)?;
    let (ms, mt) = (gaa_moments(s), gaa_moments(t));
    let n = s.channels() as f64;
    let m = s.positions() as f64;
    let mut grad = Vec::with_capacity(s.values().len());
    for c in 0..s.channels() {
        let dmu = 2.0 * (ms.means[c] - mt.means[c]) / (n * m);
        let dvar = 2.0 * (ms.variances[c] - mt.variances[c]) / n * 2.0 / m;
        grad.extend(s.row(c).iter().map(|v| dmu + dvar * (v - ms.means[c])));
    }
    Ok((value, grad))
}
