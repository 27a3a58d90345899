//! MMD² estimators between two sample sets.

use std::cmp::Ordering;

use rand::seq::SliceRandom;

use super::kernel::{dot, sq_dist};
use super::{Bandwidth, KernelFamily, KernelSpec, SampleSet};
use crate::error::{shape_err, Error, Result};
use crate::tensor::gemm;

/// Lower bound applied to an estimated Gaussian bandwidth.
pub const BANDWIDTH_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandwidthEstimate {
    pub sigma2: f64,
    /// Set when the estimate fell below [`BANDWIDTH_FLOOR`] and was replaced.
    pub degenerate: bool,
}

impl BandwidthEstimate {
    fn floored(raw: f64) -> Self {
        if raw >= BANDWIDTH_FLOOR {
            Self {
                sigma2: raw,
                degenerate: false,
            }
        } else {
            Self {
                sigma2: BANDWIDTH_FLOOR,
                degenerate: true,
            }
        }
    }
}

/// Order in which the linear-time estimator walks the two sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pairing {
    Identity,
    Shuffled(u64),
}

fn check_pair(op: &'static str, s: &SampleSet, t: &SampleSet) -> Result<()> {
    if s.is_empty() || t.is_empty() {
        return Err(Error::EmptySet);
    }
    if s.dim() != t.dim() {
        return Err(shape_err(op, format!("vector dimensions {} and {}", s.dim(), t.dim())));
    }
    Ok(())
}

fn sum_sq_norms(set: &SampleSet) -> f64 {
    set.vectors().map(|v| dot(v, v)).sum()
}

fn vector_sum(set: &SampleSet) -> Vec<f64> {
    let mut acc = vec![0.0; set.dim()];
    for v in set.vectors() {
        acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
    }
    acc
}

/// σ² as the mean squared distance over every pair the biased estimator
/// touches: the `m²` within-S pairs, `n²` within-T pairs and `mn` cross pairs.
pub fn gaussian_bandwidth(s: &SampleSet, t: &SampleSet) -> Result<BandwidthEstimate> {
    check_pair("gaussian_bandwidth", s, t)?;
    let (m, n) = (s.len() as f64, t.len() as f64);
    let (ns, nt) = (sum_sq_norms(s), sum_sq_norms(t));
    let (vs, vt) = (vector_sum(s), vector_sum(t));
    let within_s = 2.0 * m * ns - 2.0 * dot(&vs, &vs);
    let within_t = 2.0 * n * nt - 2.0 * dot(&vt, &vt);
    let cross = n * ns + m * nt - 2.0 * dot(&vs, &vt);
    let total = (within_s + within_t + cross).max(0.0);
    Ok(BandwidthEstimate::floored(total / (m * m + n * n + m * n)))
}

fn pairing_order(s: &SampleSet, t: &SampleSet, pairing: Pairing) -> Result<(Vec<usize>, Vec<usize>)> {
    let usable = 2 * (s.len().min(t.len()) / 2);
    if usable < 2 {
        return Err(Error::InvalidArgument(format!(
            "linear-time MMD needs at least 2 vectors per set, got {} and {}",
            s.len(),
            t.len()
        )));
    }
    let mut is: Vec<usize> = (0..s.len()).collect();
    let mut it: Vec<usize> = (0..t.len()).collect();
    if let Pairing::Shuffled(seed) = pairing {
        let mut rng = crate::seed::rng(seed);
        is.shuffle(&mut rng);
        it.shuffle(&mut rng);
    }
    is.truncate(usable);
    it.truncate(usable);
    Ok((is, it))
}

/// σ² as the mean squared distance over the four pairs of every block the
/// linear-time estimator visits.
pub fn gaussian_bandwidth_linear_time(s: &SampleSet, t: &SampleSet, pairing: Pairing) -> Result<BandwidthEstimate> {
    check_pair("gaussian_bandwidth_linear_time", s, t)?;
    let (is, it) = pairing_order(s, t, pairing)?;
    let mut total = 0.0;
    for (ps, pt) in is.chunks(2).zip(it.chunks(2)) {
        let (s1, s2) = (s.vector(ps[0]), s.vector(ps[1]));
        let (t1, t2) = (t.vector(pt[0]), t.vector(pt[1]));
        total += sq_dist(s1, s2) + sq_dist(t1, t2) + sq_dist(s1, t2) + sq_dist(s2, t1);
    }
    Ok(BandwidthEstimate::floored(total / (2 * is.len()) as f64))
}

/// Linear-time unbiased MMD² estimate: the mean over disjoint blocks
/// `(s₁, s₂, t₁, t₂)` of `k(s₁,s₂) + k(t₁,t₂) − k(s₁,t₂) − k(s₂,t₁)`.
///
/// Both sets are truncated to the common even length `2⌊min(m,n)/2⌋` after
/// the optional shuffle.
pub fn mmd2_linear_time(s: &SampleSet, t: &SampleSet, k: &KernelSpec, pairing: Pairing) -> Result<f64> {
    check_pair("mmd2_linear_time", s, t)?;
    k.validate()?;
    let (is, it) = pairing_order(s, t, pairing)?;
    let kernel = match (k.family, k.sigma2) {
        (KernelFamily::Gaussian, Bandwidth::Auto) => {
            k.with_sigma2(gaussian_bandwidth_linear_time(s, t, pairing)?.sigma2)
        }
        _ => *k,
    };
    let eval = |a: &[f64], b: &[f64]| match kernel.family {
        KernelFamily::Gaussian => {
            let Bandwidth::Fixed(sigma2) = kernel.sigma2 else {
                unreachable!()
            };
            (-sq_dist(a, b) / (2.0 * sigma2)).exp()
        }
        _ => kernel.dot_profile(dot(a, b)),
    };
    let mut total = 0.0;
    for (ps, pt) in is.chunks(2).zip(it.chunks(2)) {
        let (s1, s2) = (s.vector(ps[0]), s.vector(ps[1]));
        let (t1, t2) = (t.vector(pt[0]), t.vector(pt[1]));
        total += eval(s1, s2) + eval(t1, t2) - eval(s1, t2) - eval(s2, t1);
    }
    let value = total / (is.len() / 2) as f64;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite("mmd2_linear_time"))
    }
}

/// Biased quadratic-time MMD².
pub fn mmd2_biased(s: &SampleSet, t: &SampleSet, k: &KernelSpec) -> Result<f64> {
    Ok(biased(s, t, k, false)?.0)
}

/// Biased MMD² and its gradient with respect to the vectors of `s`, laid out
/// like `s` (`len × dim`). An automatic Gaussian bandwidth is estimated from
/// the current sets and held constant for differentiation.
pub fn mmd2_biased_grad(s: &SampleSet, t: &SampleSet, k: &KernelSpec) -> Result<(f64, Vec<f64>)> {
    let (v, g) = biased(s, t, k, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// Permutation sorting the vectors lexicographically. Evaluating on sorted
/// copies makes the result depend on the multiset only, bit for bit.
fn canonical_order(set: &SampleSet) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.sort_by(|&a, &b| {
        set.vector(a)
            .iter()
            .zip(set.vector(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    idx
}

fn gather(set: &SampleSet, order: &[usize]) -> Vec<f64> {
    order.iter().flat_map(|&i| set.vector(i).iter().copied()).collect()
}

fn biased(s: &SampleSet, t: &SampleSet, k: &KernelSpec, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    check_pair("mmd2_biased", s, t)?;
    k.validate()?;
    let (m, n, dim) = (s.len(), t.len(), s.dim());
    let order_s = canonical_order(s);
    let order_t = canonical_order(t);
    let sd = gather(s, &order_s);
    let td = gather(t, &order_t);
    let kernel = match (k.family, k.sigma2) {
        (KernelFamily::Gaussian, Bandwidth::Auto) => {
            let ss = SampleSet::from_raw(dim, sd.clone(), s.strategy());
            let ts = SampleSet::from_raw(dim, td.clone(), t.strategy());
            k.with_sigma2(gaussian_bandwidth(&ss, &ts)?.sigma2)
        }
        _ => *k,
    };

    let mut g_ss = vec![0.0; m * m];
    let mut g_tt = vec![0.0; n * n];
    let mut g_st = vec![0.0; m * n];
    gemm(m, dim, m, &sd, false, &sd, true, &mut g_ss, false);
    gemm(n, dim, n, &td, false, &td, true, &mut g_tt, false);
    gemm(m, dim, n, &sd, false, &td, true, &mut g_st, false);

    let gaussian = match kernel.family {
        KernelFamily::Gaussian => {
            let Bandwidth::Fixed(sigma2) = kernel.sigma2 else {
                unreachable!()
            };
            let ns: Vec<f64> = sd.chunks(dim.max(1)).map(|v| dot(v, v)).collect();
            let nt: Vec<f64> = td.chunks(dim.max(1)).map(|v| dot(v, v)).collect();
            let to_kernel = |g: &mut [f64], left: &[f64], right: &[f64]| {
                let cols = right.len();
                for (i, row) in g.chunks_mut(cols).enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        let d = (left[i] + right[j] - 2.0 * *v).max(0.0);
                        *v = (-d / (2.0 * sigma2)).exp();
                    }
                }
            };
            to_kernel(&mut g_ss, &ns, &ns);
            to_kernel(&mut g_tt, &nt, &nt);
            to_kernel(&mut g_st, &ns, &nt);
            Some(sigma2)
        }
        _ => None,
    };

    // gradient weights must be taken from the raw dot products
    let (w_ss, w_st) = if want_grad && gaussian.is_none() {
        (
            Some(g_ss.iter().map(|&u| kernel.dot_profile_deriv(u)).collect::<Vec<_>>()),
            Some(g_st.iter().map(|&u| kernel.dot_profile_deriv(u)).collect::<Vec<_>>()),
        )
    } else {
        (None, None)
    };
    if gaussian.is_none() {
        for g in [&mut g_ss, &mut g_tt, &mut g_st] {
            g.iter_mut().for_each(|u| *u = kernel.dot_profile(*u));
        }
    }

    let (mf, nf) = (m as f64, n as f64);
    let ss = g_ss.iter().sum::<f64>() / (mf * mf);
    let tt = g_tt.iter().sum::<f64>() / (nf * nf);
    let st = g_st.iter().sum::<f64>() / (mf * nf);
    let value = ss + tt - 2.0 * st;
    if !value.is_finite() {
        return Err(Error::NonFinite("mmd2_biased"));
    }
    if !want_grad {
        return Ok((value, None));
    }

    let mut grad_sorted = vec![0.0; m * dim];
    match gaussian {
        None => {
            let (w_ss, w_st) = (w_ss.unwrap(), w_st.unwrap());
            let a = 2.0 / (mf * mf);
            let b = -2.0 / (mf * nf);
            let mut tmp = vec![0.0; m * dim];
            gemm(m, m, dim, &w_ss, false, &sd, false, &mut tmp, false);
            grad_sorted.iter_mut().zip(&tmp).for_each(|(g, x)| *g = a * x);
            gemm(m, n, dim, &w_st, false, &td, false, &mut tmp, false);
            grad_sorted.iter_mut().zip(&tmp).for_each(|(g, x)| *g += b * x);
        }
        Some(sigma2) => {
            // d/ds_i k(s_i, x) = −k (s_i − x) / σ²
            let a = -2.0 / (mf * mf * sigma2);
            let b = 2.0 / (mf * nf * sigma2);
            let mut ks = vec![0.0; m * dim];
            let mut kt = vec![0.0; m * dim];
            gemm(m, m, dim, &g_ss, false, &sd, false, &mut ks, false);
            gemm(m, n, dim, &g_st, false, &td, false, &mut kt, false);
            for i in 0..m {
                let r_ss: f64 = g_ss[i * m..(i + 1) * m].iter().sum();
                let r_st: f64 = g_st[i * n..(i + 1) * n].iter().sum();
                for c in 0..dim {
                    let si = sd[i * dim + c];
                    grad_sorted[i * dim + c] = a * (r_ss * si - ks[i * dim + c]) + b * (r_st * si - kt[i * dim + c]);
                }
            }
        }
    }
    let mut grad = vec![0.0; m * dim];
    for (sorted_pos, &orig) in order_s.iter().enumerate() {
        grad[orig * dim..(orig + 1) * dim].copy_from_slice(&grad_sorted[sorted_pos * dim..(sorted_pos + 1) * dim]);
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mmd2_biased gradient"));
    }
    Ok((value, Some(grad)))
}
