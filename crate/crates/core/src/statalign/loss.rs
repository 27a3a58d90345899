use serde::{Deserialize, Serialize};

use super::mmd::{mmd2_biased, mmd2_biased_grad, mmd2_linear_time, Pairing};
use super::moments::{gaa_loss, gaa_loss_grad};
use super::{split, unsplit, FeatureMap, KernelSpec, SplitStrategy};
use crate::error::{shape_err, Result};

fn check_split(op: &'static str, s: &FeatureMap, t: &FeatureMap, strategy: SplitStrategy) -> Result<()> {
    let ok = match strategy {
        SplitStrategy::PointWise => s.channels() == t.channels(),
        SplitStrategy::ChannelWise => s.positions() == t.positions(),
    };
    if ok {
        Ok(())
    } else {
        Err(shape_err(
            op,
            format!(
                "{}x{} and {}x{} maps cannot be compared {strategy:?}",
                s.channels(),
                s.positions(),
                t.channels(),
                t.positions()
            ),
        ))
    }
}

/// Pair-wise alignment loss: biased MMD² between the split sample sets.
pub fn paa_loss(s: &FeatureMap, t: &FeatureMap, k: &KernelSpec, strategy: SplitStrategy) -> Result<f64> {
    check_split("paa_loss", s, t, strategy)?;
    mmd2_biased(&split(s, strategy), &split(t, strategy), k)
}

/// [`paa_loss`] and its gradient with respect to `s` (row-major like `s`).
pub fn paa_loss_grad(
    s: &FeatureMap,
    t: &FeatureMap,
    k: &KernelSpec,
    strategy: SplitStrategy,
) -> Result<(f64, Vec<f64>)> {
    check_split("paa_loss", s, t, strategy)?;
    let (value, g) = mmd2_biased_grad(&split(s, strategy), &split(t, strategy), k)?;
    Ok((value, unsplit(&g, s.channels(), s.positions(), strategy)))
}

fn check_same_shape(s: &FeatureMap, t: &FeatureMap) -> Result<()> {
    if (s.channels(), s.positions()) != (t.channels(), t.positions()) {
        return Err(shape_err(
            "euclid_loss",
            format!(
                "{}x{} vs {}x{}",
                s.channels(),
                s.positions(),
                t.channels(),
                t.positions()
            ),
        ));
    }
    Ok(())
}

/// Squared Euclidean distance between two maps, position by position.
pub fn euclid_loss(s: &FeatureMap, t: &FeatureMap) -> Result<f64> {
    check_same_shape(s, t)?;
    Ok(s.values().iter().zip(t.values()).map(|(a, b)| (a - b) * (a - b)).sum())
}

pub fn euclid_loss_grad(s: &FeatureMap, t: &FeatureMap) -> Result<(f64, Vec<f64>)> {
    let value = euclid_loss(s, t)?;
    let grad = s.values().iter().zip(t.values()).map(|(a, b)| 2.0 * (a - b)).collect();
    Ok((value, grad))
}

/// Feature-space loss driving an attack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureLoss {
    Paa {
        kernel: KernelSpec,
        strategy: SplitStrategy,
    },
    Gaa,
    Euclid,
}

impl FeatureLoss {
    pub fn eval(&self, s: &FeatureMap, t: &FeatureMap) -> Result<f64> {
        match self {
            Self::Paa { kernel, strategy } => paa_loss(s, t, kernel, *strategy),
            Self::Gaa => gaa_loss(s, t),
            Self::Euclid => euclid_loss(s, t),
        }
    }

    /// Loss value and gradient with respect to `s`, laid out like `s`.
    pub fn eval_grad(&self, s: &FeatureMap, t: &FeatureMap) -> Result<(f64, Vec<f64>)> {
        match self {
            Self::Paa { kernel, strategy } => paa_loss_grad(s, t, kernel, *strategy),
            Self::Gaa => gaa_loss_grad(s, t),
            Self::Euclid => euclid_loss_grad(s, t),
        }
    }

    /// Score used to rank gallery candidates against a clean source feature;
    /// PAA uses the linear-time estimator with the given pairing.
    pub fn gallery_score(&self, source: &FeatureMap, candidate: &FeatureMap, pairing: Pairing) -> Result<f64> {
        match self {
            Self::Paa { kernel, strategy } => {
                check_split("gallery_score", source, candidate, *strategy)?;
                mmd2_linear_time(&split(source, *strategy), &split(candidate, *strategy), kernel, pairing)
            }
            Self::Gaa => gaa_loss(source, candidate),
            Self::Euclid => euclid_loss(source, candidate),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statalign::{kernel_eval, Bandwidth};
    use rand::Rng;

    fn random_map(n: usize, m: usize, seed: u64) -> FeatureMap {
        let mut rng = crate::seed::rng(seed);
        FeatureMap::new(n, m, (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Eq.-style triple sum over columns, written without the crate's estimator.
    fn brute_force_paa(s: &FeatureMap, t: &FeatureMap, k: &KernelSpec) -> f64 {
        let col = |f: &FeatureMap, j: usize| (0..f.channels()).map(|c| f.get(c, j)).collect::<Vec<_>>();
        let (m, n) = (s.positions(), t.positions());
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..m {
                total += kernel_eval(k, &col(s, i), &col(s, j)).unwrap() / (m * m) as f64;
            }
        }
        for i in 0..n {
            for j in 0..n {
                total += kernel_eval(k, &col(t, i), &col(t, j)).unwrap() / (n * n) as f64;
            }
        }
        for i in 0..m {
            for j in 0..n {
                total -= 2.0 * kernel_eval(k, &col(s, i), &col(t, j)).unwrap() / (m * n) as f64;
            }
        }
        total
    }

    #[test]
    fn paa_zero_on_identical_and_permuted_maps() {
        let s = random_map(4, 6, 1);
        let p = s.permute_columns(&[3, 5, 0, 1, 4, 2]).unwrap();
        for k in [
            KernelSpec::linear(),
            KernelSpec::polynomial(0.0, 2),
            KernelSpec::gaussian(Bandwidth::Auto),
        ] {
            assert_eq!(paa_loss(&s, &s, &k, SplitStrategy::PointWise).unwrap(), 0.0);
            assert_eq!(paa_loss(&s, &p, &k, SplitStrategy::PointWise).unwrap(), 0.0);
        }
    }

    #[test]
    fn paa_polynomial_matches_brute_force() {
        let s = random_map(4, 6, 2);
        let t = random_map(4, 6, 3);
        let k = KernelSpec::polynomial(0.0, 2);
        let got = paa_loss(&s, &t, &k, SplitStrategy::PointWise).unwrap();
        assert!((got - brute_force_paa(&s, &t, &k)).abs() < 1e-10);
    }

    #[test]
    fn polynomial_degree_one_without_bias_is_linear() {
        let s = random_map(4, 6, 4);
        let t = random_map(4, 6, 5);
        let a = paa_loss(&s, &t, &KernelSpec::polynomial(0.0, 1), SplitStrategy::PointWise).unwrap();
        let b = paa_loss(&s, &t, &KernelSpec::linear(), SplitStrategy::PointWise).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn paa_dimension_checks() {
        let s = random_map(4, 6, 6);
        let t = random_map(3, 6, 7);
        assert!(paa_loss(&s, &t, &KernelSpec::linear(), SplitStrategy::PointWise).is_err());
        assert!(paa_loss(&s, &t, &KernelSpec::linear(), SplitStrategy::ChannelWise).is_ok());
        let u = random_map(4, 5, 8);
        assert!(paa_loss(&s, &u, &KernelSpec::linear(), SplitStrategy::ChannelWise).is_err());
    }

    #[test]
    fn euclid_values() {
        let s = FeatureMap::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(euclid_loss(&s, &s).unwrap(), 0.0);
        let t = FeatureMap::from_rows(&[vec![1.0, 2.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(euclid_loss(&s, &t).unwrap(), 1.0);
        let p = s.permute_columns(&[1, 0]).unwrap();
        assert!(euclid_loss(&s, &p).unwrap() > 0.0);
        let bad = FeatureMap::new(1, 4, vec![0.0; 4]).unwrap();
        assert!(euclid_loss(&s, &bad).is_err());
    }

    #[test]
    fn gallery_score_dispatch() {
        let s = random_map(4, 8, 9);
        let t = random_map(4, 8, 10);
        assert_eq!(
            FeatureLoss::Gaa.gallery_score(&s, &t, Pairing::Identity).unwrap(),
            gaa_loss(&s, &t).unwrap()
        );
        assert_eq!(
            FeatureLoss::Euclid.gallery_score(&s, &t, Pairing::Identity).unwrap(),
            euclid_loss(&s, &t).unwrap()
        );
        let paa = FeatureLoss::Paa {
            kernel: KernelSpec::linear(),
            strategy: SplitStrategy::PointWise,
        };
        let lt = mmd2_linear_time(
            &split(&s, SplitStrategy::PointWise),
            &split(&t, SplitStrategy::PointWise),
            &KernelSpec::linear(),
            Pairing::Shuffled(3),
        )
        .unwrap();
        assert_eq!(paa.gallery_score(&s, &t, Pairing::Shuffled(3)).unwrap(), lt);
    }
}
