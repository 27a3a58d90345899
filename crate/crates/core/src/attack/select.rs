use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{rank_of_label, Model};
use crate::seed::{self, STREAM_LABEL};
use crate::statalign::{FeatureLoss, FeatureMap, Pairing};
use crate::tensor::Tensor;

use super::{Gallery, GalleryEntry, LabelMode};

/// Target label for a `[1, c, h, w]` image with true label `y`. Random mode
/// draws from the stream derived from `seed` and `image_id`.
pub fn select_target_label(
    model: &Model,
    x: &Tensor,
    y: usize,
    mode: LabelMode,
    seed: u64,
    image_id: u64,
) -> Result<usize> {
    let classes = model.num_classes();
    if y >= classes {
        return Err(Error::LabelOutOfRange { label: y, classes });
    }
    match mode {
        LabelMode::Random => {
            if classes < 2 {
                return Err(Error::InvalidArgument(
                    "random targets need at least two classes".into(),
                ));
            }
            let mut rng = seed::rng(seed::derive_indexed(seed, STREAM_LABEL, image_id));
            let r = rng.gen_range(0..classes - 1);
            Ok(if r >= y { r + 1 } else { r })
        }
        LabelMode::Rank(k) => {
            let logits = model.predict(x)?;
            let label = rank_of_label(logits.data(), k)?;
            if label == y {
                return Err(Error::InvalidArgument(format!(
                    "rank {k} selects the true label {y}; it is never a valid target"
                )));
            }
            Ok(label)
        }
    }
}

/// Gallery entry of label `y_tgt` that scores highest against the clean source
/// feature. Ties go to the lowest gallery index.
pub fn select_target_image<'g>(
    gallery: &'g Gallery,
    y_tgt: usize,
    source_clean: &FeatureMap,
    loss: &FeatureLoss,
    pairing: Pairing,
) -> Result<(usize, &'g GalleryEntry)> {
    let entries = gallery.entries(y_tgt);
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in entries.iter().enumerate() {
        let score = loss.gallery_score(source_clean, &e.feature, pairing)?;
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((i, score));
        }
    }
    let (i, _) = best.ok_or(Error::EmptySet)?;
    Ok((i, &entries[i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Model};

    fn entry(index: usize, rows: &[Vec<f64>]) -> GalleryEntry {
        GalleryEntry {
            index,
            feature: FeatureMap::from_rows(rows).unwrap(),
        }
    }

    fn gallery(entries: Vec<GalleryEntry>) -> Gallery {
        let filler = entries
            .iter()
            .map(|e| GalleryEntry { index: 99, ..e.clone() })
            .collect();
        Gallery::from_entries("toy", 0, vec![filler, entries]).unwrap()
    }

    /// Squared gaps in channel means plus squared gaps in population variances.
    fn gaa_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let stats = |r: &Vec<f64>| {
            let m = r.iter().sum::<f64>() / r.len() as f64;
            (m, r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / r.len() as f64)
        };
        a.iter()
            .zip(b)
            .map(|(x, y)| {
                let (mx, vx) = stats(x);
                let (my, vy) = stats(y);
                (mx - my).powi(2) + (vx - vy).powi(2)
            })
            .sum::<f64>()
            / a.len() as f64
    }

    #[test]
    fn gaa_picks_larger_loss() {
        let src = vec![vec![1.0, 1.0], vec![0.0, 2.0]];
        let a = vec![vec![1.0, 2.0], vec![0.0, 2.0]];
        let b = vec![vec![3.0, 3.0], vec![1.0, 1.0]];
        assert!(gaa_oracle(&src, &b) > gaa_oracle(&src, &a));
        let g = gallery(vec![entry(10, &a), entry(11, &b)]);
        let s = FeatureMap::from_rows(&src).unwrap();
        let (i, e) = select_target_image(&g, 1, &s, &FeatureLoss::Gaa, Pairing::Identity).unwrap();
        assert_eq!((i, e.index), (1, 11));
    }

    #[test]
    fn ties_and_singletons() {
        let rows = vec![vec![1.0, 2.0]];
        let s = FeatureMap::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let g = gallery(vec![entry(5, &rows), entry(6, &rows)]);
        let (i, _) = select_target_image(&g, 1, &s, &FeatureLoss::Euclid, Pairing::Identity).unwrap();
        assert_eq!(i, 0);
        let g = gallery(vec![entry(7, &rows)]);
        let (_, e) = select_target_image(&g, 1, &s, &FeatureLoss::Euclid, Pairing::Identity).unwrap();
        assert_eq!(e.index, 7);
        assert!(matches!(
            select_target_image(&g, 5, &s, &FeatureLoss::Euclid, Pairing::Identity),
            Err(Error::EmptySet)
        ));
    }

    fn model() -> Model {
        let arch = Architecture::parse("t", "conv:2 pool flatten linear", &[0]).unwrap();
        Model::build(&arch, 10, [1, 4, 4], 1).unwrap()
    }

    #[test]
    fn random_mode_excludes_true_label() {
        let m = model();
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let mut seen = [0usize; 10];
        for id in 0..10_000 {
            let t = select_target_label(&m, &x, 3, LabelMode::Random, 7, id).unwrap();
            assert_ne!(t, 3);
            seen[t] += 1;
        }
        assert!(seen.iter().enumerate().all(|(l, &c)| l == 3 || c > 900));
        assert_eq!(
            select_target_label(&m, &x, 3, LabelMode::Random, 7, 42).unwrap(),
            select_target_label(&m, &x, 3, LabelMode::Random, 7, 42).unwrap()
        );
    }

    #[test]
    fn rank_mode_follows_logits() {
        let m = model();
        let x = Tensor::full(&[1, 1, 4, 4], 0.5);
        let logits = m.predict(&x).unwrap();
        let top = rank_of_label(logits.data(), 1).unwrap();
        let second = rank_of_label(logits.data(), 2).unwrap();
        let last = rank_of_label(logits.data(), 10).unwrap();
        assert_eq!(
            select_target_label(&m, &x, top, LabelMode::Rank(2), 0, 0).unwrap(),
            second
        );
        assert_eq!(
            select_target_label(&m, &x, top, LabelMode::Rank(10), 0, 0).unwrap(),
            last
        );
        assert!(select_target_label(&m, &x, top, LabelMode::Rank(1), 0, 0).is_err());
        assert!(select_target_label(&m, &x, 10, LabelMode::Random, 0, 0).is_err());
    }
}
