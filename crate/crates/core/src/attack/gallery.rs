use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::seed::{self, STREAM_GALLERY};
use crate::statalign::FeatureMap;

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryEntry {
    /// Index of the image in the source dataset.
    pub index: usize,
    /// Cached activation of the image at the gallery tap.
    pub feature: FeatureMap,
}

/// `K` correctly classified images per label with cached tap features.
#[derive(Clone, Debug, PartialEq)]
pub struct Gallery {
    model: String,
    tap: usize,
    per_label: Vec<Vec<GalleryEntry>>,
}

impl Gallery {
    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn tap(&self) -> usize {
        self.tap
    }

    pub fn num_labels(&self) -> usize {
        self.per_label.len()
    }

    pub fn len(&self) -> usize {
        self.per_label.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self, label: usize) -> &[GalleryEntry] {
        self.per_label.get(label).map_or(&[], Vec::as_slice)
    }
}

/// Draws `k` images per label among those `model` classifies correctly.
pub fn build_gallery(dataset: &Dataset, model: &Model, tap: usize, k: usize, seed: u64) -> Result<Gallery> {
    if k == 0 {
        return Err(Error::InvalidArgument("gallery size must be at least 1".into()));
    }
    if tap >= model.tap_count() {
        return Err(Error::TapOutOfRange {
            tap,
            count: model.tap_count(),
        });
    }
    let predicted = predict_all(model, dataset)?;
    let mut per_label = Vec::with_capacity(dataset.num_classes());
    for label in 0..dataset.num_classes() {
        let mut pool: Vec<usize> = dataset
            .indices_of(label)
            .into_iter()
            .filter(|&i| predicted[i] == label)
            .collect();
        if pool.len() < k {
            return Err(Error::InsufficientGallery {
                label,
                have: pool.len(),
                need: k,
            });
        }
        let mut rng = seed::rng(seed::derive_indexed(seed, STREAM_GALLERY, label as u64));
        pool.shuffle(&mut rng);
        let entries = pool[..k]
            .iter()
            .map(|&index| {
                Ok(GalleryEntry {
                    index,
                    feature: model.forward_to_tap(&dataset.image(index), tap)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        per_label.push(entries);
    }
    Ok(Gallery {
        model: model.name().to_string(),
        tap,
        per_label,
    })
}

pub(crate) fn predict_all(model: &Model, dataset: &Dataset) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in idx.chunks(64) {
        out.extend(model.predict_labels(&dataset.batch(chunk))?);
    }
    Ok(out)
}

impl Gallery {
    /// Assembles a gallery from precomputed entries, one list per label.
    /// Every label must hold the same, nonzero number of entries.
    pub fn from_entries(model: impl Into<String>, tap: usize, per_label: Vec<Vec<GalleryEntry>>) -> Result<Self> {
        let k = per_label.first().map_or(0, Vec::len);
        if k == 0 || per_label.iter().any(|e| e.len() != k) {
            return Err(Error::InvalidArgument(
                "gallery labels must all hold the same nonzero number of entries".into(),
            ));
        }
        Ok(Self {
            model: model.into(),
            tap,
            per_label,
        })
    }
}
