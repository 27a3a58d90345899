use std::collections::hash_map::{Entry, HashMap};
use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{config_hash, eval_tsuc, eval_ttr, TransferRecord};
use crate::attack::{
    build_gallery, gallery::predict_all, run_attack_batch, AdversarialResult, AttackConfig, AttackRequest, Gallery,
    LabelMode, LossKind,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::seed::{self, STREAM_IMAGES};

/// A white-box model, the black boxes it is evaluated against, and the image
/// pool that supplies both attack sources and gallery candidates.
#[derive(Clone)]
pub struct Bench<'a> {
    pub white: &'a Model,
    pub blacks: Vec<&'a Model>,
    pub pool: &'a Dataset,
    pub gallery_k: usize,
    /// Source images attacked per run (capped by the eligible pool).
    pub n_images: usize,
    /// Images per forward/backward batch.
    pub batch: usize,
    /// Fill the `runtime_s` column. Off by default so outputs are reproducible
    /// byte for byte.
    pub record_runtime: bool,
}

impl<'a> Bench<'a> {
    pub fn new(white: &'a Model, blacks: Vec<&'a Model>, pool: &'a Dataset) -> Self {
        Self {
            white,
            blacks,
            pool,
            gallery_k: 20,
            n_images: 300,
            batch: 16,
            record_runtime: false,
        }
    }
}

/// Pool indices that every model classifies correctly.
pub fn eligible_indices(pool: &Dataset, models: &[&Model]) -> Result<Vec<usize>> {
    let mut ok = vec![true; pool.len()];
    for m in models {
        for (i, p) in predict_all(m, pool)?.into_iter().enumerate() {
            ok[i] &= p == pool.label(i);
        }
    }
    Ok((0..pool.len()).filter(|&i| ok[i]).collect())
}

/// Budget and pixel-range checks over emitted adversarial examples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintAudit {
    pub checked: usize,
    pub violations: usize,
    /// Largest `‖x_adv − x‖∞` seen.
    pub max_linf: f64,
}

impl ConstraintAudit {
    pub fn check(&mut self, x: &[f64], x_adv: &[f64], epsilon: f64) {
        let linf = x.iter().zip(x_adv).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let in_range = x_adv.iter().all(|v| (0.0..=1.0).contains(v));
        self.checked += 1;
        self.max_linf = self.max_linf.max(linf);
        if linf > epsilon + 1e-6 || !in_range {
            self.violations += 1;
        }
    }

    pub fn merge(&mut self, other: &ConstraintAudit) {
        self.checked += other.checked;
        self.violations += other.violations;
        self.max_linf = self.max_linf.max(other.max_linf);
    }
}

/// One attack configuration run on one seed's image sample.
#[derive(Clone, Debug)]
pub struct PointOutcome {
    pub results: Vec<AdversarialResult>,
    /// `records[b]` holds the records against `bench.blacks[b]`.
    pub records: Vec<Vec<TransferRecord>>,
    pub audit: ConstraintAudit,
    pub runtime_s: f64,
}

/// Attacks `n_images` eligible images drawn with `cfg.seed` and evaluates
/// every black box on the results.
pub fn run_point(
    bench: &Bench,
    cfg: &AttackConfig,
    eligible: &[usize],
    gallery: Option<&Gallery>,
) -> Result<PointOutcome> {
    cfg.validate()?;
    if bench.batch == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let start = Instant::now();
    let mut chosen = eligible.to_vec();
    chosen.shuffle(&mut seed::rng(seed::derive(cfg.seed, STREAM_IMAGES)));
    chosen.truncate(bench.n_images);
    if chosen.is_empty() {
        return Err(Error::InvalidArgument("no eligible source images to attack".into()));
    }
    let requests: Vec<AttackRequest> = chosen
        .iter()
        .map(|&i| AttackRequest {
            id: i as u64,
            image: bench.pool.image(i),
            label: bench.pool.label(i),
        })
        .collect();
    let chunks: Vec<Vec<AdversarialResult>> = requests
        .par_chunks(bench.batch)
        .map(|c| run_attack_batch(bench.white, c, cfg, gallery))
        .collect::<Result<_>>()?;
    let results: Vec<AdversarialResult> = chunks.into_iter().flatten().collect();

    let mut audit = ConstraintAudit::default();
    for (r, q) in results.iter().zip(&requests) {
        audit.check(q.image.data(), r.x_adv.data(), cfg.epsilon);
    }
    let hash = config_hash(cfg)?;
    let mut records = Vec::with_capacity(bench.blacks.len());
    for black in &bench.blacks {
        let mut preds = Vec::with_capacity(results.len());
        for chunk in results.chunks(64) {
            let [c, h, w] = black.input_shape();
            let mut data = Vec::with_capacity(chunk.len() * c * h * w);
            for r in chunk {
                data.extend_from_slice(r.x_adv.data());
            }
            let batch = crate::tensor::Tensor::new(vec![chunk.len(), c, h, w], data)?;
            preds.extend(black.predict_labels(&batch)?);
        }
        records.push(
            results
                .iter()
                .zip(preds)
                .map(|(r, p)| TransferRecord {
                    image_id: r.id,
                    y: r.y,
                    y_tgt: r.y_tgt,
                    white_box: bench.white.name().to_string(),
                    black_box: black.name().to_string(),
                    white_success: r.white_box_success(),
                    black_success: p == r.y_tgt,
                    loss: cfg.loss,
                    tap: cfg.tap,
                    config_hash: hash.clone(),
                })
                .collect(),
        );
    }
    Ok(PointOutcome {
        results,
        records,
        audit,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

/// The parameter a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Tap,
    Rank,
    C,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tap => "tap",
            Self::Rank => "rank",
            Self::C => "c",
        })
    }
}

/// One (configuration, seed, black box) cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub white_box: String,
    pub black_box: String,
    pub loss: LossKind,
    pub tap: usize,
    pub rank_or_random: String,
    pub c: f64,
    pub seed: u64,
    pub n_images: usize,
    pub tsuc: f64,
    /// `None` when no example fooled the white box.
    pub ttr: Option<f64>,
    pub runtime_s: Option<f64>,
}

/// Seed-averaged rates for one (configuration, black box).
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub black_box: String,
    pub loss: LossKind,
    pub tap: usize,
    pub rank_or_random: String,
    pub c: f64,
    pub seeds: usize,
    pub mean_tsuc: f64,
    /// Mean over the seeds where tTR is defined.
    pub mean_ttr: Option<f64>,
}

/// White-box outcome of one (configuration, seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhiteRow {
    pub loss: LossKind,
    pub tap: usize,
    pub rank_or_random: String,
    pub c: f64,
    pub seed: u64,
    pub n_images: usize,
    /// Targeted success rate on the white box, percent.
    pub tsuc: f64,
    /// Images whose attack loss ended below its starting value.
    pub loss_reduced: usize,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub axis: Axis,
    pub rows: Vec<SweepRow>,
    pub white: Vec<WhiteRow>,
    pub audit: ConstraintAudit,
    pub runtime_s: f64,
}

impl SweepResult {
    /// Seed-mean white-box tSuc of one configuration.
    pub fn mean_white_tsuc(&self, tap: usize, rank_or_random: &str, c: f64, loss: LossKind) -> f64 {
        let v: Vec<f64> = self
            .white
            .iter()
            .filter(|w| w.tap == tap && w.rank_or_random == rank_or_random && w.c == c && w.loss == loss)
            .map(|w| w.tsuc)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// Rows averaged over seeds, in first-appearance order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut order: Vec<(String, LossKind, usize, String, u64)> = Vec::new();
        let mut groups: HashMap<(String, LossKind, usize, String, u64), Vec<&SweepRow>> = HashMap::new();
        for r in &self.rows {
            let key = (
                r.black_box.clone(),
                r.loss,
                r.tap,
                r.rank_or_random.clone(),
                r.c.to_bits(),
            );
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r);
        }
        order
            .into_iter()
            .map(|key| {
                let rows = &groups[&key];
                let n = rows.len() as f64;
                let ttrs: Vec<f64> = rows.iter().filter_map(|r| r.ttr).collect();
                SummaryRow {
                    black_box: key.0,
                    loss: key.1,
                    tap: key.2,
                    rank_or_random: key.3,
                    c: f64::from_bits(key.4),
                    seeds: rows.len(),
                    mean_tsuc: rows.iter().map(|r| r.tsuc).sum::<f64>() / n,
                    mean_ttr: (!ttrs.is_empty()).then(|| ttrs.iter().sum::<f64>() / ttrs.len() as f64),
                }
            })
            .collect()
    }

    /// Summary rows for one black box, in sweep order.
    pub fn series(&self, black_box: &str) -> Vec<SummaryRow> {
        self.summary()
            .into_iter()
            .filter(|s| s.black_box == black_box)
            .collect()
    }

    /// Tap with the highest seed-mean tSuc against `black_box`; ties go to the
    /// shallower tap.
    pub fn best_tap(&self, black_box: &str) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for s in self.series(black_box) {
            if best.is_none_or(|(_, b)| s.mean_tsuc > b) {
                best = Some((s.tap, s.mean_tsuc));
            }
        }
        best.map(|(t, _)| t)
    }
}

/// Runs every configuration in `points` once per seed.
pub fn sweep(bench: &Bench, axis: Axis, points: &[AttackConfig], seeds: &[u64]) -> Result<SweepResult> {
    if points.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "a sweep needs at least one point and one seed".into(),
        ));
    }
    for p in points {
        p.validate()?;
    }
    let start = Instant::now();
    let mut models = vec![bench.white];
    models.extend(bench.blacks.iter().copied());
    let eligible = eligible_indices(bench.pool, &models)?;
    let mut galleries: HashMap<(usize, u64), Gallery> = HashMap::new();
    let mut rows = Vec::new();
    let mut white = Vec::new();
    let mut audit = ConstraintAudit::default();
    for point in points {
        for &s in seeds {
            let cfg = AttackConfig {
                seed: s,
                ..point.clone()
            };
            let gallery = if cfg.loss.is_feature_loss() {
                let key = (cfg.tap, s);
                if let Entry::Vacant(e) = galleries.entry(key) {
                    e.insert(build_gallery(bench.pool, bench.white, cfg.tap, bench.gallery_k, s)?);
                }
                galleries.get(&key)
            } else {
                None
            };
            let out = run_point(bench, &cfg, &eligible, gallery)?;
            audit.merge(&out.audit);
            let hits = out.results.iter().filter(|r| r.white_box_success()).count();
            white.push(WhiteRow {
                loss: cfg.loss,
                tap: cfg.tap,
                rank_or_random: cfg.label_mode.to_string(),
                c: cfg.kernel_c,
                seed: s,
                n_images: out.results.len(),
                tsuc: 100.0 * hits as f64 / out.results.len() as f64,
                loss_reduced: out
                    .results
                    .iter()
                    .filter(|r| r.loss_trace.last() < r.loss_trace.first())
                    .count(),
            });
            for (black, recs) in bench.blacks.iter().zip(&out.records) {
                rows.push(SweepRow {
                    white_box: bench.white.name().to_string(),
                    black_box: black.name().to_string(),
                    loss: cfg.loss,
                    tap: cfg.tap,
                    rank_or_random: cfg.label_mode.to_string(),
                    c: cfg.kernel_c,
                    seed: s,
                    n_images: recs.len(),
                    tsuc: eval_tsuc(recs)?,
                    ttr: eval_ttr(recs),
                    runtime_s: bench.record_runtime.then_some(out.runtime_s),
                });
            }
        }
    }
    Ok(SweepResult {
        axis,
        rows,
        white,
        audit,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

/// One run per tap of the white-box model.
pub fn layer_sweep(bench: &Bench, cfg: &AttackConfig, taps: &[usize], seeds: &[u64]) -> Result<SweepResult> {
    let count = bench.white.tap_count();
    if let Some(&tap) = taps.iter().find(|&&t| t >= count) {
        return Err(Error::TapOutOfRange { tap, count });
    }
    let points: Vec<_> = taps.iter().map(|&tap| AttackConfig { tap, ..cfg.clone() }).collect();
    sweep(bench, Axis::Tap, &points, seeds)
}

/// One run per target-label rank.
pub fn rank_sweep(bench: &Bench, cfg: &AttackConfig, ranks: &[usize], seeds: &[u64]) -> Result<SweepResult> {
    let classes = bench.white.num_classes();
    if let Some(&k) = ranks.iter().find(|&&k| k < 2 || k > classes) {
        return Err(Error::InvalidArgument(format!("rank {k} outside 2..={classes}")));
    }
    let points: Vec<_> = ranks
        .iter()
        .map(|&k| AttackConfig {
            label_mode: LabelMode::Rank(k),
            ..cfg.clone()
        })
        .collect();
    sweep(bench, Axis::Rank, &points, seeds)
}

/// One polynomial-kernel run per bias value `c`.
pub fn c_sweep(bench: &Bench, cfg: &AttackConfig, cs: &[f64], seeds: &[u64]) -> Result<SweepResult> {
    if cfg.loss != LossKind::PaaPoly {
        return Err(Error::InvalidArgument(format!(
            "c sweep needs loss paa_p, got {}",
            cfg.loss
        )));
    }
    if let Some(&c) = cs.iter().find(|&&c| c.is_nan() || c < 0.0) {
        return Err(Error::InvalidArgument(format!("kernel bias c must be >= 0, got {c}")));
    }
    let points: Vec<_> = cs
        .iter()
        .map(|&c| AttackConfig {
            kernel_c: c,
            ..cfg.clone()
        })
        .collect();
    sweep(bench, Axis::C, &points, seeds)
}

/// The bias grid 0.0, 0.1, ..., 2.0.
pub fn c_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 10.0).collect()
}
