use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::seed::{self, STREAM_SHUFFLE};
use crate::statalign::{gaussian_bandwidth, split, FeatureLoss, FeatureMap, KernelFamily, Pairing};
use crate::tensor::{Tape, Tensor};

use super::{
    momentum_attack, select_target_image, select_target_label, AttackConfig, BandwidthMode, Gallery, Objective,
};

/// Feature-alignment objective: per image, the loss between the tap
/// activation of the current input and its target feature map.
pub struct FeatureObjective<'a> {
    pub model: &'a Model,
    pub tap: usize,
    pub targets: Vec<FeatureMap>,
    pub losses: Vec<FeatureLoss>,
}

impl Objective for FeatureObjective<'_> {
    fn evaluate(&self, x: &Tensor, with_grad: bool) -> Result<(Vec<f64>, Option<Tensor>)> {
        let n = x.shape()[0];
        if self.targets.len() != n || self.losses.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} targets and {} losses for a batch of {n}",
                self.targets.len(),
                self.losses.len()
            )));
        }
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone(), with_grad);
        let pass = self.model.forward(&mut tape, input, Mode::Eval, Some(self.tap))?;
        let tap = pass.taps[self.tap];
        let act = tape.value(tap);
        let (c, hw) = (act.shape()[1], act.shape()[2] * act.shape()[3]);
        let per = c * hw;
        let mut values = Vec::with_capacity(n);
        let mut seed_grad = Vec::with_capacity(if with_grad { act.len() } else { 0 });
        for i in 0..n {
            let s = FeatureMap::new(c, hw, act.data()[i * per..(i + 1) * per].to_vec())?;
            if with_grad {
                let (v, g) = self.losses[i].eval_grad(&s, &self.targets[i])?;
                values.push(v);
                seed_grad.extend(g);
            } else {
                values.push(self.losses[i].eval(&s, &self.targets[i])?);
            }
        }
        if !with_grad {
            return Ok((values, None));
        }
        let seed_grad = Tensor::new(act.shape().to_vec(), seed_grad)?;
        let mut grads = tape.backward_with(tap, seed_grad)?;
        let g = grads.take(input).unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((values, Some(g)))
    }
}

/// Targeted cross-entropy on the logits, per image.
pub struct LogitObjective<'a> {
    pub model: &'a Model,
    pub targets: Vec<usize>,
}

impl Objective for LogitObjective<'_> {
    fn evaluate(&self, x: &Tensor, with_grad: bool) -> Result<(Vec<f64>, Option<Tensor>)> {
        let n = x.shape()[0];
        if self.targets.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} targets for a batch of {n}",
                self.targets.len()
            )));
        }
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone(), with_grad);
        let pass = self.model.forward(&mut tape, input, Mode::Eval, None)?;
        let logits = pass.logits.expect("full forward");
        let k = self.model.num_classes();
        let z = tape.value(logits).data();
        let mut values = Vec::with_capacity(n);
        let mut dz = vec![0.0; n * k];
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let t = self.targets[i];
            if t >= k {
                return Err(Error::LabelOutOfRange { label: t, classes: k });
            }
            values.push(lse - row[t]);
            for j in 0..k {
                dz[i * k + j] = (row[j] - lse).exp() - (j == t) as u8 as f64;
            }
        }
        if !with_grad {
            return Ok((values, None));
        }
        let seed_grad = Tensor::new(vec![n, k], dz)?;
        let mut grads = tape.backward_with(logits, seed_grad)?;
        let g = grads.take(input).unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((values, Some(g)))
    }
}

/// One source image to attack.
#[derive(Clone, Debug)]
pub struct AttackRequest {
    /// Stable identifier (usually the dataset index); keys the per-image
    /// random streams so results do not depend on batching.
    pub id: u64,
    /// `[1, c, h, w]` clean image.
    pub image: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct AdversarialResult {
    pub id: u64,
    /// `[1, c, h, w]` adversarial image.
    pub x_adv: Tensor,
    pub y: usize,
    pub y_tgt: usize,
    /// Dataset index of the chosen target image (feature losses only).
    pub target_index: Option<usize>,
    /// Attack loss at iterations `0..=T`.
    pub loss_trace: Vec<f64>,
    pub white_box_prediction: usize,
    pub zero_gradient_steps: usize,
    /// Share of the batch wall time attributed to this image.
    pub elapsed: Duration,
}

impl AdversarialResult {
    pub fn white_box_success(&self) -> bool {
        self.white_box_prediction == self.y_tgt
    }
}

/// Attacks a single image.
pub fn run_attack(
    model: &Model,
    request: &AttackRequest,
    cfg: &AttackConfig,
    gallery: Option<&Gallery>,
) -> Result<AdversarialResult> {
    let mut out = run_attack_batch(model, std::slice::from_ref(request), cfg, gallery)?;
    Ok(out.remove(0))
}

/// Attacks a batch of images in one set of forward and backward passes.
/// Results are identical to attacking each image alone.
pub fn run_attack_batch(
    model: &Model,
    requests: &[AttackRequest],
    cfg: &AttackConfig,
    gallery: Option<&Gallery>,
) -> Result<Vec<AdversarialResult>> {
    cfg.validate()?;
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let start = Instant::now();
    let feature_loss = cfg.feature_loss();
    if feature_loss.is_some() && cfg.tap >= model.tap_count() {
        return Err(Error::TapOutOfRange {
            tap: cfg.tap,
            count: model.tap_count(),
        });
    }
    let gallery = match (&feature_loss, gallery) {
        (None, _) => None,
        (Some(_), None) => return Err(Error::InvalidArgument(format!("loss {} needs a gallery", cfg.loss))),
        (Some(_), Some(g)) if g.tap() != cfg.tap || g.model() != model.name() => {
            return Err(Error::InvalidArgument(format!(
                "gallery built for {} tap {}, attack uses {} tap {}",
                g.model(),
                g.tap(),
                model.name(),
                cfg.tap
            )))
        }
        (Some(_), Some(g)) => Some(g),
    };

    let mut y_tgt = Vec::with_capacity(requests.len());
    let mut targets = Vec::new();
    let mut losses = Vec::new();
    let mut target_index = Vec::with_capacity(requests.len());
    for r in requests {
        let t = select_target_label(model, &r.image, r.label, cfg.label_mode, cfg.seed, r.id)?;
        y_tgt.push(t);
        if let (Some(loss), Some(g)) = (&feature_loss, gallery) {
            let clean = model.forward_to_tap(&r.image, cfg.tap)?;
            let pairing = Pairing::Shuffled(seed::derive_indexed(cfg.seed, STREAM_SHUFFLE, r.id));
            let (_, entry) = select_target_image(g, t, &clean, loss, pairing)?;
            losses.push(resolve_loss(loss, cfg, &clean, &entry.feature)?);
            targets.push(entry.feature.clone());
            target_index.push(Some(entry.index));
        } else {
            target_index.push(None);
        }
    }

    let shape = requests[0].image.shape().to_vec();
    let mut data = Vec::with_capacity(requests.len() * requests[0].image.len());
    for r in requests {
        if r.image.shape() != shape.as_slice() || shape.first() != Some(&1) {
            return Err(Error::InvalidArgument(format!(
                "attack images must share one [1, c, h, w] shape; got {:?} and {:?}",
                shape,
                r.image.shape()
            )));
        }
        data.extend_from_slice(r.image.data());
    }
    let mut batch_shape = shape.clone();
    batch_shape[0] = requests.len();
    let x = Tensor::new(batch_shape, data)?;

    let traj = match feature_loss {
        Some(_) => momentum_attack(
            &FeatureObjective {
                model,
                tap: cfg.tap,
                targets,
                losses,
            },
            &x,
            cfg,
        )?,
        None => momentum_attack(
            &LogitObjective {
                model,
                targets: y_tgt.clone(),
            },
            &x,
            cfg,
        )?,
    };
    let preds = model.predict_labels(&traj.x_adv)?;
    let per = x.len() / requests.len();
    let elapsed = start.elapsed() / requests.len() as u32;
    let mut out = Vec::with_capacity(requests.len());
    for (i, r) in requests.iter().enumerate() {
        out.push(AdversarialResult {
            id: r.id,
            x_adv: Tensor::new(shape.clone(), traj.x_adv.data()[i * per..(i + 1) * per].to_vec())?,
            y: r.label,
            y_tgt: y_tgt[i],
            target_index: target_index[i],
            loss_trace: traj.losses[i].clone(),
            white_box_prediction: preds[i],
            zero_gradient_steps: traj.zero_gradient_steps[i],
            elapsed,
        });
    }
    Ok(out)
}

/// Pins the Gaussian bandwidth to the clean pair when configured to.
fn resolve_loss(
    loss: &FeatureLoss,
    cfg: &AttackConfig,
    clean: &FeatureMap,
    target: &FeatureMap,
) -> Result<FeatureLoss> {
    match loss {
        FeatureLoss::Paa { kernel, strategy }
            if kernel.family == KernelFamily::Gaussian && cfg.bandwidth == BandwidthMode::FixedFromClean =>
        {
            let est = gaussian_bandwidth(&split(clean, *strategy), &split(target, *strategy))?;
            Ok(FeatureLoss::Paa {
                kernel: kernel.with_sigma2(est.sigma2),
                strategy: *strategy,
            })
        }
        other => Ok(*other),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{attack_step, GalleryEntry, LabelMode, LossKind, MomentumState};
    use crate::model::Architecture;
    use crate::statalign::SplitStrategy;
    use rand::Rng;

    fn tiny_model() -> Model {
        let arch = Architecture::parse("tiny", "conv:4 pool conv:6 pool flatten linear", &[0, 2]).unwrap();
        Model::build(&arch, 3, [1, 8, 8], 4).unwrap()
    }

    fn image(seed: u64) -> Tensor {
        let mut rng = crate::seed::rng(seed);
        Tensor::from_fn(&[1, 1, 8, 8], |_| rng.gen_range(0.05..0.95))
    }

    fn gallery(model: &Model, tap: usize) -> Gallery {
        let per_label = (0..3)
            .map(|l| {
                (0..2)
                    .map(|j| GalleryEntry {
                        index: l * 2 + j,
                        feature: model.forward_to_tap(&image(100 + (l * 2 + j) as u64), tap).unwrap(),
                    })
                    .collect()
            })
            .collect();
        Gallery::from_entries(model.name(), tap, per_label).unwrap()
    }

    fn request(id: u64) -> AttackRequest {
        AttackRequest {
            id,
            image: image(id),
            label: 0,
        }
    }

    fn cfg(loss: LossKind) -> AttackConfig {
        AttackConfig {
            loss,
            tap: 1,
            seed: 9,
            iters: 6,
            epsilon: 0.05,
            alpha: 0.02,
            ..Default::default()
        }
    }

    fn objective_grad_matches_fd<O: Objective>(obj: &O, x: &Tensor) {
        let (_, g) = obj.evaluate(x, true).unwrap();
        let g = g.unwrap();
        let h = 1e-5;
        for &i in &[0usize, 9, 27, 40, 63] {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (obj.evaluate(&xp, false).unwrap().0[0] - obj.evaluate(&xm, false).unwrap().0[0]) / (2.0 * h);
            let a = g.data()[i];
            assert!((a - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "pixel {i}: {a} vs {fd}");
        }
    }

    #[test]
    fn objective_gradients() {
        let m = tiny_model();
        let x = image(1);
        let target = m.forward_to_tap(&image(2), 1).unwrap();
        let fixed_gauss = FeatureLoss::Paa {
            kernel: crate::statalign::KernelSpec::gaussian(crate::statalign::Bandwidth::Fixed(3.0)),
            strategy: SplitStrategy::PointWise,
        };
        let losses = [LossKind::PaaLinear, LossKind::PaaPoly, LossKind::Gaa, LossKind::Euclid]
            .map(|l| cfg(l).feature_loss().unwrap());
        for loss in losses.into_iter().chain([fixed_gauss]) {
            let obj = FeatureObjective {
                model: &m,
                tap: 1,
                targets: vec![target.clone()],
                losses: vec![loss],
            };
            objective_grad_matches_fd(&obj, &x);
        }
        objective_grad_matches_fd(
            &LogitObjective {
                model: &m,
                targets: vec![2],
            },
            &x,
        );
    }

    #[test]
    fn zero_budget_is_identity() {
        let m = tiny_model();
        let g = gallery(&m, 1);
        let c = AttackConfig {
            epsilon: 0.0,
            ..cfg(LossKind::PaaPoly)
        };
        let r = request(3);
        let out = run_attack(&m, &r, &c, Some(&g)).unwrap();
        assert_eq!(out.x_adv, r.image);
        assert_eq!(out.white_box_prediction, m.predict_labels(&r.image).unwrap()[0]);
    }

    #[test]
    fn single_iteration_is_one_step() {
        let m = tiny_model();
        let g = gallery(&m, 1);
        let c = AttackConfig {
            iters: 1,
            ..cfg(LossKind::Gaa)
        };
        let r = request(5);
        let out = run_attack(&m, &r, &c, Some(&g)).unwrap();
        let target = &g.entries(out.y_tgt)[0..];
        let entry = target.iter().find(|e| Some(e.index) == out.target_index).unwrap();
        let obj = FeatureObjective {
            model: &m,
            tap: 1,
            targets: vec![entry.feature.clone()],
            losses: vec![FeatureLoss::Gaa],
        };
        let (_, grad) = obj.evaluate(&r.image, true).unwrap();
        let mut x = r.image.data().to_vec();
        attack_step(
            &mut x,
            r.image.data(),
            grad.unwrap().data(),
            &mut MomentumState::new(64),
            &c,
        )
        .unwrap();
        assert_eq!(out.x_adv.data(), x.as_slice());
    }

    #[test]
    fn budget_and_range_hold_for_every_loss() {
        let m = tiny_model();
        let g = gallery(&m, 1);
        let reqs: Vec<_> = (0..3).map(request).collect();
        for loss in LossKind::ALL {
            for strategy in [SplitStrategy::PointWise, SplitStrategy::ChannelWise] {
                let c = AttackConfig { strategy, ..cfg(loss) };
                for out in run_attack_batch(&m, &reqs, &c, Some(&g)).unwrap() {
                    let x = &reqs[out.id as usize].image;
                    assert!(out.x_adv.max_abs_diff(x) <= c.epsilon + 1e-6);
                    assert!(out.x_adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
                    assert_eq!(out.loss_trace.len(), c.iters + 1);
                    assert_ne!(out.y_tgt, out.y);
                    assert_eq!(out.target_index.is_some(), loss.is_feature_loss());
                }
            }
        }
    }

    #[test]
    fn batching_and_reruns_are_exact() {
        let m = tiny_model();
        let g = gallery(&m, 1);
        let reqs: Vec<_> = (0..4).map(request).collect();
        for loss in [LossKind::PaaGauss, LossKind::Mifgsm] {
            let c = cfg(loss);
            let batch = run_attack_batch(&m, &reqs, &c, Some(&g)).unwrap();
            let again = run_attack_batch(&m, &reqs, &c, Some(&g)).unwrap();
            for ((b, a), r) in batch.iter().zip(&again).zip(&reqs) {
                let single = run_attack(&m, r, &c, Some(&g)).unwrap();
                assert_eq!(b.x_adv, single.x_adv);
                assert_eq!(b.x_adv, a.x_adv);
                assert_eq!(b.loss_trace, single.loss_trace);
            }
        }
    }

    #[test]
    fn fixed_bandwidth_mode_runs() {
        let m = tiny_model();
        let g = gallery(&m, 1);
        let c = AttackConfig {
            bandwidth: BandwidthMode::FixedFromClean,
            ..cfg(LossKind::PaaGauss)
        };
        let out = run_attack(&m, &request(2), &c, Some(&g)).unwrap();
        assert!(out.loss_trace.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn argument_errors() {
        let m = tiny_model();
        let g = gallery(&m, 1);
        let r = request(1);
        assert!(run_attack(&m, &r, &cfg(LossKind::Gaa), None).is_err());
        assert!(run_attack(&m, &r, &cfg(LossKind::Mifgsm), None).is_ok());
        let wrong_tap = AttackConfig {
            tap: 0,
            ..cfg(LossKind::Gaa)
        };
        assert!(run_attack(&m, &r, &wrong_tap, Some(&g)).is_err());
        let rank1 = AttackConfig {
            label_mode: LabelMode::Rank(1),
            ..cfg(LossKind::Mifgsm)
        };
        let top = m.predict_labels(&r.image).unwrap()[0];
        let r = AttackRequest { label: top, ..r };
        assert!(run_attack(&m, &r, &rank1, None).is_err());
    }
}
