use rand::seq::SliceRandom;

use super::checkpoint::{Checkpoint, TrainingMeta};
use super::net::{Mode, Model, BN_MOMENTUM};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl TrainConfig {
    pub fn new(epochs: usize, lr: f64, batch: usize, seed: u64) -> Self {
        Self {
            epochs,
            lr,
            batch,
            seed,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochReport>,
}

/// Fraction of `data` the model classifies correctly (evaluation mode).
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptySet);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(256) {
        let preds = model.predict_labels(&data.batch(chunk))?;
        correct += chunk.iter().zip(&preds).filter(|(&i, &p)| data.label(i) == p).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mini-batch SGD with momentum and a cosine learning-rate decay.
///
/// On return `model` holds exactly the (f32-rounded) weights stored in the
/// returned checkpoint.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::EmptySet);
    }
    if cfg.batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if let Some(&label) = data.labels().iter().find(|&&l| l >= model.num_classes()) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: model.num_classes(),
        });
    }
    let mut rng = crate::seed::rng(cfg.seed);
    let mut velocity: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut tape = Tape::new();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos());
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            // batchnorm needs more than one value per channel
            if chunk.len() < 2 {
                continue;
            }
            tape.clear();
            let x = tape.leaf(data.batch(chunk), false);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.label(i)).collect();
            let diverged = |e: Error| match e {
                Error::NonFinite(_) => Error::Divergence { epoch },
                other => other,
            };
            let pass = model.forward(&mut tape, x, Mode::Train, None).map_err(diverged)?;
            let loss = tape
                .softmax_cross_entropy(pass.logits.expect("full forward"), &labels)
                .map_err(diverged)?;
            loss_sum += tape.value(loss).data()[0];
            batches += 1;
            let grads = tape.backward(loss).map_err(diverged)?;

            for ((p, v), var) in model.params_mut().iter_mut().zip(velocity.iter_mut()).zip(&pass.params) {
                let Some(g) = grads.get(*var) else { continue };
                // no decay on biases and batchnorm affine terms
                let decay = if p.shape().len() > 1 { cfg.weight_decay } else { 0.0 };
                for ((w, vel), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                    *vel = cfg.momentum * *vel + gi + decay * *w;
                    *w -= lr * *vel;
                }
            }
            for (st, (mean, var)) in model.bn_state_mut().iter_mut().zip(&pass.batch_stats) {
                for c in 0..st.mean.len() {
                    st.mean[c] = (1.0 - BN_MOMENTUM) * st.mean[c] + BN_MOMENTUM * mean[c];
                    st.var[c] = (1.0 - BN_MOMENTUM) * st.var[c] + BN_MOMENTUM * var[c];
                }
            }
        }
        let mean_loss = if batches > 0 { loss_sum / batches as f64 } else { 0.0 };
        if !mean_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let report = EpochReport {
            epoch,
            mean_loss,
            train_accuracy: accuracy(model, data)?,
            val_accuracy: val.map(|v| accuracy(model, v)).transpose()?,
        };
        on_epoch(&report);
        history.push(report);
    }

    let last = history.last();
    let meta = TrainingMeta {
        epochs: cfg.epochs,
        train_accuracy: last.map_or(0.0, |r| r.train_accuracy),
        val_accuracy: last.and_then(|r| r.val_accuracy),
        lr: cfg.lr,
        batch: cfg.batch,
        seed: cfg.seed,
    };
    let checkpoint = Checkpoint::from_model(model, meta);
    *model = checkpoint.to_model()?;
    Ok(TrainOutcome { checkpoint, history })
}
