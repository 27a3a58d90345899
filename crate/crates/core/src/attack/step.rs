use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{AttackConfig, GradNorm};

/// Momentum accumulator for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState {
    pub beta: Vec<f64>,
    pub step: usize,
}

impl MomentumState {
    pub fn new(len: usize) -> Self {
        Self {
            beta: vec![0.0; len],
            step: 0,
        }
    }
}

/// Flags raised by one update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepReport {
    /// The gradient norm was zero, so only the decayed momentum moved `x`.
    pub zero_gradient: bool,
}

/// Loss and input gradient for a batch of images, one entry per image.
pub trait Objective {
    /// `x` has shape `[n, ...]`; the returned gradient has the same shape.
    fn evaluate(&self, x: &Tensor, with_grad: bool) -> Result<(Vec<f64>, Option<Tensor>)>;
}

/// One momentum sign step on a single image, in place.
pub fn attack_step(
    x_adv: &mut [f64],
    x_clean: &[f64],
    grad: &[f64],
    state: &mut MomentumState,
    cfg: &AttackConfig,
) -> Result<StepReport> {
    if x_adv.len() != x_clean.len() || grad.len() != x_clean.len() || state.beta.len() != x_clean.len() {
        return Err(Error::InvalidArgument(format!(
            "attack_step lengths differ: x_adv {}, x {}, grad {}, beta {}",
            x_adv.len(),
            x_clean.len(),
            grad.len(),
            state.beta.len()
        )));
    }
    if state.step >= cfg.iters {
        return Err(Error::InvalidArgument(format!(
            "attack_step called at step {} of {}",
            state.step, cfg.iters
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("attack gradient"));
    }
    let norm = match cfg.grad_norm {
        GradNorm::L1 => grad.iter().map(|g| g.abs()).sum::<f64>(),
        GradNorm::L2 => grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
    };
    let zero_gradient = norm == 0.0;
    let inv = if zero_gradient { 0.0 } else { 1.0 / norm };
    for i in 0..x_adv.len() {
        let b = cfg.decay * state.beta[i] + grad[i] * inv;
        state.beta[i] = b;
        let stepped = x_adv[i] - cfg.alpha * sign(b);
        let boxed = stepped.clamp(x_clean[i] - cfg.epsilon, x_clean[i] + cfg.epsilon);
        x_adv[i] = boxed.clamp(0.0, 1.0);
    }
    state.step += 1;
    Ok(StepReport { zero_gradient })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Outcome of [`momentum_attack`] on a batch.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub x_adv: Tensor,
    /// `losses[i]` holds the loss of image `i` at iterations `0..=T`.
    pub losses: Vec<Vec<f64>>,
    /// Number of zero-gradient steps per image.
    pub zero_gradient_steps: Vec<usize>,
}

/// Runs `cfg.iters` momentum sign steps on every image of an `[n, ...]` batch.
pub fn momentum_attack<O: Objective + ?Sized>(objective: &O, x: &Tensor, cfg: &AttackConfig) -> Result<Trajectory> {
    let n = *x
        .shape()
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch shape".into()))?;
    if n == 0 {
        return Err(Error::InvalidArgument("empty attack batch".into()));
    }
    let per = x.len() / n;
    let mut x_adv = x.clone();
    let mut states: Vec<MomentumState> = (0..n).map(|_| MomentumState::new(per)).collect();
    let mut losses = vec![Vec::with_capacity(cfg.iters + 1); n];
    let mut zero_gradient_steps = vec![0; n];
    for _ in 0..cfg.iters {
        let (loss, grad) = objective.evaluate(&x_adv, true)?;
        let grad = grad.ok_or_else(|| Error::InvalidArgument("objective returned no gradient".into()))?;
        if grad.shape() != x.shape() {
            return Err(Error::InvalidArgument(format!(
                "objective gradient shape {:?} differs from input {:?}",
                grad.shape(),
                x.shape()
            )));
        }
        for i in 0..n {
            losses[i].push(loss[i]);
            let r = i * per..(i + 1) * per;
            let report = attack_step(
                &mut x_adv.data_mut()[r.clone()],
                &x.data()[r.clone()],
                &grad.data()[r],
                &mut states[i],
                cfg,
            )?;
            zero_gradient_steps[i] += report.zero_gradient as usize;
        }
    }
    let (last, _) = objective.evaluate(&x_adv, false)?;
    for (trace, l) in losses.iter_mut().zip(last) {
        trace.push(l);
    }
    Ok(Trajectory {
        x_adv,
        losses,
        zero_gradient_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(alpha: f64, eps: f64, iters: usize) -> AttackConfig {
        AttackConfig {
            alpha,
            epsilon: eps,
            iters,
            ..Default::default()
        }
    }

    #[test]
    fn hand_example() {
        let c = cfg(0.01, 0.07, 20);
        let mut x = vec![0.5, 0.5];
        let clean = x.clone();
        let mut st = MomentumState::new(2);
        let r = attack_step(&mut x, &clean, &[2.0, -2.0], &mut st, &c).unwrap();
        assert!(!r.zero_gradient);
        assert_eq!(st.beta, vec![0.5, -0.5]);
        assert_eq!(x, vec![0.49, 0.51]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_keeps_decayed_momentum() {
        let c = cfg(0.01, 0.07, 20);
        let mut x = vec![0.5, 0.5, 0.5];
        let clean = x.clone();
        let mut st = MomentumState {
            beta: vec![0.3, -0.2, 0.0],
            step: 0,
        };
        let r = attack_step(&mut x, &clean, &[0.0; 3], &mut st, &c).unwrap();
        assert!(r.zero_gradient);
        assert_eq!(st.beta, vec![0.3, -0.2, 0.0]);
        assert_eq!(x, vec![0.49, 0.51, 0.5]);
    }

    #[test]
    fn l2_norm_option() {
        let c = AttackConfig {
            grad_norm: GradNorm::L2,
            ..cfg(0.01, 0.07, 20)
        };
        let mut x = vec![0.5, 0.5];
        let mut st = MomentumState::new(2);
        attack_step(&mut x, &[0.5, 0.5], &[3.0, 4.0], &mut st, &c).unwrap();
        assert!((st.beta[0] - 0.6).abs() < 1e-15 && (st.beta[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn projection_then_clamp() {
        let c = cfg(0.5, 0.1, 20);
        let mut x = vec![0.95, 0.05, 0.5];
        let clean = x.clone();
        let mut st = MomentumState::new(3);
        attack_step(&mut x, &clean, &[-1.0, 1.0, 1.0], &mut st, &c).unwrap();
        assert_eq!(x[0], 1.0);
        assert_eq!(x[1], 0.0);
        assert!((x[2] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let c = cfg(0.01, 0.07, 1);
        let mut st = MomentumState::new(2);
        let mut x = vec![0.5; 2];
        assert!(matches!(
            attack_step(&mut x, &[0.5; 2], &[f64::NAN, 1.0], &mut st, &c),
            Err(Error::NonFinite(_))
        ));
        attack_step(&mut x, &[0.5; 2], &[1.0, 1.0], &mut st, &c).unwrap();
        assert!(attack_step(&mut x, &[0.5; 2], &[1.0, 1.0], &mut st, &c).is_err());
        assert!(attack_step(&mut x, &[0.5; 3], &[1.0, 1.0], &mut MomentumState::new(2), &c).is_err());
    }

    /// Two-pixel linear classifier with logits `W x`, attacked toward class 1
    /// with targeted cross-entropy.
    struct Toy {
        w: [[f64; 2]; 2],
        target: usize,
    }

    impl Toy {
        fn probs(&self, x: &[f64]) -> [f64; 2] {
            let z = [
                self.w[0][0] * x[0] + self.w[0][1] * x[1],
                self.w[1][0] * x[0] + self.w[1][1] * x[1],
            ];
            let m = z[0].max(z[1]);
            let e = [(z[0] - m).exp(), (z[1] - m).exp()];
            [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])]
        }
    }

    impl Objective for Toy {
        fn evaluate(&self, x: &Tensor, with_grad: bool) -> Result<(Vec<f64>, Option<Tensor>)> {
            let p = self.probs(x.data());
            let loss = -p[self.target].ln();
            let mut g = [0.0; 2];
            for (k, pk) in p.iter().enumerate() {
                let d = pk - (k == self.target) as u8 as f64;
                g[0] += d * self.w[k][0];
                g[1] += d * self.w[k][1];
            }
            let grad = with_grad.then(|| Tensor::new(vec![1, 2], g.to_vec()).unwrap());
            Ok((vec![loss], grad))
        }
    }

    #[test]
    fn logit_toy_matches_hand_update() {
        let toy = Toy {
            w: [[2.0, 0.0], [0.0, 1.0]],
            target: 1,
        };
        let c = cfg(0.1, 0.25, 3);
        let x = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let run = momentum_attack(&toy, &x, &c).unwrap();
        // dL/dx = (p0 * 2, -p0): pixel 0 pushed down, pixel 1 pushed up every
        // step, so x moves by alpha per step until the 0.25 box is reached.
        let xa = run.x_adv.data();
        assert!((xa[0] - 0.25).abs() < 1e-12, "{xa:?}");
        assert!((xa[1] - 0.75).abs() < 1e-12, "{xa:?}");
        let trace = &run.losses[0];
        assert_eq!(trace.len(), 4);
        assert!(trace.windows(2).all(|w| w[1] < w[0]));
        let p0 = toy.probs(&[0.5, 0.5])[0];
        assert!((trace[0] + (1.0 - p0).ln()).abs() < 1e-15);
    }

    #[test]
    fn loss_scale_does_not_change_steps() {
        struct Scaled(Toy, f64);
        impl Objective for Scaled {
            fn evaluate(&self, x: &Tensor, g: bool) -> Result<(Vec<f64>, Option<Tensor>)> {
                let (l, gr) = self.0.evaluate(x, g)?;
                let gr =
                    gr.map(|t| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * self.1).collect()).unwrap());
                Ok((l.into_iter().map(|v| v * self.1).collect(), gr))
            }
        }
        let c = cfg(0.02, 0.1, 8);
        let x = Tensor::new(vec![1, 2], vec![0.3, 0.6]).unwrap();
        let w = [[1.0, -3.0], [0.5, 2.0]];
        let a = momentum_attack(&Toy { w, target: 0 }, &x, &c).unwrap();
        let b = momentum_attack(&Scaled(Toy { w, target: 0 }, 123.0), &x, &c).unwrap();
        assert_eq!(a.x_adv, b.x_adv);
    }
}
