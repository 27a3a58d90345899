use rand::Rng;

use super::arch::{Architecture, Block};
use crate::error::{shape_err, Error, Result};
use crate::statalign::FeatureMap;
use crate::tensor::{Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batchnorm statistics are taken from the batch (training) or from the
/// running estimates (evaluation, attacks, feature extraction).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
struct ConvUnit {
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    bn: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
enum Layer {
    ConvBnRelu(ConvUnit),
    MaxPool,
    Residual(ConvUnit, ConvUnit),
    Inception(ConvUnit, ConvUnit),
    Flatten,
    Linear { weight: usize, bias: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BnState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A built network: architecture, named parameters and batchnorm state.
#[derive(Clone, Debug)]
pub struct Model {
    arch: Architecture,
    num_classes: usize,
    input_shape: [usize; 3],
    names: Vec<String>,
    params: Vec<Tensor>,
    bn_names: Vec<String>,
    bn: Vec<BnState>,
    layers: Vec<Layer>,
}

/// Tape handles produced by [`Model::forward`].
pub struct ForwardPass {
    pub input: Var,
    pub params: Vec<Var>,
    pub taps: Vec<Var>,
    pub logits: Option<Var>,
    /// Per batchnorm layer: batch mean and population variance (train mode).
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

struct Builder<'a, R: Rng> {
    names: Vec<String>,
    params: Vec<Tensor>,
    bn_names: Vec<String>,
    bn: Vec<BnState>,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn param(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    /// Kaiming-uniform: U(−√(6/fan_in), √(6/fan_in)), rounded to `f32`.
    fn kaiming(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = (6.0 / fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound) as f32 as f64)
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) -> ConvUnit {
        let w = self.kaiming(&[cout, cin, k, k], cin * k * k);
        let weight = self.param(format!("{prefix}.weight"), w);
        let bias = self.param(format!("{prefix}.bias"), Tensor::zeros(&[cout]));
        let gamma = self.param(format!("{prefix}.bn.gamma"), Tensor::full(&[cout], 1.0));
        let beta = self.param(format!("{prefix}.bn.beta"), Tensor::zeros(&[cout]));
        self.bn_names.push(format!("{prefix}.bn"));
        self.bn.push(BnState {
            mean: vec![0.0; cout],
            var: vec![1.0; cout],
        });
        ConvUnit {
            weight,
            bias,
            gamma,
            beta,
            bn: self.bn.len() - 1,
            pad: k / 2,
        }
    }
}

impl Model {
    /// Builds `arch` for `[channels, height, width]` inputs with a seeded
    /// Kaiming-uniform initialisation (biases zero, batchnorm γ=1, β=0).
    pub fn build(arch: &Architecture, num_classes: usize, input_shape: [usize; 3], seed: u64) -> Result<Self> {
        arch.validate()?;
        if num_classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        let mut rng = crate::seed::rng(seed);
        let mut b = Builder {
            names: Vec::new(),
            params: Vec::new(),
            bn_names: Vec::new(),
            bn: Vec::new(),
            rng: &mut rng,
        };
        let [mut c, mut h, mut w] = input_shape;
        let mut flat = 0;
        let mut layers = Vec::with_capacity(arch.blocks.len());
        for (i, block) in arch.blocks.iter().enumerate() {
            let prefix = format!("b{i}");
            let layer = match *block {
                Block::ConvBnRelu { out } => {
                    let u = b.conv(&prefix, c, out, 3);
                    c = out;
                    Layer::ConvBnRelu(u)
                }
                Block::MaxPool => {
                    if h < 2 || w < 2 {
                        return Err(shape_err("build", format!("block {i}: cannot pool {h}x{w}")));
                    }
                    h /= 2;
                    w /= 2;
                    Layer::MaxPool
                }
                Block::Residual => {
                    let u1 = b.conv(&format!("{prefix}.0"), c, c, 3);
                    let u2 = b.conv(&format!("{prefix}.1"), c, c, 3);
                    Layer::Residual(u1, u2)
                }
                Block::Inception { narrow, wide } => {
                    let u1 = b.conv(&format!("{prefix}.1x1"), c, narrow, 1);
                    let u2 = b.conv(&format!("{prefix}.3x3"), c, wide, 3);
                    c = narrow + wide;
                    Layer::Inception(u1, u2)
                }
                Block::Flatten => {
                    flat = c * h * w;
                    Layer::Flatten
                }
                Block::Linear => {
                    let wt = b.kaiming(&[num_classes, flat], flat);
                    let weight = b.param(format!("{prefix}.weight"), wt);
                    let bias = b.param(format!("{prefix}.bias"), Tensor::zeros(&[num_classes]));
                    Layer::Linear { weight, bias }
                }
            };
            layers.push(layer);
        }
        let Builder {
            names,
            params,
            bn_names,
            bn,
            ..
        } = b;
        Ok(Self {
            arch: arch.clone(),
            num_classes,
            input_shape,
            names,
            params,
            bn_names,
            bn,
            layers,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn name(&self) -> &str {
        &self.arch.name
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn tap_count(&self) -> usize {
        self.arch.taps.len()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub(crate) fn bn_names(&self) -> &[String] {
        &self.bn_names
    }

    pub(crate) fn bn_state(&self) -> &[BnState] {
        &self.bn
    }

    pub(crate) fn bn_state_mut(&mut self) -> &mut [BnState] {
        &mut self.bn
    }

    fn check_tap(&self, tap: usize) -> Result<()> {
        if tap >= self.tap_count() {
            return Err(Error::TapOutOfRange {
                tap,
                count: self.tap_count(),
            });
        }
        Ok(())
    }

    /// Records the network on `tape`. With `stop_at_tap`, recording ends at
    /// that tap and no logits are produced. Parameters are recorded as
    /// differentiable leaves only in train mode.
    pub fn forward(&self, tape: &mut Tape, input: Var, mode: Mode, stop_at_tap: Option<usize>) -> Result<ForwardPass> {
        if let Some(t) = stop_at_tap {
            self.check_tap(t)?;
        }
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 4 || shape[1..] != self.input_shape {
            return Err(shape_err(
                "Model::forward",
                format!(
                    "{} expects [n, {:?}] input, got {shape:?}",
                    self.name(),
                    self.input_shape
                ),
            ));
        }
        let train = mode == Mode::Train;
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone(), train)).collect();
        let mut pass = ForwardPass {
            input,
            params,
            taps: Vec::new(),
            logits: None,
            batch_stats: Vec::new(),
        };
        let mut x = input;
        let mut next_tap = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer {
                Layer::ConvBnRelu(u) => {
                    let y = self.conv_bn(tape, &mut pass, x, u, mode)?;
                    tape.relu(y)?
                }
                Layer::MaxPool => tape.maxpool2d(x)?,
                Layer::Residual(u1, u2) => {
                    let y = self.conv_bn(tape, &mut pass, x, u1, mode)?;
                    let y = tape.relu(y)?;
                    let y = self.conv_bn(tape, &mut pass, y, u2, mode)?;
                    let y = tape.add(x, y)?;
                    tape.relu(y)?
                }
                Layer::Inception(u1, u2) => {
                    let a = self.conv_bn(tape, &mut pass, x, u1, mode)?;
                    let a = tape.relu(a)?;
                    let b = self.conv_bn(tape, &mut pass, x, u2, mode)?;
                    let b = tape.relu(b)?;
                    tape.concat_channels(&[a, b])?
                }
                Layer::Flatten => tape.flatten(x)?,
                Layer::Linear { weight, bias } => tape.linear(x, pass.params[*weight], pass.params[*bias])?,
            };
            if self.arch.taps.get(next_tap) == Some(&i) {
                pass.taps.push(x);
                if stop_at_tap == Some(next_tap) {
                    return Ok(pass);
                }
                next_tap += 1;
            }
        }
        pass.logits = Some(x);
        Ok(pass)
    }

    fn conv_bn(&self, tape: &mut Tape, pass: &mut ForwardPass, x: Var, u: &ConvUnit, mode: Mode) -> Result<Var> {
        let y = tape.conv2d(x, pass.params[u.weight], pass.params[u.bias], 1, u.pad)?;
        let (gamma, beta) = (pass.params[u.gamma], pass.params[u.beta]);
        match mode {
            Mode::Train => {
                let (out, mean, var) = tape.batchnorm2d_train(y, gamma, beta, BN_EPS)?;
                pass.batch_stats.push((mean, var));
                Ok(out)
            }
            Mode::Eval => {
                let st = &self.bn[u.bn];
                tape.batchnorm2d_eval(y, gamma, beta, &st.mean, &st.var, BN_EPS)
            }
        }
    }

    /// Logits for an `[n, c, h, w]` batch in evaluation mode.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone(), false);
        let pass = self.forward(&mut tape, x, Mode::Eval, None)?;
        Ok(tape.value(pass.logits.expect("full forward")).clone())
    }

    /// Top-1 labels for an `[n, c, h, w]` batch.
    pub fn predict_labels(&self, images: &Tensor) -> Result<Vec<usize>> {
        let logits = self.predict(images)?;
        logits
            .data()
            .chunks(self.num_classes)
            .map(|row| rank_of_label(row, 1))
            .collect()
    }

    /// Feature map of a single `[1, c, h, w]` image at `tap`.
    pub fn forward_to_tap(&self, image: &Tensor, tap: usize) -> Result<FeatureMap> {
        self.check_tap(tap)?;
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone(), false);
        let pass = self.forward(&mut tape, x, Mode::Eval, Some(tap))?;
        FeatureMap::from_activation(tape.value(pass.taps[tap]))
    }

    /// `[c, h, w]` shape of the activation at every tap.
    pub fn tap_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let [c, h, w] = self.input_shape;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, c, h, w]), false);
        let pass = self.forward(&mut tape, x, Mode::Eval, None)?;
        Ok(pass
            .taps
            .iter()
            .map(|&t| {
                let s = tape.value(t).shape();
                [s[1], s[2], s[3]]
            })
            .collect())
    }
}

/// Label whose logit is the `k`-th largest (`k = 1` is the top prediction).
/// Equal logits are ordered by lower label index first.
pub fn rank_of_label(logits: &[f64], k: usize) -> Result<usize> {
    if k == 0 || k > logits.len() {
        return Err(Error::InvalidArgument(format!(
            "rank {k} outside 1..={} classes",
            logits.len()
        )));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    Ok(order[k - 1])
}
