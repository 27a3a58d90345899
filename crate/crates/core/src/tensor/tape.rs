use super::{gemm, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Relu {
        input: Var,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Reshape {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
    ConcatChannels {
        inputs: Vec<Var>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Precomputed {
        input: Var,
        grad: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of operations and the activations their backward needs.
///
/// A tape is single-threaded; independent tapes can run on separate threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn nchw(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(shape_err(op, format!("expected NCHW input, got {s:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded operation and saved activation.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Cross-correlation of an NCHW input with an `[oc, c, kh, kw]` weight.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let x = self.value(input);
        let (n, c, h, w) = nchw(x, OP)?;
        let (oc, wc, kh, kw) = match *self.value(weight).shape() {
            [a, b, c, d] => (a, b, c, d),
            ref s => return Err(shape_err(OP, format!("weight must be 4-D, got {s:?}"))),
        };
        if wc != c {
            return Err(shape_err(OP, format!("input has {c} channels but weight expects {wc}")));
        }
        if self.value(bias).len() != oc {
            return Err(shape_err(
                OP,
                format!("bias has {} entries for {oc} output channels", self.value(bias).len()),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err(
                OP,
                format!(
                    "padded input {}x{} smaller than kernel {kh}x{kw}",
                    h + 2 * pad,
                    w + 2 * pad
                ),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            oc,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let k = geom.patch();
        let p = geom.positions();
        let mut cols = vec![0.0; n * k * p];
        let mut out = vec![0.0; n * oc * p];
        let xd = x.data();
        let wd = self.value(weight).data();
        let bd = self.value(bias).data();
        for b in 0..n {
            let col = &mut cols[b * k * p..(b + 1) * k * p];
            im2col(&xd[b * c * h * w..(b + 1) * c * h * w], &geom, col);
            let o = &mut out[b * oc * p..(b + 1) * oc * p];
            gemm(oc, k, p, wd, false, col, false, o, false);
            for (ch, row) in o.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += bd[ch]);
            }
        }
        let value = Tensor::new(vec![n, oc, oh, ow], out)?;
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            &[input, weight, bias],
            OP,
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.max(0.0)).collect())?;
        self.push(value, Op::Relu { input }, &[input], "relu")
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    /// Ties route the gradient to the first maximal element in row-major order.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        const OP: &str = "maxpool2d";
        let x = self.value(input);
        let (n, c, h, w) = nchw(x, OP)?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(shape_err(OP, format!("spatial size {h}x{w} too small to pool")));
        }
        let xd = x.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push(value, Op::MaxPool2 { input, argmax }, &[input], OP)
    }

    /// Batch normalisation using the statistics of the current batch.
    ///
    /// Returns the output together with the per-channel batch mean and
    /// population variance so the caller can update running statistics.
    pub fn batchnorm2d_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        const OP: &str = "batchnorm2d";
        let x = self.value(input);
        let (n, c, h, w) = nchw(x, OP)?;
        let hw = h * w;
        let count = (n * hw) as f64;
        let xd = x.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let plane = &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                mean[ch] += plane.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for b in 0..n {
            for ch in 0..c {
                let plane = &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                var[ch] += plane.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let var_out = var.clone();
        let out = self.batchnorm_apply(input, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, mean, var_out))
    }

    /// Batch normalisation with fixed (running) statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.batchnorm_apply(input, gamma, beta, running_mean, running_var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn batchnorm_apply(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        batch_stats: bool,
    ) -> Result<Var> {
        const OP: &str = "batchnorm2d";
        let x = self.value(input);
        let (n, c, h, w) = nchw(x, OP)?;
        for (name, len) in [
            ("gamma", self.value(gamma).len()),
            ("beta", self.value(beta).len()),
            ("mean", mean.len()),
            ("var", var.len()),
        ] {
            if len != c {
                return Err(shape_err(OP, format!("{name} has {len} entries for {c} channels")));
            }
        }
        let hw = h * w;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let xd = x.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for i in range {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + be[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[input, gamma, beta],
            OP,
        )
    }

    /// `y = x·Wᵀ + b` for `x: [n, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "linear";
        let x = self.value(input);
        let (n, fin) = match *x.shape() {
            [n, f] => (n, f),
            ref s => return Err(shape_err(OP, format!("expected [n, features], got {s:?}"))),
        };
        let (fout, win) = match *self.value(weight).shape() {
            [o, i] => (o, i),
            ref s => return Err(shape_err(OP, format!("weight must be 2-D, got {s:?}"))),
        };
        if win != fin {
            return Err(shape_err(OP, format!("input has {fin} features, weight expects {win}")));
        }
        if self.value(bias).len() != fout {
            return Err(shape_err(
                OP,
                format!("bias length {} != {fout}", self.value(bias).len()),
            ));
        }
        let mut out = vec![0.0; n * fout];
        gemm(
            n,
            fin,
            fout,
            x.data(),
            false,
            self.value(weight).data(),
            true,
            &mut out,
            false,
        );
        let bd = self.value(bias).data();
        for row in out.chunks_mut(fout) {
            row.iter_mut().zip(bd).for_each(|(v, b)| *v += b);
        }
        let value = Tensor::new(vec![n, fout], out)?;
        self.push(value, Op::Linear { input, weight, bias }, &[input, weight, bias], OP)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        self.push(value, Op::Reshape { input }, &[input], "reshape")
    }

    /// Collapses everything after the batch dimension.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape();
        if shape.is_empty() {
            return Err(shape_err("flatten", "scalar input"));
        }
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(input, &[n, rest])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(value, Op::Add { a, b }, &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(value, Op::Mul { a, b }, &[a, b], "mul")
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { input }, &[input], "sum")
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *inputs.first().ok_or_else(|| shape_err(OP, "no inputs"))?;
        let (n, _, h, w) = nchw(self.value(first), OP)?;
        let mut total = 0;
        for &v in inputs {
            let (vn, vc, vh, vw) = nchw(self.value(v), OP)?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(shape_err(
                    OP,
                    format!("{:?} incompatible with batch {n} and {h}x{w}", self.value(v).shape()),
                ));
            }
            total += vc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let value = Tensor::new(vec![n, total, h, w], out)?;
        self.push(
            value,
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
            inputs,
            OP,
        )
    }

    /// Mean softmax cross-entropy of `[n, classes]` logits against labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "softmax_cross_entropy";
        let z = self.value(logits);
        let (n, classes) = match *z.shape() {
            [n, k] => (n, k),
            ref s => return Err(shape_err(OP, format!("expected [n, classes], got {s:?}"))),
        };
        if labels.len() != n {
            return Err(shape_err(OP, format!("{} labels for batch of {n}", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let mut probs = vec![0.0; n * classes];
        let mut loss = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            let row = &z.data()[b * classes..(b + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (p, v) in probs[b * classes..(b + 1) * classes].iter_mut().zip(row) {
                *p = (v - max).exp() / sum;
            }
            loss += sum.ln() + max - row[y];
        }
        loss /= n as f64;
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
            OP,
        )
    }

    /// Records a scalar whose gradient with respect to `input` was computed
    /// outside the tape (the statistic-alignment losses).
    pub fn precomputed(&mut self, input: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.value(input).shape() {
            return Err(shape_err(
                "precomputed",
                format!("gradient {:?} vs input {:?}", grad.shape(), self.value(input).shape()),
            ));
        }
        let grad = grad.check_finite("precomputed gradient")?.into_data();
        self.push(
            Tensor::scalar(value),
            Op::Precomputed { input, grad },
            &[input],
            "precomputed",
        )
    }

    /// Reverse pass from a scalar output with seed 1.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("output must be scalar, got {:?}", self.value(output).shape()),
            ));
        }
        self.backward_with(output, Tensor::scalar(1.0))
    }

    /// Reverse pass from `output` seeded with an arbitrary upstream gradient.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.len() != self.value(output).len() {
            return Err(shape_err(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.value(output).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.into_data());
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut out = Vec::with_capacity(grads.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            match g {
                Some(g) => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?.check_finite("backward")?;
                    out.push(Some(t));
                }
                None => out.push(None),
            }
        }
        Ok(Gradients { grads: out })
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], var: Var) -> &'g mut Vec<f64> {
        let len = self.nodes[var.0].value.len();
        grads[var.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let (k, p, oc) = (geom.patch(), geom.positions(), geom.oc);
                let plane_in = geom.c * geom.h * geom.w;
                if self.wants(*weight) {
                    let dw = self.slot(grads, *weight);
                    for b in 0..geom.n {
                        gemm(
                            oc,
                            p,
                            k,
                            &g[b * oc * p..(b + 1) * oc * p],
                            false,
                            &cols[b * k * p..(b + 1) * k * p],
                            true,
                            dw,
                            true,
                        );
                    }
                }
                if self.wants(*bias) {
                    let db = self.slot(grads, *bias);
                    for b in 0..geom.n {
                        for (o, row) in g[b * oc * p..(b + 1) * oc * p].chunks(p).enumerate() {
                            db[o] += row.iter().sum::<f64>();
                        }
                    }
                }
                if self.wants(*input) {
                    let wd = self.value(*weight).data();
                    let mut dcols = vec![0.0; k * p];
                    let dx = self.slot(grads, *input);
                    for b in 0..geom.n {
                        gemm(
                            k,
                            oc,
                            p,
                            wd,
                            true,
                            &g[b * oc * p..(b + 1) * oc * p],
                            false,
                            &mut dcols,
                            false,
                        );
                        col2im(&dcols, geom, &mut dx[b * plane_in..(b + 1) * plane_in]);
                    }
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let dx = self.slot(grads, *input);
                for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(x) {
                    if xi > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let dx = self.slot(grads, *input);
                for (&src, &gi) in argmax.iter().zip(g) {
                    dx[src] += gi;
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = node.value.shape();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if self.wants(*gamma) {
                    let dg = self.slot(grads, *gamma);
                    dg.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
                }
                if self.wants(*beta) {
                    let db = self.slot(grads, *beta);
                    db.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
                }
                if self.wants(*input) {
                    let gm = self.value(*gamma).data().to_vec();
                    let count = (n * hw) as f64;
                    let dx = self.slot(grads, *input);
                    for b in 0..n {
                        for ch in 0..c {
                            let scale = gm[ch] * inv_std[ch];
                            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                                if *batch_stats {
                                    dx[i] += scale * (g[i] - sum_g[ch] / count - xhat[i] * sum_gx[ch] / count);
                                } else {
                                    dx[i] += scale * g[i];
                                }
                            }
                        }
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let (n, fin) = (x.shape()[0], x.shape()[1]);
                let fout = node.value.shape()[1];
                if self.wants(*weight) {
                    let dw = self.slot(grads, *weight);
                    gemm(fout, n, fin, g, true, x.data(), false, dw, true);
                }
                if self.wants(*bias) {
                    let db = self.slot(grads, *bias);
                    for row in g.chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
                if self.wants(*input) {
                    let wd = self.value(*weight).data();
                    let dx = self.slot(grads, *input);
                    gemm(n, fout, fin, g, false, wd, false, dx, true);
                }
            }
            Op::Reshape { input } => {
                let dx = self.slot(grads, *input);
                dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        let d = self.slot(grads, v);
                        d.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let other = self.value(*b).data();
                    let d = self.slot(grads, *a);
                    for ((d, gi), o) in d.iter_mut().zip(g).zip(other) {
                        *d += gi * o;
                    }
                }
                if self.wants(*b) {
                    let other = self.value(*a).data();
                    let d = self.slot(grads, *b);
                    for ((d, gi), o) in d.iter_mut().zip(g).zip(other) {
                        *d += gi * o;
                    }
                }
            }
            Op::Sum { input } => {
                let dx = self.slot(grads, *input);
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::ConcatChannels { inputs } => {
                let shape = node.value.shape();
                let (n, total, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut offset = 0;
                for &v in inputs {
                    let c = self.value(v).shape()[1];
                    if self.wants(v) {
                        let d = self.slot(grads, v);
                        for b in 0..n {
                            let src = &g[(b * total + offset) * hw..(b * total + offset + c) * hw];
                            d[b * c * hw..(b + 1) * c * hw]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += c;
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let classes = probs.len() / n;
                let scale = g[0] / n as f64;
                let dz = self.slot(grads, *logits);
                for (b, &y) in labels.iter().enumerate() {
                    for j in 0..classes {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        dz[b * classes + j] += scale * (probs[b * classes + j] - onehot);
                    }
                }
            }
            Op::Precomputed { input, grad } => {
                let dx = self.slot(grads, *input);
                dx.iter_mut().zip(grad).for_each(|(d, v)| *d += g[0] * v);
            }
        }
    }
}

fn im2col(x: &[f64], geom: &ConvGeom, cols: &mut [f64]) {
    let p = geom.positions();
    for ci in 0..geom.c {
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let row = (ci * geom.kh + ki) * geom.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..geom.oh {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    for ox in 0..geom.ow {
                        let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        dst[oy * geom.ow + ox] =
                            if iy >= 0 && (iy as usize) < geom.h && ix >= 0 && (ix as usize) < geom.w {
                                x[(ci * geom.h + iy as usize) * geom.w + ix as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], geom: &ConvGeom, dx: &mut [f64]) {
    let p = geom.positions();
    for ci in 0..geom.c {
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let row = (ci * geom.kh + ki) * geom.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..geom.oh {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    if iy < 0 || iy as usize >= geom.h {
                        continue;
                    }
                    for ox in 0..geom.ow {
                        let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        if ix < 0 || ix as usize >= geom.w {
                            continue;
                        }
                        dx[(ci * geom.h + iy as usize) * geom.w + ix as usize] += src[oy * geom.ow + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::seed::rng(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct six-loop cross-correlation, independent of im2col/gemm.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oc, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, oc, oh, ow]);
        for bi in 0..n {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b.data()[o];
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                                        continue;
                                    }
                                    s += x.data()[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * c + ci) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        out.data_mut()[((bi * oc + o) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let w = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn zero_weight_gives_zero_output_and_input_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(random(&[2, 3, 5, 5], 1), true);
        let w = tape.leaf(Tensor::zeros(&[4, 3, 3, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[4]), false);
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let x = random(&[2, 3, 8, 8], 2);
        let w = random(&[4, 3, 3, 3], 3);
        let b = random(&[4], 4);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), false);
            let wv = tape.leaf(w.clone(), false);
            let bv = tape.leaf(b.clone(), false);
            let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
            let want = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(tape.value(y).shape(), want.shape());
            assert!(tape.value(y).max_abs_diff(&want) < 1e-10);
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]), false);
        let w = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        assert!(matches!(tape.conv2d(x, w, b, 1, 0), Err(Error::Shape { .. })));
        let w = tape.leaf(Tensor::zeros(&[1, 2, 5, 5]), false);
        assert!(matches!(tape.conv2d(x, w, b, 1, 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let w0 = random(&[3, 2, 3, 3], 5);
        let b0 = random(&[3], 6);
        for (shape, stride, pad) in [([1, 2, 5, 5], 1, 1), ([2, 2, 6, 4], 2, 1), ([1, 2, 3, 3], 1, 0)] {
            let x = random(&shape, 7);
            let err = grad_check(
                |tape, x| {
                    let w = tape.leaf(w0.clone(), false);
                    let b = tape.leaf(b0.clone(), false);
                    let y = tape.conv2d(x, w, b, stride, pad)?;
                    let y2 = tape.mul(y, y)?;
                    tape.sum(y2)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "input grad error {err}");
            // weights as the differentiated argument
            let xc = x.clone();
            let err = grad_check(
                |tape, w| {
                    let x = tape.leaf(xc.clone(), false);
                    let b = tape.leaf(b0.clone(), false);
                    let y = tape.conv2d(x, w, b, stride, pad)?;
                    let y2 = tape.mul(y, y)?;
                    tape.sum(y2)
                },
                &w0,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "weight grad error {err}");
        }
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(), false);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln10() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::full(&[1, 10], 0.3), false);
        let l = tape.softmax_cross_entropy(z, &[4]).unwrap();
        assert!((tape.value(l).data()[0] - 10f64.ln()).abs() < 1e-12);
        assert!(matches!(
            tape.softmax_cross_entropy(z, &[10]),
            Err(Error::LabelOutOfRange { label: 10, classes: 10 })
        ));
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::new(vec![1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 6.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let y = tape.maxpool2d(xv).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 7.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(xv).unwrap().data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

        for (i, shape) in [[1, 1, 4, 4], [2, 3, 4, 6], [1, 2, 5, 5]].iter().enumerate() {
            let x = random(shape, 10 + i as u64);
            let err = grad_check(
                |tape, x| {
                    let y = tape.maxpool2d(x)?;
                    let y2 = tape.mul(y, y)?;
                    tape.sum(y2)
                },
                &x,
                1e-4,
            )
            .unwrap();
            assert!(err <= 1e-4, "maxpool grad error {err}");
        }
    }

    #[test]
    fn batchnorm_train_and_eval_gradients() {
        let gamma = random(&[3], 20);
        let beta = random(&[3], 21);
        for (i, shape) in [[4, 3, 2, 2], [2, 3, 3, 3], [3, 3, 1, 4]].iter().enumerate() {
            let x = random(shape, 30 + i as u64);
            // weight the outputs so the batch-statistic terms do not cancel
            let weights = random(shape, 40 + i as u64);
            let (g, b, wts) = (gamma.clone(), beta.clone(), weights.clone());
            let err = grad_check(
                move |tape, x| {
                    let gv = tape.leaf(g.clone(), false);
                    let bv = tape.leaf(b.clone(), false);
                    let wv = tape.leaf(wts.clone(), false);
                    let (y, _, _) = tape.batchnorm2d_train(x, gv, bv, 1e-5)?;
                    let y = tape.mul(y, wv)?;
                    let y2 = tape.mul(y, y)?;
                    tape.sum(y2)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "train-mode batchnorm grad error {err}");

            let (g, b) = (gamma.clone(), beta.clone());
            let err = grad_check(
                move |tape, x| {
                    let gv = tape.leaf(g.clone(), false);
                    let bv = tape.leaf(b.clone(), false);
                    let y = tape.batchnorm2d_eval(x, gv, bv, &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5)?;
                    let y2 = tape.mul(y, y)?;
                    tape.sum(y2)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "eval-mode batchnorm grad error {err}");
        }
    }

    #[test]
    fn batchnorm_train_normalises_each_channel() {
        let x = random(&[4, 2, 3, 3], 50);
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let g = tape.leaf(Tensor::full(&[2], 1.0), false);
        let b = tape.leaf(Tensor::zeros(&[2]), false);
        let (y, _, _) = tape.batchnorm2d_train(xv, g, b, 0.0).unwrap();
        let yd = tape.value(y).data();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| yd[(n * 2 + ch) * 9..(n * 2 + ch + 1) * 9].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_concat_and_cross_entropy_gradients() {
        let w = random(&[5, 6], 60);
        let b = random(&[5], 61);
        for (i, n) in [1usize, 2, 4].into_iter().enumerate() {
            let x = random(&[n, 6], 62 + i as u64);
            let labels: Vec<usize> = (0..n).map(|j| (j * 3) % 5).collect();
            let (wc, bc) = (w.clone(), b.clone());
            let err = grad_check(
                move |tape, x| {
                    let wv = tape.leaf(wc.clone(), false);
                    let bv = tape.leaf(bc.clone(), false);
                    let z = tape.linear(x, wv, bv)?;
                    tape.softmax_cross_entropy(z, &labels)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "linear/ce grad error {err}");
        }
        for (i, shape) in [[1, 2, 2, 2], [2, 1, 3, 3], [2, 3, 1, 2]].iter().enumerate() {
            let x = random(shape, 70 + i as u64);
            let other = random(&[shape[0], 2, shape[2], shape[3]], 80);
            let err = grad_check(
                move |tape, x| {
                    let o = tape.leaf(other.clone(), false);
                    let r = tape.relu(x)?;
                    let c = tape.concat_channels(&[x, o, r])?;
                    let f = tape.flatten(c)?;
                    let f2 = tape.mul(f, f)?;
                    tape.sum(f2)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "concat grad error {err}");
        }
    }

    #[test]
    fn two_layer_chain_rule_by_hand() {
        // y = sum(relu(W·x + b)) with W = [[1,2],[3,-4]], b = 0, x = (1, 1):
        // pre-activation (3, -1) -> only the first unit is active, so
        // dy/dx = W[0] = (1, 2) and dy/dW = [[1,1],[0,0]].
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(), true);
        let w = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, -4.0]).unwrap(), true);
        let b = tape.leaf(Tensor::zeros(&[2]), false);
        let z = tape.linear(x, w, b).unwrap();
        let r = tape.relu(z).unwrap();
        let y = tape.sum(r).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0]);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);
        assert!(g.get(b).is_none());
    }

    #[test]
    fn forward_is_deterministic_and_clear_frees_tape() {
        let x = random(&[1, 2, 6, 6], 90);
        let w = random(&[3, 2, 3, 3], 91);
        let b = random(&[3], 92);
        let run = |tape: &mut Tape| {
            let xv = tape.leaf(x.clone(), false);
            let wv = tape.leaf(w.clone(), false);
            let bv = tape.leaf(b.clone(), false);
            let y = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
            let y = tape.maxpool2d(y).unwrap();
            tape.value(y).clone()
        };
        let mut tape = Tape::new();
        let a = run(&mut tape);
        assert!(!tape.is_empty());
        tape.clear();
        assert!(tape.is_empty());
        let b2 = run(&mut tape);
        assert_eq!(a, b2);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![f64::NAN, 1.0]).unwrap(), false);
        assert!(matches!(tape.mul(x, x), Err(Error::NonFinite(_))));
        let y = tape.leaf(Tensor::new(vec![2], vec![f64::INFINITY, 1.0]).unwrap(), false);
        assert!(matches!(tape.sum(y), Err(Error::NonFinite(_))));
    }
}
