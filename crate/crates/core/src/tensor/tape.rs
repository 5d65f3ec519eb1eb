use rand::Rng;

use super::kernels::{self, BatchNormState, ConvGeom};
use super::real::Real;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Winning pathway index per element of a max merge.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingMask {
    /// Position of the producing unit inside its stack (set by the caller).
    pub unit: usize,
    pub pathways: usize,
    pub shape: Vec<usize>,
    pub winners: Vec<u8>,
}

/// Deliberate defects used to prove that the self-check catches them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// The max merge also leaks the upstream gradient into the runner-up.
    CorruptMaxBackward,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    MaxK {
        inputs: Vec<Var>,
        winners: Vec<u8>,
    },
    AvgPool {
        input: Var,
        window: usize,
        stride: usize,
    },
    GlobalAvgPool {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Dropout {
        input: Var,
        multiplier: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    Sum {
        input: Var,
    },
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Freed,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Relu { .. } => "relu",
            Op::Add { .. } => "add",
            Op::MaxK { .. } => "max_k",
            Op::AvgPool { .. } => "avgpool2d",
            Op::GlobalAvgPool { .. } => "global_avgpool",
            Op::Concat { .. } => "concat_channels",
            Op::Linear { .. } => "linear",
            Op::Dropout { .. } => "dropout",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Sum { .. } => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Scale { .. } => "scale",
            Op::Freed => "freed",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    scope: usize,
}

/// Records a forward computation and replays it backwards.
///
/// Nodes are appended in evaluation order, so reverse index order is a
/// valid reverse topological order. A tape supports exactly one call to
/// [`Tape::backward`]; the saved forward context is released afterwards.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    scopes: Vec<String>,
    current_scope: usize,
    backward_done: bool,
    fault: Option<Fault>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            scopes: vec![String::new()],
            current_scope: 0,
            backward_done: false,
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    /// Labels subsequently recorded nodes, for diagnostics.
    pub fn set_scope(&mut self, name: &str) {
        if let Some(i) = self.scopes.iter().position(|s| s == name) {
            self.current_scope = i;
        } else {
            self.scopes.push(name.to_string());
            self.current_scope = self.scopes.len() - 1;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded max-merge nodes.
    pub fn count_max_nodes(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::MaxK { .. }))
            .count()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            scope: self.current_scope,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// A leaf whose gradient is filled in by [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// First node (in evaluation order) whose output holds NaN or Inf,
    /// reported as `op @ scope`.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().find(|n| !n.value.is_finite()).map(|n| {
            let scope = &self.scopes[n.scope];
            if scope.is_empty() {
                n.op.name().to_string()
            } else {
                format!("{} @ {}", n.op.name(), scope)
            }
        })
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let mismatch = || {
            Error::config(format!(
                "conv2d: input {:?} incompatible with weight {:?} (stride {stride}, padding {padding})",
                x.shape(),
                w.shape()
            ))
        };
        let (n, c, h, wd) = x.dims4().map_err(|_| mismatch())?;
        let (o, i, kh, kw) = w.dims4().map_err(|_| mismatch())?;
        if c != i || stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(mismatch());
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (wd + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(x.data(), w.data(), &geom);
        let value = Tensor::new(&[n, o, geom.ho, geom.wo], out)?;
        let rg = self.needs(&[input, weight]);
        Ok(self.push(value, rg, Op::Conv2d { input, weight, geom }))
    }

    /// Per-channel batch normalization. In training mode the batch
    /// statistics are used and folded into `state`'s running averages.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        training: bool,
    ) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        if c != state.channels() || g.len() != c || b.len() != c {
            return Err(Error::config(format!(
                "batchnorm2d: input {:?} has {c} channels, layer has {} (gamma {}, beta {})",
                x.shape(),
                state.channels(),
                g.len(),
                b.len()
            )));
        }
        let plane = h * w;
        let (y, xhat, inv_std) = if training {
            if n * plane < 2 {
                return Err(Error::config(
                    "batchnorm2d: batch statistics need more than one value per channel",
                ));
            }
            let fwd = kernels::batchnorm_train(x.data(), n, c, plane, g, b, state.eps);
            let m = T::from_usize(n * plane).unwrap();
            let unbias = m / (m - T::one());
            let keep = state.momentum;
            let fresh = T::one() - keep;
            for ch in 0..c {
                state.running_mean[ch] = keep * state.running_mean[ch] + fresh * fwd.mean[ch];
                state.running_var[ch] = keep * state.running_var[ch] + fresh * fwd.var[ch] * unbias;
            }
            (fwd.y, fwd.xhat, fwd.inv_std)
        } else {
            kernels::batchnorm_eval(x.data(), c, plane, g, b, state)
        };
        let value = Tensor::new(&[n, c, h, w], y)?;
        let rg = self.needs(&[input, gamma, beta]);
        Ok(self.push(
            value,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: training,
            },
        ))
    }

    /// NaN passes through so that divergence stays visible downstream.
    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() });
        let rg = self.needs(&[input]);
        self.push(value, rg, Op::Relu { input })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::config(format!(
                "add: shapes {:?} and {:?} differ",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(x.shape(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    /// Elementwise maximum over `inputs`. Ties go to the lowest index and a
    /// NaN candidate wins, so divergence in one pathway is not masked.
    /// The routing mask is returned when `capture` is set.
    pub fn max_k(&mut self, inputs: &[Var], capture: bool) -> Result<(Var, Option<RoutingMask>)> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::config("max_k: empty input list"))?;
        if inputs.len() > u8::MAX as usize {
            return Err(Error::config(format!("max_k: {} inputs exceed 255", inputs.len())));
        }
        let shape = self.value(*first).shape().to_vec();
        for v in inputs {
            if self.value(*v).shape() != shape.as_slice() {
                return Err(Error::config(format!(
                    "max_k: shapes {:?} and {:?} differ",
                    shape,
                    self.value(*v).shape()
                )));
            }
        }
        let mut out = self.value(*first).data().to_vec();
        let mut winners = vec![0u8; out.len()];
        for (k, v) in inputs.iter().enumerate().skip(1) {
            for ((o, w), &z) in out.iter_mut().zip(winners.iter_mut()).zip(self.value(*v).data()) {
                if z > *o || (z.is_nan() && !o.is_nan()) {
                    *o = z;
                    *w = k as u8;
                }
            }
        }
        let mask = capture.then(|| RoutingMask {
            unit: 0,
            pathways: inputs.len(),
            shape: shape.clone(),
            winners: winners.clone(),
        });
        let value = Tensor::new(&shape, out)?;
        let rg = self.needs(inputs);
        let var = self.push(
            value,
            rg,
            Op::MaxK {
                inputs: inputs.to_vec(),
                winners,
            },
        );
        Ok((var, mask))
    }

    pub fn avg_pool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        if window == 0 || stride == 0 || window > h || window > w {
            return Err(Error::config(format!(
                "avgpool2d: window {window} stride {stride} does not fit input {:?}",
                x.shape()
            )));
        }
        let (out, ho, wo) = kernels::avgpool_forward(x.data(), n * c, h, w, window, stride);
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, rg, Op::AvgPool { input, window, stride }))
    }

    /// Averages each channel plane, producing an `N x C` tensor.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let plane = h * w;
        let area = T::from_usize(plane).unwrap();
        let out = x
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() / area)
            .collect();
        let value = Tensor::new(&[n, c], out)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, rg, Op::GlobalAvgPool { input }))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::config("concat_channels: empty input list"))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut total = 0;
        for v in inputs {
            let t = self.value(*v);
            let (n2, c2, h2, w2) = t.dims4()?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(Error::config(format!(
                    "concat_channels: {:?} does not match batch/spatial dims of {:?}",
                    t.shape(),
                    self.value(*first).shape()
                )));
            }
            total += c2;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for v in inputs {
                let t = self.value(*v);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::new(&[n, total, h, w], data)?;
        let rg = self.needs(inputs);
        Ok(self.push(
            value,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// `input (N x C) * weight (C x out) + bias (out)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let ok = x.shape().len() == 2
            && w.shape().len() == 2
            && x.shape()[1] == w.shape()[0]
            && b.numel() == w.shape()[1];
        if !ok {
            return Err(Error::config(format!(
                "linear: input {:?}, weight {:?}, bias {:?} are incompatible",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let (n, c, out) = (x.shape()[0], x.shape()[1], w.shape()[1]);
        let mut y: Vec<T> = (0..n).flat_map(|_| b.data().iter().copied()).collect();
        T::gemm(n, c, out, T::one(), x.data(), c, 1, w.data(), out, 1, T::one(), &mut y, out, 1);
        let value = Tensor::new(&[n, out], y)?;
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(value, rg, Op::Linear { input, weight, bias }))
    }

    /// Non-inverted dropout: training zeroes each element with probability
    /// `rate` and leaves survivors unscaled; evaluation multiplies every
    /// element by `1 - rate`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let x = self.value(input);
        let multiplier: Vec<T> = if training {
            (0..x.numel())
                .map(|_| {
                    if rate > 0.0 && rng.random::<f64>() < rate {
                        T::zero()
                    } else {
                        T::one()
                    }
                })
                .collect()
        } else {
            vec![T::from_f64_lossy(1.0 - rate); x.numel()]
        };
        let data = x.data().iter().zip(&multiplier).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape(), data)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, rg, Op::Dropout { input, multiplier }))
    }

    /// Mean softmax cross-entropy of `logits (N x classes)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if x.shape().len() != 2 || x.shape()[0] != labels.len() {
            return Err(Error::config(format!(
                "softmax_cross_entropy: logits {:?} vs {} labels",
                x.shape(),
                labels.len()
            )));
        }
        let (n, classes) = (x.shape()[0], x.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::data(format!("label {bad} outside [0, {classes})")));
        }
        let mut probs = vec![T::zero(); n * classes];
        let mut loss = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &x.data()[i * classes..(i + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs[i * classes..].iter_mut().zip(row) {
                *p = (v - max).exp();
                z = z + *p;
            }
            for p in &mut probs[i * classes..(i + 1) * classes] {
                *p = *p / z;
            }
            loss = loss + (z.ln() - (row[label] - max));
        }
        let value = Tensor::scalar(loss / T::from_usize(n).unwrap());
        let rg = self.needs(&[logits]);
        Ok(self.push(
            value,
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum::<T>();
        let rg = self.needs(&[input]);
        self.push(Tensor::scalar(s), rg, Op::Sum { input })
    }

    /// `sum(input * weights)` with constant weights of the same shape.
    pub fn weighted_sum(&mut self, input: Var, weights: &Tensor<T>) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != weights.shape() {
            return Err(Error::config(format!(
                "weighted_sum: shapes {:?} and {:?} differ",
                x.shape(),
                weights.shape()
            )));
        }
        let s = x.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum::<T>();
        let rg = self.needs(&[input]);
        Ok(self.push(
            Tensor::scalar(s),
            rg,
            Op::WeightedSum {
                input,
                weights: weights.data().to_vec(),
            },
        ))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).map(|v| v * factor);
        let rg = self.needs(&[input]);
        self.push(value, rg, Op::Scale { input, factor })
    }

    /// Fills gradients of every reachable variable with d(loss)/d(var).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::usage("backward already ran on this graph"));
        }
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for i in (0..=loss.0).rev() {
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Freed);
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            if matches!(op, Op::Leaf) {
                self.grads[i] = Some(grad);
                continue;
            }
            self.propagate(op, grad)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, d) in g.data_mut().iter_mut().zip(delta) {
                    *a = *a + d;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor { shape, data: delta });
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, op: Op<T>, grad: Tensor<T>) -> Result<()> {
        let dy = grad.data();
        match op {
            Op::Leaf | Op::Freed => {}
            Op::Conv2d { input, weight, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(input).data(),
                    self.value(weight).data(),
                    dy,
                    &geom,
                    self.wants(input),
                    self.wants(weight),
                );
                if let Some(dx) = dx {
                    self.accumulate(input, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(weight, dw);
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
                let (n, c, h, w) = self.value(input).dims4()?;
                let (dx, dgamma, dbeta) = kernels::batchnorm_backward(
                    dy,
                    &xhat,
                    &inv_std,
                    self.value(gamma).data(),
                    n,
                    c,
                    h * w,
                    batch_stats,
                );
                self.accumulate(input, dx);
                self.accumulate(gamma, dgamma);
                self.accumulate(beta, dbeta);
            }
            Op::Relu { input } => {
                let dx = self
                    .value(input)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(input, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(a, dy.to_vec());
                self.accumulate(b, dy.to_vec());
            }
            Op::MaxK { inputs, winners } => {
                let k = inputs.len();
                let leak = self.fault == Some(Fault::CorruptMaxBackward) && k > 1;
                for (j, v) in inputs.iter().enumerate() {
                    if !self.wants(*v) {
                        continue;
                    }
                    let dx = winners
                        .iter()
                        .zip(dy)
                        .map(|(&w, &g)| {
                            let w = w as usize;
                            if w == j || (leak && (w + 1) % k == j) {
                                g
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    self.accumulate(*v, dx);
                }
            }
            Op::AvgPool {
                input,
                window,
                stride,
            } => {
                let (n, c, h, w) = self.value(input).dims4()?;
                let (ho, wo) = (grad.shape()[2], grad.shape()[3]);
                let dx = kernels::avgpool_backward(dy, n * c, h, w, ho, wo, window, stride);
                self.accumulate(input, dx);
            }
            Op::GlobalAvgPool { input } => {
                let (_, _, h, w) = self.value(input).dims4()?;
                let plane = h * w;
                let area = T::from_usize(plane).unwrap();
                let dx = dy
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g / area, plane))
                    .collect();
                self.accumulate(input, dx);
            }
            Op::Concat { inputs } => {
                let (n, total, h, w) = grad.dims4()?;
                let plane = h * w;
                let mut offset = 0;
                for v in inputs {
                    let c = self.value(v).shape()[1];
                    if self.wants(v) {
                        let mut dx = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let base = (b * total + offset) * plane;
                            dx.extend_from_slice(&dy[base..base + c * plane]);
                        }
                        self.accumulate(v, dx);
                    }
                    offset += c;
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (n, c) = (self.value(input).shape()[0], self.value(input).shape()[1]);
                let out = self.value(weight).shape()[1];
                if self.wants(input) {
                    let mut dx = vec![T::zero(); n * c];
                    let w = self.value(weight).data();
                    T::gemm(n, out, c, T::one(), dy, out, 1, w, 1, out, T::zero(), &mut dx, c, 1);
                    self.accumulate(input, dx);
                }
                if self.wants(weight) {
                    let mut dw = vec![T::zero(); c * out];
                    let x = self.value(input).data();
                    T::gemm(c, n, out, T::one(), x, 1, c, dy, out, 1, T::zero(), &mut dw, out, 1);
                    self.accumulate(weight, dw);
                }
                if self.wants(bias) {
                    let mut db = vec![T::zero(); out];
                    for row in dy.chunks(out) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    self.accumulate(bias, db);
                }
            }
            Op::Dropout { input, multiplier } => {
                let dx = dy.iter().zip(&multiplier).map(|(&g, &m)| g * m).collect();
                self.accumulate(input, dx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                mut probs,
                labels,
            } => {
                let classes = probs.len() / labels.len();
                let scale = dy[0] / T::from_usize(labels.len()).unwrap();
                for (i, &label) in labels.iter().enumerate() {
                    probs[i * classes + label] = probs[i * classes + label] - T::one();
                }
                for p in &mut probs {
                    *p = *p * scale;
                }
                self.accumulate(logits, probs);
            }
            Op::Sum { input } => {
                let n = self.value(input).numel();
                self.accumulate(input, vec![dy[0]; n]);
            }
            Op::WeightedSum { input, weights } => {
                let dx = weights.iter().map(|&w| w * dy[0]).collect();
                self.accumulate(input, dx);
            }
            Op::Scale { input, factor } => {
                let dx = dy.iter().map(|&g| g * factor).collect();
                self.accumulate(input, dx);
            }
        }
        Ok(())
    }
}
