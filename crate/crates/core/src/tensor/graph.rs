//! Reverse-mode tape.
//!
//! Every primitive appends a node holding its output value and whatever the
//! backward rule needs. `backward` walks the tape in exact reverse order and
//! adds each contribution into the operand's gradient, so a value consumed
//! twice receives both contributions.

use super::kernels::{self, ConvGeometry};
use super::{Activation, LossConfig, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm statistics source.
#[derive(Debug, Clone)]
pub enum BatchNormMode {
    /// Normalize by the batch's own per-channel moments.
    Train { eps: f64 },
    /// Normalize by fixed running moments.
    Eval { eps: f64, mean: Vec<f64>, var: Vec<f64> },
}

/// Per-channel moments observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (biased when only one value per channel exists).
    pub var: Vec<f64>,
}

impl BatchStats {
    /// `running = (1 − momentum)·running + momentum·batch`.
    pub fn update_running(&self, running_mean: &mut [f64], running_var: &mut [f64], momentum: f64) {
        for (r, b) in running_mean.iter_mut().zip(&self.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in running_var.iter_mut().zip(&self.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Elementwise {
        input: Var,
        derivative: fn(f64) -> f64,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        factor: usize,
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
    Loss {
        pred: Var,
        target: Var,
        config: LossConfig,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A recording of primitive operations in execution order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    retain_grads: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keep gradients on intermediate nodes too, not only on leaves.
    pub fn retain_grads(mut self, retain: bool) -> Self {
        self.retain_grads = retain;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as a leaf; it participates in differentiation when
    /// its `requires_grad` flag is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.grad.take()
    }

    pub fn into_value(mut self, v: Var) -> Tensor {
        self.nodes.swap_remove(v.0).value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad)
    }

    fn derived(&mut self, shape: &[usize], data: Vec<f64>, operands: &[Var], op: Op) -> Result<Var> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = self.rg(operands);
        Ok(self.push(t, op))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let geom = ConvGeometry::new(x.dims4()?, w.dims4()?, stride, padding)?;
        let b = self.value(bias);
        if b.len() != geom.out_channels {
            return Err(shape_err(format!(
                "conv2d: bias has {} values for {} output channels",
                b.len(),
                geom.out_channels
            )));
        }
        let out = kernels::conv2d_forward(&geom, x.data(), w.data(), b.data());
        let shape = [geom.n, geom.out_channels, geom.out_h(), geom.out_w()];
        self.derived(&shape, out, &[input, weight, bias], Op::Conv2d { input, weight, bias, geom })
    }

    /// Returns the output and, in training mode, the batch moments so the
    /// caller can maintain running statistics.
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let x = self.value(input);
        let dims = x.dims4()?;
        let c = dims[1];
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err(format!("batch_norm2d: affine parameters do not match {c} channels")));
        }
        let (mean, var, eps, stats) = match mode {
            BatchNormMode::Train { eps } => {
                let (mean, var) = kernels::channel_moments(dims, x.data());
                let count = (dims[0] * dims[2] * dims[3]) as f64;
                let unbiased = if count > 1.0 {
                    var.iter().map(|v| v * count / (count - 1.0)).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, eps, Some(stats))
            }
            BatchNormMode::Eval { eps, mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batch_norm2d: running statistics do not match channels"));
                }
                (mean, var, eps, None)
            }
        };
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument("batch_norm2d: eps must be positive".into()));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = kernels::batch_norm_apply(
            dims,
            x.data(),
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let batch_stats = stats.is_some();
        let v = self.derived(
            &dims,
            out,
            &[input, gamma, beta],
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats },
        )?;
        Ok((v, stats))
    }

    pub fn activation(&mut self, kind: Activation, input: Var) -> Result<Var> {
        let x = self.value(input);
        let out: Vec<f64> = match kind {
            Activation::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
            Activation::Sigmoid => x.data().iter().map(|&v| kernels::sigmoid(v)).collect(),
        };
        let shape = x.shape().to_vec();
        self.derived(&shape, out, &[input], Op::Activation { input, kind })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(Activation::Relu, input)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, input)
    }

    /// Applies `f` elementwise, using `derivative` (evaluated at the input)
    /// as the backward rule.
    pub fn elementwise(&mut self, input: Var, f: fn(f64) -> f64, derivative: fn(f64) -> f64) -> Result<Var> {
        let x = self.value(input);
        let out = x.data().iter().map(|&v| f(v)).collect();
        let shape = x.shape().to_vec();
        self.derived(&shape, out, &[input], Op::Elementwise { input, derivative })
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let x = self.value(input);
        let (out, argmax, shape) = kernels::maxpool2d_forward(x.dims4()?, x.data(), window, stride)?;
        self.derived(&shape, out, &[input], Op::MaxPool { input, argmax })
    }

    pub fn upsample_nearest2d(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
        }
        let x = self.value(input);
        let dims = x.dims4()?;
        let out = kernels::upsample_nearest2d_forward(dims, x.data(), factor);
        let shape = [dims[0], dims[1], dims[2] * factor, dims[3] * factor];
        self.derived(&shape, out, &[input], Op::Upsample { input, factor })
    }

    /// `input[N,D] · weight[D,M] + bias[M]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [n, d] = self.value(input).dims2()?;
        let [wd, m] = self.value(weight).dims2()?;
        if wd != d || self.value(bias).len() != m {
            return Err(shape_err(format!(
                "linear: input [{n}, {d}], weight [{wd}, {m}], bias {}",
                self.value(bias).len()
            )));
        }
        let out = kernels::linear_forward(
            n,
            d,
            m,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        self.derived(&[n, m], out, &[input, weight, bias], Op::Linear { input, weight, bias })
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let data = self.value(input).data().to_vec();
        self.derived(shape, data, &[input], Op::Reshape { input })
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape();
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(input, &[n, rest])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(format!("add: {:?} vs {:?}", x.shape(), y.shape())));
        }
        let out = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let shape = x.shape().to_vec();
        self.derived(&shape, out, &[a, b], Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(format!("mul: {:?} vs {:?}", x.shape(), y.shape())));
        }
        let out = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let shape = x.shape().to_vec();
        self.derived(&shape, out, &[a, b], Op::Mul { a, b })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().sum();
        self.derived(&[1], vec![s], &[input], Op::Sum { input })
    }

    pub fn loss(&mut self, config: LossConfig, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(shape_err(format!("loss: {:?} vs {:?}", p.shape(), t.shape())));
        }
        let value = config.value(p.data(), t.data())?;
        self.derived(&[1], vec![value], &[pred, target], Op::Loss { pred, target, config })
    }

    /// Differentiates the scalar `root` with respect to every node that
    /// requires a gradient. Gradients are added to whatever is already
    /// stored, so repeated calls accumulate.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(shape_err(format!(
                "backward from non-scalar of shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        if !self.nodes[root.0].value.requires_grad {
            return Ok(());
        }
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.local_grads(i, &g);
            for (v, cg) in contributions {
                if !self.nodes[v.0].value.requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(cg),
                }
            }
            let node = &mut self.nodes[i];
            if matches!(node.op, Op::Leaf) || self.retain_grads {
                match &mut node.value.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].value.requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { input, weight, bias, geom } => {
                let (gi, gw, gb) = kernels::conv2d_backward(geom, val(*input), val(*weight), g, needs(*input));
                vec![(*input, gi), (*weight, gw), (*bias, gb)]
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats } => {
                let dims = node.value.dims4().expect("batch norm output is 4-D");
                let (gx, gg, gb) =
                    kernels::batch_norm_backward(dims, xhat, inv_std, val(*gamma), g, *batch_stats);
                vec![(*input, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Activation { input, kind } => {
                let gx = match kind {
                    Activation::Relu => val(*input)
                        .iter()
                        .zip(g)
                        .map(|(&x, &d)| if x > 0.0 { d } else { 0.0 })
                        .collect(),
                    Activation::Sigmoid => node
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&y, &d)| d * y * (1.0 - y))
                        .collect(),
                };
                vec![(*input, gx)]
            }
            Op::Elementwise { input, derivative } => {
                let gx = val(*input).iter().zip(g).map(|(&x, &d)| d * derivative(x)).collect();
                vec![(*input, gx)]
            }
            Op::MaxPool { input, argmax } => {
                vec![(*input, kernels::maxpool2d_backward(val(*input).len(), argmax, g))]
            }
            Op::Upsample { input, factor } => {
                let dims = self.nodes[input.0].value.dims4().expect("upsample input is 4-D");
                vec![(*input, kernels::upsample_nearest2d_backward(dims, g, *factor))]
            }
            Op::Linear { input, weight, bias } => {
                let [n, d] = self.nodes[input.0].value.dims2().expect("linear input is 2-D");
                let m = node.value.shape()[1];
                let (gx, gw, gb) = kernels::linear_backward(n, d, m, val(*input), val(*weight), g);
                vec![(*input, gx), (*weight, gw), (*bias, gb)]
            }
            Op::Reshape { input } => vec![(*input, g.to_vec())],
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul { a, b } => {
                let ga = if needs(*a) { val(*b).iter().zip(g).map(|(y, d)| y * d).collect() } else { Vec::new() };
                let gb = if needs(*b) { val(*a).iter().zip(g).map(|(x, d)| x * d).collect() } else { Vec::new() };
                vec![(*a, ga), (*b, gb)]
            }
            Op::Sum { input } => vec![(*input, vec![g[0]; val(*input).len()])],
            Op::Loss { pred, target, config } => {
                let p = val(*pred);
                let t = val(*target);
                let mut out = Vec::new();
                if needs(*pred) {
                    let gp = config.grad(p, t).expect("validated at forward");
                    out.push((*pred, gp.iter().map(|v| v * g[0]).collect()));
                }
                if needs(*target) {
                    // Each loss depends on the residual only, so ∂/∂target = −∂/∂pred.
                    let gp = config.grad(p, t).expect("validated at forward");
                    out.push((*target, gp.iter().map(|v| -v * g[0]).collect()));
                }
                out
            }
        }
    }
}
