//! Tensor-level reverse-mode differentiation over the autoencoder graph.
//!
//! Operations are appended in execution order, so the node list is already a
//! topological order; `backward` walks it once in reverse. Each op keeps the
//! inputs it needs for its adjoint.

use ndarray::{Array1, Array2, Array3, ArrayD, Ix1, Ix2, Ix3, IxDyn};

use crate::decoder::{self, DecoderParameters};
use crate::encoder;
use crate::error::{Error, Result};
use crate::losses::{self, sinkhorn, LossConfig, TransportPlan};

pub type Tensor = ArrayD<f64>;

/// Handle to a value recorded on a [`GradientTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1 { signal: Var, kernels: Var, stride: usize },
    DilatedConv { input: Var, kernels: Var, dilation: usize },
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    ModCosKernels { frequencies: Var, phases: Var, modulators: Var, square_freq: bool },
    Synthesize { activations: Var, kernels: Var, stride: usize },
    NegSnr { target: Vec<f64>, estimate: Var, floor_db: f64 },
    TotalVariation(Var),
    /// Sinkhorn cost with the transport plan treated as a constant.
    SinkhornFixedPlan { activations: Var, plan: Array2<f64>, p: u32 },
    Mean(Vec<Var>),
    /// `sum(a * weights)` with constant weights.
    WeightedSum { input: Var, weights: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv1 { .. } => "conv1",
            Op::DilatedConv { .. } => "dilated_conv",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::ModCosKernels { .. } => "modcos_kernels",
            Op::Synthesize { .. } => "synthesize",
            Op::NegSnr { .. } => "neg_snr",
            Op::TotalVariation(_) => "tv",
            Op::SinkhornFixedPlan { .. } => "sinkhorn",
            Op::Mean(_) => "mean",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
}

/// Adjoints of every node, plus the order in which nodes were visited.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    pub visit_order: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `var`, or zeros of `shape` when nothing flowed into it.
    pub fn take_or_zeros(&mut self, var: Var, shape: &[usize]) -> Tensor {
        self.grads
            .get_mut(var.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(IxDyn(shape)))
    }
}

fn as2(t: &Tensor) -> Array2<f64> {
    t.view().into_dimensionality::<Ix2>().expect("rank-2 tensor").to_owned()
}

fn as3(t: &Tensor) -> Array3<f64> {
    t.view().into_dimensionality::<Ix3>().expect("rank-3 tensor").to_owned()
}

fn as1(t: &Tensor) -> Array1<f64> {
    t.view().into_dimensionality::<Ix1>().expect("rank-1 tensor").to_owned()
}

fn scalar(v: f64) -> Tensor {
    Tensor::from_elem(IxDyn(&[]), v)
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar_value(&self, var: Var) -> f64 {
        self.nodes[var.0].value.iter().next().copied().unwrap_or(f64::NAN)
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn signal(&mut self, samples: &[f64]) -> Var {
        self.leaf(Array1::from(samples.to_vec()).into_dyn(), false)
    }

    pub fn conv1(&mut self, signal: Var, kernels: Var, stride: usize) -> Var {
        let x = as1(self.value(signal));
        let k = as2(self.value(kernels));
        let out = encoder::conv1(x.as_slice().unwrap(), &k, stride);
        self.push(Op::Conv1 { signal, kernels, stride }, out.into_dyn(), &[signal, kernels])
    }

    pub fn dilated_conv(&mut self, input: Var, kernels: Var, dilation: usize) -> Var {
        let h = as2(self.value(input));
        let k = as3(self.value(kernels));
        let out = encoder::dilated_conv(&h, &k, dilation);
        self.push(Op::DilatedConv { input, kernels, dilation }, out.into_dyn(), &[input, kernels])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), out, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        self.push(Op::Scale(a, factor), out, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.push(Op::Relu(a), out, &[a])
    }

    pub fn modcos_kernels(&mut self, frequencies: Var, phases: Var, modulators: Var, square_freq: bool, stride: usize) -> Var {
        let params = DecoderParameters {
            frequencies: as1(self.value(frequencies)),
            phases: as1(self.value(phases)),
            modulators: as2(self.value(modulators)),
            square_freq,
            stride,
        };
        let out = decoder::build_kernels(&params);
        self.push(
            Op::ModCosKernels {
                frequencies,
                phases,
                modulators,
                square_freq,
            },
            out.into_dyn(),
            &[frequencies, phases, modulators],
        )
    }

    pub fn synthesize(&mut self, activations: Var, kernels: Var, stride: usize, out_len: usize) -> Result<Var> {
        let a = as2(self.value(activations));
        let w = as2(self.value(kernels));
        let out = decoder::synthesize_with_kernels(&a, &w, stride, out_len)?;
        Ok(self.push(
            Op::Synthesize {
                activations,
                kernels,
                stride,
            },
            Array1::from(out).into_dyn(),
            &[activations, kernels],
        ))
    }

    pub fn neg_snr(&mut self, target: &[f64], estimate: Var, floor_db: f64) -> Result<Var> {
        let est = as1(self.value(estimate));
        let v = losses::neg_snr(target, est.as_slice().unwrap(), floor_db)?;
        Ok(self.push(
            Op::NegSnr {
                target: target.to_vec(),
                estimate,
                floor_db,
            },
            scalar(v),
            &[estimate],
        ))
    }

    pub fn total_variation(&mut self, a: Var) -> Var {
        let v = losses::tv_loss(&as2(self.value(a)));
        self.push(Op::TotalVariation(a), scalar(v), &[a])
    }

    /// Solves for the transport plan on the current value of `a` and records the
    /// Sinkhorn cost with that plan detached.
    pub fn sinkhorn(&mut self, a: Var, cfg: &LossConfig) -> Result<(Var, TransportPlan)> {
        let out = sinkhorn::sinkhorn_loss(&as2(self.value(a)), cfg)?;
        let var = self.push(
            Op::SinkhornFixedPlan {
                activations: a,
                plan: out.plan.plan.clone(),
                p: cfg.p,
            },
            scalar(out.loss),
            &[a],
        );
        Ok((var, out.plan))
    }

    /// Like [`GradientTape::sinkhorn`] with a caller-supplied plan.
    pub fn sinkhorn_with_plan(&mut self, a: Var, plan: Array2<f64>, p: u32) -> Var {
        let v = sinkhorn::sinkhorn_cost_with_plan(&as2(self.value(a)), &plan, p);
        self.push(Op::SinkhornFixedPlan { activations: a, plan, p }, scalar(v), &[a])
    }

    pub fn mean(&mut self, items: &[Var]) -> Var {
        let v = items.iter().map(|&i| self.scalar_value(i)).sum::<f64>() / items.len().max(1) as f64;
        self.push(Op::Mean(items.to_vec()), scalar(v), items)
    }

    pub fn weighted_sum(&mut self, input: Var, weights: Tensor) -> Var {
        let v = (self.value(input) * &weights).sum();
        self.push(Op::WeightedSum { input, weights }, scalar(v), &[input])
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::IncompleteTape(format!("loss node {} was never recorded", loss.0)))?;
        if node.value.len() != 1 {
            return Err(Error::IncompleteTape(format!(
                "backward needs a scalar loss, node {} ({}) has shape {:?}",
                loss.0,
                node.op.name(),
                node.value.shape()
            )));
        }
        if !node.value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("loss node {} ({})", loss.0, node.op.name())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(node.value.raw_dim()));
        let mut visit_order = Vec::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            visit_order.push(idx);
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, visit_order })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn propagate(&self, op: &Op, value: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv1 { signal, kernels, stride } => {
                let g2 = as2(g);
                let x = as1(self.value(*signal));
                let k = as2(self.value(*kernels));
                if self.wants(*kernels) {
                    let dk = encoder::conv1_kernel_grad(x.as_slice().unwrap(), &g2, *stride, k.ncols());
                    self.accumulate(grads, *kernels, dk.into_dyn());
                }
                if self.wants(*signal) {
                    let dx = encoder::conv1_input_grad(&k, &g2, *stride, x.len());
                    self.accumulate(grads, *signal, Array1::from(dx).into_dyn());
                }
            }
            Op::DilatedConv { input, kernels, dilation } => {
                let (dh, dk) = encoder::dilated_conv_grads(
                    &as2(self.value(*input)),
                    &as3(self.value(*kernels)),
                    *dilation,
                    &as2(g),
                );
                self.accumulate(grads, *input, dh.into_dyn());
                self.accumulate(grads, *kernels, dk.into_dyn());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g * *k),
            Op::Relu(a) => {
                let mask = value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(grads, *a, g * &mask);
            }
            Op::ModCosKernels {
                frequencies,
                phases,
                modulators,
                square_freq,
            } => {
                let params = DecoderParameters {
                    frequencies: as1(self.value(*frequencies)),
                    phases: as1(self.value(*phases)),
                    modulators: as2(self.value(*modulators)),
                    square_freq: *square_freq,
                    stride: 1,
                };
                let dg = decoder::kernel_grads(&params, &as2(g));
                self.accumulate(grads, *frequencies, dg.frequencies.into_dyn());
                self.accumulate(grads, *phases, dg.phases.into_dyn());
                self.accumulate(grads, *modulators, dg.modulators.into_dyn());
            }
            Op::Synthesize {
                activations,
                kernels,
                stride,
            } => {
                let gy = as1(g);
                let (da, dw) = decoder::synthesize_grads(
                    &as2(self.value(*activations)),
                    &as2(self.value(*kernels)),
                    *stride,
                    gy.as_slice().unwrap(),
                );
                self.accumulate(grads, *activations, da.into_dyn());
                self.accumulate(grads, *kernels, dw.into_dyn());
            }
            Op::NegSnr {
                target,
                estimate,
                floor_db,
            } => {
                let up = g.iter().next().copied().unwrap_or(0.0);
                let est = as1(self.value(*estimate));
                let d = losses::neg_snr_grad(target, est.as_slice().unwrap(), *floor_db)?;
                let d = Array1::from(d) * up;
                self.accumulate(grads, *estimate, d.into_dyn());
            }
            Op::TotalVariation(a) => {
                let up = g.iter().next().copied().unwrap_or(0.0);
                let d = losses::tv_grad(&as2(self.value(*a))) * up;
                self.accumulate(grads, *a, d.into_dyn());
            }
            Op::SinkhornFixedPlan { activations, plan, p } => {
                let up = g.iter().next().copied().unwrap_or(0.0);
                let d = sinkhorn::sinkhorn_cost_grad(&as2(self.value(*activations)), plan, *p) * up;
                self.accumulate(grads, *activations, d.into_dyn());
            }
            Op::Mean(items) => {
                let up = g.iter().next().copied().unwrap_or(0.0) / items.len().max(1) as f64;
                for &item in items {
                    self.accumulate(grads, item, scalar(up));
                }
            }
            Op::WeightedSum { input, weights } => {
                let up = g.iter().next().copied().unwrap_or(0.0);
                self.accumulate(grads, *input, weights * up);
            }
        }
        Ok(())
    }
}
