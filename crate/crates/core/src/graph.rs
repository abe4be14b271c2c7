//! Reverse-mode differentiation over a per-forward tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameter leaves carry
//! their store index so [`Graph::backward`] can hand gradients back keyed by
//! parameter. Nodes that cannot reach a trainable leaf are never
//! differentiated, which is what makes a frozen branch cheap.

use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(usize),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    Relu(Var),
    Resize(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by parameter-store slot; `None` for parameters that
/// were frozen or did not influence the seeded outputs.
pub struct ParamGrads(pub Vec<Option<Tensor>>);

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, slot: usize, value: Tensor, trainable: bool) -> Var {
        self.push(value, Op::Param(slot), trainable)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (out, cols) = tensor::conv2d(self.value(x), self.value(w), self.value(b), stride, pad);
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        // The im2col buffer is only needed for weight gradients.
        let cols = if self.needs(w) || self.needs(b) { cols } else { Vec::new() };
        self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            rg,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let rg = self.needs(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Var {
        let out = tensor::resize_bilinear(self.value(x), h, w);
        let rg = self.needs(x);
        self.push(out, Op::Resize(x), rg)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&values);
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::Concat(parts.to_vec()), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Back-propagate `seeds` (output node, d loss / d output) and return the
    /// gradient of every trainable parameter reached. `n_slots` is the size of
    /// the parameter store.
    pub fn backward(&self, seeds: &[(Var, Tensor)], n_slots: usize) -> ParamGrads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed gradient shape mismatch");
            accumulate(&mut grads[v.0], g.clone());
        }
        let mut out: Vec<Option<Tensor>> = (0..n_slots).map(|_| None).collect();
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param(slot) => accumulate(&mut out[*slot], g),
                Op::Conv {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    cols,
                } => {
                    let need_params = self.needs(*w) || self.needs(*b);
                    let cg = tensor::conv2d_backward(
                        &g,
                        self.value(*x).shape(),
                        self.value(*w),
                        cols,
                        *stride,
                        *pad,
                        self.needs(*x),
                        need_params,
                    );
                    if let Some(dx) = cg.input {
                        accumulate(&mut grads[x.0], dx);
                    }
                    if self.needs(*w) {
                        accumulate(&mut grads[w.0], cg.weight.expect("weight grad"));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], cg.bias.expect("bias grad"));
                    }
                }
                Op::Relu(x) => {
                    let mut dx = g;
                    for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Resize(x) => {
                    let (h, w) = self.value(*x).spatial();
                    accumulate(&mut grads[x.0], tensor::resize_bilinear_backward(&g, h, w));
                }
                Op::Concat(parts) => {
                    let (_, h, w) = g.dims3();
                    let mut offset = 0;
                    for p in parts {
                        let c = self.value(*p).dims3().0;
                        if self.needs(*p) {
                            let slice = g.data()[offset * h * w..(offset + c) * h * w].to_vec();
                            accumulate(&mut grads[p.0], Tensor::from_vec(&[c, h, w], slice));
                        }
                        offset += c;
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
            }
        }
        ParamGrads(out)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 4, 4], 1.0));
        let w = g.param(0, Tensor::full(&[1, 1, 3, 3], 0.5), false);
        let b = g.param(1, Tensor::zeros(&[1]), true);
        let y = g.conv2d(x, w, b, 1, 1);
        let grads = g.backward(&[(y, Tensor::full(&[1, 4, 4], 1.0))], 2);
        assert!(grads.0[0].is_none());
        assert_eq!(grads.0[1].as_ref().unwrap().data(), &[16.0]);
    }

    #[test]
    fn concat_and_add_route_gradients() {
        let mut g = Graph::new();
        let a = g.param(0, Tensor::full(&[1, 2, 2], 1.0), true);
        let b = g.param(1, Tensor::full(&[2, 2, 2], 2.0), true);
        let c = g.concat(&[a, b]);
        let d = g.add(c, c);
        let seed = Tensor::from_vec(&[3, 2, 2], (0..12).map(f64::from).collect());
        let grads = g.backward(&[(d, seed)], 2);
        assert_eq!(grads.0[0].as_ref().unwrap().data(), &[0.0, 2.0, 4.0, 6.0]);
        assert_eq!(grads.0[1].as_ref().unwrap().data()[0], 8.0);
    }
}
