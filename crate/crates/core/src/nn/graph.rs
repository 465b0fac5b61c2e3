//! Reverse-mode tape over the layer kernels in [`super::ops`].

use super::ops::{self, ConvGeom};
use super::params::ParamStore;
use super::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(usize),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Add(Var, Var),
    Upsample {
        x: Var,
        factor: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    /// Whether any parameter feeds into this node.
    needs_grad: bool,
}

/// Records a forward pass so gradients can be pulled back through it.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros([0, 0, 0, 0]))
    }

    pub fn input(&mut self, x: Tensor) -> Var {
        self.push(x, Op::Input, false)
    }

    pub fn param(&mut self, index: usize) -> Var {
        let value = self.params.tensor(index).clone();
        self.push(value, Op::Param(index), true)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let bias = b.map(|b| self.value(b).data().to_vec());
        let y = ops::conv2d(self.value(x), self.value(w), bias.as_deref(), geom);
        let needs = self.needs(x) || self.needs(w) || b.is_some();
        self.push(y, Op::Conv { x, w, b, geom }, needs)
    }

    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let bias = b.map(|b| self.value(b).data().to_vec());
        let y = ops::conv_transpose2d(self.value(x), self.value(w), bias.as_deref(), geom);
        let needs = self.needs(x) || self.needs(w) || b.is_some();
        self.push(y, Op::ConvTranspose { x, w, b, geom }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        let needs = self.needs(x);
        self.push(y, Op::Relu(x), needs)
    }

    pub fn max_pool(&mut self, x: Var) -> Var {
        let (y, argmax) = ops::max_pool2(self.value(x));
        let needs = self.needs(x);
        self.push(y, Op::MaxPool { x, argmax }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = ops::add(self.value(a), self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(y, Op::Add(a, b), needs)
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        let y = if factor == 1 {
            self.value(x).clone()
        } else {
            ops::upsample_bilinear(self.value(x), factor)
        };
        let needs = self.needs(x);
        self.push(y, Op::Upsample { x, factor }, needs)
    }

    /// Back-propagates the given output gradients and returns one gradient
    /// per parameter of the store (zeros for unused parameters).
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Vec<Tensor> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads, v, g);
        }
        let mut param_grads: Vec<Tensor> = (0..self.params.len())
            .map(|i| Tensor::zeros(self.params.tensor(i).shape()))
            .collect();

        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Input => {}
                Op::Param(p) => param_grads[*p].add_assign(&dy),
                Op::Conv { x, w, b, geom } => {
                    let g = ops::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &dy,
                        *geom,
                        self.needs(*x),
                    );
                    self.pull_conv(&mut grads, *x, *w, *b, g);
                }
                Op::ConvTranspose { x, w, b, geom } => {
                    let g = ops::conv_transpose2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &dy,
                        *geom,
                        self.needs(*x),
                    );
                    self.pull_conv(&mut grads, *x, *w, *b, g);
                }
                Op::Relu(x) => {
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, ops::relu_backward(&node.value, &dy));
                    }
                }
                Op::MaxPool { x, argmax } => {
                    if self.needs(*x) {
                        let dx = ops::max_pool2_backward(self.value(*x).shape(), argmax, &dy);
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, dy.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy);
                    }
                }
                Op::Upsample { x, factor } => {
                    if self.needs(*x) {
                        let dx = if *factor == 1 {
                            dy
                        } else {
                            ops::upsample_bilinear_backward(self.value(*x).shape(), *factor, &dy)
                        };
                        accumulate(&mut grads, *x, dx);
                    }
                }
            }
        }
        param_grads
    }

    fn pull_conv(&self, grads: &mut [Option<Tensor>], x: Var, w: Var, b: Option<Var>, g: ops::ConvGrads) {
        if let Some(dx) = g.dx {
            accumulate(grads, x, dx);
        }
        accumulate(grads, w, g.dw);
        if let Some(b) = b {
            let shape = self.value(b).shape();
            accumulate(grads, b, Tensor::from_vec(shape, g.db).expect("bias shape"));
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
