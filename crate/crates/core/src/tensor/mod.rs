//! Reverse-mode automatic differentiation on dynamic-shape tensors.
//!
//! The tape is eager: every op computes its value when the node is created.
//! Backward passes append adjoint nodes to the *same* tape, so gradients are
//! themselves differentiable and second-order terms (e.g. gradient penalties)
//! come out of the same machinery.
//!
//! Tensors are single-sample: convolutional features are `[C, H, W]`,
//! vectors are `[N]`. Batching is done by the caller, one tape per sample,
//! reducing gradients in a fixed order.

mod ops;

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use ndarray::{ArrayD, IxDyn};
use num_traits::Float;

pub use ops::{avg_pool2_arr, bilinear_up2_arr, fold_arr, unfold_arr};

/// Element type of the tape: `f32` for speed, `f64` for gradient checks.
pub trait Scalar:
    ndarray::LinalgScalar + Float + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug)]
#[allow(dead_code)] // payloads appear in Debug dumps of the tape
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar(f64),
    MulScalar(f64),
    Matmul,
    Transpose,
    Reshape,
    BroadcastTo,
    SumTo,
    Unfold { k: usize, pad: usize },
    Fold { k: usize, pad: usize, hw: (usize, usize) },
    AvgPool2,
    UpSpread2,
    BilinearUp2,
    BilinearUp2T,
    LeakyRelu(f64),
    Relu,
    Sigmoid,
    Softplus,
    Tanh,
    Exp,
    Ln,
    Sqrt,
}

struct Node<E: Scalar> {
    value: ArrayD<E>,
    op: Op,
    parents: Vec<usize>,
    requires_grad: bool,
}

/// Append-only computation graph. Node indices are a topological order.
pub struct Tape<E: Scalar> {
    nodes: RefCell<Vec<Node<E>>>,
}

/// Handle to a tape node. Copyable; only valid for the tape that created it.
#[derive(Copy, Clone)]
pub struct Tv<'t, E: Scalar> {
    tape: &'t Tape<E>,
    pub(crate) id: usize,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<E>, op: Op, parents: Vec<usize>, requires_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, parents, requires_grad });
        nodes.len() - 1
    }

    /// A trainable leaf: gradients flow into it.
    pub fn leaf(&self, value: ArrayD<E>) -> Tv<'_, E> {
        Tv { tape: self, id: self.push(value, Op::Leaf, vec![], true) }
    }

    /// A constant leaf: no gradient is tracked through it.
    pub fn constant(&self, value: ArrayD<E>) -> Tv<'_, E> {
        Tv { tape: self, id: self.push(value, Op::Leaf, vec![], false) }
    }

    pub fn scalar(&self, v: f64) -> Tv<'_, E> {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), E::from_f64(v)))
    }

    pub fn value(&self, v: Tv<'_, E>) -> ArrayD<E> {
        self.nodes.borrow()[v.id].value.clone()
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn unary(&self, a: usize, op: Op, value: ArrayD<E>) -> usize {
        let rg = self.requires(a);
        self.push(value, op, vec![a], rg)
    }

    fn binary(&self, a: usize, b: usize, op: Op, value: ArrayD<E>) -> usize {
        let rg = self.requires(a) || self.requires(b);
        self.push(value, op, vec![a, b], rg)
    }

    /// Builds adjoint nodes for every gradient-requiring node reachable from
    /// `loss` and returns a map `node id -> adjoint node id`. `loss` must be
    /// a single-element tensor. The adjoints live on this tape, so they can
    /// be differentiated again.
    pub fn backward_vars(&self, loss: Tv<'_, E>) -> Vec<Option<usize>> {
        assert_eq!(
            self.nodes.borrow()[loss.id].value.len(),
            1,
            "backward target must be a scalar"
        );
        let n = loss.id + 1;
        let mut adj: Vec<Option<usize>> = vec![None; n];
        let seed = self.push(
            ArrayD::from_elem(IxDyn(self.shape_of(loss.id).as_slice()), E::one()),
            Op::Leaf,
            vec![],
            false,
        );
        adj[loss.id] = Some(seed);

        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            if !self.requires(i) {
                continue;
            }
            let (op, parents) = {
                let nodes = self.nodes.borrow();
                (nodes[i].op.clone(), nodes[i].parents.clone())
            };
            for (slot, &p) in parents.iter().enumerate() {
                if !self.requires(p) {
                    continue;
                }
                let contrib = self.vjp(&op, i, &parents, slot, g);
                adj[p] = Some(match adj[p] {
                    None => contrib,
                    Some(prev) => {
                        let sum = ops::add_values(
                            &self.nodes.borrow()[prev].value,
                            &self.nodes.borrow()[contrib].value,
                        );
                        self.binary(prev, contrib, Op::Add, sum)
                    }
                });
            }
        }
        adj
    }

    /// Gradient values of `loss` with respect to each of `wrt`. `None` when a
    /// target is not reached by the backward sweep.
    pub fn grad(&self, loss: Tv<'_, E>, wrt: &[Tv<'_, E>]) -> Vec<Option<ArrayD<E>>> {
        let adj = self.backward_vars(loss);
        wrt.iter()
            .map(|v| adj.get(v.id).and_then(|o| o.map(|id| self.nodes.borrow()[id].value.clone())))
            .collect()
    }

    /// The adjoint of `v` as a tape node, for higher-order differentiation.
    pub fn grad_var<'t>(
        &'t self,
        adj: &[Option<usize>],
        v: Tv<'t, E>,
    ) -> Option<Tv<'t, E>> {
        adj.get(v.id).and_then(|o| o.map(|id| Tv { tape: self, id }))
    }
}

impl<'t, E: Scalar> Tv<'t, E> {
    pub fn tape(self) -> &'t Tape<E> {
        self.tape
    }

    pub fn value(self) -> ArrayD<E> {
        self.tape.value(self)
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    /// Scalar value of a single-element tensor.
    pub fn item(self) -> E {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.len(), 1, "item() on non-scalar");
        v.iter().next().copied().unwrap()
    }

    fn lift(self, id: usize) -> Tv<'t, E> {
        Tv { tape: self.tape, id }
    }

    pub fn add_scalar(self, c: f64) -> Tv<'t, E> {
        let v = self.tape.nodes.borrow()[self.id].value.mapv(|x| x + E::from_f64(c));
        self.lift(self.tape.unary(self.id, Op::AddScalar(c), v))
    }

    pub fn mul_scalar(self, c: f64) -> Tv<'t, E> {
        let v = self.tape.nodes.borrow()[self.id].value.mapv(|x| x * E::from_f64(c));
        self.lift(self.tape.unary(self.id, Op::MulScalar(c), v))
    }

    pub fn matmul(self, rhs: Tv<'t, E>) -> Tv<'t, E> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            ops::matmul_values(&nodes[self.id].value, &nodes[rhs.id].value)
        };
        self.lift(self.tape.binary(self.id, rhs.id, Op::Matmul, v))
    }

    pub fn transpose(self) -> Tv<'t, E> {
        let v = ops::transpose_value(&self.tape.nodes.borrow()[self.id].value);
        self.lift(self.tape.unary(self.id, Op::Transpose, v))
    }

    pub fn reshape(self, shape: &[usize]) -> Tv<'t, E> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            let cur = &nodes[self.id].value;
            assert_eq!(cur.len(), shape.iter().product::<usize>(), "reshape length mismatch");
            cur.to_shape(IxDyn(shape)).expect("reshape").to_owned()
        };
        self.lift(self.tape.unary(self.id, Op::Reshape, v))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Tv<'t, E> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id]
                .value
                .broadcast(IxDyn(shape))
                .expect("broadcast_to incompatible shape")
                .to_owned()
        };
        self.lift(self.tape.unary(self.id, Op::BroadcastTo, v))
    }

    /// Sums over broadcast axes down to `shape` (the adjoint of `broadcast_to`).
    pub fn sum_to(self, shape: &[usize]) -> Tv<'t, E> {
        let v = ops::sum_to_values(&self.tape.nodes.borrow()[self.id].value, shape);
        self.lift(self.tape.unary(self.id, Op::SumTo, v))
    }

    pub fn sum(self) -> Tv<'t, E> {
        self.sum_to(&[1])
    }

    pub fn mean(self) -> Tv<'t, E> {
        let n = self.shape().iter().product::<usize>() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// im2col for 3x3-style convolutions: `[C,H,W] -> [C*k*k, Ho*Wo]`, stride 1.
    pub fn unfold(self, k: usize, pad: usize) -> Tv<'t, E> {
        let v = ops::unfold_arr(&self.tape.nodes.borrow()[self.id].value, k, pad);
        self.lift(self.tape.unary(self.id, Op::Unfold { k, pad }, v))
    }

    /// col2im, the adjoint of `unfold` for an input of spatial size `hw`.
    pub fn fold(self, k: usize, pad: usize, hw: (usize, usize)) -> Tv<'t, E> {
        let v = ops::fold_arr(&self.tape.nodes.borrow()[self.id].value, k, pad, hw);
        self.lift(self.tape.unary(self.id, Op::Fold { k, pad, hw }, v))
    }

    /// 2x2 mean pooling, equal to factor-2 bilinear downsampling.
    pub fn avg_pool2(self) -> Tv<'t, E> {
        let v = ops::avg_pool2_arr(&self.tape.nodes.borrow()[self.id].value);
        self.lift(self.tape.unary(self.id, Op::AvgPool2, v))
    }

    /// Adjoint of `avg_pool2`: nearest upsample scaled by 1/4.
    pub fn up_spread2(self) -> Tv<'t, E> {
        let v = ops::up_spread2_arr(&self.tape.nodes.borrow()[self.id].value);
        self.lift(self.tape.unary(self.id, Op::UpSpread2, v))
    }

    /// Factor-2 bilinear upsampling (half-pixel centers, edge clamped).
    pub fn bilinear_up2(self) -> Tv<'t, E> {
        let v = ops::bilinear_up2_arr(&self.tape.nodes.borrow()[self.id].value);
        self.lift(self.tape.unary(self.id, Op::BilinearUp2, v))
    }

    /// Adjoint of `bilinear_up2`.
    pub fn bilinear_up2t(self) -> Tv<'t, E> {
        let v = ops::bilinear_up2t_arr(&self.tape.nodes.borrow()[self.id].value);
        self.lift(self.tape.unary(self.id, Op::BilinearUp2T, v))
    }

    pub fn leaky_relu(self, slope: f64) -> Tv<'t, E> {
        let s = E::from_f64(slope);
        let v = self.tape.nodes.borrow()[self.id]
            .value
            .mapv(|x| if x > E::zero() { x } else { x * s });
        self.lift(self.tape.unary(self.id, Op::LeakyRelu(slope), v))
    }

    pub fn relu(self) -> Tv<'t, E> {
        let v = self.tape.nodes.borrow()[self.id]
            .value
            .mapv(|x| if x > E::zero() { x } else { E::zero() });
        self.lift(self.tape.unary(self.id, Op::Relu, v))
    }

    pub fn sigmoid(self) -> Tv<'t, E> {
        let v = self.tape.nodes.borrow()[self.id].value.mapv(ops::sigmoid_e);
        self.lift(self.tape.unary(self.id, Op::Sigmoid, v))
    }

    /// Numerically stable `ln(1 + exp(x))`.
    pub fn softplus(self) -> Tv<'t, E> {
        let v = self.tape.nodes.borrow()[self.id].value.mapv(ops::softplus_e);
        self.lift(self.tape.unary(self.id, Op::Softplus, v))
    }

    pub fn tanh_act(self) -> Tv<'t, E> {
        let v = self.tape.nodes.borrow()[self.id].value.mapv(|x| x.tanh());
        self.lift(self.tape.unary(self.id, Op::Tanh, v))
    }

    pub fn exp(self) -> Tv<'t, E> {
        let v = self.tape.nodes.borrow()[self.id].value.mapv(|x| x.exp());
        self.lift(self.tape.unary(self.id, Op::Exp, v))
    }

    pub fn ln(self) -> Tv<'t, E> {
        let v = self.tape.nodes.borrow()[self.id].value.mapv(|x| x.ln());
        self.lift(self.tape.unary(self.id, Op::Ln, v))
    }

    pub fn sqrt(self) -> Tv<'t, E> {
        let v = self.tape.nodes.borrow()[self.id].value.mapv(|x| x.sqrt());
        self.lift(self.tape.unary(self.id, Op::Sqrt, v))
    }

    pub fn square(self) -> Tv<'t, E> {
        self * self
    }

    /// Inner product of two same-shape tensors, as a `[1]` tensor.
    pub fn dot(self, rhs: Tv<'t, E>) -> Tv<'t, E> {
        (self * rhs).sum()
    }
}

macro_rules! impl_binop {
    ($trait:ident, $fn:ident, $op:expr, $apply:expr) => {
        impl<'t, E: Scalar> $trait for Tv<'t, E> {
            type Output = Tv<'t, E>;
            fn $fn(self, rhs: Tv<'t, E>) -> Tv<'t, E> {
                let v = {
                    let nodes = self.tape.nodes.borrow();
                    let a = &nodes[self.id].value;
                    let b = &nodes[rhs.id].value;
                    assert_eq!(a.shape(), b.shape(), "elementwise op shape mismatch");
                    #[allow(clippy::redundant_closure_call)]
                    ($apply)(a, b)
                };
                self.lift(self.tape.binary(self.id, rhs.id, $op, v))
            }
        }
    };
}

impl_binop!(Add, add, Op::Add, |a: &ArrayD<E>, b: &ArrayD<E>| a + b);
impl_binop!(Sub, sub, Op::Sub, |a: &ArrayD<E>, b: &ArrayD<E>| a - b);
impl_binop!(Mul, mul, Op::Mul, |a: &ArrayD<E>, b: &ArrayD<E>| a * b);
impl_binop!(Div, div, Op::Div, |a: &ArrayD<E>, b: &ArrayD<E>| a / b);

impl<'t, E: Scalar> Neg for Tv<'t, E> {
    type Output = Tv<'t, E>;
    fn neg(self) -> Tv<'t, E> {
        self.mul_scalar(-1.0)
    }
}


impl<E: Scalar> Tape<E> {
    /// One vector-Jacobian product: the gradient contribution of output node
    /// `out` into parent slot `slot`, given the output adjoint node `g`.
    fn vjp(&self, op: &Op, out: usize, parents: &[usize], slot: usize, g: usize) -> usize {
        let gv = Tv { tape: self, id: g };
        let parent = |i: usize| Tv { tape: self, id: parents[i] };
        let out_v = Tv { tape: self, id: out };
        match op {
            Op::Leaf => unreachable!("leaf has no parents"),
            Op::Add => gv.id,
            Op::Sub => {
                if slot == 0 {
                    gv.id
                } else {
                    (-gv).id
                }
            }
            Op::Mul => {
                let other = parent(1 - slot);
                (gv * other).id
            }
            Op::Div => {
                if slot == 0 {
                    (gv / parent(1)).id
                } else {
                    (-((gv * out_v) / parent(1))).id
                }
            }
            Op::AddScalar(_) => gv.id,
            Op::MulScalar(c) => gv.mul_scalar(*c).id,
            Op::Matmul => {
                if slot == 0 {
                    gv.matmul(parent(1).transpose()).id
                } else {
                    parent(0).transpose().matmul(gv).id
                }
            }
            Op::Transpose => gv.transpose().id,
            Op::Reshape => gv.reshape(&self.shape_of(parents[0])).id,
            Op::BroadcastTo => gv.sum_to(&self.shape_of(parents[0])).id,
            Op::SumTo => gv.broadcast_to(&self.shape_of(parents[0])).id,
            Op::Unfold { k, pad } => {
                let shp = self.shape_of(parents[0]);
                gv.fold(*k, *pad, (shp[1], shp[2])).id
            }
            Op::Fold { k, pad, .. } => gv.unfold(*k, *pad).id,
            Op::AvgPool2 => gv.up_spread2().id,
            Op::UpSpread2 => gv.avg_pool2().id,
            Op::BilinearUp2 => gv.bilinear_up2t().id,
            Op::BilinearUp2T => gv.bilinear_up2().id,
            Op::LeakyRelu(s) => {
                let sl = E::from_f64(*s);
                let mask = self.nodes.borrow()[parents[0]]
                    .value
                    .mapv(|x| if x > E::zero() { E::one() } else { sl });
                let m = self.constant(mask);
                (gv * m).id
            }
            Op::Relu => {
                let mask = self.nodes.borrow()[parents[0]]
                    .value
                    .mapv(|x| if x > E::zero() { E::one() } else { E::zero() });
                let m = self.constant(mask);
                (gv * m).id
            }
            Op::Sigmoid => {
                let one_minus = (-out_v).add_scalar(1.0);
                (gv * out_v * one_minus).id
            }
            Op::Softplus => (gv * parent(0).sigmoid()).id,
            Op::Tanh => {
                let one_minus_sq = (-(out_v * out_v)).add_scalar(1.0);
                (gv * one_minus_sq).id
            }
            Op::Exp => (gv * out_v).id,
            Op::Ln => (gv / parent(0)).id,
            Op::Sqrt => (gv / out_v).mul_scalar(0.5).id,
        }
    }
}
