//! Elementwise tape operations: broadcasting binary arithmetic and the
//! pointwise nonlinearities the network uses.

use std::sync::Arc;

use crate::error::Result;
use crate::scalar::{sigmoid, silu, softplus, Scalar};
use crate::tensor::{reduce_to_shape, zip_broadcast, Tensor};

use super::{BackwardOp, GradSink, Var};

#[derive(Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

struct BinBw<T: Scalar> {
    kind: BinKind,
    a_id: usize,
    b_id: usize,
    a: Arc<Tensor<T>>,
    b: Arc<Tensor<T>>,
}

impl<T: Scalar> BackwardOp<T> for BinBw<T> {
    fn apply(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        match self.kind {
            BinKind::Add => {
                if sink.wants(self.a_id) {
                    sink.add(self.a_id, reduce_to_shape(g, self.a.shape()));
                }
                if sink.wants(self.b_id) {
                    sink.add(self.b_id, reduce_to_shape(g, self.b.shape()));
                }
            }
            BinKind::Sub => {
                if sink.wants(self.a_id) {
                    sink.add(self.a_id, reduce_to_shape(g, self.a.shape()));
                }
                if sink.wants(self.b_id) {
                    let neg = reduce_to_shape(g, self.b.shape()).map(|v| -v);
                    sink.add(self.b_id, neg);
                }
            }
            BinKind::Mul => {
                if sink.wants(self.a_id) {
                    let gb = zip_broadcast(g, &self.b, |x, y| x * y).expect("shape");
                    sink.add(self.a_id, reduce_to_shape(&gb, self.a.shape()));
                }
                if sink.wants(self.b_id) {
                    let ga = zip_broadcast(g, &self.a, |x, y| x * y).expect("shape");
                    sink.add(self.b_id, reduce_to_shape(&ga, self.b.shape()));
                }
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Neg,
    Relu,
    Silu,
    Sigmoid,
    Softplus,
    Exp,
    Abs,
    Cos,
    Sin,
}

impl UnaryKind {
    fn eval<T: Scalar>(self, x: T) -> T {
        match self {
            UnaryKind::Neg => -x,
            UnaryKind::Relu => x.max(T::zero()),
            UnaryKind::Silu => silu(x),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Softplus => softplus(x),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Abs => x.abs(),
            UnaryKind::Cos => x.cos(),
            UnaryKind::Sin => x.sin(),
        }
    }

    /// Derivative at `x` given the forward output `y`. `abs` and `relu`
    /// use subgradient 0 at exactly 0.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            UnaryKind::Neg => -T::one(),
            UnaryKind::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            UnaryKind::Silu => {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            }
            UnaryKind::Sigmoid => y * (T::one() - y),
            UnaryKind::Softplus => sigmoid(x),
            UnaryKind::Exp => y,
            UnaryKind::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            UnaryKind::Cos => -x.sin(),
            UnaryKind::Sin => x.cos(),
        }
    }
}

struct UnaryBw<T: Scalar> {
    kind: UnaryKind,
    x_id: usize,
    x: Arc<Tensor<T>>,
    y: Arc<Tensor<T>>,
}

impl<T: Scalar> BackwardOp<T> for UnaryBw<T> {
    fn apply(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        if let Some(dst) = sink.entry(self.x_id, self.x.shape()) {
            for i in 0..g.numel() {
                let d = self.kind.derivative(self.x.data()[i], self.y.data()[i]);
                dst.data_mut()[i] += g.data()[i] * d;
            }
        }
    }
}

struct AffineBw {
    x_id: usize,
    scale_f64: f64,
}

impl<T: Scalar> BackwardOp<T> for AffineBw {
    fn apply(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let c = T::cast(self.scale_f64);
        if sink.wants(self.x_id) {
            sink.add(self.x_id, g.map(|v| v * c));
        }
    }
}

impl<T: Scalar> Var<T> {
    fn binary(&self, other: &Var<T>, kind: BinKind) -> Result<Var<T>> {
        self.check_same_tape(other)?;
        let out = match kind {
            BinKind::Add => zip_broadcast(self.value(), other.value(), |a, b| a + b)?,
            BinKind::Sub => zip_broadcast(self.value(), other.value(), |a, b| a - b)?,
            BinKind::Mul => zip_broadcast(self.value(), other.value(), |a, b| a * b)?,
        };
        let needs = self.needs_grad || other.needs_grad;
        let bw = BinBw {
            kind,
            a_id: self.id,
            b_id: other.id,
            a: self.value_arc(),
            b: other.value_arc(),
        };
        Ok(self.record(out, Some(Box::new(bw)), needs))
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, BinKind::Add)
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, BinKind::Sub)
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, BinKind::Mul)
    }

    pub(crate) fn unary(&self, kind: UnaryKind) -> Result<Var<T>> {
        let out = self.value().map(|v| kind.eval(v));
        let out_var = self.record(out, None, self.needs_grad);
        if self.needs_grad {
            let bw = UnaryBw {
                kind,
                x_id: self.id,
                x: self.value_arc(),
                y: out_var.value_arc(),
            };
            self.tape.inner.borrow_mut().nodes[out_var.id].backward = Some(Box::new(bw));
        }
        Ok(out_var)
    }

    pub fn neg(&self) -> Result<Var<T>> {
        self.unary(UnaryKind::Neg)
    }

    pub fn relu(&self) -> Result<Var<T>> {
        self.unary(UnaryKind::Relu)
    }

    pub fn silu(&self) -> Result<Var<T>> {
        self.unary(UnaryKind::Silu)
    }

    pub fn sigmoid(&self) -> Result<Var<T>> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn softplus(&self) -> Result<Var<T>> {
        self.unary(UnaryKind::Softplus)
    }

    pub fn exp(&self) -> Result<Var<T>> {
        self.unary(UnaryKind::Exp)
    }

    pub fn abs(&self) -> Result<Var<T>> {
        self.unary(UnaryKind::Abs)
    }

    pub fn cos(&self) -> Result<Var<T>> {
        self.unary(UnaryKind::Cos)
    }

    pub fn sin(&self) -> Result<Var<T>> {
        self.unary(UnaryKind::Sin)
    }

    /// Multiply by a compile-time constant (no gradient into the constant).
    pub fn scale(&self, c: T) -> Result<Var<T>> {
        let out = self.value().map(|v| v * c);
        let bw = AffineBw { x_id: self.id, scale_f64: c.as_f64() };
        Ok(self.record(out, Some(Box::new(bw)), self.needs_grad))
    }

    /// Add a constant offset.
    pub fn add_scalar(&self, c: T) -> Result<Var<T>> {
        let out = self.value().map(|v| v + c);
        let bw = AffineBw { x_id: self.id, scale_f64: 1.0 };
        Ok(self.record(out, Some(Box::new(bw)), self.needs_grad))
    }
}
