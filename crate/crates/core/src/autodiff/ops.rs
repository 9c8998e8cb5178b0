use std::rc::Rc;

use smallvec::{smallvec, SmallVec};

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A differentiable operation implemented outside the built-in set.
///
/// Backward rules are first-order: they run on plain tensors, so a custom op
/// cannot sit on a path that is differentiated with `create_graph`.
pub trait CustomOp<S: Real> {
    fn name(&self) -> &'static str;

    /// Adjoints for each input given the adjoint of the output. Return `None`
    /// for inputs that are not differentiable.
    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        output: &Tensor<S>,
        grad: &Tensor<S>,
    ) -> Result<Vec<Option<Tensor<S>>>>;
}

#[derive(Clone)]
pub(crate) enum Op<S: Real> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Pow(S),
    AddScalar,
    MulScalar(S),
    Matmul { trans_a: bool, trans_b: bool },
    Sum,
    SumTo,
    BroadcastTo,
    Reshape,
    Custom(Rc<dyn CustomOp<S>>),
}

type Grads<S> = SmallVec<[Option<Var<S>>; 2]>;

impl<S: Real> Op<S> {
    pub(crate) fn backward(
        &self,
        inputs: &[&Var<S>],
        output: &Var<S>,
        g: &Var<S>,
        create_graph: bool,
    ) -> Result<Grads<S>> {
        let shape = |i: usize| inputs[i].shape().to_vec();
        Ok(match self {
            Op::Leaf => smallvec![],
            Op::Add => smallvec![Some(g.sum_to(&shape(0))?), Some(g.sum_to(&shape(1))?)],
            Op::Sub => smallvec![
                Some(g.sum_to(&shape(0))?),
                Some(g.neg()?.sum_to(&shape(1))?)
            ],
            Op::Mul => smallvec![
                Some(g.mul(inputs[1])?.sum_to(&shape(0))?),
                Some(g.mul(inputs[0])?.sum_to(&shape(1))?)
            ],
            Op::Div => {
                let ga = g.div(inputs[1])?;
                let gb = ga.mul(output)?.neg()?;
                smallvec![Some(ga.sum_to(&shape(0))?), Some(gb.sum_to(&shape(1))?)]
            }
            Op::Neg => smallvec![Some(g.neg()?)],
            Op::Exp => smallvec![Some(g.mul(output)?)],
            Op::Log => smallvec![Some(g.div(inputs[0])?)],
            Op::Tanh => {
                let d = output.square()?.neg()?.add_scalar(S::one())?;
                smallvec![Some(g.mul(&d)?)]
            }
            Op::Sigmoid => {
                let d = output.mul(&output.neg()?.add_scalar(S::one())?)?;
                smallvec![Some(g.mul(&d)?)]
            }
            Op::Pow(p) => {
                let d = inputs[0].pow(*p - S::one())?.mul_scalar(*p)?;
                smallvec![Some(g.mul(&d)?)]
            }
            Op::AddScalar => smallvec![Some(g.clone())],
            Op::MulScalar(c) => smallvec![Some(g.mul_scalar(*c)?)],
            Op::Matmul { trans_a, trans_b } => {
                let (a, b) = (inputs[0], inputs[1]);
                let (ta, tb) = (*trans_a, *trans_b);
                let ga = if ta {
                    b.matmul_t(g, tb, true)?
                } else {
                    g.matmul_t(b, false, !tb)?
                };
                let gb = if tb {
                    g.matmul_t(a, true, ta)?
                } else {
                    a.matmul_t(g, !ta, false)?
                };
                smallvec![Some(ga), Some(gb)]
            }
            Op::Sum | Op::SumTo => smallvec![Some(g.broadcast_to(&shape(0))?)],
            Op::BroadcastTo => smallvec![Some(g.sum_to(&shape(0))?)],
            Op::Reshape => smallvec![Some(g.reshape(shape(0))?)],
            Op::Custom(op) => {
                if create_graph {
                    return Err(Error::NotTwiceDifferentiable(op.name()));
                }
                let values: Vec<&Tensor<S>> = inputs.iter().map(|v| v.value()).collect();
                op.backward(&values, output.value(), g.value())?
                    .into_iter()
                    .map(|t| t.map(Var::constant))
                    .collect()
            }
        })
    }
}

fn stable_sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<S: Real> Var<S> {
    pub fn add(&self, other: &Self) -> Result<Self> {
        let out = self.value.add(&other.value)?;
        Self::record(Op::Add, &[self, other], out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let out = self.value.sub(&other.value)?;
        Self::record(Op::Sub, &[self, other], out)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        let out = self.value.mul(&other.value)?;
        Self::record(Op::Mul, &[self, other], out)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        if other.value.data().iter().any(|v| v.is_zero()) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let out = self.value.zip_with(&other.value, "div", |a, b| a / b)?;
        Self::record(Op::Div, &[self, other], out)
    }

    pub fn neg(&self) -> Result<Self> {
        let out = self.value.map("neg", |v| -v)?;
        Self::record(Op::Neg, &[self], out)
    }

    pub fn exp(&self) -> Result<Self> {
        let out = self.value.map("exp", |v| v.exp())?;
        Self::record(Op::Exp, &[self], out)
    }

    pub fn log(&self) -> Result<Self> {
        if let Some(bad) = self.value.data().iter().find(|v| **v <= S::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive argument {bad}"),
            });
        }
        let out = self.value.map("log", |v| v.ln())?;
        Self::record(Op::Log, &[self], out)
    }

    pub fn tanh(&self) -> Result<Self> {
        let out = self.value.map("tanh", |v| v.tanh())?;
        Self::record(Op::Tanh, &[self], out)
    }

    pub fn sigmoid(&self) -> Result<Self> {
        let out = self.value.map("sigmoid", stable_sigmoid)?;
        Self::record(Op::Sigmoid, &[self], out)
    }

    /// Elementwise power with a constant exponent.
    pub fn pow(&self, p: S) -> Result<Self> {
        let integral = p == p.round();
        if !integral && self.value.data().iter().any(|v| *v < S::zero()) {
            return Err(Error::Domain {
                op: "pow",
                detail: format!("negative base with fractional exponent {p}"),
            });
        }
        let out = self.value.map("pow", |v| {
            if p.is_zero() {
                S::one()
            } else if p == S::one() {
                v
            } else if p == S::lit(2.0) {
                v * v
            } else {
                v.powf(p)
            }
        })?;
        Self::record(Op::Pow(p), &[self], out)
    }

    pub fn powf(&self, p: f64) -> Result<Self> {
        self.pow(S::lit(p))
    }

    pub fn square(&self) -> Result<Self> {
        self.pow(S::lit(2.0))
    }

    pub fn sqrt(&self) -> Result<Self> {
        self.pow(S::lit(0.5))
    }

    pub fn add_scalar(&self, c: S) -> Result<Self> {
        let out = self.value.map("add_scalar", |v| v + c)?;
        Self::record(Op::AddScalar, &[self], out)
    }

    pub fn mul_scalar(&self, c: S) -> Result<Self> {
        let out = self.value.map("mul_scalar", |v| v * c)?;
        Self::record(Op::MulScalar(c), &[self], out)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.matmul_t(other, false, false)
    }

    pub fn matmul_t(&self, other: &Self, trans_a: bool, trans_b: bool) -> Result<Self> {
        let out = self.value.matmul_t(&other.value, trans_a, trans_b)?;
        Self::record(Op::Matmul { trans_a, trans_b }, &[self, other], out)
    }

    /// Sum of all elements, as a rank-0 value.
    pub fn sum(&self) -> Result<Self> {
        let out = Tensor::scalar(self.value.sum());
        if !out.data()[0].is_finite() {
            return Err(Error::NonFinite { op: "sum" });
        }
        Self::record(Op::Sum, &[self], out)
    }

    pub fn mean(&self) -> Result<Self> {
        let n = S::lit(self.len().max(1) as f64);
        self.sum()?.mul_scalar(S::one() / n)
    }

    pub fn sum_to(&self, shape: &[usize]) -> Result<Self> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        let out = self.value.sum_to(shape)?;
        Self::record(Op::SumTo, &[self], out)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        let out = self.value.broadcast_to(shape)?;
        Self::record(Op::BroadcastTo, &[self], out)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let out = self.value.reshape(shape)?;
        Self::record(Op::Reshape, &[self], out)
    }

    /// Records a custom operation whose forward result is `output`.
    pub fn custom(op: Rc<dyn CustomOp<S>>, inputs: &[&Var<S>], output: Tensor<S>) -> Result<Self> {
        crate::tensor::check_finite(output.data(), op.name())?;
        Self::record(Op::Custom(op), inputs, output)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sigmoid_and_exp_reference_values() {
        let z = Var::scalar(0.0f64);
        assert_eq!(z.sigmoid().unwrap().item().unwrap(), 0.5);
        assert_eq!(z.exp().unwrap().item().unwrap(), 1.0);
        // 1 / (1 + e^15) evaluated in high precision: 3.0590222692562472e-7
        let s = Var::scalar(-15.0f64).sigmoid().unwrap().item().unwrap();
        assert_relative_eq!(s, 3.059_022_269_256_247e-7, max_relative = 1e-12);
        let s32 = Var::scalar(-15.0f32).sigmoid().unwrap().item().unwrap();
        assert_relative_eq!(s32, 3.059_022_3e-7, max_relative = 1e-5);
    }

    #[test]
    fn domain_errors() {
        let x = Var::constant(Tensor::<f64>::from_vec(vec![1.0, 0.0]).unwrap());
        assert!(matches!(x.log(), Err(Error::Domain { .. })));
        let one = Var::scalar(1.0f64);
        assert!(matches!(one.div(&x), Err(Error::Domain { .. })));
        let neg = Var::scalar(-2.0f64);
        assert!(matches!(neg.sqrt(), Err(Error::Domain { .. })));
        assert_eq!(neg.powf(3.0).unwrap().item().unwrap(), -8.0);
    }

    #[test]
    fn overflow_surfaces_as_non_finite() {
        let big = Var::scalar(1000.0f32);
        assert!(matches!(big.exp(), Err(Error::NonFinite { .. })));
    }
}
