//! Dense row-major tensors.
//!
//! A [`Tensor`] is an immutable value: the buffer is shared behind an `Arc`,
//! so cloning is cheap and tensors move freely between threads. Every
//! operation that produces new values checks them for finiteness, so a NaN or
//! infinity surfaces as an [`Error::NonFinite`] instead of propagating.

mod broadcast;
mod real;

use std::fmt;
use std::sync::Arc;

pub use broadcast::broadcast_shape;
pub use real::Real;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Real> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

pub(crate) fn check_finite<S: Real>(data: &[S], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<S: Real> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        check_finite(&data, "Tensor::new")?;
        Ok(Self::from_parts(shape, data))
    }

    /// Skips validation; callers guarantee length and finiteness.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn from_vec(data: Vec<S>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| S::lit(v)).collect())
    }

    pub fn scalar(value: S) -> Self {
        assert!(value.is_finite(), "non-finite scalar tensor");
        Self::from_parts(vec![], vec![value])
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        assert!(value.is_finite(), "non-finite fill value");
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::one())
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![S::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = S::one();
        }
        Self::from_parts(vec![n, n], data)
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> S) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::ShapeMismatch {
                op: "item",
                lhs: self.shape.clone(),
                rhs: vec![],
            })
        }
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        )
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, op: &'static str, f: impl Fn(S) -> S) -> Result<Self> {
        let data: Vec<S> = self.data.iter().map(|&v| f(v)).collect();
        check_finite(&data, op)?;
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    /// Elementwise binary operation with numpy-style broadcasting.
    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        let (shape, data) = if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect::<Vec<_>>();
            (self.shape.clone(), data)
        } else if other.len() == 1 && other.rank() <= self.rank() {
            let b = other.data[0];
            (self.shape.clone(), self.data.iter().map(|&a| f(a, b)).collect())
        } else if self.len() == 1 && self.rank() <= other.rank() {
            let a = self.data[0];
            (other.shape.clone(), other.data.iter().map(|&b| f(a, b)).collect())
        } else {
            let out_shape =
                broadcast_shape(&self.shape, &other.shape).ok_or_else(|| Error::ShapeMismatch {
                    op,
                    lhs: self.shape.clone(),
                    rhs: other.shape.clone(),
                })?;
            let data = broadcast::zip_strided(
                &self.shape,
                &self.data,
                &other.shape,
                &other.data,
                &out_shape,
                f,
            );
            (out_shape, data)
        };
        check_finite(&data, op)?;
        Ok(Self::from_parts(shape, data))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: S) -> Result<Self> {
        self.map("scale", |v| v * c)
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> S {
        self.sum() / S::lit(self.len() as f64)
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }

    /// Reduces by summation to `shape`, which must broadcast to this tensor's shape.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Self> {
        if shape == self.shape.as_slice() {
            return Ok(self.clone());
        }
        if broadcast_shape(shape, &self.shape).as_deref() != Some(self.shape.as_slice()) {
            return Err(Error::ShapeMismatch {
                op: "sum_to",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = broadcast::reduce_to(&self.shape, &self.data, shape);
        check_finite(&data, "sum_to")?;
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        if shape == self.shape.as_slice() {
            return Ok(self.clone());
        }
        if broadcast_shape(&self.shape, shape).as_deref() != Some(shape) {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = broadcast::expand(&self.shape, &self.data, shape);
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![0, 0],
            }),
        }
    }

    /// `op(self) · op(other)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&self, other: &Self, trans_a: bool, trans_b: bool) -> Result<Self> {
        let (ar, ac) = self.matrix_dims("matmul")?;
        let (br, bc) = other.matrix_dims("matmul")?;
        let (m, k, rsa, csa) = if trans_a {
            (ac, ar, 1, ac)
        } else {
            (ar, ac, ac, 1)
        };
        let (k2, n, rsb, csb) = if trans_b {
            (bc, br, 1, bc)
        } else {
            (br, bc, bc, 1)
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        if k > 0 && m > 0 && n > 0 {
            S::gemm(
                m,
                k,
                n,
                &self.data,
                rsa as isize,
                csa as isize,
                &other.data,
                rsb as isize,
                csb as isize,
                &mut out,
            );
        }
        check_finite(&out, "matmul")?;
        Ok(Self::from_parts(vec![m, n], out))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.matmul_t(other, false, false)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.matrix_dims("transpose")?;
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    /// Row `i` of a 2-D tensor as a 1-D tensor.
    pub fn row(&self, i: usize) -> Result<Self> {
        let (r, c) = self.matrix_dims("row")?;
        if i >= r {
            return Err(Error::invalid(format!("row {i} out of range for {r} rows")));
        }
        Ok(Self::from_parts(vec![c], self.data[i * c..(i + 1) * c].to_vec()))
    }

    /// Stacks equally shaped 1-D tensors into a `[rows, n]` matrix.
    pub fn stack_rows(rows: &[Self]) -> Result<Self> {
        let n = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * n);
        for r in rows {
            if r.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![n],
                    rhs: r.shape.clone(),
                });
            }
            data.extend_from_slice(&r.data);
        }
        Ok(Self::from_parts(vec![rows.len(), n], data))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn length_must_match_shape() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn nan_is_rejected() {
        let err = Tensor::<f64>::from_vec(vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        let t = Tensor::<f64>::from_vec(vec![0.0]).unwrap();
        assert!(t.map("recip", |v| 1.0 / v).is_err());
    }

    #[test]
    fn matmul_by_hand() {
        let a = Tensor::<f64>::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_f64([2, 1], &[1.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);

        let x = Tensor::<f64>::from_f64([2, 3], &[1.0, -2.0, 0.5, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&x).unwrap(), x);
        assert_eq!(
            Tensor::<f64>::zeros([2, 2]).matmul(&x).unwrap(),
            Tensor::zeros([2, 3])
        );
        assert!(x.matmul(&x).is_err());
    }

    #[test]
    fn matmul_transposed_operands_agree_with_explicit_transpose() {
        let a = Tensor::<f64>::from_fn([3, 4], |i| (i as f64 * 0.37).sin()).unwrap();
        let b = Tensor::<f64>::from_fn([3, 5], |i| (i as f64 * 0.11).cos()).unwrap();
        let lhs = a.matmul_t(&b, true, false).unwrap();
        let rhs = a.transpose().unwrap().matmul(&b).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
        let c = Tensor::<f64>::from_fn([5, 4], |i| i as f64 * 0.5).unwrap();
        let lhs = a.matmul_t(&c, false, true).unwrap();
        let rhs = a.matmul(&c.transpose().unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn broadcast_row_and_column() {
        let m = Tensor::<f64>::from_f64([2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let row = Tensor::<f64>::from_f64([3], &[10.0, 20.0, 30.0]).unwrap();
        let col = Tensor::<f64>::from_f64([2, 1], &[100.0, 200.0]).unwrap();
        assert_eq!(m.add(&row).unwrap().data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        assert_eq!(
            m.add(&col).unwrap().data(),
            &[101.0, 102.0, 103.0, 204.0, 205.0, 206.0]
        );
        let outer = col.mul(&row).unwrap();
        assert_eq!(outer.shape(), &[2, 3]);
        assert_eq!(outer.data()[5], 6000.0);
        assert!(m.add(&col.reshape([2]).unwrap()).is_err());
    }

    #[test]
    fn sum_to_inverts_broadcast_counts() {
        let ones = Tensor::<f64>::ones([4, 3]);
        assert_eq!(ones.sum_to(&[3]).unwrap().data(), &[4.0; 3]);
        assert_eq!(ones.sum_to(&[4, 1]).unwrap().data(), &[3.0; 4]);
        assert_eq!(ones.sum_to(&[]).unwrap().data(), &[12.0]);
        assert!(ones.sum_to(&[2]).is_err());
    }

    fn shape_pair() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        proptest::collection::vec((1usize..4, 0u8..3), 0..4).prop_map(|dims| {
            let a = dims
                .iter()
                .map(|&(d, k)| if k == 1 { 1 } else { d })
                .collect::<Vec<_>>();
            let b = dims
                .iter()
                .map(|&(d, k)| if k == 2 { 1 } else { d })
                .collect::<Vec<_>>();
            let skip = dims.iter().take_while(|d| d.1 == 2).count().min(1);
            (a, b[skip..].to_vec())
        })
    }

    proptest! {
        #[test]
        fn broadcast_result_shape_is_elementwise_max(
            (sa, sb) in shape_pair(),
        ) {
            let a = Tensor::<f64>::from_fn(sa.clone(), |i| i as f64).unwrap();
            let b = Tensor::<f64>::from_fn(sb.clone(), |i| 2.0 * i as f64).unwrap();
            let c = a.add(&b).unwrap();
            let rank = sa.len().max(sb.len());
            let pad = |s: &[usize]| {
                let mut v = vec![1; rank - s.len()];
                v.extend_from_slice(s);
                v
            };
            let (pa, pb) = (pad(&sa), pad(&sb));
            let expected: Vec<usize> = pa.iter().zip(&pb).map(|(x, y)| *x.max(y)).collect();
            prop_assert_eq!(c.shape(), expected.as_slice());
            // broadcasting each operand explicitly and adding gives the same values
            let ea = a.broadcast_to(&expected).unwrap();
            let eb = b.broadcast_to(&expected).unwrap();
            let direct: Vec<f64> = ea.data().iter().zip(eb.data()).map(|(x, y)| x + y).collect();
            prop_assert_eq!(c.data(), direct.as_slice());
            // and reducing back recovers the operand scaled by the replication count
            let back = ea.sum_to(&sa).unwrap();
            let reps = (expected.iter().product::<usize>() / a.len().max(1)) as f64;
            for (x, y) in back.data().iter().zip(a.data()) {
                prop_assert!((x - reps * y).abs() < 1e-9);
            }
        }
    }
}
