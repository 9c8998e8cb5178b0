//! Central finite differences: the independent oracle for every analytic
//! gradient in the crate.

use std::fmt;

use super::{backward, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Default probe step for 64-bit checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference estimate `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let base = x.to_vec();
    let mut probe = base.clone();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let plus = f(&Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = base[i] - h;
        let minus = f(&Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = base[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_grad",
            });
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor)`; the floor keeps all-zero gradients
/// from dividing by zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    const FLOOR: f64 = 1e-8;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / norm(a).max(norm(b)).max(FLOOR)
}

/// Result of one randomized gradient-check suite.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub cases: usize,
    pub worst_rel_err: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            cases: 0,
            worst_rel_err: 0.0,
            tolerance,
        }
    }

    pub fn record(&mut self, rel_err: f64) {
        self.cases += 1;
        // NaN must fail the suite
        if rel_err.is_nan() || rel_err > self.worst_rel_err {
            self.worst_rel_err = if rel_err.is_nan() { f64::INFINITY } else { rel_err };
        }
    }

    pub fn passed(&self) -> bool {
        self.cases > 0 && self.worst_rel_err <= self.tolerance
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:<28} cases={:<4} worst rel-err={:.3e} (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst_rel_err,
            self.tolerance
        )
    }
}

type Unary = fn(&Var<f64>) -> Result<Var<f64>>;
type Binary = fn(&Var<f64>, &Var<f64>) -> Result<Var<f64>>;

/// Compares `backward` against `finite_diff_grad` for a scalar function of
/// several tensor inputs; returns the worst relative error over inputs.
pub fn compare_with_oracle(
    inputs: &[Tensor<f64>],
    f: impl Fn(&[Var<f64>]) -> Result<Var<f64>>,
    h: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&vars)?;
    let grads = backward(&root)?;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(v).expect("leaf gradient").to_f64_vec();
        let numeric = finite_diff_grad(
            |probe| {
                let consts: Vec<Var<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| Var::constant(if j == k { probe.clone() } else { t.clone() }))
                    .collect();
                f(&consts)?.item()
            },
            &inputs[k],
            h,
        )?;
        worst = worst.max(relative_error(&analytic, numeric.data()));
    }
    Ok(worst)
}

/// Contracts an arbitrary-shaped value with fixed weights so that every
/// output element contributes a distinct amount to the scalar root.
fn weighted_sum(v: &Var<f64>, w: &Tensor<f64>) -> Result<Var<f64>> {
    v.mul(&Var::constant(w.clone()))?.sum()
}

fn random_shape(rng: &mut SeededRng) -> Vec<usize> {
    let rank = 1 + rng.below(2);
    (0..rank).map(|_| 1 + rng.below(4)).collect()
}

/// A shape broadcast-compatible with `shape`: some axes collapsed to 1,
/// possibly with leading axes dropped.
fn broadcast_partner(shape: &[usize], rng: &mut SeededRng) -> Vec<usize> {
    let mut s: Vec<usize> = shape
        .iter()
        .map(|&d| if rng.below(3) == 0 { 1 } else { d })
        .collect();
    if s.len() > 1 && rng.below(2) == 0 {
        s.remove(0);
    }
    s
}

/// Randomized checks of every built-in tape operation, `cases` per operation.
pub fn check_core_ops(cases: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    const TOL: f64 = 1e-4;
    let mut rng = SeededRng::new(seed);
    let mut outcomes = Vec::new();

    let unary: [(&str, Unary, (f64, f64)); 10] = [
        ("neg", |x| x.neg(), (-2.0, 2.0)),
        ("exp", |x| x.exp(), (-2.0, 2.0)),
        ("log", |x| x.log(), (0.2, 3.0)),
        ("tanh", |x| x.tanh(), (-2.0, 2.0)),
        ("sigmoid", |x| x.sigmoid(), (-4.0, 4.0)),
        ("pow(2.5)", |x| x.powf(2.5), (0.2, 2.0)),
        ("square", |x| x.square(), (-2.0, 2.0)),
        ("add_scalar", |x| x.add_scalar(0.7), (-2.0, 2.0)),
        ("mul_scalar", |x| x.mul_scalar(-1.3), (-2.0, 2.0)),
        ("sum", |x| x.sum()?.mul_scalar(1.5), (-2.0, 2.0)),
    ];
    for (name, op, (lo, hi)) in unary {
        let mut outcome = CheckOutcome::new(name, TOL);
        for _ in 0..cases {
            let shape = random_shape(&mut rng);
            let x = rng.uniform_tensor::<f64>(shape.clone(), lo, hi);
            let probe = op(&Var::constant(x.clone()))?;
            let w = rng.uniform_tensor::<f64>(probe.shape().to_vec(), -1.0, 1.0);
            outcome.record(compare_with_oracle(
                &[x],
                |v| weighted_sum(&op(&v[0])?, &w),
                DEFAULT_STEP,
            )?);
        }
        outcomes.push(outcome);
    }

    let binary: [(&str, Binary, (f64, f64)); 4] = [
        ("add (broadcast)", |a, b| a.add(b), (-2.0, 2.0)),
        ("sub (broadcast)", |a, b| a.sub(b), (-2.0, 2.0)),
        ("mul (broadcast)", |a, b| a.mul(b), (-2.0, 2.0)),
        ("div (broadcast)", |a, b| a.div(b), (0.5, 2.0)),
    ];
    for (name, op, (lo, hi)) in binary {
        let mut outcome = CheckOutcome::new(name, TOL);
        for _ in 0..cases {
            let sa = random_shape(&mut rng);
            let sb = broadcast_partner(&sa, &mut rng);
            let (sa, sb) = if rng.below(2) == 0 { (sa, sb) } else { (sb, sa) };
            let a = rng.uniform_tensor::<f64>(sa, lo, hi);
            let b = rng.uniform_tensor::<f64>(sb, lo, hi);
            let probe = op(&Var::constant(a.clone()), &Var::constant(b.clone()))?;
            let w = rng.uniform_tensor::<f64>(probe.shape().to_vec(), -1.0, 1.0);
            outcome.record(compare_with_oracle(
                &[a, b],
                |v| weighted_sum(&op(&v[0], &v[1])?, &w),
                DEFAULT_STEP,
            )?);
        }
        outcomes.push(outcome);
    }

    let mut outcome = CheckOutcome::new("matmul (all transposes)", TOL);
    for case in 0..cases {
        let (m, k, n) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
        let (ta, tb) = (case % 2 == 1, (case / 2) % 2 == 1);
        let a = rng.uniform_tensor::<f64>(if ta { [k, m] } else { [m, k] }, -1.0, 1.0);
        let b = rng.uniform_tensor::<f64>(if tb { [n, k] } else { [k, n] }, -1.0, 1.0);
        let w = rng.uniform_tensor::<f64>([m, n], -1.0, 1.0);
        outcome.record(compare_with_oracle(
            &[a, b],
            |v| weighted_sum(&v[0].matmul_t(&v[1], ta, tb)?, &w),
            DEFAULT_STEP,
        )?);
    }
    outcomes.push(outcome);

    let mut outcome = CheckOutcome::new("sum_to / broadcast_to", TOL);
    for _ in 0..cases {
        let big = random_shape(&mut rng);
        let small = broadcast_partner(&big, &mut rng);
        let x = rng.uniform_tensor::<f64>(small.clone(), -1.0, 1.0);
        let w = rng.uniform_tensor::<f64>(small.clone(), -1.0, 1.0);
        let wb = rng.uniform_tensor::<f64>(big.clone(), -1.0, 1.0);
        let (big2, small2) = (big.clone(), small.clone());
        outcome.record(compare_with_oracle(
            &[x],
            move |v| {
                let up = v[0].broadcast_to(&big2)?.mul(&Var::constant(wb.clone()))?;
                weighted_sum(&up.tanh()?.sum_to(&small2)?, &w)
            },
            DEFAULT_STEP,
        )?);
    }
    outcomes.push(outcome);

    let mut outcome = CheckOutcome::new("reshape", TOL);
    for _ in 0..cases {
        let (r, c) = (1 + rng.below(4), 1 + rng.below(4));
        let x = rng.uniform_tensor::<f64>([r * c], -1.0, 1.0);
        let w = rng.uniform_tensor::<f64>([c, r], -1.0, 1.0);
        outcome.record(compare_with_oracle(
            &[x],
            |v| weighted_sum(&v[0].reshape([c, r])?.exp()?, &w),
            DEFAULT_STEP,
        )?);
    }
    outcomes.push(outcome);

    let mut outcome = CheckOutcome::new("3-layer MLP", TOL);
    for _ in 0..cases {
        outcome.record(mlp_case(&mut rng)?);
    }
    outcomes.push(outcome);

    Ok(outcomes)
}

/// A random 3-layer tanh MLP with scalar output, checked in every parameter.
fn mlp_case(rng: &mut SeededRng) -> Result<f64> {
    let (b, d, h) = (1 + rng.below(3), 2 + rng.below(3), 2 + rng.below(4));
    let x = rng.uniform_tensor::<f64>([b, d], -1.0, 1.0);
    let w1 = rng.normal_tensor::<f64>([d, h], 0.8);
    let b1 = rng.normal_tensor::<f64>([h], 0.1);
    let w2 = rng.normal_tensor::<f64>([h, h], 0.8);
    let b2 = rng.normal_tensor::<f64>([h], 0.1);
    let w3 = rng.normal_tensor::<f64>([h, 1], 0.8);
    compare_with_oracle(
        &[x, w1, b1, w2, b2, w3],
        |v| {
            let h1 = v[0].matmul(&v[1])?.add(&v[2])?.tanh()?;
            let h2 = h1.matmul(&v[3])?.add(&v[4])?.sigmoid()?;
            h2.matmul(&v[5])?.sum()
        },
        DEFAULT_STEP,
    )
}
