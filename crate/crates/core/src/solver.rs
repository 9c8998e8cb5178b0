//! MAP inpainting by gradient ascent with λ-continuation, and the Flow-R remover.
//!
//! Every routine accepts a single image `[n]` or a batch `[B, n]`; rows are
//! independent problems that share one flow evaluation per step.

use std::io::Write;

use crate::autodiff::{grad, Tape};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

/// Relative drop that counts as a decrease of the objective.
pub const DIVERGENCE_TOLERANCE: f64 = 1e-6;
/// Consecutive decreases that abort a solve.
pub const DIVERGENCE_PATIENCE: usize = 5;

#[derive(Debug, Clone)]
pub struct InverseProblem<'a, S: Real = f32> {
    y: Tensor<S>,
    observed: Tensor<S>,
    sigma: f64,
    prior: &'a FlowModel<S>,
}

impl<'a, S: Real> InverseProblem<'a, S> {
    /// `coverage` is the soft mask `W`; the observation operator is `diag(1 - W)`.
    pub fn new(y: Tensor<S>, coverage: &Tensor<S>, sigma: f64, prior: &'a FlowModel<S>) -> Result<Self> {
        if y.shape() != coverage.shape() {
            return Err(Error::ShapeMismatch {
                op: "InverseProblem",
                lhs: y.shape().to_vec(),
                rhs: coverage.shape().to_vec(),
            });
        }
        if y.shape().last() != Some(&prior.dim()) || y.rank() > 2 {
            return Err(Error::ShapeMismatch {
                op: "InverseProblem",
                lhs: y.shape().to_vec(),
                rhs: vec![prior.dim()],
            });
        }
        if !(sigma > 0.0) {
            return Err(Error::invalid(format!("noise std must be positive, got {sigma}")));
        }
        let observed = coverage.map("observed", |w| S::one() - w)?;
        Ok(Self {
            y,
            observed,
            sigma,
            prior,
        })
    }

    /// The same problem with the coverage thresholded at 0.5.
    pub fn binarized(mut self) -> Result<Self> {
        self.observed = self
            .observed
            .map("binarize", |a| if a > S::lit(0.5) { S::one() } else { S::zero() })?;
        Ok(self)
    }

    pub fn y(&self) -> &Tensor<S> {
        &self.y
    }

    pub fn observed(&self) -> &Tensor<S> {
        &self.observed
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn prior(&self) -> &FlowModel<S> {
        self.prior
    }

    fn rows(&self) -> usize {
        if self.y.rank() == 2 {
            self.y.shape()[0]
        } else {
            1
        }
    }

    fn check_x(&self, x: &Tensor<S>) -> Result<()> {
        if x.shape() == self.y.shape() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op: "solver",
                lhs: x.shape().to_vec(),
                rhs: self.y.shape().to_vec(),
            })
        }
    }

    /// Per-row data log-likelihood `-‖y - (1-W)⊙x‖²/(2σ²)` and its gradient.
    fn data_term(&self, x: &Tensor<S>) -> Result<(Vec<f64>, Tensor<S>)> {
        let inv = 1.0 / (self.sigma * self.sigma);
        let n = self.prior.dim();
        let mut values = vec![0.0; self.rows()];
        let mut g = Vec::with_capacity(x.len());
        for (k, ((&xi, &yi), &ai)) in x.data().iter().zip(self.y.data()).zip(self.observed.data()).enumerate() {
            let r = yi.as_f64() - ai.as_f64() * xi.as_f64();
            values[k / n] -= 0.5 * inv * r * r;
            g.push(S::lit(ai.as_f64() * r * inv));
        }
        Ok((values, Tensor::new(x.shape().to_vec(), g)?))
    }

    /// Per-row prior log-density and its gradient.
    fn prior_term(&self, x: &Tensor<S>) -> Result<(Vec<f64>, Tensor<S>)> {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let lp = self.prior.log_prob_var(&xv)?;
        let values = lp.value().to_f64_vec();
        let g = grad(&lp.sum()?, &[&xv], false)?.remove(0);
        Ok((values, g.into_value()))
    }

    fn evaluate(&self, x: &Tensor<S>, lambda: f64, with_prior: bool) -> Result<Evaluation<S>> {
        let (data, mut gradient) = self.data_term(x)?;
        let prior = if with_prior {
            let (values, g) = self.prior_term(x)?;
            if lambda != 0.0 {
                gradient = gradient.add(&g.scale(S::lit(lambda))?)?;
            }
            Some(values)
        } else {
            None
        };
        Ok(Evaluation { data, prior, gradient })
    }

    /// Per-row objective `data + λ·log p(x)`, summed over a batch.
    pub fn objective(&self, x: &Tensor<S>, lambda: f64) -> Result<f64> {
        self.check_x(x)?;
        let e = self.evaluate(x, lambda, lambda != 0.0)?;
        let total = e.at(lambda).iter().sum::<f64>();
        if !total.is_finite() {
            return Err(Error::NonFinite { op: "objective" });
        }
        Ok(total)
    }

    /// Gradient of the objective in `x`.
    pub fn objective_grad(&self, x: &Tensor<S>, lambda: f64) -> Result<Tensor<S>> {
        self.check_x(x)?;
        Ok(self.evaluate(x, lambda, lambda != 0.0)?.gradient)
    }

    /// Observed pixels (`W < 0.5`) copied from `y`, the rest set to the mean
    /// of the observed ones, row by row.
    pub fn default_init(&self) -> Result<Tensor<S>> {
        let n = self.prior.dim();
        let mut out = Vec::with_capacity(self.y.len());
        for (yr, ar) in self.y.data().chunks(n).zip(self.observed.data().chunks(n)) {
            let (mut sum, mut count) = (0.0, 0usize);
            for (&y, &a) in yr.iter().zip(ar) {
                if a > S::lit(0.5) {
                    sum += y.as_f64();
                    count += 1;
                }
            }
            let fill = if count > 0 { sum / count as f64 } else { 0.0 };
            out.extend(
                yr.iter()
                    .zip(ar)
                    .map(|(&y, &a)| if a > S::lit(0.5) { y } else { S::lit(fill) }),
            );
        }
        Tensor::new(self.y.shape().to_vec(), out)
    }
}

struct Evaluation<S: Real> {
    data: Vec<f64>,
    prior: Option<Vec<f64>>,
    gradient: Tensor<S>,
}

impl<S: Real> Evaluation<S> {
    fn at(&self, lambda: f64) -> Vec<f64> {
        match &self.prior {
            Some(p) => self.data.iter().zip(p).map(|(d, p)| d + lambda * p).collect(),
            None => self.data.clone(),
        }
    }
}

/// Watches per-row objectives for sustained decrease.
struct Monitor {
    previous: Option<(Vec<f64>, Option<Vec<f64>>)>,
    streak: Vec<usize>,
    step: usize,
}

impl Monitor {
    fn new(rows: usize) -> Self {
        Self {
            previous: None,
            streak: vec![0; rows],
            step: 0,
        }
    }

    fn observe<S: Real>(&mut self, e: &Evaluation<S>, lambda: f64) -> Result<()> {
        let now = e.at(lambda);
        if now.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "solver objective" });
        }
        if let Some((data, prior)) = &self.previous {
            // compare both iterates at the current λ; skip if the prior was not evaluated
            let before: Option<Vec<f64>> = match (prior, lambda) {
                (_, 0.0) => Some(data.clone()),
                (Some(p), l) => Some(data.iter().zip(p).map(|(d, p)| d + l * p).collect()),
                (None, _) => None,
            };
            if let Some(before) = before {
                for (r, (b, a)) in before.iter().zip(&now).enumerate() {
                    if *a < b - DIVERGENCE_TOLERANCE * b.abs() {
                        self.streak[r] += 1;
                        if self.streak[r] >= DIVERGENCE_PATIENCE {
                            return Err(Error::Diverged {
                                step: self.step,
                                value: *a,
                                previous: *b,
                            });
                        }
                    } else {
                        self.streak[r] = 0;
                    }
                }
            }
        }
        self.previous = Some((e.data.clone(), e.prior.clone()));
        self.step += 1;
        Ok(())
    }
}

fn ascend<S: Real>(
    problem: &InverseProblem<S>,
    mut x: Tensor<S>,
    lambda: f64,
    steps: usize,
    eta: f64,
    monitor: &mut Monitor,
) -> Result<Tensor<S>> {
    let with_prior = lambda != 0.0;
    for _ in 0..steps {
        let e = problem.evaluate(&x, lambda, with_prior)?;
        monitor.observe(&e, lambda)?;
        x = x.add(&e.gradient.scale(S::lit(eta))?)?;
    }
    Ok(x)
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("step size must be positive, got {eta}")))
    }
}

/// `steps` ascent steps on the data term alone (λ = 0).
pub fn mle_solve<S: Real>(problem: &InverseProblem<S>, steps: usize, eta: f64, x_init: &Tensor<S>) -> Result<Tensor<S>> {
    if steps == 0 {
        return Err(Error::invalid("mle_solve needs at least one step"));
    }
    check_eta(eta)?;
    problem.check_x(x_init)?;
    let mut monitor = Monitor::new(problem.rows());
    let x = ascend(problem, x_init.clone(), 0.0, steps, eta, &mut monitor)?;
    // the final iterate must not undo the streak check
    monitor.observe(&problem.evaluate(&x, 0.0, false)?, 0.0)?;
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationSchedule {
    pub lambda_target: f64,
    pub rounds: usize,
    pub inner_steps: usize,
    pub step_size: f64,
    /// λ = 0 ascent steps run before the first round.
    pub mle_steps: usize,
}

impl Default for ContinuationSchedule {
    fn default() -> Self {
        Self {
            lambda_target: 1.0,
            rounds: 100,
            inner_steps: 10,
            step_size: 1e-3,
            mle_steps: 0,
        }
    }
}

impl ContinuationSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("schedule needs at least one round".into()));
        }
        if !(self.lambda_target >= 0.0) || !self.lambda_target.is_finite() {
            return Err(Error::Config(format!("invalid target lambda {}", self.lambda_target)));
        }
        check_eta(self.step_size).map_err(|e| Error::Config(e.to_string()))
    }

    /// `λ_t = λ·t/T`; exact at `t = T`.
    pub fn lambda(&self, t: usize) -> f64 {
        if t >= self.rounds {
            self.lambda_target
        } else {
            self.lambda_target * t as f64 / self.rounds as f64
        }
    }

    pub fn total_steps(&self) -> usize {
        self.mle_steps + self.rounds * self.inner_steps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveState<S: Real = f32> {
    pub x: Tensor<S>,
    pub lambda: f64,
    pub round: usize,
    /// Objective at `lambda`, summed over rows.
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S: Real = f32> {
    /// One state per round, in order.
    pub states: Vec<SolveState<S>>,
}

impl<S: Real> Trajectory<S> {
    pub fn last(&self) -> &SolveState<S> {
        self.states.last().expect("trajectory has at least one round")
    }

    /// `round, lambda, objective[, psnr]` rows.
    pub fn write_csv<W: Write>(&self, out: W, truth: Option<&Tensor<S>>) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["round", "lambda", "objective"];
        if truth.is_some() {
            header.push("psnr");
        }
        w.write_record(&header)?;
        for s in &self.states {
            let mut row = vec![s.round.to_string(), s.lambda.to_string(), s.objective.to_string()];
            if let Some(t) = truth {
                row.push(crate::eval::psnr(&s.x, t)?.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

/// Runs the schedule from `x_init`: optional MLE warm-up, then `T` rounds of
/// `K` ascent steps at `λ_t = λ·t/T`.
pub fn continuation_solve<S: Real>(
    problem: &InverseProblem<S>,
    schedule: &ContinuationSchedule,
    x_init: &Tensor<S>,
) -> Result<Trajectory<S>> {
    schedule.validate()?;
    problem.check_x(x_init)?;
    let eta = schedule.step_size;
    let mut monitor = Monitor::new(problem.rows());
    let mut x = ascend(problem, x_init.clone(), 0.0, schedule.mle_steps, eta, &mut monitor)?;
    let mut states = Vec::with_capacity(schedule.rounds);
    for t in 1..=schedule.rounds {
        let lambda = schedule.lambda(t);
        x = ascend(problem, x, lambda, schedule.inner_steps, eta, &mut monitor)?;
        let objective = problem.objective(&x, lambda)?;
        states.push(SolveState {
            x: x.clone(),
            lambda,
            round: t,
            objective,
        });
    }
    Ok(Trajectory { states })
}

/// Flow-R: continuation from `y + 0.1·N(0, I)` with the exact coverage known.
pub fn flow_r_remove<S: Real>(
    y: &Tensor<S>,
    coverage: &Tensor<S>,
    sigma: f64,
    prior: &FlowModel<S>,
    schedule: &ContinuationSchedule,
    rng: &mut SeededRng,
) -> Result<Tensor<S>> {
    let problem = InverseProblem::new(y.clone(), coverage, sigma, prior)?;
    let init = y.add(&rng.normal_tensor(y.shape().to_vec(), 0.1))?;
    Ok(continuation_solve(&problem, schedule, &init)?.last().x.clone())
}

#[cfg(test)]
mod tests;
