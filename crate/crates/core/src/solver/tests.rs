use super::*;
use approx::assert_relative_eq;

fn identity(n: usize) -> FlowModel<f64> {
    FlowModel::identity(n).unwrap()
}

fn t(v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(v.to_vec()).unwrap()
}

#[test]
fn objective_reference_values() {
    let prior = identity(4);
    let y = t(&[0.1, 0.5, 0.9, 0.3]);
    let none = Tensor::zeros([4]);
    let p = InverseProblem::new(y.clone(), &none, 0.05, &prior).unwrap();
    assert_eq!(p.objective(&y, 0.0).unwrap(), 0.0);
    let shifted = y.add(&Tensor::full([4], 0.05)).unwrap();
    assert_relative_eq!(p.objective(&shifted, 0.0).unwrap(), -2.0, epsilon = 1e-9);

    let full = Tensor::ones([4]);
    let masked = InverseProblem::new(Tensor::zeros([4]), &full, 0.05, &prior).unwrap();
    let x = t(&[0.3, -1.0, 2.0, 0.0]);
    let log_normal = -0.5 * x.data().iter().map(|v| v * v).sum::<f64>() - 2.0 * (2.0 * std::f64::consts::PI).ln();
    assert_relative_eq!(masked.objective(&x, 1.0).unwrap(), log_normal, epsilon = 1e-9);
}

#[test]
fn rejects_bad_problems() {
    let prior = identity(4);
    assert!(InverseProblem::new(Tensor::zeros([4]), &Tensor::zeros([3]), 0.05, &prior).is_err());
    assert!(InverseProblem::new(Tensor::zeros([5]), &Tensor::zeros([5]), 0.05, &prior).is_err());
    assert!(InverseProblem::new(Tensor::zeros([4]), &Tensor::zeros([4]), 0.0, &prior).is_err());
    let p = InverseProblem::new(Tensor::zeros([4]), &Tensor::zeros([4]), 0.05, &prior).unwrap();
    assert!(mle_solve(&p, 0, 1e-3, &Tensor::zeros([4])).is_err());
    assert!(mle_solve(&p, 1, 1e-3, &Tensor::zeros([3])).is_err());
}

#[test]
fn mle_fixed_point_and_convergence() {
    let prior = identity(4);
    let y = t(&[0.1, 0.5, 0.9, 0.3]);
    let p = InverseProblem::new(y.clone(), &Tensor::zeros([4]), 0.05, &prior).unwrap();
    assert_eq!(mle_solve(&p, 10, 1e-3, &y).unwrap(), y);
    let x = mle_solve(&p, 100, 1e-3, &Tensor::zeros([4])).unwrap();
    assert!(x.max_abs_diff(&y).unwrap() <= 1e-3);
}

#[test]
fn mle_ascent_is_monotone_on_the_quadratic() {
    let prior = identity(16);
    let mut rng = SeededRng::new(3);
    for (sigma, eta) in [(0.05, 1e-3), (0.1, 1e-2)] {
        let y: Tensor<f64> = rng.uniform_tensor([16], 0.0, 1.0);
        let w: Tensor<f64> = rng.uniform_tensor([16], 0.0, 1.0);
        let p = InverseProblem::new(y, &w, sigma, &prior).unwrap();
        let mut x = p.default_init().unwrap();
        let mut prev = p.objective(&x, 0.0).unwrap();
        for _ in 0..200 {
            x = mle_solve(&p, 1, eta, &x).unwrap();
            let now = p.objective(&x, 0.0).unwrap();
            assert!(now >= prev, "{now} < {prev}");
            prev = now;
        }
    }
}

#[test]
fn default_init_fills_masked_with_observed_mean() {
    let prior = identity(4);
    let y = t(&[0.2, 0.0, 0.6, 0.0]);
    let w = t(&[0.0, 1.0, 0.1, 0.9]);
    let p = InverseProblem::new(y, &w, 0.05, &prior).unwrap();
    let x = p.default_init().unwrap();
    assert_relative_eq!(x.data()[1], 0.4, epsilon = 1e-12);
    assert_eq!(x.data()[0], 0.2);
    assert_eq!(x.data()[3], x.data()[1]);
}

#[test]
fn divergence_is_detected() {
    let prior = identity(4);
    let y = t(&[0.1, 0.5, 0.9, 0.3]);
    let p = InverseProblem::new(y, &Tensor::zeros([4]), 0.05, &prior).unwrap();
    let err = mle_solve(&p, 50, 0.1, &Tensor::zeros([4])).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
    assert!(err.is_numerical());
}

#[test]
fn schedule_telescopes_to_the_target() {
    let s = ContinuationSchedule {
        lambda_target: 1.0,
        rounds: 10,
        ..Default::default()
    };
    let lambdas: Vec<f64> = (1..=10).map(|t| s.lambda(t)).collect();
    for (i, l) in lambdas.iter().enumerate() {
        assert_relative_eq!(*l, (i + 1) as f64 / 10.0, epsilon = 1e-15);
    }
    assert_eq!(lambdas[9], 1.0);
    for target in [0.3, 1.0, 7.7, 1e-3] {
        for rounds in [1, 3, 7, 100, 1000] {
            let s = ContinuationSchedule {
                lambda_target: target,
                rounds,
                ..Default::default()
            };
            assert_eq!(s.lambda(rounds), target);
        }
    }
}

#[test]
fn zero_inner_steps_only_anneal() {
    let prior = identity(4);
    let y = t(&[0.1, 0.5, 0.9, 0.3]);
    let p = InverseProblem::new(y.clone(), &Tensor::full([4], 0.5), 0.05, &prior).unwrap();
    let s = ContinuationSchedule {
        rounds: 10,
        inner_steps: 0,
        ..Default::default()
    };
    let traj = continuation_solve(&p, &s, &y).unwrap();
    assert_eq!(traj.states.len(), 10);
    assert!(traj.states.iter().all(|st| st.x == y));
    assert_eq!(traj.last().lambda, 1.0);
}

/// `x* = (A²/σ² + λI)⁻¹ A y/σ²` with diagonal `A`.
fn ridge(y: &[f64], a: &[f64], sigma: f64, lambda: f64) -> Vec<f64> {
    let s2 = sigma * sigma;
    y.iter().zip(a).map(|(y, a)| (a * y / s2) / (a * a / s2 + lambda)).collect()
}

#[test]
fn gaussian_prior_matches_ridge_solution() {
    let mut rng = SeededRng::new(5);
    for _ in 0..5 {
        let n = 2 + rng.below(7);
        let prior = identity(n);
        let y: Tensor<f64> = rng.uniform_tensor([n], 0.0, 1.0);
        let w: Tensor<f64> = rng.uniform_tensor([n], 0.0, 1.0);
        let sigma = rng.uniform_range(0.3, 1.0);
        let p = InverseProblem::new(y.clone(), &w, sigma, &prior).unwrap();
        let s = ContinuationSchedule {
            lambda_target: 1.0,
            rounds: 20,
            inner_steps: 100,
            step_size: 5e-2,
            mle_steps: 0,
        };
        let x = continuation_solve(&p, &s, &p.default_init().unwrap()).unwrap().last().x.clone();
        let a: Vec<f64> = w.data().iter().map(|w| 1.0 - w).collect();
        let expect = ridge(y.data(), &a, sigma, 1.0);
        assert!(x.max_abs_diff(&t(&expect)).unwrap() < 1e-3);
    }
}

#[test]
fn two_pixel_mle_matches_grid_search() {
    let mut rng = SeededRng::new(8);
    let prior = identity(2);
    let (lo, hi, steps) = (-1.0, 4.0, 200);
    let cell = (hi - lo) / (steps - 1) as f64;
    for _ in 0..20 {
        let y: Tensor<f64> = rng.uniform_tensor([2], 0.0, 1.0);
        let w: Tensor<f64> = rng.uniform_tensor([2], 0.0, 0.7);
        let p = InverseProblem::new(y, &w, 0.05, &prior).unwrap();
        let x = mle_solve(&p, 2000, 1e-3, &p.default_init().unwrap()).unwrap();
        let mut best = (f64::MIN, [0.0; 2]);
        for i in 0..steps {
            for j in 0..steps {
                let g = [lo + i as f64 * cell, lo + j as f64 * cell];
                let v = p.objective(&t(&g), 0.0).unwrap();
                if v > best.0 {
                    best = (v, g);
                }
            }
        }
        for k in 0..2 {
            assert!((x.data()[k] - best.1[k]).abs() <= cell, "{:?} vs {:?}", x.data(), best.1);
        }
    }
}

#[test]
fn flow_r_leaves_unmasked_images_alone() {
    let prior = identity(9);
    let y = Tensor::<f64>::from_fn([9], |k| k as f64 / 9.0).unwrap();
    let s = ContinuationSchedule {
        rounds: 20,
        inner_steps: 20,
        step_size: 1e-5,
        ..Default::default()
    };
    let x = flow_r_remove(&y, &Tensor::zeros([9]), 0.01, &prior, &s, &mut SeededRng::new(0)).unwrap();
    assert!(x.max_abs_diff(&y).unwrap() < 1e-2);
}

#[test]
fn masked_pixel_is_pulled_towards_the_prior_mean() {
    let prior = identity(4);
    let truth = t(&[0.8, 0.8, 0.8, 0.8]);
    let w = t(&[0.0, 0.0, 0.0, 1.0]);
    let y = truth.mul(&t(&[1.0, 1.0, 1.0, 0.0])).unwrap();
    let p = InverseProblem::new(y.clone(), &w, 0.05, &prior).unwrap();
    let mle = mle_solve(&p, 100, 1e-3, &p.default_init().unwrap()).unwrap();
    let s = ContinuationSchedule {
        rounds: 50,
        inner_steps: 100,
        step_size: 1e-3,
        mle_steps: 100,
        lambda_target: 1.0,
    };
    let map = continuation_solve(&p, &s, &p.default_init().unwrap()).unwrap().last().x.clone();
    // the 1-D MAP for an unobserved pixel under N(0,1) decays towards 0
    assert!(map.data()[3].abs() < mle.data()[3].abs());
    assert!(map.data()[3] > 0.0);
}

#[test]
fn batched_rows_match_single_solves() {
    let mut rng = SeededRng::new(2);
    let prior: FlowModel<f64> = FlowModel::with_output_std(&crate::flow::FlowConfig::toy(6, 4, 8), &mut rng, 0.1).unwrap();
    let rows: Vec<Tensor<f64>> = (0..3).map(|_| rng.uniform_tensor([6], 0.0, 1.0)).collect();
    let masks: Vec<Tensor<f64>> = (0..3).map(|_| rng.uniform_tensor([6], 0.0, 1.0)).collect();
    let s = ContinuationSchedule {
        rounds: 5,
        inner_steps: 5,
        ..Default::default()
    };
    let batch = InverseProblem::new(Tensor::stack_rows(&rows).unwrap(), &Tensor::stack_rows(&masks).unwrap(), 0.05, &prior).unwrap();
    let xb = continuation_solve(&batch, &s, batch.y()).unwrap().last().x.clone();
    for i in 0..3 {
        let single = InverseProblem::new(rows[i].clone(), &masks[i], 0.05, &prior).unwrap();
        let xs = continuation_solve(&single, &s, &rows[i]).unwrap().last().x.clone();
        assert!(xb.row(i).unwrap().max_abs_diff(&xs).unwrap() < 1e-12);
    }
}

#[test]
fn flow_r_is_seed_deterministic_and_writes_csv() {
    let prior: FlowModel<f32> = FlowModel::with_output_std(&crate::flow::FlowConfig::toy(16, 4, 8), &mut SeededRng::new(1), 0.1).unwrap();
    let y: Tensor<f32> = SeededRng::new(2).uniform_tensor([16], 0.0, 1.0);
    let w: Tensor<f32> = SeededRng::new(3).uniform_tensor([16], 0.0, 1.0);
    let s = ContinuationSchedule {
        rounds: 5,
        inner_steps: 3,
        ..Default::default()
    };
    let a = flow_r_remove(&y, &w, 0.05, &prior, &s, &mut SeededRng::new(7)).unwrap();
    let b = flow_r_remove(&y, &w, 0.05, &prior, &s, &mut SeededRng::new(7)).unwrap();
    assert_eq!(a.data(), b.data());

    let p = InverseProblem::new(y.clone(), &w, 0.05, &prior).unwrap();
    let traj = continuation_solve(&p, &s, &y).unwrap();
    let mut buf = Vec::new();
    traj.write_csv(&mut buf, Some(&y)).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("round,lambda,objective,psnr\n1,0.2,"));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn binarized_problem_uses_hard_weights() {
    let prior = identity(3);
    let p = InverseProblem::new(t(&[0.1, 0.2, 0.3]), &t(&[0.2, 0.6, 0.5]), 0.05, &prior)
        .unwrap()
        .binarized()
        .unwrap();
    assert_eq!(p.observed().data(), &[1.0, 0.0, 0.0]);
}
