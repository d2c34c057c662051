//! The closed-form DPO gradient against forward-mode autodiff and against
//! central finite differences of the batch loss.

use act_core::dpo::{batch_loss, dpo_gradient, dpo_gradient_autodiff, dpo_loss_dual};
use act_core::fixtures::toy::{random_problem, ToyProblem};
use act_core::policy::TrainablePolicy;

const H: f64 = 1e-6;

fn finite_difference(p: &ToyProblem) -> Vec<f64> {
    let theta = p.policy.parameters().to_vec();
    (0..theta.len())
        .map(|i| {
            let at = |delta: f64| {
                let mut t = theta.clone();
                t[i] += delta;
                let q = p.policy.clone().with_parameters(t).unwrap();
                batch_loss(&p.batch, &q, &p.reference, p.beta).unwrap()
            };
            (at(H) - at(-H)) / (2.0 * H)
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-8)
}

#[test]
fn analytic_matches_finite_differences() {
    for seed in 0..40 {
        let p = random_problem(seed).unwrap();
        let analytic = dpo_gradient(&p.batch, &p.policy, &p.reference, p.beta).unwrap();
        let fd = finite_difference(&p);
        let err = relative_error(&analytic.grad, &fd);
        assert!(err <= 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn analytic_matches_autodiff() {
    for seed in 0..100 {
        let p = random_problem(seed).unwrap();
        let analytic = dpo_gradient(&p.batch, &p.policy, &p.reference, p.beta).unwrap();
        let dual = dpo_gradient_autodiff(&p.batch, &p.policy, &p.reference, p.beta).unwrap();
        let err = relative_error(&analytic.grad, &dual);
        assert!(err <= 1e-10, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn loss_values_agree_across_routes() {
    for seed in 0..30 {
        let p = random_problem(seed).unwrap();
        let plain = batch_loss(&p.batch, &p.policy, &p.reference, p.beta).unwrap();
        let analytic = dpo_gradient(&p.batch, &p.policy, &p.reference, p.beta).unwrap();
        let dual = dpo_loss_dual(&p.batch, &p.policy, &p.reference, p.beta).unwrap();
        assert!((plain - analytic.loss).abs() < 1e-12, "seed {seed}");
        assert!((plain - dual.v).abs() < 1e-12, "seed {seed}");
    }
}

#[test]
fn policy_equal_to_reference_has_weight_one_half() {
    let p = random_problem(5).unwrap();
    let same = p.policy.snapshot();
    let g = dpo_gradient(&p.batch, &p.policy, &same, p.beta).unwrap();
    assert!((g.loss - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(g.weights.iter().all(|w| *w == 0.5));
}
