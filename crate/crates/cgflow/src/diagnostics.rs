//! The self-test battery: gradient checks, solver analytics, trace
//! estimator statistics, invertibility, and adjoint agreement. The CLI
//! prints one line per check and fails on the first red one.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::dynamics::{Aggregator, DynamicsField, GraphOde};
use crate::error::Result;
use crate::flow::{FlowModel, ModelConfig};
use crate::graph::Neighborhoods;
use crate::odeint::{
    adjoint_grad, integrate, integrate_logdet_channels, integrate_with_logdet, reverse_integrate,
    rk4_unrolled_backward, rk4_unrolled_forward, LinearField, NoiseVector, OdeField, SolverConfig,
    TraceEstimator,
};
use crate::params::ParamStore;
use crate::tape::grad_check;
use crate::tensor::Tensor;

/// One diagnostic outcome: `measured` must stay below `threshold`.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.measured.is_finite() && self.measured < self.threshold
    }
}

fn path3_nbrs() -> Neighborhoods {
    Neighborhoods::new(vec![vec![(1, 0)], vec![(0, 0), (2, 0)], vec![(1, 0)]], 1)
        .expect("3-path")
}

fn random_field_and_params(
    m: usize,
    hidden: usize,
    seed: u64,
) -> (DynamicsField, ParamStore) {
    let field = DynamicsField::new("f", m, hidden, 1, Aggregator::Sum).expect("field");
    let mut params = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    field.register_params(&mut params, &mut rng).expect("params");
    // Un-shrink the output layers so gradient signals are O(1).
    for name in params.names().map(str::to_string).collect::<Vec<_>>() {
        if name.ends_with("l2w") {
            let t = params.get_mut(&name).expect("param");
            *t = t.scale(100.0);
        }
    }
    (field, params)
}

/// Finite-difference check of the message-function network used by the
/// dynamics, through the full field program.
pub fn check_message_network_gradients(seed: u64) -> Result<CheckResult> {
    let (field, params) = random_field_and_params(2, 32, seed);
    let program = field.program(&path3_nbrs(), false)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x9e37);
    let x = Tensor::randn(3, 2, 1.0, &mut rng);
    let t = Tensor::scalar(0.4);
    let report = grad_check(program.tape(), &[&x, &t], &params, 1e-4, seed ^ 0x51)?;
    Ok(CheckResult {
        name: "message-network-gradients",
        measured: report.worst(),
        threshold: 1e-4,
        detail: format!("{} tensors checked", report.entries.len()),
    })
}

/// Finite-difference check of an arbitrary field's reverse pass; used
/// directly by the battery and, in tests, to prove the battery catches a
/// sabotaged vector-Jacobian rule.
pub fn check_field_vjp(field: &dyn OdeField, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (n, m) = field.state_shape();
    let x = Tensor::randn(n, m, 1.0, &mut rng);
    let v = Tensor::randn(n, m, 1.0, &mut rng);
    let t = 0.3;
    let analytic = field.vjp(&x, t, &v, None)?;
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let h = 1e-5 * x.data()[i].abs().max(1.0);
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (v.dot(&field.eval(&xp, t)?) - v.dot(&field.eval(&xm, t)?)) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - fd).abs() / (a.abs() + fd.abs()).max(1e-8));
    }
    Ok(CheckResult {
        name: "field-vjp-finite-difference",
        measured: worst,
        threshold: 1e-4,
        detail: format!("{n}x{m} state"),
    })
}

pub fn check_solver_exponential() -> Result<CheckResult> {
    let field = LinearField::new(1, Tensor::scalar(1.0));
    let x1 = integrate(&field, &Tensor::scalar(1.0), &SolverConfig::dopri5(1e-8, 1e-10))?;
    Ok(CheckResult {
        name: "solver-exponential",
        measured: (x1.at(0, 0) - std::f64::consts::E).abs(),
        threshold: 1e-6,
        detail: format!("x(1) = {}", x1.at(0, 0)),
    })
}

pub fn check_solver_rotation() -> Result<CheckResult> {
    let field = LinearField::new(1, Tensor::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]));
    let x0 = Tensor::from_rows(&[vec![0.8, -0.6]]);
    let cfg = SolverConfig::dopri5(1e-8, 1e-10).with_span(0.0, std::f64::consts::PI);
    let x1 = integrate(&field, &x0, &cfg)?;
    Ok(CheckResult {
        name: "solver-rotation",
        measured: x1.max_abs_diff(&x0.scale(-1.0)),
        threshold: 1e-5,
        detail: "rotation by pi negates the state".into(),
    })
}

pub fn check_rk4_order() -> Result<CheckResult> {
    let field = LinearField::new(1, Tensor::scalar(1.0));
    let err = |steps: usize| -> Result<f64> {
        let x1 = integrate(&field, &Tensor::scalar(1.0), &SolverConfig::rk4(steps))?;
        Ok((x1.at(0, 0) - std::f64::consts::E).abs())
    };
    let ratio = err(10)? / err(20)?;
    // Order 4 means halving the step shrinks the error ~16x; accept a
    // factor of two either way by scoring |log2(ratio/16)|.
    Ok(CheckResult {
        name: "rk4-order-4-convergence",
        measured: (ratio / 16.0).log2().abs(),
        threshold: 1.0,
        detail: format!("halving ratio {ratio:.2}"),
    })
}

pub fn check_exact_logdet_closed_form() -> Result<CheckResult> {
    let a = Tensor::from_rows(&[vec![0.5, 0.0], vec![0.0, -0.3]]);
    let field = LinearField::new(1, a);
    let x0 = Tensor::from_rows(&[vec![0.4, -1.2]]);
    let out = integrate_with_logdet(
        &field,
        &x0,
        &SolverConfig::dopri5(1e-10, 1e-12),
        TraceEstimator::Exact,
    )?;
    Ok(CheckResult {
        name: "exact-logdet-closed-form",
        measured: (out.delta_logp + 0.2).abs(),
        threshold: 1e-8,
        detail: format!("delta_logp = {}", out.delta_logp),
    })
}

/// Mean of the stochastic trace channels against the exact channel, in
/// standard errors.
pub fn check_trace_unbiasedness(seed: u64) -> Result<CheckResult> {
    let a = Tensor::from_rows(&[vec![0.3, -0.7], vec![0.5, 0.1]]);
    let field = LinearField::new(3, a);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let x0 = Tensor::randn(3, 2, 1.0, &mut rng);
    let cfg = SolverConfig::rk4(8);
    let exact = integrate_with_logdet(&field, &x0, &cfg, TraceEstimator::Exact)?.delta_logp;
    let draws = 10_000usize;
    let noises: Vec<NoiseVector> = (0..draws)
        .map(|_| NoiseVector::rademacher(3, 2, &mut rng))
        .collect();
    let (_, deltas) =
        integrate_logdet_channels(&field, &x0, &cfg, TraceEstimator::Stochastic(&noises))?;
    let mean = deltas.iter().sum::<f64>() / draws as f64;
    let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
    let se = (var / draws as f64).sqrt().max(1e-300);
    Ok(CheckResult {
        name: "trace-estimator-unbiasedness",
        measured: (mean - exact).abs() / se,
        threshold: 3.0,
        detail: format!("mean {mean:.6} vs exact {exact:.6} over {draws} draws"),
    })
}

/// Forward-then-reverse through a two-block random-parameter model.
pub fn check_invertibility(seed: u64) -> Result<CheckResult> {
    let mut model = FlowModel::new(ModelConfig {
        var_dim: 2,
        hidden: 16,
        blocks: 2,
        edge_types: 1,
        aggregator: Aggregator::Sum,
        factor_out: Vec::new(),
        dequant: None,
        init_seed: seed,
        solver: SolverConfig::dopri5(1e-5, 1e-7),
    })?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xabcd);
    for t in model.params_mut().values_mut() {
        *t = Tensor::randn(t.rows(), t.cols(), 0.3, &mut rng);
    }
    let template = crate::graph::line_graph_of_complete(4)?; // 6 variables
    let x = Tensor::randn(template.n_vars(), 2, 1.0, &mut rng);
    let z = model.pull_to_base(&x, template.neighborhoods())?;
    let back = model.push_from_base(&z, template.neighborhoods())?;
    Ok(CheckResult {
        name: "flow-invertibility",
        measured: back.max_abs_diff(&x),
        threshold: 1e-3,
        detail: format!("{} variables, 2 blocks", template.n_vars()),
    })
}

/// Continuous adjoint against backprop through a 40-step unrolled solve
/// for the loss sum(x(t1)^2) on the 3-node toy.
pub fn check_adjoint_agreement(seed: u64) -> Result<CheckResult> {
    let (field, params) = random_field_and_params(2, 8, seed);
    let nbrs = path3_nbrs();
    let ode = GraphOde::new(&field, &nbrs, &params, false)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x77);
    let x0 = Tensor::randn(3, 2, 1.0, &mut rng);

    let x1 = integrate(&ode, &x0, &SolverConfig::dopri5(1e-8, 1e-10))?;
    let loss_cot = x1.scale(2.0);
    let (adj_x0, adj_grads) =
        adjoint_grad(&ode, &x0, &SolverConfig::dopri5(1e-8, 1e-10), &loss_cot)?;

    let solve = rk4_unrolled_forward(&ode, &x0, 0.0, 1.0, 40, None)?;
    let loss_cot_d = solve.x1().scale(2.0);
    let mut d2o_grads = params.zeros_like();
    let d2o_x0 = rk4_unrolled_backward(&ode, &solve, &loss_cot_d, 0.0, &mut d2o_grads)?;

    let mut worst = adj_x0.max_abs_diff(&d2o_x0) / d2o_x0.max_abs().max(1e-12);
    for (name, g) in d2o_grads.iter() {
        let a = adj_grads.get(name).expect("same structure");
        let denom = g.max_abs().max(1e-9);
        worst = worst.max(a.max_abs_diff(g) / denom);
    }
    Ok(CheckResult {
        name: "adjoint-vs-unrolled-gradients",
        measured: worst,
        threshold: 0.01,
        detail: "3-node toy, loss = sum(x1^2)".into(),
    })
}

/// Reverse of forward on the raw integrator with a graph field.
pub fn check_integrator_round_trip(seed: u64) -> Result<CheckResult> {
    let (field, params) = random_field_and_params(2, 8, seed);
    let nbrs = path3_nbrs();
    let ode = GraphOde::new(&field, &nbrs, &params, false)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x1234);
    let x0 = Tensor::randn(3, 2, 1.0, &mut rng);
    let cfg = SolverConfig::dopri5(1e-5, 1e-7);
    let x1 = integrate(&ode, &x0, &cfg)?;
    let back = reverse_integrate(&ode, &x1, &cfg)?;
    Ok(CheckResult {
        name: "integrator-round-trip",
        measured: back.max_abs_diff(&x0),
        threshold: 1e-4,
        detail: "graph field, forward then reverse".into(),
    })
}

/// The whole battery, in a stable order.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let (field, params) = random_field_and_params(2, 8, seed ^ 0xfeed);
    let nbrs = path3_nbrs();
    let ode = GraphOde::new(&field, &nbrs, &params, false)?;
    let mut vjp_check = check_field_vjp(&ode, seed ^ 0xbeef)?;
    vjp_check.name = "field-vjp-finite-difference";
    Ok(vec![
        check_message_network_gradients(seed)?,
        vjp_check,
        check_solver_exponential()?,
        check_solver_rotation()?,
        check_rk4_order()?,
        check_exact_logdet_closed_form()?,
        check_trace_unbiasedness(seed)?,
        check_integrator_round_trip(seed)?,
        check_invertibility(seed)?,
        check_adjoint_agreement(seed)?,
    ])
}
