//! ODE integration of graph states and of the augmented
//! (state, log-density) system, plus gradient transports: the continuous
//! adjoint and backprop through the unrolled fixed-step solver.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CgError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// A vector field over `n x m` states, differentiable in states and
/// parameters. Implementations bind a topology and a parameter store.
pub trait OdeField {
    fn state_shape(&self) -> (usize, usize);

    fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor>;

    /// One forward evaluation plus one reverse pass per cotangent; no
    /// parameter gradients. Returns the field value and `v^T dF/dX` for
    /// each cotangent v.
    fn eval_with_vjps(&self, x: &Tensor, t: f64, cots: &[&Tensor])
        -> Result<(Tensor, Vec<Tensor>)>;

    /// Reverse pass with parameter gradients accumulated into `grads`.
    fn vjp(
        &self,
        x: &Tensor,
        t: f64,
        cot: &Tensor,
        grads: Option<&mut ParamStore>,
    ) -> Result<Tensor>;

    /// eps^T (dF/dX) eps.
    fn quad_form(&self, x: &Tensor, t: f64, eps: &Tensor) -> Result<f64> {
        let (_, cots) = self.eval_with_vjps(x, t, &[eps])?;
        Ok(cots[0].dot(eps))
    }

    /// Exact Jacobian trace via one reverse pass per basis cotangent.
    fn trace_exact(&self, x: &Tensor, t: f64) -> Result<f64> {
        let (n, m) = self.state_shape();
        let dim = n * m;
        let basis: Vec<Tensor> = (0..dim)
            .map(|k| {
                let mut e = Tensor::zeros(n, m);
                e.data_mut()[k] = 1.0;
                e
            })
            .collect();
        let refs: Vec<&Tensor> = basis.iter().collect();
        let (_, rows) = self.eval_with_vjps(x, t, &refs)?;
        Ok(rows.iter().enumerate().map(|(k, r)| r.data()[k]).sum())
    }

    /// Field value together with a differentiable `eps^T J eps`.
    fn aug_eval(&self, x: &Tensor, t: f64, eps: &Tensor) -> Result<(Tensor, f64)> {
        let (f, cots) = self.eval_with_vjps(x, t, &[eps])?;
        Ok((f, cots[0].dot(eps)))
    }

    /// Reverse pass through `(F, eps^T J eps)` with the given seeds.
    /// Required for training through the trace term.
    fn aug_vjp(
        &self,
        _x: &Tensor,
        _t: f64,
        _eps: &Tensor,
        _cot_f: &Tensor,
        _cot_trace: f64,
        _grads: Option<&mut ParamStore>,
    ) -> Result<Tensor> {
        Err(CgError::Config(
            "field does not support differentiating the trace estimate".into(),
        ))
    }

    /// Zero-filled gradient accumulator matching the field's parameters.
    fn zero_grads(&self) -> ParamStore {
        ParamStore::new()
    }
}

/// Linear test field: row-wise `dx/dt = x . A^T`, i.e. `dx = A x` in
/// column convention. Used by solver tests and the self-test battery.
#[derive(Debug, Clone)]
pub struct LinearField {
    n_rows: usize,
    a: Tensor,
}

impl LinearField {
    pub fn new(n_rows: usize, a: Tensor) -> Self {
        assert_eq!(a.rows(), a.cols(), "square system matrix");
        Self { n_rows, a }
    }

    pub fn matrix(&self) -> &Tensor {
        &self.a
    }
}

impl OdeField for LinearField {
    fn state_shape(&self) -> (usize, usize) {
        (self.n_rows, self.a.rows())
    }

    fn eval(&self, x: &Tensor, _t: f64) -> Result<Tensor> {
        Ok(x.matmul_nt(&self.a))
    }

    fn eval_with_vjps(
        &self,
        x: &Tensor,
        t: f64,
        cots: &[&Tensor],
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let f = self.eval(x, t)?;
        Ok((f, cots.iter().map(|c| c.matmul(&self.a)).collect()))
    }

    fn vjp(
        &self,
        _x: &Tensor,
        _t: f64,
        cot: &Tensor,
        _grads: Option<&mut ParamStore>,
    ) -> Result<Tensor> {
        Ok(cot.matmul(&self.a))
    }

    fn trace_exact(&self, _x: &Tensor, _t: f64) -> Result<f64> {
        let tr: f64 = (0..self.a.rows()).map(|i| self.a.at(i, i)).sum();
        Ok(self.n_rows as f64 * tr)
    }

    fn aug_vjp(
        &self,
        _x: &Tensor,
        _t: f64,
        _eps: &Tensor,
        cot_f: &Tensor,
        _cot_trace: f64,
        _grads: Option<&mut ParamStore>,
    ) -> Result<Tensor> {
        // The quadratic form of a linear field does not depend on the state.
        Ok(cot_f.matmul(&self.a))
    }
}

/// Constant-shift test field `F(X) = X + C` (identity Jacobian).
#[derive(Debug, Clone)]
pub struct ShiftField {
    pub offset: Tensor,
}

impl OdeField for ShiftField {
    fn state_shape(&self) -> (usize, usize) {
        self.offset.shape()
    }

    fn eval(&self, x: &Tensor, _t: f64) -> Result<Tensor> {
        Ok(x.add(&self.offset))
    }

    fn eval_with_vjps(
        &self,
        x: &Tensor,
        t: f64,
        cots: &[&Tensor],
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let f = self.eval(x, t)?;
        Ok((f, cots.iter().map(|c| (*c).clone()).collect()))
    }

    fn vjp(
        &self,
        _x: &Tensor,
        _t: f64,
        cot: &Tensor,
        _grads: Option<&mut ParamStore>,
    ) -> Result<Tensor> {
        Ok(cot.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
pub enum SolverMethod {
    Rk4 {
        steps: usize,
    },
    Dopri5 {
        rtol: f64,
        atol: f64,
        #[serde(default = "default_max_evals")]
        max_evals: usize,
    },
}

fn default_max_evals() -> usize {
    100_000
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    #[serde(flatten)]
    pub method: SolverMethod,
    #[serde(default)]
    pub t0: f64,
    #[serde(default = "default_t1")]
    pub t1: f64,
}

fn default_t1() -> f64 {
    1.0
}

impl SolverConfig {
    pub fn rk4(steps: usize) -> Self {
        Self { method: SolverMethod::Rk4 { steps }, t0: 0.0, t1: 1.0 }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self {
            method: SolverMethod::Dopri5 { rtol, atol, max_evals: default_max_evals() },
            t0: 0.0,
            t1: 1.0,
        }
    }

    /// Evaluation/sampling default.
    pub fn standard() -> Self {
        Self::dopri5(1e-5, 1e-7)
    }

    pub fn with_span(mut self, t0: f64, t1: f64) -> Self {
        self.t0 = t0;
        self.t1 = t1;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.t0 == self.t1 {
            return Err(CgError::Config("solver span is empty (t0 == t1)".into()));
        }
        match self.method {
            SolverMethod::Rk4 { steps } if steps == 0 => {
                Err(CgError::Config("rk4 needs at least one step".into()))
            }
            SolverMethod::Dopri5 { rtol, atol, .. } if rtol <= 0.0 || atol <= 0.0 => {
                Err(CgError::Config("dopri5 tolerances must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// The same method over the opposite time span.
    pub fn reversed(&self) -> Self {
        Self { method: self.method, t0: self.t1, t1: self.t0 }
    }
}

/// Solver state: anything that behaves like a flat vector and can score
/// its own error against tolerances.
pub trait OdeVec: Clone {
    fn axpy(&mut self, a: f64, other: &Self);

    /// Accumulates squared scaled error components into `acc`.
    fn wrms_accum(&self, y_new: &Self, err: &Self, atol: f64, rtol: f64, acc: &mut (f64, usize));
}

impl OdeVec for Tensor {
    fn axpy(&mut self, a: f64, other: &Self) {
        Tensor::axpy(self, a, other);
    }

    fn wrms_accum(&self, y_new: &Self, err: &Self, atol: f64, rtol: f64, acc: &mut (f64, usize)) {
        for i in 0..self.len() {
            let scale = atol + rtol * self.data()[i].abs().max(y_new.data()[i].abs());
            let e = err.data()[i] / scale;
            acc.0 += e * e;
            acc.1 += 1;
        }
    }
}

/// Classic fixed-step fourth-order Runge-Kutta. Handles either time
/// direction.
pub fn rk4<S, F>(mut f: F, y0: S, t0: f64, t1: f64, steps: usize) -> Result<S>
where
    S: OdeVec,
    F: FnMut(&S, f64) -> Result<S>,
{
    let h = (t1 - t0) / steps as f64;
    let mut y = y0;
    let mut t = t0;
    for _ in 0..steps {
        let k1 = f(&y, t)?;
        let mut y2 = y.clone();
        y2.axpy(h / 2.0, &k1);
        let k2 = f(&y2, t + h / 2.0)?;
        let mut y3 = y.clone();
        y3.axpy(h / 2.0, &k2);
        let k3 = f(&y3, t + h / 2.0)?;
        let mut y4 = y.clone();
        y4.axpy(h, &k3);
        let k4 = f(&y4, t + h)?;
        y.axpy(h / 6.0, &k1);
        y.axpy(h / 3.0, &k2);
        y.axpy(h / 3.0, &k3);
        y.axpy(h / 6.0, &k4);
        t += h;
    }
    Ok(y)
}

// Dormand-Prince 5(4) coefficients.
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Adaptive Dormand-Prince 5(4) with PI step control (FSAL). Errors when
/// the evaluation budget is exhausted or the step size underflows.
pub fn dopri5<S, F>(
    mut f: F,
    y0: S,
    t0: f64,
    t1: f64,
    rtol: f64,
    atol: f64,
    max_evals: usize,
) -> Result<S>
where
    S: OdeVec,
    F: FnMut(&S, f64) -> Result<S>,
{
    const SAFE: f64 = 0.9;
    const BETA: f64 = 0.04;
    const EXPO1: f64 = 0.2 - BETA * 0.75;
    const FAC_SHRINK: f64 = 5.0; // max shrink factor per step
    const FAC_GROW: f64 = 0.1; // (inverse) max growth factor per step

    let span = t1 - t0;
    let posneg = span.signum();
    let mut t = t0;
    let mut y = y0;
    let mut h = 0.01 * span;
    let mut evals = 0usize;
    let mut facold = 1e-4f64;

    let budget = |evals: &mut usize, n: usize, t: f64| -> Result<()> {
        *evals += n;
        if *evals > max_evals {
            Err(CgError::SolverBudget { max_evals, t })
        } else {
            Ok(())
        }
    };

    budget(&mut evals, 1, t)?;
    let mut k1 = f(&y, t)?;

    loop {
        if (t - t1) * posneg >= 0.0 {
            return Ok(y);
        }
        if (t + h - t1) * posneg > 0.0 {
            h = t1 - t;
        }
        if h.abs() < 1e-14 * span.abs().max(1.0) {
            return Err(CgError::Solver(format!("step size underflow at t = {t}")));
        }

        let mut ks: Vec<S> = Vec::with_capacity(7);
        ks.push(k1.clone());
        budget(&mut evals, 6, t)?;
        for stage in 0..6 {
            let mut ys = y.clone();
            for (j, kj) in ks.iter().enumerate() {
                let a = A[stage][j];
                if a != 0.0 {
                    ys.axpy(h * a, kj);
                }
            }
            ks.push(f(&ys, t + C[stage] * h)?);
        }

        // 5th-order solution: stage 6 with the b-row of A.
        let mut y_new = y.clone();
        for (j, kj) in ks.iter().take(6).enumerate() {
            let b = A[5][j];
            if b != 0.0 {
                y_new.axpy(h * b, kj);
            }
        }
        // ks[6] is f at (t + h, y_new): the FSAL evaluation.
        let k7 = ks.pop().expect("stage 7");

        let mut err_vec = {
            let mut e = y.clone();
            e.axpy(-1.0, &y); // zero of the right structure
            e
        };
        for (j, kj) in ks.iter().enumerate() {
            if E[j] != 0.0 {
                err_vec.axpy(h * E[j], kj);
            }
        }
        err_vec.axpy(h * E[6], &k7);

        let mut acc = (0.0, 0usize);
        y.wrms_accum(&y_new, &err_vec, atol, rtol, &mut acc);
        let err = (acc.0 / acc.1.max(1) as f64).sqrt();

        if !err.is_finite() {
            h *= 0.2;
            continue;
        }

        let fac11 = err.powf(EXPO1);
        if err <= 1.0 {
            let fac = (fac11 / facold.powf(BETA) / SAFE).clamp(FAC_GROW, FAC_SHRINK);
            facold = err.max(1e-4);
            t += h;
            y = y_new;
            k1 = k7;
            h /= fac;
        } else {
            let fac = (fac11 / SAFE).min(FAC_SHRINK);
            h /= fac;
        }
    }
}

fn solve_vec<S, F>(cfg: &SolverConfig, f: F, y0: S) -> Result<S>
where
    S: OdeVec,
    F: FnMut(&S, f64) -> Result<S>,
{
    cfg.validate()?;
    match cfg.method {
        SolverMethod::Rk4 { steps } => rk4(f, y0, cfg.t0, cfg.t1, steps),
        SolverMethod::Dopri5 { rtol, atol, max_evals } => {
            dopri5(f, y0, cfg.t0, cfg.t1, rtol, atol, max_evals)
        }
    }
}

/// Integrates the field from `cfg.t0` to `cfg.t1`.
pub fn integrate(field: &dyn OdeField, x0: &Tensor, cfg: &SolverConfig) -> Result<Tensor> {
    solve_vec(cfg, |x: &Tensor, t| field.eval(x, t), x0.clone())
}

/// Integrates the same field from `t1` back to `t0`.
pub fn reverse_integrate(field: &dyn OdeField, x1: &Tensor, cfg: &SolverConfig) -> Result<Tensor> {
    integrate(field, x1, &cfg.reversed())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Rademacher,
    Gaussian,
}

/// The fixed noise vector of one stochastic-trace solve.
#[derive(Debug, Clone)]
pub struct NoiseVector {
    pub values: Tensor,
    pub kind: NoiseKind,
}

impl NoiseVector {
    pub fn rademacher<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        Self { values: Tensor::rademacher(rows, cols, rng), kind: NoiseKind::Rademacher }
    }

    pub fn gaussian<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        Self { values: Tensor::randn(rows, cols, 1.0, rng), kind: NoiseKind::Gaussian }
    }
}

/// How to accumulate the Jacobian-trace integral.
#[derive(Debug, Clone, Copy)]
pub enum TraceEstimator<'a> {
    /// Deterministic: one reverse pass per basis vector at every stage.
    Exact,
    /// One quadratic form per noise vector at every stage; the noise is
    /// fixed for the whole solve.
    Stochastic(&'a [NoiseVector]),
}

/// States plus the accumulated log-density change.
#[derive(Debug, Clone)]
pub struct AugmentedState {
    pub states: Tensor,
    pub delta_logp: f64,
}

#[derive(Clone)]
struct MultiAug {
    x: Tensor,
    deltas: Vec<f64>,
}

impl OdeVec for MultiAug {
    fn axpy(&mut self, a: f64, other: &Self) {
        self.x.axpy(a, &other.x);
        for (d, o) in self.deltas.iter_mut().zip(&other.deltas) {
            *d += a * o;
        }
    }

    fn wrms_accum(&self, y_new: &Self, err: &Self, atol: f64, rtol: f64, acc: &mut (f64, usize)) {
        self.x.wrms_accum(&y_new.x, &err.x, atol, rtol, acc);
        for i in 0..self.deltas.len() {
            let scale = atol + rtol * self.deltas[i].abs().max(y_new.deltas[i].abs());
            let e = err.deltas[i] / scale;
            acc.0 += e * e;
            acc.1 += 1;
        }
    }
}

/// Joint solve of states and one delta-log-density channel per noise
/// vector (a single channel in exact mode). The state trajectory is
/// shared by all channels.
pub fn integrate_logdet_channels(
    field: &dyn OdeField,
    x0: &Tensor,
    cfg: &SolverConfig,
    est: TraceEstimator<'_>,
) -> Result<(Tensor, Vec<f64>)> {
    let (n, m) = field.state_shape();
    let basis: Vec<Tensor>;
    let cots: Vec<&Tensor> = match est {
        TraceEstimator::Exact => {
            basis = (0..n * m)
                .map(|k| {
                    let mut e = Tensor::zeros(n, m);
                    e.data_mut()[k] = 1.0;
                    e
                })
                .collect();
            basis.iter().collect()
        }
        TraceEstimator::Stochastic(noises) => noises.iter().map(|nv| &nv.values).collect(),
    };
    let channels = match est {
        TraceEstimator::Exact => 1,
        TraceEstimator::Stochastic(noises) => noises.len(),
    };
    if channels == 0 {
        return Err(CgError::Config("no noise vectors supplied".into()));
    }

    let deriv = |s: &MultiAug, t: f64| -> Result<MultiAug> {
        let (f, rows) = field.eval_with_vjps(&s.x, t, &cots)?;
        let deltas = match est {
            TraceEstimator::Exact => {
                vec![-rows.iter().enumerate().map(|(k, r)| r.data()[k]).sum::<f64>()]
            }
            TraceEstimator::Stochastic(_) => rows
                .iter()
                .zip(&cots)
                .map(|(r, eps)| -r.dot(eps))
                .collect(),
        };
        Ok(MultiAug { x: f, deltas })
    };

    let y0 = MultiAug { x: x0.clone(), deltas: vec![0.0; channels] };
    let out = solve_vec(cfg, deriv, y0)?;
    Ok((out.x, out.deltas))
}

/// Joint solve returning a single delta (the channel mean when several
/// noise vectors are supplied).
pub fn integrate_with_logdet(
    field: &dyn OdeField,
    x0: &Tensor,
    cfg: &SolverConfig,
    est: TraceEstimator<'_>,
) -> Result<AugmentedState> {
    let (states, deltas) = integrate_logdet_channels(field, x0, cfg, est)?;
    let delta_logp = deltas.iter().sum::<f64>() / deltas.len() as f64;
    if !delta_logp.is_finite() {
        return Err(CgError::NonFinite { context: "delta_logp".into() });
    }
    Ok(AugmentedState { states, delta_logp })
}

#[derive(Clone)]
struct AdjointState {
    x: Tensor,
    a: Tensor,
    g: ParamStore,
}

impl OdeVec for AdjointState {
    fn axpy(&mut self, a: f64, other: &Self) {
        self.x.axpy(a, &other.x);
        self.a.axpy(a, &other.a);
        self.g.axpy(a, &other.g);
    }

    fn wrms_accum(&self, y_new: &Self, err: &Self, atol: f64, rtol: f64, acc: &mut (f64, usize)) {
        // Parameter accumulators ride along without steering step size.
        self.x.wrms_accum(&y_new.x, &err.x, atol, rtol, acc);
        self.a.wrms_accum(&y_new.a, &err.a, atol, rtol, acc);
    }
}

/// Continuous adjoint for a loss on the terminal state: integrates the
/// state forward, then solves the coupled backward system
/// (state replay, adjoint, parameter accumulator) without storing the
/// forward trajectory. Returns the loss cotangent at `t0` and the
/// parameter gradients.
pub fn adjoint_grad(
    field: &dyn OdeField,
    x0: &Tensor,
    cfg: &SolverConfig,
    loss_cot_t1: &Tensor,
) -> Result<(Tensor, ParamStore)> {
    let x1 = integrate(field, x0, cfg)?;
    let deriv = |s: &AdjointState, t: f64| -> Result<AdjointState> {
        let mut grads = field.zero_grads();
        let f = field.eval(&s.x, t)?;
        let a_dot = field.vjp(&s.x, t, &s.a, Some(&mut grads))?;
        grads.scale_assign(-1.0);
        Ok(AdjointState { x: f, a: a_dot.scale(-1.0), g: grads })
    };
    let y1 = AdjointState {
        x: x1,
        a: loss_cot_t1.clone(),
        g: field.zero_grads(),
    };
    let out = solve_vec(&cfg.reversed(), deriv, y1)?;
    Ok((out.a, out.g))
}

/// Forward record of an unrolled fixed-step RK4 solve of the augmented
/// system: per-step initial states are retained so the backward pass can
/// recompute stages instead of storing them.
pub struct UnrolledSolve {
    xs: Vec<Tensor>,
    /// First three stage derivatives of every step; the backward pass
    /// rebuilds stage inputs from these without re-evaluating the field.
    stage_ks: Vec<[Tensor; 3]>,
    pub delta: f64,
    t0: f64,
    h: f64,
    steps: usize,
    eps: Option<Tensor>,
}

impl UnrolledSolve {
    pub fn x1(&self) -> &Tensor {
        self.xs.last().expect("at least the initial state")
    }
}

/// RK4 forward pass of (states, delta) with an optional fixed-noise trace
/// channel. With `eps = None` only the states are integrated.
pub fn rk4_unrolled_forward(
    field: &dyn OdeField,
    x0: &Tensor,
    t0: f64,
    t1: f64,
    steps: usize,
    eps: Option<&Tensor>,
) -> Result<UnrolledSolve> {
    if steps == 0 {
        return Err(CgError::Config("rk4 needs at least one step".into()));
    }
    let h = (t1 - t0) / steps as f64;
    let mut xs = Vec::with_capacity(steps + 1);
    xs.push(x0.clone());
    let mut stage_ks = Vec::with_capacity(steps);
    let mut delta = 0.0;
    let mut t = t0;
    let stage = |x: &Tensor, t: f64| -> Result<(Tensor, f64)> {
        match eps {
            Some(e) => field.aug_eval(x, t, e),
            None => Ok((field.eval(x, t)?, 0.0)),
        }
    };
    for _ in 0..steps {
        let x = xs.last().expect("state");
        let (k1, l1) = stage(x, t)?;
        let mut y2 = x.clone();
        y2.axpy(h / 2.0, &k1);
        let (k2, l2) = stage(&y2, t + h / 2.0)?;
        let mut y3 = x.clone();
        y3.axpy(h / 2.0, &k2);
        let (k3, l3) = stage(&y3, t + h / 2.0)?;
        let mut y4 = x.clone();
        y4.axpy(h, &k3);
        let (k4, l4) = stage(&y4, t + h)?;

        let mut x_next = x.clone();
        x_next.axpy(h / 6.0, &k1);
        x_next.axpy(h / 3.0, &k2);
        x_next.axpy(h / 3.0, &k3);
        x_next.axpy(h / 6.0, &k4);
        delta -= h / 6.0 * (l1 + 2.0 * l2 + 2.0 * l3 + l4);
        xs.push(x_next);
        stage_ks.push([k1, k2, k3]);
        t += h;
    }
    Ok(UnrolledSolve { xs, stage_ks, delta, t0, h, steps, eps: eps.cloned() })
}

/// Reverse pass through the unrolled solve: exact gradients of the
/// discrete objective. `cot_x1` seeds the terminal states, `cot_delta`
/// seeds the accumulated delta. Returns the cotangent at the initial
/// states; parameter gradients accumulate into `grads`.
pub fn rk4_unrolled_backward(
    field: &dyn OdeField,
    solve: &UnrolledSolve,
    cot_x1: &Tensor,
    cot_delta: f64,
    grads: &mut ParamStore,
) -> Result<Tensor> {
    let h = solve.h;
    let mut xbar = cot_x1.clone();
    let eps = solve.eps.as_ref();

    let stage_vjp = |x: &Tensor,
                     t: f64,
                     cot_f: &Tensor,
                     cot_trace: f64,
                     grads: &mut ParamStore|
     -> Result<Tensor> {
        match eps {
            Some(e) => field.aug_vjp(x, t, e, cot_f, cot_trace, Some(grads)),
            None => field.vjp(x, t, cot_f, Some(grads)),
        }
    };

    for step in (0..solve.steps).rev() {
        let x = &solve.xs[step];
        let t = solve.t0 + step as f64 * h;

        // Stage inputs from the recorded stage derivatives.
        let [k1, k2, k3] = &solve.stage_ks[step];
        let mut y2 = x.clone();
        y2.axpy(h / 2.0, k1);
        let mut y3 = x.clone();
        y3.axpy(h / 2.0, k2);
        let mut y4 = x.clone();
        y4.axpy(h, k3);

        // delta' = delta - h/6 (l1 + 2 l2 + 2 l3 + l4), so each stage's
        // trace output carries -h*w_i*cot_delta.
        let (w1, w2, w3, w4) = (h / 6.0, h / 3.0, h / 3.0, h / 6.0);

        let k4bar = xbar.scale(w4);
        let y4bar = stage_vjp(&y4, t + h, &k4bar, -w4 * cot_delta, grads)?;

        let mut k3bar = xbar.scale(w3);
        k3bar.axpy(h, &y4bar);
        let y3bar = stage_vjp(&y3, t + h / 2.0, &k3bar, -w3 * cot_delta, grads)?;

        let mut k2bar = xbar.scale(w2);
        k2bar.axpy(h / 2.0, &y3bar);
        let y2bar = stage_vjp(&y2, t + h / 2.0, &k2bar, -w2 * cot_delta, grads)?;

        let mut k1bar = xbar.scale(w1);
        k1bar.axpy(h / 2.0, &y2bar);
        let y1bar = stage_vjp(x, t, &k1bar, -w1 * cot_delta, grads)?;

        xbar.add_assign(&y4bar);
        xbar.add_assign(&y3bar);
        xbar.add_assign(&y2bar);
        xbar.add_assign(&y1bar);
    }
    Ok(xbar)
}
