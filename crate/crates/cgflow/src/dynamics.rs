//! The parameterized vector field over graph variables.
//!
//! Per edge type there is one reusable two-layer message network taking
//! `concat(x_i, x_j, t)`; a unary network takes `concat(x_i, t)`. The
//! derivative of variable i is the unary term plus the aggregated
//! messages from its neighborhood. All pairs of a type share parameters,
//! which makes the field permutation-equivariant by construction.
//!
//! Two programs are recorded per graph topology:
//!
//! - the plain program computing `F(X, t)`;
//! - an augmented program that additionally propagates a tangent in a
//!   fixed direction `eps` through the same layers and emits
//!   `eps^T (dF/dX) eps` as a value on the tape, so that gradients of
//!   the trace estimate are ordinary first-order reverse passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CgError, Result};
use crate::graph::Neighborhoods;
use std::cell::RefCell;

use crate::params::ParamStore;
use crate::tape::{OpTape, Reduce, TapeEval, ValueId, VjpScratch};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregator {
    Sum,
    Mean,
}

impl Aggregator {
    fn reduce(self) -> Reduce {
        match self {
            Aggregator::Sum => Reduce::Sum,
            Aggregator::Mean => Reduce::Mean,
        }
    }
}

/// A two-layer fully connected network `in -> hidden -> out` with tanh
/// in between, addressed by parameter-name prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageNet {
    prefix: String,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
}

struct RecordedNet {
    out: ValueId,
    hidden_tanh: ValueId,
    w1: ValueId,
    w2: ValueId,
}

impl MessageNet {
    fn new(prefix: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self { prefix: prefix.to_string(), in_dim, hidden, out_dim }
    }

    fn names(&self) -> [String; 4] {
        [
            format!("{}.l1w", self.prefix),
            format!("{}.l1b", self.prefix),
            format!("{}.l2w", self.prefix),
            format!("{}.l2b", self.prefix),
        ]
    }

    /// Gaussian fan-in init; the output layer is scaled down so a fresh
    /// field is near zero and the flow starts near the identity.
    fn register<R: Rng>(&self, params: &mut ParamStore, rng: &mut R) -> Result<()> {
        let [w1, b1, w2, b2] = self.names();
        let std1 = 1.0 / (self.in_dim as f64).sqrt();
        let std2 = 0.01 / (self.hidden as f64).sqrt();
        params.insert(&w1, Tensor::randn(self.in_dim, self.hidden, std1, rng))?;
        params.insert(&b1, Tensor::zeros(1, self.hidden))?;
        params.insert(&w2, Tensor::randn(self.hidden, self.out_dim, std2, rng))?;
        params.insert(&b2, Tensor::zeros(1, self.out_dim))?;
        Ok(())
    }

    fn record(&self, tape: &mut OpTape, input: ValueId) -> RecordedNet {
        let [w1n, b1n, w2n, b2n] = self.names();
        let w1 = tape.param(&w1n);
        let b1 = tape.param(&b1n);
        let w2 = tape.param(&w2n);
        let b2 = tape.param(&b2n);
        let pre = tape.affine(input, w1, b1);
        let hidden_tanh = tape.tanh(pre);
        let out = tape.affine(hidden_tanh, w2, b2);
        RecordedNet { out, hidden_tanh, w1, w2 }
    }

    /// Propagates a tangent through an already recorded evaluation:
    /// d(out) = ((d_in . W1) * (1 - h^2)) . W2.
    fn record_tangent(
        &self,
        tape: &mut OpTape,
        recorded: &RecordedNet,
        d_input: ValueId,
        rows: usize,
    ) -> ValueId {
        let zero_b1 = tape.constant(Tensor::zeros(1, self.hidden));
        let zero_b2 = tape.constant(Tensor::zeros(1, self.out_dim));
        let ones = tape.constant(Tensor::filled(rows, self.hidden, 1.0));
        let d_pre = tape.affine(d_input, recorded.w1, zero_b1);
        let h_sq = tape.mul(recorded.hidden_tanh, recorded.hidden_tanh);
        let gate = tape.sub(ones, h_sq);
        let d_hidden = tape.mul(d_pre, gate);
        tape.affine(d_hidden, recorded.w2, zero_b2)
    }
}

/// The field: one message network per edge type, a unary network, and an
/// aggregator, for variables of dimension `var_dim`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynamicsField {
    var_dim: usize,
    hidden: usize,
    edge_type_count: usize,
    aggregator: Aggregator,
    unary: MessageNet,
    edges: Vec<MessageNet>,
}

impl DynamicsField {
    pub fn new(
        prefix: &str,
        var_dim: usize,
        hidden: usize,
        edge_type_count: usize,
        aggregator: Aggregator,
    ) -> Result<Self> {
        if var_dim == 0 || hidden == 0 || edge_type_count == 0 {
            return Err(CgError::Config(
                "field dimensions and edge type count must be positive".into(),
            ));
        }
        let unary = MessageNet::new(&format!("{prefix}.unary"), var_dim + 1, hidden, var_dim);
        let edges = (0..edge_type_count)
            .map(|t| {
                MessageNet::new(&format!("{prefix}.edge{t}"), 2 * var_dim + 1, hidden, var_dim)
            })
            .collect();
        Ok(Self { var_dim, hidden, edge_type_count, aggregator, unary, edges })
    }

    pub fn var_dim(&self) -> usize {
        self.var_dim
    }

    pub fn edge_type_count(&self) -> usize {
        self.edge_type_count
    }

    pub fn register_params<R: Rng>(&self, params: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.unary.register(params, rng)?;
        for e in &self.edges {
            e.register(params, rng)?;
        }
        Ok(())
    }

    /// Records the evaluation program for one graph topology.
    pub fn program(&self, nbrs: &Neighborhoods, with_trace: bool) -> Result<FieldProgram> {
        if nbrs.edge_type_count() > self.edge_type_count {
            return Err(CgError::Config(format!(
                "neighborhoods use {} edge types, field has {}",
                nbrs.edge_type_count(),
                self.edge_type_count
            )));
        }
        let n = nbrs.n_vars();
        let m = self.var_dim;

        // Directed edges grouped by type, receiver-major so per-row
        // accumulation order is stable under consistent permutations.
        let mut recv: Vec<Vec<usize>> = vec![Vec::new(); self.edge_type_count];
        let mut send: Vec<Vec<usize>> = vec![Vec::new(); self.edge_type_count];
        for i in 0..n {
            for &(j, t) in nbrs.of(i) {
                recv[t].push(i);
                send[t].push(j);
            }
        }

        let mut tape = OpTape::new();
        let x = tape.input();
        let t_scalar = tape.input();
        let eps = with_trace.then(|| tape.input());

        let t_col = tape.broadcast_scalar(t_scalar, n, 1);
        let u_in = tape.concat_cols(&[x, t_col]);
        let u_net = self.unary.record(&mut tape, u_in);
        let mut f = u_net.out;

        struct EdgeRecord {
            net_index: usize,
            recorded: RecordedNet,
            rows: usize,
        }
        let mut edge_records = Vec::new();

        for t in 0..self.edge_type_count {
            if recv[t].is_empty() {
                continue;
            }
            let e_rows = recv[t].len();
            let xi = tape.gather_rows(x, recv[t].clone());
            let xj = tape.gather_rows(x, send[t].clone());
            let t_edge = tape.broadcast_scalar(t_scalar, e_rows, 1);
            let e_in = tape.concat_cols(&[xi, xj, t_edge]);
            let recorded = self.edges[t].record(&mut tape, e_in);
            let agg = tape.scatter_rows(
                recorded.out,
                recv[t].clone(),
                n,
                self.aggregator.reduce(),
            );
            f = tape.add(f, agg);
            edge_records.push(EdgeRecord { net_index: t, recorded, rows: e_rows });
        }
        tape.set_output(f);

        let trace = if with_trace {
            let eps = eps.expect("trace input declared");
            let zero_col_n = tape.constant(Tensor::zeros(n, 1));
            let du_in = tape.concat_cols(&[eps, zero_col_n]);
            let mut df = self.unary.record_tangent(&mut tape, &u_net, du_in, n);
            for rec in &edge_records {
                let t = rec.net_index;
                let dxi = tape.gather_rows(eps, recv[t].clone());
                let dxj = tape.gather_rows(eps, send[t].clone());
                let zero_col_e = tape.constant(Tensor::zeros(rec.rows, 1));
                let de_in = tape.concat_cols(&[dxi, dxj, zero_col_e]);
                let dmsg =
                    self.edges[t].record_tangent(&mut tape, &rec.recorded, de_in, rec.rows);
                let dagg =
                    tape.scatter_rows(dmsg, recv[t].clone(), n, self.aggregator.reduce());
                df = tape.add(df, dagg);
            }
            let prod = tape.mul(eps, df);
            Some(tape.sum_all(prod))
        } else {
            None
        };

        let f_out = tape.output_id().expect("output");
        Ok(FieldProgram { tape, f_out, trace, n, m, ..Default::default() })
    }
}

/// A recorded field evaluation for one topology. Holds reusable
/// evaluation buffers, so a single program is single-threaded; build one
/// program per thread for concurrent solves.
#[derive(Debug, Clone, Default)]
pub struct FieldProgram {
    tape: OpTape,
    f_out: ValueId,
    trace: Option<ValueId>,
    n: usize,
    m: usize,
    eval_buf: RefCell<TapeEval>,
    vjp_buf: RefCell<VjpScratch>,
}

impl FieldProgram {
    pub fn state_shape(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    fn check_state(&self, x: &Tensor) -> Result<()> {
        if x.shape() != (self.n, self.m) {
            return Err(CgError::Config(format!(
                "state shape {:?}, program expects ({}, {})",
                x.shape(),
                self.n,
                self.m
            )));
        }
        Ok(())
    }

    pub fn eval(&self, x: &Tensor, t: f64, params: &ParamStore) -> Result<Tensor> {
        self.check_state(x)?;
        let t_val = Tensor::scalar(t);
        let mut eval = self.eval_buf.borrow_mut();
        self.tape.forward_into(&[x, &t_val], params, &mut eval)?;
        Ok(self.tape.output(&eval).clone())
    }

    /// One forward pass plus one reverse pass per cotangent; returns the
    /// field value and the state cotangents.
    pub fn eval_with_vjps(
        &self,
        x: &Tensor,
        t: f64,
        params: &ParamStore,
        cots: &[&Tensor],
    ) -> Result<(Tensor, Vec<Tensor>)> {
        self.check_state(x)?;
        let t_val = Tensor::scalar(t);
        let mut eval = self.eval_buf.borrow_mut();
        self.tape.forward_into(&[x, &t_val], params, &mut eval)?;
        let mut scratch = self.vjp_buf.borrow_mut();
        let mut out = Vec::with_capacity(cots.len());
        for cot in cots {
            let input_cots =
                self.tape
                    .vjp_seeded_scratch(&eval, &[(self.f_out, cot)], None, &mut scratch)?;
            out.push(input_cots.into_iter().next().expect("state cotangent"));
        }
        Ok((self.tape.output(&eval).clone(), out))
    }

    /// Reverse pass through one evaluation, with parameter gradients.
    pub fn vjp(
        &self,
        x: &Tensor,
        t: f64,
        params: &ParamStore,
        cot: &Tensor,
        grads: Option<&mut ParamStore>,
    ) -> Result<Tensor> {
        self.check_state(x)?;
        let t_val = Tensor::scalar(t);
        let mut eval = self.eval_buf.borrow_mut();
        self.tape.forward_into(&[x, &t_val], params, &mut eval)?;
        let mut scratch = self.vjp_buf.borrow_mut();
        let input_cots =
            self.tape
                .vjp_seeded_scratch(&eval, &[(self.f_out, cot)], grads, &mut scratch)?;
        Ok(input_cots.into_iter().next().expect("state cotangent"))
    }

    pub fn supports_trace(&self) -> bool {
        self.trace.is_some()
    }

    /// Field value and `eps^T J eps` from the augmented program.
    pub fn aug_eval(
        &self,
        x: &Tensor,
        t: f64,
        eps: &Tensor,
        params: &ParamStore,
    ) -> Result<(Tensor, f64)> {
        let trace_id = self.trace.ok_or_else(|| {
            CgError::Config("program was recorded without trace support".into())
        })?;
        self.check_state(x)?;
        let t_val = Tensor::scalar(t);
        let mut eval = self.eval_buf.borrow_mut();
        self.tape.forward_into(&[x, &t_val, eps], params, &mut eval)?;
        Ok((
            self.tape.output(&eval).clone(),
            self.tape.value(&eval, trace_id).at(0, 0),
        ))
    }

    /// Reverse pass through the augmented program with seeds on both the
    /// field value and the trace estimate.
    pub fn aug_vjp(
        &self,
        x: &Tensor,
        t: f64,
        eps: &Tensor,
        params: &ParamStore,
        cot_f: &Tensor,
        cot_trace: f64,
        grads: Option<&mut ParamStore>,
    ) -> Result<Tensor> {
        let trace_id = self.trace.ok_or_else(|| {
            CgError::Config("program was recorded without trace support".into())
        })?;
        self.check_state(x)?;
        let t_val = Tensor::scalar(t);
        let mut eval = self.eval_buf.borrow_mut();
        self.tape.forward_into(&[x, &t_val, eps], params, &mut eval)?;
        let trace_seed = Tensor::scalar(cot_trace);
        let mut scratch = self.vjp_buf.borrow_mut();
        let input_cots = self.tape.vjp_seeded_scratch(
            &eval,
            &[(self.f_out, cot_f), (trace_id, &trace_seed)],
            grads,
            &mut scratch,
        )?;
        Ok(input_cots.into_iter().next().expect("state cotangent"))
    }

    pub fn tape(&self) -> &OpTape {
        &self.tape
    }
}

/// A field bound to one topology and a parameter store: the concrete
/// ODE vector field the solvers integrate.
pub struct GraphOde<'a> {
    plain: FieldProgram,
    aug: Option<FieldProgram>,
    params: &'a ParamStore,
}

impl<'a> GraphOde<'a> {
    /// `with_trace_grad` additionally records the augmented program so
    /// the trace estimate itself is differentiable (needed for training).
    pub fn new(
        field: &DynamicsField,
        nbrs: &Neighborhoods,
        params: &'a ParamStore,
        with_trace_grad: bool,
    ) -> Result<Self> {
        Ok(Self {
            plain: field.program(nbrs, false)?,
            aug: if with_trace_grad { Some(field.program(nbrs, true)?) } else { None },
            params,
        })
    }
}

impl crate::odeint::OdeField for GraphOde<'_> {
    fn state_shape(&self) -> (usize, usize) {
        self.plain.state_shape()
    }

    fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.plain.eval(x, t, self.params)
    }

    fn eval_with_vjps(
        &self,
        x: &Tensor,
        t: f64,
        cots: &[&Tensor],
    ) -> Result<(Tensor, Vec<Tensor>)> {
        self.plain.eval_with_vjps(x, t, self.params, cots)
    }

    fn vjp(
        &self,
        x: &Tensor,
        t: f64,
        cot: &Tensor,
        grads: Option<&mut ParamStore>,
    ) -> Result<Tensor> {
        self.plain.vjp(x, t, self.params, cot, grads)
    }

    fn aug_eval(&self, x: &Tensor, t: f64, eps: &Tensor) -> Result<(Tensor, f64)> {
        match &self.aug {
            Some(program) => program.aug_eval(x, t, eps, self.params),
            None => {
                let (f, cots) = self.plain.eval_with_vjps(x, t, self.params, &[eps])?;
                Ok((f, cots[0].dot(eps)))
            }
        }
    }

    fn aug_vjp(
        &self,
        x: &Tensor,
        t: f64,
        eps: &Tensor,
        cot_f: &Tensor,
        cot_trace: f64,
        grads: Option<&mut ParamStore>,
    ) -> Result<Tensor> {
        let program = self.aug.as_ref().ok_or_else(|| {
            CgError::Config("GraphOde built without trace-gradient support".into())
        })?;
        program.aug_vjp(x, t, eps, self.params, cot_f, cot_trace, grads)
    }

    fn zero_grads(&self) -> ParamStore {
        self.params.zeros_like()
    }
}

/// Evaluates the field at `(X, t)` for the given topology. Row i is
/// `unary(x_i, t) + g({f_type(x_i, x_j, t)})`; variables with empty
/// neighborhoods receive only the unary term.
pub fn eval_field(
    field: &DynamicsField,
    params: &ParamStore,
    x: &Tensor,
    nbrs: &Neighborhoods,
    t: f64,
) -> Result<Tensor> {
    field.program(nbrs, false)?.eval(x, t, params)
}

/// Cotangent of the field with respect to states and parameters.
pub fn field_vjp(
    field: &DynamicsField,
    params: &ParamStore,
    x: &Tensor,
    nbrs: &Neighborhoods,
    t: f64,
    cot: &Tensor,
) -> Result<(Tensor, ParamStore)> {
    let mut grads = params.zeros_like();
    let x_cot = field.program(nbrs, false)?.vjp(x, t, params, cot, Some(&mut grads))?;
    Ok((x_cot, grads))
}
