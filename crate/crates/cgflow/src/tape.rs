//! Recorded computations over [`Tensor`] values with reverse-mode
//! differentiation.
//!
//! A tape is a fixed program built from a closed set of primitives, each
//! with a hand-written vector-Jacobian rule. The structure is recorded
//! once (per graph topology, in the message-passing case) and then
//! evaluated many times with fresh inputs. Evaluation produces a
//! [`TapeEval`] holding every intermediate value; the reverse pass walks
//! the same program backwards seeding cotangents at one or more values.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{CgError, Result};
use crate::params::ParamStore;
use crate::tensor::{fast_tanh, Tensor};

pub type ValueId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Node {
    Input {
        slot: usize,
    },
    Param {
        name: String,
    },
    Const {
        value: Tensor,
    },
    /// x . w + b with b broadcast over rows.
    Affine {
        x: ValueId,
        w: ValueId,
        b: ValueId,
    },
    Tanh {
        x: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Sub {
        a: ValueId,
        b: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    Scale {
        x: ValueId,
        factor: f64,
    },
    /// Row-wise concatenation: row r of the output is the rows r of all
    /// parts laid side by side.
    ConcatCols {
        parts: Vec<ValueId>,
    },
    /// Row j of the output is row rows[j] of x.
    GatherRows {
        x: ValueId,
        rows: Vec<usize>,
    },
    /// Row j of x is reduced into output row targets[j]; rows receiving
    /// nothing stay zero.
    ScatterRows {
        x: ValueId,
        targets: Vec<usize>,
        out_rows: usize,
        reduce: Reduce,
    },
    /// 1x1 value replicated to rows x cols.
    BroadcastScalar {
        x: ValueId,
        rows: usize,
        cols: usize,
    },
    /// Sum of all entries as a 1x1 value.
    SumAll {
        x: ValueId,
    },
}

impl Node {
    fn name(&self) -> &'static str {
        match self {
            Node::Input { .. } => "input",
            Node::Param { .. } => "param",
            Node::Const { .. } => "const",
            Node::Affine { .. } => "affine",
            Node::Tanh { .. } => "tanh",
            Node::Add { .. } => "add",
            Node::Sub { .. } => "sub",
            Node::Mul { .. } => "mul",
            Node::Scale { .. } => "scale",
            Node::ConcatCols { .. } => "concat_cols",
            Node::GatherRows { .. } => "gather_rows",
            Node::ScatterRows { .. } => "scatter_rows",
            Node::BroadcastScalar { .. } => "broadcast_scalar",
            Node::SumAll { .. } => "sum_all",
        }
    }
}

/// A recorded computation. Immutable once built; see module docs.
#[derive(Debug, Clone, Default)]
pub struct OpTape {
    nodes: Vec<Node>,
    n_inputs: usize,
    output: Option<ValueId>,
}

/// All intermediate values from one forward evaluation of a tape.
/// Reusable across evaluations: `forward_into` overwrites in place.
#[derive(Debug, Clone, Default)]
pub struct TapeEval {
    values: Vec<Tensor>,
}

/// Reusable cotangent buffers for reverse passes.
#[derive(Debug, Clone, Default)]
pub struct VjpScratch {
    cots: Vec<Tensor>,
    active: Vec<bool>,
}

impl OpTape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, node: Node) -> ValueId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    /// Declares the next input slot. Slots are numbered in declaration order
    /// and must be fed positionally to [`OpTape::forward`].
    pub fn input(&mut self) -> ValueId {
        let slot = self.n_inputs;
        self.n_inputs += 1;
        self.push(Node::Input { slot })
    }

    pub fn param(&mut self, name: &str) -> ValueId {
        self.push(Node::Param { name: name.to_string() })
    }

    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.push(Node::Const { value })
    }

    pub fn affine(&mut self, x: ValueId, w: ValueId, b: ValueId) -> ValueId {
        self.push(Node::Affine { x, w, b })
    }

    pub fn tanh(&mut self, x: ValueId) -> ValueId {
        self.push(Node::Tanh { x })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.push(Node::Add { a, b })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.push(Node::Sub { a, b })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.push(Node::Mul { a, b })
    }

    pub fn scale(&mut self, x: ValueId, factor: f64) -> ValueId {
        self.push(Node::Scale { x, factor })
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> ValueId {
        self.push(Node::ConcatCols { parts: parts.to_vec() })
    }

    pub fn gather_rows(&mut self, x: ValueId, rows: Vec<usize>) -> ValueId {
        self.push(Node::GatherRows { x, rows })
    }

    pub fn scatter_rows(
        &mut self,
        x: ValueId,
        targets: Vec<usize>,
        out_rows: usize,
        reduce: Reduce,
    ) -> ValueId {
        self.push(Node::ScatterRows { x, targets, out_rows, reduce })
    }

    pub fn broadcast_scalar(&mut self, x: ValueId, rows: usize, cols: usize) -> ValueId {
        self.push(Node::BroadcastScalar { x, rows, cols })
    }

    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        self.push(Node::SumAll { x })
    }

    pub fn set_output(&mut self, id: ValueId) {
        self.output = Some(id);
    }

    pub fn output_id(&self) -> Option<ValueId> {
        self.output
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn shape_err(&self, op_index: usize, detail: String) -> CgError {
        CgError::Shape {
            op_index,
            op_name: self.nodes[op_index].name(),
            detail,
        }
    }

    /// Evaluates the recorded program. Deterministic: identical inputs and
    /// parameters reproduce identical bits.
    pub fn forward(&self, inputs: &[&Tensor], params: &ParamStore) -> Result<TapeEval> {
        let mut eval = TapeEval::default();
        self.forward_into(inputs, params, &mut eval)?;
        Ok(eval)
    }

    /// Evaluates into reusable buffers: after the first call on a given
    /// `eval` no per-node allocation happens for fixed shapes.
    pub fn forward_into(
        &self,
        inputs: &[&Tensor],
        params: &ParamStore,
        eval: &mut TapeEval,
    ) -> Result<()> {
        if inputs.len() != self.n_inputs {
            return Err(CgError::Config(format!(
                "tape expects {} inputs, got {}",
                self.n_inputs,
                inputs.len()
            )));
        }
        if eval.values.len() != self.nodes.len() {
            eval.values = vec![Tensor::zeros(0, 0); self.nodes.len()];
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            let (before, rest) = eval.values.split_at_mut(idx);
            let out = &mut rest[0];
            match node {
                Node::Input { slot } => out.copy_from(inputs[*slot]),
                Node::Param { name } => {
                    let p = params
                        .get(name)
                        .ok_or_else(|| CgError::Config(format!("unknown parameter {name:?}")))?;
                    out.copy_from(p);
                }
                Node::Const { value } => out.copy_from(value),
                Node::Affine { x, w, b } => {
                    let (xv, wv, bv) = (&before[*x], &before[*w], &before[*b]);
                    if xv.cols() != wv.rows() || bv.shape() != (1, wv.cols()) {
                        return Err(self.shape_err(
                            idx,
                            format!(
                                "x {:?} . w {:?} + b {:?}",
                                xv.shape(),
                                wv.shape(),
                                bv.shape()
                            ),
                        ));
                    }
                    xv.matmul_into(wv, Some(bv), out);
                }
                Node::Tanh { x } => {
                    let xv = &before[*x];
                    out.ensure_shape(xv.rows(), xv.cols());
                    for (o, &v) in out.data_mut().iter_mut().zip(xv.data()) {
                        *o = fast_tanh(v);
                    }
                }
                Node::Add { a, b } | Node::Sub { a, b } | Node::Mul { a, b } => {
                    let (av, bv) = (&before[*a], &before[*b]);
                    if av.shape() != bv.shape() {
                        return Err(self.shape_err(
                            idx,
                            format!("{:?} vs {:?}", av.shape(), bv.shape()),
                        ));
                    }
                    out.ensure_shape(av.rows(), av.cols());
                    let o = out.data_mut();
                    match node {
                        Node::Add { .. } => {
                            for ((o, &x), &y) in o.iter_mut().zip(av.data()).zip(bv.data()) {
                                *o = x + y;
                            }
                        }
                        Node::Sub { .. } => {
                            for ((o, &x), &y) in o.iter_mut().zip(av.data()).zip(bv.data()) {
                                *o = x - y;
                            }
                        }
                        _ => {
                            for ((o, &x), &y) in o.iter_mut().zip(av.data()).zip(bv.data()) {
                                *o = x * y;
                            }
                        }
                    }
                }
                Node::Scale { x, factor } => {
                    let xv = &before[*x];
                    out.ensure_shape(xv.rows(), xv.cols());
                    for (o, &v) in out.data_mut().iter_mut().zip(xv.data()) {
                        *o = v * factor;
                    }
                }
                Node::ConcatCols { parts } => {
                    let rows = before[parts[0]].rows();
                    if parts.iter().any(|&p| before[p].rows() != rows) {
                        return Err(self.shape_err(
                            idx,
                            format!(
                                "row counts {:?}",
                                parts.iter().map(|&p| before[p].rows()).collect::<Vec<_>>()
                            ),
                        ));
                    }
                    let cols: usize = parts.iter().map(|&p| before[p].cols()).sum();
                    out.ensure_shape(rows, cols);
                    for r in 0..rows {
                        let mut start = 0;
                        let o_row = out.row_mut(r);
                        for &p in parts {
                            let src = before[p].row(r);
                            o_row[start..start + src.len()].copy_from_slice(src);
                            start += src.len();
                        }
                    }
                }
                Node::GatherRows { x, rows } => {
                    let xv = &before[*x];
                    if rows.iter().any(|&r| r >= xv.rows()) {
                        return Err(self.shape_err(
                            idx,
                            format!("gather index out of range for {:?}", xv.shape()),
                        ));
                    }
                    out.ensure_shape(rows.len(), xv.cols());
                    for (j, &r) in rows.iter().enumerate() {
                        out.row_mut(j).copy_from_slice(xv.row(r));
                    }
                }
                Node::ScatterRows { x, targets, out_rows, reduce } => {
                    let xv = &before[*x];
                    if xv.rows() != targets.len() {
                        return Err(self.shape_err(
                            idx,
                            format!("{} rows vs {} targets", xv.rows(), targets.len()),
                        ));
                    }
                    out.ensure_shape(*out_rows, xv.cols());
                    out.fill(0.0);
                    for (j, &t) in targets.iter().enumerate() {
                        let src = xv.row(j);
                        let dst = out.row_mut(t);
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    if *reduce == Reduce::Mean {
                        let counts = target_counts(targets, *out_rows);
                        for (r, &c) in counts.iter().enumerate() {
                            if c > 0 {
                                let inv = 1.0 / c as f64;
                                for v in out.row_mut(r) {
                                    *v *= inv;
                                }
                            }
                        }
                    }
                }
                Node::BroadcastScalar { x, rows, cols } => {
                    let xv = &before[*x];
                    if xv.shape() != (1, 1) {
                        return Err(self.shape_err(
                            idx,
                            format!("expected 1x1, got {:?}", xv.shape()),
                        ));
                    }
                    out.ensure_shape(*rows, *cols);
                    out.fill(xv.at(0, 0));
                }
                Node::SumAll { x } => {
                    let total = before[*x].sum();
                    out.ensure_shape(1, 1);
                    out.data_mut()[0] = total;
                }
            }
        }
        Ok(())
    }

    pub fn value<'a>(&self, eval: &'a TapeEval, id: ValueId) -> &'a Tensor {
        &eval.values[id]
    }

    /// The recorded output value of an evaluation.
    pub fn output<'a>(&self, eval: &'a TapeEval) -> &'a Tensor {
        &eval.values[self.output.expect("tape has no output set")]
    }

    /// Reverse pass seeded at arbitrary values. Returns one cotangent per
    /// input slot (zero tensors for inputs the seeds do not reach) and
    /// accumulates parameter cotangents into `grads` when provided.
    pub fn vjp_seeded(
        &self,
        eval: &TapeEval,
        seeds: &[(ValueId, &Tensor)],
        grads: Option<&mut ParamStore>,
    ) -> Result<Vec<Tensor>> {
        let mut scratch = VjpScratch::default();
        self.vjp_seeded_scratch(eval, seeds, grads, &mut scratch)
    }

    /// Reverse pass with reusable buffers.
    pub fn vjp_seeded_scratch(
        &self,
        eval: &TapeEval,
        seeds: &[(ValueId, &Tensor)],
        mut grads: Option<&mut ParamStore>,
        scratch: &mut VjpScratch,
    ) -> Result<Vec<Tensor>> {
        if eval.values.len() != self.nodes.len() {
            return Err(CgError::Config("evaluation does not match this tape".into()));
        }
        if scratch.cots.len() != self.nodes.len() {
            scratch.cots = vec![Tensor::zeros(0, 0); self.nodes.len()];
            scratch.active = vec![false; self.nodes.len()];
        } else {
            for a in &mut scratch.active {
                *a = false;
            }
        }

        // Activates a slot (zeroed at the value's shape) and returns it.
        fn slot<'s>(
            cots: &'s mut [Tensor],
            active: &mut [bool],
            eval: &TapeEval,
            id: ValueId,
        ) -> &'s mut Tensor {
            let t = &mut cots[id];
            if !active[id] {
                let shape = eval.values[id].shape();
                t.ensure_shape(shape.0, shape.1);
                t.fill(0.0);
                active[id] = true;
            }
            t
        }

        for (id, seed) in seeds {
            let shape = eval.values[*id].shape();
            if seed.shape() != shape {
                return Err(CgError::Config(format!(
                    "cotangent shape {:?} does not match value shape {:?}",
                    seed.shape(),
                    shape
                )));
            }
            slot(&mut scratch.cots, &mut scratch.active, eval, *id).add_assign(seed);
        }

        for idx in (0..self.nodes.len()).rev() {
            if !scratch.active[idx] {
                continue;
            }
            let (lower, upper) = scratch.cots.split_at_mut(idx);
            let g = &upper[0];
            let active = &mut scratch.active;
            match &self.nodes[idx] {
                Node::Input { .. } | Node::Const { .. } => {}
                Node::Param { name } => {
                    if let Some(store) = grads.as_deref_mut() {
                        store.accumulate(name, g);
                    }
                }
                Node::Affine { x, w, b } => {
                    let (xv, wv) = (&eval.values[*x], &eval.values[*w]);
                    g.matmul_nt_into(wv, slot(lower, active, eval, *x), true);
                    xv.matmul_tn_into(g, slot(lower, active, eval, *w), true);
                    let gb = slot(lower, active, eval, *b);
                    for r in 0..g.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                Node::Tanh { x } => {
                    let y = &eval.values[idx];
                    let gx = slot(lower, active, eval, *x);
                    for ((o, &gv), &yv) in
                        gx.data_mut().iter_mut().zip(g.data()).zip(y.data())
                    {
                        *o += gv * (1.0 - yv * yv);
                    }
                }
                Node::Add { a, b } => {
                    slot(lower, active, eval, *a).add_assign(g);
                    slot(lower, active, eval, *b).add_assign(g);
                }
                Node::Sub { a, b } => {
                    slot(lower, active, eval, *a).add_assign(g);
                    slot(lower, active, eval, *b).axpy(-1.0, g);
                }
                Node::Mul { a, b } => {
                    let (av, bv) = (&eval.values[*a], &eval.values[*b]);
                    {
                        let ga = slot(lower, active, eval, *a);
                        for ((o, &gv), &v) in
                            ga.data_mut().iter_mut().zip(g.data()).zip(bv.data())
                        {
                            *o += gv * v;
                        }
                    }
                    let gb = slot(lower, active, eval, *b);
                    for ((o, &gv), &v) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data())
                    {
                        *o += gv * v;
                    }
                }
                Node::Scale { x, factor } => {
                    slot(lower, active, eval, *x).axpy(*factor, g);
                }
                Node::ConcatCols { parts } => {
                    let mut start = 0;
                    for &p in parts {
                        let w = eval.values[p].cols();
                        let gp = slot(lower, active, eval, p);
                        for r in 0..g.rows() {
                            let src = &g.row(r)[start..start + w];
                            for (o, &v) in gp.row_mut(r).iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                        start += w;
                    }
                }
                Node::GatherRows { x, rows } => {
                    let gx = slot(lower, active, eval, *x);
                    for (j, &r) in rows.iter().enumerate() {
                        let src = g.row(j);
                        for (o, &v) in gx.row_mut(r).iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                Node::ScatterRows { x, targets, out_rows, reduce } => {
                    let counts = target_counts(targets, *out_rows);
                    let gx = slot(lower, active, eval, *x);
                    for (j, &t) in targets.iter().enumerate() {
                        let factor = match reduce {
                            Reduce::Sum => 1.0,
                            Reduce::Mean => 1.0 / counts[t] as f64,
                        };
                        let src = g.row(t);
                        for (o, &v) in gx.row_mut(j).iter_mut().zip(src) {
                            *o += factor * v;
                        }
                    }
                }
                Node::BroadcastScalar { x, .. } => {
                    let total = g.sum();
                    slot(lower, active, eval, *x).data_mut()[0] += total;
                }
                Node::SumAll { x } => {
                    let gv = g.at(0, 0);
                    let gx = slot(lower, active, eval, *x);
                    for o in gx.data_mut() {
                        *o += gv;
                    }
                }
            }
        }

        let mut input_cots = Vec::with_capacity(self.n_inputs);
        for slot_idx in 0..self.n_inputs {
            let node_id = self.input_node(slot_idx);
            if scratch.active[node_id] {
                input_cots.push(scratch.cots[node_id].clone());
            } else {
                let shape = eval.values[node_id].shape();
                input_cots.push(Tensor::zeros(shape.0, shape.1));
            }
        }
        Ok(input_cots)
    }

    /// Reverse pass seeded at the recorded output.
    pub fn vjp(
        &self,
        eval: &TapeEval,
        cotangent: &Tensor,
        grads: Option<&mut ParamStore>,
    ) -> Result<Vec<Tensor>> {
        let out = self.output.expect("tape has no output set");
        self.vjp_seeded(eval, &[(out, cotangent)], grads)
    }

    fn input_node(&self, slot: usize) -> ValueId {
        self.nodes
            .iter()
            .position(|n| matches!(n, Node::Input { slot: s } if *s == slot))
            .expect("declared input slot")
    }

    /// Names of all parameters the tape references, in first-use order.
    pub fn param_names(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for node in &self.nodes {
            if let Node::Param { name } = node {
                if !seen.contains(&name.as_str()) {
                    seen.push(name.as_str());
                }
            }
        }
        seen
    }
}

fn target_counts(targets: &[usize], out_rows: usize) -> Vec<usize> {
    let mut counts = vec![0usize; out_rows];
    for &t in targets {
        counts[t] += 1;
    }
    counts
}

/// One line of a gradient-check report.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_err))
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compares every input and parameter gradient against central finite
/// differences of `<v, output>` for a seeded random cotangent v.
pub fn grad_check(
    tape: &OpTape,
    inputs: &[&Tensor],
    params: &ParamStore,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let eval = tape.forward(inputs, params)?;
    let out_shape = tape.output(&eval).shape();
    let v = Tensor::randn(out_shape.0, out_shape.1, 1.0, &mut rng);

    let mut grads = referenced_params(tape, params).zeros_like();
    let analytic_inputs = tape.vjp(&eval, &v, Some(&mut grads))?;

    let phi = |ins: &[&Tensor], ps: &ParamStore| -> Result<f64> {
        let e = tape.forward(ins, ps)?;
        Ok(tape.output(&e).dot(&v))
    };

    let mut entries = Vec::new();

    for (slot, analytic) in analytic_inputs.iter().enumerate() {
        let mut worst = 0.0f64;
        let base = inputs[slot].clone();
        for i in 0..base.len() {
            let h = 1e-5 * base.data()[i].abs().max(1.0);
            let mut plus = base.clone();
            plus.data_mut()[i] += h;
            let mut minus = base.clone();
            minus.data_mut()[i] -= h;
            let mut ins_p: Vec<&Tensor> = inputs.to_vec();
            ins_p[slot] = &plus;
            let mut ins_m: Vec<&Tensor> = inputs.to_vec();
            ins_m[slot] = &minus;
            let fd = (phi(&ins_p, params)? - phi(&ins_m, params)?) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[i], fd));
        }
        entries.push(GradCheckEntry { name: format!("input{slot}"), max_rel_err: worst });
    }

    for (name, analytic) in grads.iter() {
        let mut worst = 0.0f64;
        for i in 0..analytic.len() {
            let mut store = params.clone();
            let base = store.get(name).expect("param").data()[i];
            let h = 1e-5 * base.abs().max(1.0);
            store.get_mut(name).expect("param").data_mut()[i] = base + h;
            let up = phi(inputs, &store)?;
            store.get_mut(name).expect("param").data_mut()[i] = base - h;
            let down = phi(inputs, &store)?;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[i], fd));
        }
        entries.push(GradCheckEntry { name: name.to_string(), max_rel_err: worst });
    }

    Ok(GradCheckReport { entries, tolerance })
}

/// The sub-store of parameters a tape actually references.
fn referenced_params(tape: &OpTape, params: &ParamStore) -> ParamStore {
    let mut store = ParamStore::new();
    for name in tape.param_names() {
        if let Some(t) = params.get(name) {
            store.insert(name, t.clone()).expect("unique");
        }
    }
    store
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn affine_tape() -> (OpTape, ValueId) {
        let mut tape = OpTape::new();
        let x = tape.input();
        let w = tape.param("w");
        let b = tape.param("b");
        let y = tape.affine(x, w, b);
        tape.set_output(y);
        (tape, y)
    }

    #[test]
    fn affine_with_zero_weights_annihilates() {
        let (tape, _) = affine_tape();
        let mut params = ParamStore::new();
        params.insert("w", Tensor::zeros(3, 2)).unwrap();
        params.insert("b", Tensor::zeros(1, 2)).unwrap();
        let x = Tensor::from_rows(&[vec![1.5, -2.0, 0.25]]);
        let eval = tape.forward(&[&x], &params).unwrap();
        assert_eq!(tape.output(&eval).data(), &[0.0, 0.0]);
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let mut tape = OpTape::new();
        let x = tape.input();
        let y = tape.tanh(x);
        tape.set_output(y);
        let eval = tape
            .forward(&[&Tensor::zeros(2, 3)], &ParamStore::new())
            .unwrap();
        assert_eq!(tape.output(&eval).data(), &[0.0; 6]);
    }

    #[test]
    fn identity_plus_bias() {
        let (tape, _) = affine_tape();
        let mut params = ParamStore::new();
        params
            .insert("w", Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]))
            .unwrap();
        params.insert("b", Tensor::from_rows(&[vec![1.0, 1.0]])).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let eval = tape.forward(&[&x], &params).unwrap();
        assert_eq!(tape.output(&eval).data(), &[2.0, 3.0]);
    }

    #[test]
    fn identity_tape_vjp_passes_cotangent_through() {
        let mut tape = OpTape::new();
        let x = tape.input();
        tape.set_output(x);
        let xv = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let eval = tape.forward(&[&xv], &ParamStore::new()).unwrap();
        let v = Tensor::from_rows(&[vec![0.5, -1.0, 2.0]]);
        let cots = tape.vjp(&eval, &v, None).unwrap();
        assert_eq!(cots[0], v);
    }

    #[test]
    fn square_via_mul_has_derivative_two_x() {
        let mut tape = OpTape::new();
        let x = tape.input();
        let y = tape.mul(x, x);
        tape.set_output(y);
        let xv = Tensor::scalar(3.0);
        let eval = tape.forward(&[&xv], &ParamStore::new()).unwrap();
        let cots = tape.vjp(&eval, &Tensor::scalar(1.0), None).unwrap();
        assert_eq!(cots[0].at(0, 0), 6.0);
    }

    #[test]
    fn forward_is_pure() {
        let (tape, _) = affine_tape();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut params = ParamStore::new();
        params.insert("w", Tensor::randn(3, 2, 1.0, &mut rng)).unwrap();
        params.insert("b", Tensor::randn(1, 2, 1.0, &mut rng)).unwrap();
        let x = Tensor::randn(4, 3, 1.0, &mut rng);
        let a = tape.forward(&[&x], &params).unwrap();
        let b = tape.forward(&[&x], &params).unwrap();
        assert_eq!(tape.output(&a), tape.output(&b));
    }

    #[test]
    fn shape_mismatch_names_op_index() {
        let (tape, _) = affine_tape();
        let mut params = ParamStore::new();
        params.insert("w", Tensor::zeros(3, 2)).unwrap();
        params.insert("b", Tensor::zeros(1, 2)).unwrap();
        let bad = Tensor::zeros(1, 4);
        let err = tape.forward(&[&bad], &params).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("op 3") && msg.contains("affine"), "got: {msg}");
    }

    /// Three-layer tanh network exercised the way the dynamics module
    /// uses the tape.
    fn mlp_tape(widths: &[usize]) -> OpTape {
        let mut tape = OpTape::new();
        let mut cur = tape.input();
        for layer in 0..widths.len() - 1 {
            let w = tape.param(&format!("l{layer}.w"));
            let b = tape.param(&format!("l{layer}.b"));
            cur = tape.affine(cur, w, b);
            if layer + 1 < widths.len() - 1 {
                cur = tape.tanh(cur);
            }
        }
        tape.set_output(cur);
        tape
    }

    fn mlp_params(widths: &[usize], rng: &mut ChaCha12Rng) -> ParamStore {
        let mut params = ParamStore::new();
        for layer in 0..widths.len() - 1 {
            let std = 1.0 / (widths[layer] as f64).sqrt();
            params
                .insert(
                    &format!("l{layer}.w"),
                    Tensor::randn(widths[layer], widths[layer + 1], std, rng),
                )
                .unwrap();
            params
                .insert(&format!("l{layer}.b"), Tensor::randn(1, widths[layer + 1], 0.1, rng))
                .unwrap();
        }
        params
    }

    #[test]
    fn three_layer_tanh_network_vjp_matches_finite_differences() {
        let widths = [4, 8, 8, 3];
        let tape = mlp_tape(&widths);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let params = mlp_params(&widths, &mut rng);
        let x = Tensor::randn(2, 4, 1.0, &mut rng);
        let report = grad_check(&tape, &[&x], &params, 1e-4, 99).unwrap();
        assert!(report.passed(), "worst rel err {}", report.worst());
    }

    #[test]
    fn linear_map_grad_check_is_exact_to_rounding() {
        let (tape, _) = affine_tape();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut params = ParamStore::new();
        params.insert("w", Tensor::randn(3, 2, 1.0, &mut rng)).unwrap();
        params.insert("b", Tensor::randn(1, 2, 1.0, &mut rng)).unwrap();
        let x = Tensor::randn(2, 3, 1.0, &mut rng);
        let report = grad_check(&tape, &[&x], &params, 1e-8, 4).unwrap();
        assert!(report.passed(), "worst rel err {}", report.worst());
    }

    /// Every primitive op: vjp against a Jacobian assembled column by
    /// column from forward perturbations.
    #[test]
    fn primitive_vjps_match_perturbation_jacobians() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let builders: Vec<(&str, Box<dyn Fn(&mut OpTape, ValueId) -> ValueId>)> = vec![
            ("tanh", Box::new(|t, x| t.tanh(x))),
            ("scale", Box::new(|t, x| t.scale(x, -1.7))),
            ("mul_self", Box::new(|t, x| t.mul(x, x))),
            ("sum_all", Box::new(|t, x| t.sum_all(x))),
            (
                "gather",
                Box::new(|t, x| t.gather_rows(x, vec![2, 0, 0, 1])),
            ),
            (
                "scatter_sum",
                Box::new(|t, x| t.scatter_rows(x, vec![1, 1, 0], 2, Reduce::Sum)),
            ),
            (
                "scatter_mean",
                Box::new(|t, x| t.scatter_rows(x, vec![1, 1, 0], 2, Reduce::Mean)),
            ),
            (
                "concat_with_self",
                Box::new(|t, x| {
                    let y = t.tanh(x);
                    t.concat_cols(&[x, y])
                }),
            ),
        ];
        for (name, build) in builders {
            let mut tape = OpTape::new();
            let x = tape.input();
            let y = build(&mut tape, x);
            tape.set_output(y);

            let xv = Tensor::new(
                3,
                2,
                (0..6).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let params = ParamStore::new();
            let eval = tape.forward(&[&xv], &params).unwrap();
            let out = tape.output(&eval).clone();

            // Jacobian columns via central differences.
            let h = 1e-6;
            let mut jac = vec![vec![0.0; xv.len()]; out.len()];
            for i in 0..xv.len() {
                let mut plus = xv.clone();
                plus.data_mut()[i] += h;
                let mut minus = xv.clone();
                minus.data_mut()[i] -= h;
                let op = tape.forward(&[&plus], &params).unwrap();
                let om = tape.forward(&[&minus], &params).unwrap();
                for (r, j_row) in jac.iter_mut().enumerate() {
                    j_row[i] =
                        (tape.output(&op).data()[r] - tape.output(&om).data()[r]) / (2.0 * h);
                }
            }

            let v = Tensor::randn(out.rows(), out.cols(), 1.0, &mut rng);
            let cots = tape.vjp(&eval, &v, None).unwrap();
            for i in 0..xv.len() {
                let expected: f64 = (0..out.len()).map(|r| v.data()[r] * jac[r][i]).sum();
                let got = cots[0].data()[i];
                assert!(
                    rel_err(got, expected) < 1e-6,
                    "{name}: coord {i}: vjp {got} vs jacobian {expected}"
                );
            }
        }
    }

    #[test]
    fn vjp_is_linear_in_the_cotangent() {
        let widths = [3, 5, 2];
        let tape = mlp_tape(&widths);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let params = mlp_params(&widths, &mut rng);
        let x = Tensor::randn(2, 3, 1.0, &mut rng);
        let eval = tape.forward(&[&x], &params).unwrap();

        let u = Tensor::randn(2, 2, 1.0, &mut rng);
        let v = Tensor::randn(2, 2, 1.0, &mut rng);
        let (a, b) = (0.7, -1.3);

        let mut combo = u.scale(a);
        combo.axpy(b, &v);
        let lhs = tape.vjp(&eval, &combo, None).unwrap();
        let gu = tape.vjp(&eval, &u, None).unwrap();
        let gv = tape.vjp(&eval, &v, None).unwrap();
        let mut rhs = gu[0].scale(a);
        rhs.axpy(b, &gv[0]);
        assert!(lhs[0].max_abs_diff(&rhs) < 1e-12);
    }
}
