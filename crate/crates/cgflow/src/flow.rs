//! The flow model: stacked blocks over a typed graph, an optional
//! factor-out schedule between blocks, a standard-normal base
//! distribution, and the log-probability / sampling / conditional
//! sampling API.
//!
//! Convention: data lives at `t1`, the base distribution at `t0`.
//! `blocks[0]` touches the data side first during density evaluation
//! (each block integrates its field from `t1` down to `t0`); sampling
//! runs the blocks in reverse order, each from `t0` to `t1`. At the
//! boundary after block `b` (density direction) the first half of the
//! feature coordinates is factored out and scored under the base
//! distribution immediately; sampling injects fresh base draws at the
//! matching boundaries.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dequant::DequantConfig;
use crate::dynamics::{Aggregator, DynamicsField, GraphOde};
use crate::error::{CgError, Result};
use crate::graph::Neighborhoods;
use crate::odeint::{
    integrate, integrate_logdet_channels, NoiseVector, OdeField, SolverConfig, TraceEstimator,
};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CGF1";
pub const CHECKPOINT_VERSION: u32 = 1;

const LN_2PI: f64 = 1.8378770664093453;

/// Standard-normal log-density summed over all entries.
pub fn std_normal_logpdf(x: &Tensor) -> f64 {
    x.data().iter().map(|v| -0.5 * (v * v + LN_2PI)).sum()
}

/// One flow block: a field and the solver it is integrated with.
#[derive(Debug, Clone)]
pub struct CgfBlock {
    pub field: DynamicsField,
    pub solver: SolverConfig,
}

/// Per-boundary factor-out flags (`true` halves the feature dimension).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiScaleSchedule {
    pub factor_out: Vec<bool>,
}

impl MultiScaleSchedule {
    pub fn none(blocks: usize) -> Self {
        Self { factor_out: vec![false; blocks.saturating_sub(1)] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Per-variable feature dimension on the data side.
    pub var_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub edge_types: usize,
    pub aggregator: Aggregator,
    /// Length `blocks - 1`; empty means no factor-out anywhere.
    #[serde(default)]
    pub factor_out: Vec<bool>,
    #[serde(default)]
    pub dequant: Option<DequantConfig>,
    pub init_seed: u64,
    /// Evaluation/sampling solver applied to every block.
    pub solver: SolverConfig,
}

impl ModelConfig {
    /// The graph-generation default: two blocks of hidden width 32 over
    /// scalar edge-indicator variables, variational dequantization.
    pub fn graph_generation(init_seed: u64) -> Self {
        Self {
            var_dim: 1,
            hidden: 32,
            blocks: 2,
            edge_types: 1,
            aggregator: Aggregator::Sum,
            factor_out: Vec::new(),
            dequant: Some(DequantConfig::variational()),
            init_seed,
            solver: SolverConfig::standard(),
        }
    }

    fn normalized_factor_out(&self) -> Result<Vec<bool>> {
        if self.factor_out.is_empty() {
            return Ok(vec![false; self.blocks.saturating_sub(1)]);
        }
        if self.factor_out.len() != self.blocks - 1 {
            return Err(CgError::Config(format!(
                "factor_out has {} entries for {} blocks",
                self.factor_out.len(),
                self.blocks
            )));
        }
        Ok(self.factor_out.clone())
    }
}

/// How log-densities accumulate the Jacobian-trace integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceMode {
    Exact,
    /// Mean over freshly drawn Rademacher vectors.
    Stochastic { samples: usize },
    /// Exact when the block state has at most 64 entries, otherwise 16
    /// stochastic samples.
    Auto,
}

impl TraceMode {
    fn resolve(self, state_entries: usize) -> TraceMode {
        match self {
            TraceMode::Auto => {
                if state_entries <= 64 {
                    TraceMode::Exact
                } else {
                    TraceMode::Stochastic { samples: 16 }
                }
            }
            other => other,
        }
    }
}

/// A point in the base distribution, split the way the schedule splits
/// dimensions: one piece per factored boundary plus the terminal block
/// state.
#[derive(Debug, Clone)]
pub struct BasePoint {
    pub pieces: Vec<Option<Tensor>>,
    pub terminal: Tensor,
}

#[derive(Debug, Clone)]
pub struct FlowModel {
    config: ModelConfig,
    factor_out: Vec<bool>,
    blocks: Vec<CgfBlock>,
    params: ParamStore,
}

impl FlowModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.blocks == 0 {
            return Err(CgError::Config("model needs at least one block".into()));
        }
        let factor_out = config.normalized_factor_out()?;
        let dims = block_dims(config.var_dim, &factor_out)?;

        let mut params = ParamStore::new();
        let mut rng =
            <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(config.init_seed);
        let mut blocks = Vec::with_capacity(config.blocks);
        for (b, &dim) in dims.iter().enumerate() {
            let field = DynamicsField::new(
                &format!("b{b}"),
                dim,
                config.hidden,
                config.edge_types,
                config.aggregator,
            )?;
            field.register_params(&mut params, &mut rng)?;
            blocks.push(CgfBlock { field, solver: config.solver });
        }
        if let Some(dq) = &config.dequant {
            dq.register_params(&mut params)?;
        }
        Ok(Self { config, factor_out, blocks, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[CgfBlock] {
        &self.blocks
    }

    pub fn factor_out(&self) -> &[bool] {
        &self.factor_out
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.total_len()
    }

    /// Feature dimension entering each block (data side first).
    pub fn block_dims(&self) -> Vec<usize> {
        block_dims(self.config.var_dim, &self.factor_out).expect("validated at construction")
    }

    pub fn dequant(&self) -> Option<&DequantConfig> {
        self.config.dequant.as_ref()
    }

    /// Applies one solver to every block.
    pub fn set_solver(&mut self, solver: SolverConfig) {
        self.config.solver = solver;
        for b in &mut self.blocks {
            b.solver = solver;
        }
    }

    pub(crate) fn graph_odes<'a>(&'a self, nbrs: &Neighborhoods) -> Result<Vec<GraphOde<'a>>> {
        self.blocks
            .iter()
            .map(|b| GraphOde::new(&b.field, nbrs, &self.params, false))
            .collect()
    }

    /// Log-likelihood of `x` (n x var_dim) in nats.
    pub fn log_prob<R: Rng>(
        &self,
        x: &Tensor,
        nbrs: &Neighborhoods,
        mode: TraceMode,
        rng: &mut R,
    ) -> Result<f64> {
        let odes = self.graph_odes(nbrs)?;
        let fields: Vec<&dyn OdeField> = odes.iter().map(|o| o as &dyn OdeField).collect();
        let solvers: Vec<SolverConfig> = self.blocks.iter().map(|b| b.solver).collect();
        log_prob_over_fields(&fields, &solvers, &self.factor_out, x, mode, rng)
    }

    /// Transforms data-side states to their base-side representation,
    /// collecting the factored pieces along the way.
    pub fn pull_to_base(&self, x: &Tensor, nbrs: &Neighborhoods) -> Result<BasePoint> {
        let odes = self.graph_odes(nbrs)?;
        let mut pieces = vec![None; self.factor_out.len()];
        let mut cur = x.clone();
        for (b, ode) in odes.iter().enumerate() {
            cur = integrate(ode, &cur, &self.blocks[b].solver.reversed())?;
            if !cur.is_all_finite() {
                return Err(CgError::NonFinite { context: format!("block {b} states") });
            }
            if b + 1 < odes.len() && self.factor_out[b] {
                let half = cur.cols() / 2;
                pieces[b] = Some(cur.slice_cols(0, half));
                cur = cur.slice_cols(half, cur.cols());
            }
        }
        Ok(BasePoint { pieces, terminal: cur })
    }

    /// Transforms a base point to data-side states.
    pub fn push_from_base(&self, point: &BasePoint, nbrs: &Neighborhoods) -> Result<Tensor> {
        let odes = self.graph_odes(nbrs)?;
        let mut cur = point.terminal.clone();
        for b in (0..odes.len()).rev() {
            cur = integrate(&odes[b], &cur, &self.blocks[b].solver)?;
            if !cur.is_all_finite() {
                return Err(CgError::NonFinite { context: format!("block {b} states") });
            }
            if b > 0 && self.factor_out[b - 1] {
                let piece = point.pieces[b - 1].as_ref().ok_or_else(|| {
                    CgError::Config(format!("missing factored piece at boundary {}", b - 1))
                })?;
                cur = Tensor::concat_cols(&[piece, &cur]);
            }
        }
        Ok(cur)
    }

    /// Draws a full base point. The draw order (terminal first, then
    /// boundary pieces from the last boundary to the first) is part of
    /// the sampling determinism contract.
    pub fn draw_base_point<R: Rng>(&self, n_vars: usize, rng: &mut R) -> BasePoint {
        let dims = self.block_dims();
        let terminal = Tensor::randn(n_vars, *dims.last().expect("blocks"), 1.0, rng);
        let mut pieces = vec![None; self.factor_out.len()];
        for b in (0..self.factor_out.len()).rev() {
            if self.factor_out[b] {
                pieces[b] = Some(Tensor::randn(n_vars, dims[b] / 2, 1.0, rng));
            }
        }
        BasePoint { pieces, terminal }
    }

    /// Draws base coordinates and integrates them to the data side.
    /// Deterministic given the RNG state.
    pub fn sample<R: Rng>(&self, nbrs: &Neighborhoods, rng: &mut R) -> Result<Tensor> {
        let point = self.draw_base_point(nbrs.n_vars(), rng);
        self.push_from_base(&point, nbrs)
    }

    /// Conditional sampling: observed variables are mapped to base
    /// points through the induced sub-system, fresh base draws fill the
    /// rest, and the full graph is integrated forward. The observed
    /// variables may drift from their inputs on the way back.
    pub fn conditional_sample<R: Rng>(
        &self,
        nbrs: &Neighborhoods,
        observed: &[(usize, Vec<f64>)],
        rng: &mut R,
    ) -> Result<Tensor> {
        let n = nbrs.n_vars();
        let m = self.config.var_dim;
        let mut seen = vec![false; n];
        for (idx, values) in observed {
            if *idx >= n {
                return Err(CgError::Config(format!("observed index {idx} out of range")));
            }
            if seen[*idx] {
                return Err(CgError::Config(format!("observed index {idx} repeated")));
            }
            seen[*idx] = true;
            if values.len() != m {
                return Err(CgError::Config(format!(
                    "observed variable {idx} has {} values, expected {m}",
                    values.len()
                )));
            }
        }

        // Same draw sequence as `sample`, overwritten where observed.
        let mut point = self.draw_base_point(n, rng);

        if !observed.is_empty() {
            let keep: Vec<usize> = observed.iter().map(|(i, _)| *i).collect();
            let sub_nbrs = nbrs.induced(&keep)?;
            let rows: Vec<Vec<f64>> = observed.iter().map(|(_, v)| v.clone()).collect();
            let x_obs = Tensor::from_rows(&rows);
            let obs_point = self.pull_to_base(&x_obs, &sub_nbrs)?;

            for (row, &var) in keep.iter().enumerate() {
                point
                    .terminal
                    .row_mut(var)
                    .copy_from_slice(obs_point.terminal.row(row));
                for (piece, obs_piece) in point.pieces.iter_mut().zip(&obs_point.pieces) {
                    if let (Some(p), Some(op)) = (piece.as_mut(), obs_piece.as_ref()) {
                        p.row_mut(var).copy_from_slice(op.row(row));
                    }
                }
            }
        }
        self.push_from_base(&point, nbrs)
    }
}

fn block_dims(var_dim: usize, factor_out: &[bool]) -> Result<Vec<usize>> {
    let mut dims = vec![var_dim];
    for (b, &f) in factor_out.iter().enumerate() {
        let d = *dims.last().expect("non-empty");
        let next = if f {
            if d < 2 || d % 2 != 0 {
                return Err(CgError::Config(format!(
                    "cannot halve dimension {d} at boundary {b}"
                )));
            }
            d / 2
        } else {
            d
        };
        dims.push(next);
    }
    Ok(dims)
}

/// Density evaluation over explicit fields; `FlowModel::log_prob` binds
/// its own blocks and forwards here.
pub(crate) fn log_prob_over_fields<R: Rng>(
    fields: &[&dyn OdeField],
    solvers: &[SolverConfig],
    factor_out: &[bool],
    x: &Tensor,
    mode: TraceMode,
    rng: &mut R,
) -> Result<f64> {
    let blocks = fields.len();
    if solvers.len() != blocks || factor_out.len() + 1 != blocks.max(1) {
        return Err(CgError::Config("mismatched block configuration".into()));
    }
    let mut cur = x.clone();
    let mut total = 0.0;
    for b in 0..blocks {
        let (rows, _) = fields[b].state_shape();
        if rows != cur.rows() {
            return Err(CgError::Config(format!(
                "block {b} expects {rows} variables, got {}",
                cur.rows()
            )));
        }
        let est_mode = mode.resolve(cur.len());
        let cfg = solvers[b].reversed();
        let (next, deltas) = match est_mode {
            TraceMode::Exact => {
                integrate_logdet_channels(fields[b], &cur, &cfg, TraceEstimator::Exact)?
            }
            TraceMode::Stochastic { samples } => {
                let noises: Vec<NoiseVector> = (0..samples.max(1))
                    .map(|_| NoiseVector::rademacher(cur.rows(), cur.cols(), rng))
                    .collect();
                integrate_logdet_channels(
                    fields[b],
                    &cur,
                    &cfg,
                    TraceEstimator::Stochastic(&noises),
                )?
            }
            TraceMode::Auto => unreachable!("resolved above"),
        };
        let delta = deltas.iter().sum::<f64>() / deltas.len() as f64;
        if !next.is_all_finite() || !delta.is_finite() {
            return Err(CgError::NonFinite { context: format!("block {b} states") });
        }
        // Accumulated along data -> base, so the density picks up -delta.
        total -= delta;
        cur = next;
        if b + 1 < blocks && factor_out[b] {
            let half = cur.cols() / 2;
            let out = cur.slice_cols(0, half);
            total += std_normal_logpdf(&out);
            cur = cur.slice_cols(half, cur.cols());
        }
    }
    total += std_normal_logpdf(&cur);
    Ok(total)
}

/// Provenance and dataset envelope recorded in checkpoints for the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub task: String,
    #[serde(default)]
    pub generator: Option<String>,
    #[serde(default)]
    pub n_min: Option<usize>,
    #[serde(default)]
    pub n_max: Option<usize>,
}

/// Optimizer snapshot stored alongside the parameters.
#[derive(Debug, Clone)]
pub struct OptSnapshot {
    pub step: u64,
    pub first_moment: ParamStore,
    pub second_moment: ParamStore,
}

#[derive(Debug, Clone, Default)]
pub struct CheckpointExtras {
    pub optimizer: Option<OptSnapshot>,
    pub seed: u64,
    pub task: Option<TaskMeta>,
}

#[derive(Serialize, Deserialize)]
struct ParamSpec {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct OptHeader {
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: ModelConfig,
    params: Vec<ParamSpec>,
    seed: u64,
    optimizer: Option<OptHeader>,
    task: Option<TaskMeta>,
}

/// Writes magic bytes, a length-prefixed JSON header, then little-endian
/// f64 payloads in header order (parameters, then optimizer moments).
pub fn write_checkpoint<P: AsRef<Path>>(
    path: P,
    model: &FlowModel,
    extras: &CheckpointExtras,
) -> Result<()> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        params: model
            .params
            .iter()
            .map(|(name, t)| ParamSpec { name: name.to_string(), rows: t.rows(), cols: t.cols() })
            .collect(),
        seed: extras.seed,
        optimizer: extras.optimizer.as_ref().map(|o| OptHeader { step: o.step }),
        task: extras.task.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    let write_store = |w: &mut dyn Write, store: &ParamStore| -> Result<()> {
        for (_, t) in store.iter() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    };
    write_store(&mut w, &model.params)?;
    if let Some(opt) = &extras.optimizer {
        write_store(&mut w, &opt.first_moment)?;
        write_store(&mut w, &opt.second_moment)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<P: AsRef<Path>>(path: P) -> Result<(FlowModel, CheckpointExtras)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CgError::Checkpoint(format!(
            "bad magic bytes {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let mut len_bytes = [0u8; 4];
    read_exact(&mut r, &mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact(&mut r, &mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| CgError::Checkpoint(format!("header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(CgError::Checkpoint(format!(
            "unsupported version {}, expected {CHECKPOINT_VERSION}",
            header.version
        )));
    }

    let mut model = FlowModel::new(header.config.clone())?;
    {
        let names: Vec<String> = model.params.names().map(str::to_string).collect();
        if names.len() != header.params.len()
            || names.iter().zip(&header.params).any(|(n, s)| n != &s.name)
        {
            return Err(CgError::Checkpoint(
                "parameter layout does not match model config".into(),
            ));
        }
    }
    {
        let mut read_into = |store: &mut ParamStore| -> Result<()> {
            for spec in &header.params {
                let t = store.get_mut(&spec.name).ok_or_else(|| {
                    CgError::Checkpoint(format!("unknown parameter {:?}", spec.name))
                })?;
                if t.shape() != (spec.rows, spec.cols) {
                    return Err(CgError::Checkpoint(format!(
                        "parameter {:?} shape {:?} vs stored ({}, {})",
                        spec.name,
                        t.shape(),
                        spec.rows,
                        spec.cols
                    )));
                }
                for v in t.data_mut() {
                    let mut buf = [0u8; 8];
                    read_exact(&mut r, &mut buf)?;
                    *v = f64::from_le_bytes(buf);
                }
            }
            Ok(())
        };
        read_into(&mut model.params)?;

        let optimizer = match &header.optimizer {
            Some(opt) => {
                let mut first = model.params.zeros_like();
                let mut second = model.params.zeros_like();
                read_into(&mut first)?;
                read_into(&mut second)?;
                Some(OptSnapshot {
                    step: opt.step,
                    first_moment: first,
                    second_moment: second,
                })
            }
            None => None,
        };

        // Anything left over means the file does not match its header.
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(CgError::Checkpoint("trailing bytes after payload".into()));
        }

        Ok((
            model,
            CheckpointExtras { optimizer, seed: header.seed, task: header.task },
        ))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| CgError::Checkpoint("truncated file".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::line_graph_of_complete;
    use crate::odeint::LinearField;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn pair_nbrs() -> Neighborhoods {
        Neighborhoods::new(vec![vec![(1, 0)], vec![(0, 0)]], 1).unwrap()
    }

    fn small_model(var_dim: usize, blocks: usize, seed: u64) -> FlowModel {
        FlowModel::new(ModelConfig {
            var_dim,
            hidden: 8,
            blocks,
            edge_types: 1,
            aggregator: Aggregator::Sum,
            factor_out: Vec::new(),
            dequant: None,
            init_seed: seed,
            solver: SolverConfig::standard(),
        })
        .unwrap()
    }

    /// Random parameters at a scale where the flow is clearly not the
    /// identity but still well behaved.
    fn randomize(model: &mut FlowModel, seed: u64, std: f64) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for t in model.params_mut().values_mut() {
            *t = Tensor::randn(t.rows(), t.cols(), std, &mut rng);
        }
    }

    #[test]
    fn zero_parameters_make_the_flow_the_identity() {
        let mut model = small_model(2, 2, 1);
        for t in model.params_mut().values_mut() {
            *t = Tensor::zeros(t.rows(), t.cols());
        }
        let nbrs = pair_nbrs();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = Tensor::randn(2, 2, 1.0, &mut rng);
        let lp = model.log_prob(&x, &nbrs, TraceMode::Exact, &mut rng).unwrap();
        assert!((lp - std_normal_logpdf(&x)).abs() < 1e-6);

        // Samples are exactly base draws.
        let mut r1 = ChaCha12Rng::seed_from_u64(3);
        let s = model.sample(&nbrs, &mut r1).unwrap();
        let mut r2 = ChaCha12Rng::seed_from_u64(3);
        let z = Tensor::randn(2, 2, 1.0, &mut r2);
        assert_eq!(s, z);
    }

    #[test]
    fn linear_field_log_prob_matches_gaussian_pushforward() {
        // Single linear block dx = A x with A = diag(0.5, -0.3): the data
        // density is N(z; 0, I) |det exp(-A)| at z = x exp(-A)^T.
        let a = Tensor::from_rows(&[vec![0.5, 0.0], vec![0.0, -0.3]]);
        let field = LinearField::new(1, a);
        let solvers = [SolverConfig::dopri5(1e-10, 1e-12)];
        let x = Tensor::from_rows(&[vec![0.7, -1.1]]);
        let fields: [&dyn OdeField; 1] = [&field];
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let lp =
            log_prob_over_fields(&fields, &solvers, &[], &x, TraceMode::Exact, &mut rng).unwrap();

        let z = Tensor::from_rows(&[vec![0.7 * (-0.5f64).exp(), -1.1 * (0.3f64).exp()]]);
        let expected = std_normal_logpdf(&z) - 0.2;
        assert!((lp - expected).abs() < 1e-6, "{lp} vs {expected}");
    }

    #[test]
    fn factored_model_matches_construction_oracle() {
        // Factored: block A on 2 dims, factor out the first half, block B
        // on the remaining dim. Unfactored oracle: block B lifted to a
        // 2-dim field that ignores and preserves the first coordinate.
        let a = Tensor::from_rows(&[vec![0.2, -0.4], vec![0.3, 0.1]]);
        let b1 = Tensor::scalar(-0.6);
        let b_lifted = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, -0.6]]);

        let block_a = LinearField::new(1, a);
        let block_b = LinearField::new(1, b1);
        let block_b_lifted = LinearField::new(1, b_lifted);

        let solver = SolverConfig::dopri5(1e-9, 1e-11);
        let x = Tensor::from_rows(&[vec![0.9, -0.2]]);
        let mut rng = ChaCha12Rng::seed_from_u64(5);

        let factored: [&dyn OdeField; 2] = [&block_a, &block_b];
        let lp_factored = log_prob_over_fields(
            &factored,
            &[solver, solver],
            &[true],
            &x,
            TraceMode::Exact,
            &mut rng,
        )
        .unwrap();

        let unfactored: [&dyn OdeField; 2] = [&block_a, &block_b_lifted];
        let lp_unfactored = log_prob_over_fields(
            &unfactored,
            &[solver, solver],
            &[false],
            &x,
            TraceMode::Exact,
            &mut rng,
        )
        .unwrap();

        assert!(
            (lp_factored - lp_unfactored).abs() < 1e-6,
            "{lp_factored} vs {lp_unfactored}"
        );
    }

    #[test]
    fn all_false_schedule_equals_manual_block_composition() {
        let mut model = small_model(2, 2, 7);
        randomize(&mut model, 8, 0.3);
        let nbrs = pair_nbrs();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let x = Tensor::randn(2, 2, 0.8, &mut rng);
        let lp = model.log_prob(&x, &nbrs, TraceMode::Exact, &mut rng).unwrap();

        // Manual composition of the two blocks.
        let odes = model.graph_odes(&nbrs).unwrap();
        let mut cur = x.clone();
        let mut total = 0.0;
        for (b, ode) in odes.iter().enumerate() {
            let (next, deltas) = integrate_logdet_channels(
                ode,
                &cur,
                &model.blocks[b].solver.reversed(),
                TraceEstimator::Exact,
            )
            .unwrap();
            total -= deltas[0];
            cur = next;
        }
        total += std_normal_logpdf(&cur);
        assert_eq!(lp, total);
    }

    #[test]
    fn forward_reverse_round_trip_recovers_inputs() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        for trial in 0..3usize {
            let template = line_graph_of_complete(3 + trial).unwrap();
            let mut model = small_model(3, 2, 11 + trial as u64);
            model.set_solver(SolverConfig::dopri5(1e-5, 1e-7));
            randomize(&mut model, 20 + trial as u64, 0.4);
            let x = Tensor::randn(template.n_vars(), 3, 1.0, &mut rng);
            let z = model.pull_to_base(&x, template.neighborhoods()).unwrap();
            let back = model.push_from_base(&z, template.neighborhoods()).unwrap();
            let err = back.max_abs_diff(&x);
            assert!(err < 1e-3, "round trip error {err}");
        }
    }

    #[test]
    fn log_prob_is_permutation_invariant() {
        let mut model = small_model(2, 2, 13);
        randomize(&mut model, 14, 0.4);
        let template = line_graph_of_complete(4).unwrap();
        let nbrs = template.neighborhoods();
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let x = Tensor::randn(nbrs.n_vars(), 2, 1.0, &mut rng);
        let lp = model.log_prob(&x, nbrs, TraceMode::Exact, &mut rng).unwrap();

        let perm: Vec<usize> = vec![3, 0, 5, 1, 4, 2];
        let mut xp = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            xp.row_mut(perm[i]).copy_from_slice(x.row(i));
        }
        let nbrs_p = nbrs.permuted(&perm);
        let lp_p = model.log_prob(&xp, &nbrs_p, TraceMode::Exact, &mut rng).unwrap();
        assert!((lp - lp_p).abs() < 1e-6, "{lp} vs {lp_p}");
    }

    #[test]
    fn stochastic_log_prob_is_unbiased_for_the_exact_one() {
        let mut model = small_model(1, 1, 16);
        randomize(&mut model, 17, 0.6);
        let nbrs = pair_nbrs();
        let mut rng = ChaCha12Rng::seed_from_u64(18);
        let x = Tensor::randn(2, 1, 1.0, &mut rng);
        let exact = model.log_prob(&x, &nbrs, TraceMode::Exact, &mut rng).unwrap();

        // Single solve with many channels: same trajectory, one estimate
        // per noise vector.
        let odes = model.graph_odes(&nbrs).unwrap();
        let draws = 10_000usize;
        let noises: Vec<NoiseVector> = (0..draws)
            .map(|_| NoiseVector::rademacher(2, 1, &mut rng))
            .collect();
        let (z, deltas) = integrate_logdet_channels(
            &odes[0],
            &x,
            &model.blocks[0].solver.reversed(),
            TraceEstimator::Stochastic(&noises),
        )
        .unwrap();
        let samples: Vec<f64> = deltas.iter().map(|d| std_normal_logpdf(&z) - d).collect();
        let mean = samples.iter().sum::<f64>() / draws as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let se = (var / draws as f64).sqrt().max(1e-300);
        assert!(
            (mean - exact).abs() < 3.0 * se,
            "mean {mean} vs exact {exact} (se {se})"
        );
    }

    #[test]
    fn sample_then_log_prob_is_self_consistent() {
        let mut model = small_model(2, 2, 19);
        model.set_solver(SolverConfig::dopri5(1e-7, 1e-9));
        randomize(&mut model, 21, 0.4);
        let nbrs = pair_nbrs();

        // Replicate the sampling draw, then check log_prob(sample)
        // against the base density plus the forward corrections.
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let z = Tensor::randn(2, 2, 1.0, &mut rng);
        let odes = model.graph_odes(&nbrs).unwrap();
        let mut cur = z.clone();
        let mut fwd_delta = 0.0;
        for b in (0..2usize).rev() {
            let (_, deltas) = integrate_logdet_channels(
                &odes[b],
                &cur,
                &model.blocks[b].solver,
                TraceEstimator::Exact,
            )
            .unwrap();
            fwd_delta += deltas[0];
            cur = integrate(&odes[b], &cur, &model.blocks[b].solver).unwrap();
        }
        let x = cur;
        let expected = std_normal_logpdf(&z) + fwd_delta;

        let mut r2 = ChaCha12Rng::seed_from_u64(22);
        let sampled = model.sample(&nbrs, &mut r2).unwrap();
        assert!(sampled.max_abs_diff(&x) < 1e-12);

        let lp = model
            .log_prob(&x, &nbrs, TraceMode::Exact, &mut ChaCha12Rng::seed_from_u64(1))
            .unwrap();
        assert!((lp - expected).abs() < 1e-3, "{lp} vs {expected}");
    }

    #[test]
    fn conditional_with_everything_observed_is_a_round_trip() {
        let mut model = small_model(1, 2, 23);
        model.set_solver(SolverConfig::dopri5(1e-7, 1e-9));
        randomize(&mut model, 24, 0.5);
        let template = line_graph_of_complete(3).unwrap();
        let nbrs = template.neighborhoods();
        let mut rng = ChaCha12Rng::seed_from_u64(25);
        let x = Tensor::randn(3, 1, 1.0, &mut rng);
        let observed: Vec<(usize, Vec<f64>)> = (0..3).map(|i| (i, x.row(i).to_vec())).collect();
        let out = model.conditional_sample(nbrs, &observed, &mut rng).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-3);
    }

    #[test]
    fn conditional_with_nothing_observed_equals_sample() {
        let mut model = small_model(2, 2, 26);
        randomize(&mut model, 27, 0.4);
        let nbrs = pair_nbrs();
        let s = model.sample(&nbrs, &mut ChaCha12Rng::seed_from_u64(31)).unwrap();
        let c = model
            .conditional_sample(&nbrs, &[], &mut ChaCha12Rng::seed_from_u64(31))
            .unwrap();
        assert_eq!(s, c);
    }

    #[test]
    fn factor_out_round_trips_and_scores_consistently() {
        let mut model = FlowModel::new(ModelConfig {
            var_dim: 4,
            hidden: 8,
            blocks: 2,
            edge_types: 1,
            aggregator: Aggregator::Sum,
            factor_out: vec![true],
            dequant: None,
            init_seed: 28,
            solver: SolverConfig::dopri5(1e-6, 1e-8),
        })
        .unwrap();
        randomize(&mut model, 29, 0.3);
        assert_eq!(model.block_dims(), vec![4, 2]);
        let nbrs = pair_nbrs();
        let mut rng = ChaCha12Rng::seed_from_u64(30);
        let x = Tensor::randn(2, 4, 1.0, &mut rng);
        let z = model.pull_to_base(&x, &nbrs).unwrap();
        assert_eq!(z.terminal.shape(), (2, 2));
        assert_eq!(z.pieces[0].as_ref().unwrap().shape(), (2, 2));
        let back = model.push_from_base(&z, &nbrs).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-3);

        let lp = model.log_prob(&x, &nbrs, TraceMode::Exact, &mut rng).unwrap();
        assert!(lp.is_finite());
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.cgf");
        let p2 = dir.path().join("b.cgf");
        let mut model = small_model(2, 2, 33);
        randomize(&mut model, 34, 0.4);
        let extras = CheckpointExtras {
            optimizer: Some(OptSnapshot {
                step: 17,
                first_moment: model.params().zeros_like(),
                second_moment: model.params().zeros_like(),
            }),
            seed: 99,
            task: Some(TaskMeta {
                task: "toy".into(),
                generator: None,
                n_min: None,
                n_max: None,
            }),
        };
        write_checkpoint(&p1, &model, &extras).unwrap();
        let (loaded, extras2) = read_checkpoint(&p1).unwrap();
        write_checkpoint(&p2, &loaded, &extras2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        // Bitwise identical densities after a round trip.
        let nbrs = pair_nbrs();
        let x = Tensor::randn(2, 2, 1.0, &mut ChaCha12Rng::seed_from_u64(35));
        let lp1 = model
            .log_prob(&x, &nbrs, TraceMode::Exact, &mut ChaCha12Rng::seed_from_u64(1))
            .unwrap();
        let lp2 = loaded
            .log_prob(&x, &nbrs, TraceMode::Exact, &mut ChaCha12Rng::seed_from_u64(1))
            .unwrap();
        assert_eq!(lp1.to_bits(), lp2.to_bits());
    }

    #[test]
    fn truncated_checkpoint_fails_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.cgf");
        let model = small_model(1, 1, 36);
        write_checkpoint(&path, &model, &CheckpointExtras::default()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(matches!(err, CgError::Checkpoint(_)), "{err}");
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cgf");
        std::fs::write(&path, b"NOPE0000").unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }
}
