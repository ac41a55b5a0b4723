//! Subcommand implementations.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde_json::json;

use cgflow::error::{CgError, Result};
use cgflow::flow::{FlowModel, TaskMeta};
use cgflow::graph::{
    self, encode_graph_dataset, line_graph_of_complete, read_graphs, write_graphs, Graph,
};
use cgflow::metrics::{
    clustering_hist, degree_hist, mmd, orbit4_counts, GroundDistance, MmdConfig,
    CLUSTERING_BINS, DECODE_THRESHOLD,
};
use cgflow::train::{
    load_checkpoint, nll_bits_per_dim, save_checkpoint, train, AdamState, TrainReport,
};
use cgflow::diagnostics;

use crate::config::{RunConfig, Task};
use crate::dot::graph_to_dot;

pub const GENERATORS: &[&str] = &["community-small", "ego-small"];

fn sample_dataset_graph<R: Rng>(
    generator: &str,
    rng: &mut R,
    n_range: (usize, usize),
) -> Result<Graph> {
    match generator {
        "community-small" => graph::community_small_sampler(rng, n_range),
        "ego-small" => graph::ego_small_sampler(rng, n_range),
        other => Err(CgError::Config(format!(
            "unknown generator {other:?}; available: {}",
            GENERATORS.join(", ")
        ))),
    }
}

fn default_size_range(generator: &str) -> (usize, usize) {
    match generator {
        "ego-small" => (4, 18),
        _ => (12, 16),
    }
}

pub fn make_data(
    generator: &str,
    count: usize,
    seed: u64,
    n_min: Option<usize>,
    n_max: Option<usize>,
    out: &str,
) -> Result<()> {
    let defaults = default_size_range(generator);
    let range = (n_min.unwrap_or(defaults.0), n_max.unwrap_or(defaults.1));
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let graphs: Vec<Graph> = (0..count)
        .map(|_| sample_dataset_graph(generator, &mut rng, range))
        .collect::<Result<_>>()?;

    let val = count / 10;
    let test = count / 10;
    let train_n = count - val - test;
    let out_dir = PathBuf::from(out);
    std::fs::create_dir_all(&out_dir)?;
    write_graphs(out_dir.join("train.jsonl"), &graphs[..train_n])?;
    write_graphs(out_dir.join("val.jsonl"), &graphs[train_n..train_n + val])?;
    write_graphs(out_dir.join("test.jsonl"), &graphs[train_n + val..])?;
    let meta = json!({
        "generator": generator,
        "count": count,
        "seed": seed,
        "n_min": range.0,
        "n_max": range.1,
        "splits": {"train": train_n, "val": val, "test": test},
    });
    std::fs::write(out_dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    println!(
        "wrote {train_n}/{val}/{test} graphs to {}",
        out_dir.display()
    );
    Ok(())
}

fn parse_size_filter(spec: &str) -> Result<(usize, usize)> {
    let (lo, hi) = spec
        .split_once('-')
        .ok_or_else(|| CgError::Config(format!("size filter {spec:?} must be LO-HI")))?;
    let lo: usize = lo
        .parse()
        .map_err(|_| CgError::Config(format!("bad size filter {spec:?}")))?;
    let hi: usize = hi
        .parse()
        .map_err(|_| CgError::Config(format!("bad size filter {spec:?}")))?;
    if lo > hi {
        return Err(CgError::Config(format!("empty size filter {spec:?}")));
    }
    Ok((lo, hi))
}

fn filter_sizes(graphs: Vec<Graph>, filter: Option<(usize, usize)>) -> Vec<Graph> {
    match filter {
        Some((lo, hi)) => graphs.into_iter().filter(|g| g.n() >= lo && g.n() <= hi).collect(),
        None => graphs,
    }
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(CgError::Config(format!("missing dataset file {}", path.display())));
    }
    Ok(())
}

pub fn train_cmd(
    config_path: &str,
    overrides: &[(String, String)],
    dry_run: bool,
    train_sizes: Option<String>,
    eval_sizes: Option<String>,
) -> Result<()> {
    let cfg = RunConfig::load(config_path, overrides)?;
    let mut model = FlowModel::new(cfg.model_config())?;

    if dry_run {
        println!("config ok: {} parameters", model.param_count());
        println!("blocks: {:?} (feature dims)", model.block_dims());
        return Ok(());
    }

    let train_filter = train_sizes.as_deref().map(parse_size_filter).transpose()?;
    let eval_filter = eval_sizes.as_deref().map(parse_size_filter).transpose()?;

    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let ckpt_path = out_dir.join("checkpoint.cgf");

    let mut opt = AdamState::new(model.params());
    let task_meta = TaskMeta {
        task: match cfg.task {
            Task::GraphGen => "graph-gen".into(),
            Task::ToyGaussian => "toy-gaussian".into(),
        },
        generator: (cfg.task == Task::GraphGen).then(|| cfg.dataset.generator.clone()),
        n_min: (cfg.task == Task::GraphGen).then_some(cfg.dataset.n_min),
        n_max: (cfg.task == Task::GraphGen).then_some(cfg.dataset.n_max),
    };

    let (report, test_bits): (TrainReport, Option<f64>) = match cfg.task {
        Task::ToyGaussian => {
            let (data, entropy_per_var) = cgflow::train::toy_gaussian_dataset(
                cfg.dataset.count,
                cfg.dataset.correlation,
                cfg.dataset.seed,
            );
            let report = run_training(&mut model, &mut opt, &data, &cfg, &ckpt_path, &task_meta)?;
            println!(
                "analytic entropy: {:.4} nats/var ({:.4} bits/dim)",
                entropy_per_var,
                entropy_per_var / std::f64::consts::LN_2
            );
            (report, None)
        }
        Task::GraphGen => {
            let data_dir = PathBuf::from(&cfg.dataset.dir);
            let train_path = data_dir.join("train.jsonl");
            require_file(&train_path)?;
            let graphs = filter_sizes(read_graphs(&train_path)?, train_filter);
            if graphs.is_empty() {
                return Err(CgError::Config("no training graphs after filtering".into()));
            }
            let data = encode_graph_dataset(&graphs)?;
            let report = run_training(&mut model, &mut opt, &data, &cfg, &ckpt_path, &task_meta)?;

            let test_path = data_dir.join("test.jsonl");
            let test_bits = if test_path.is_file() {
                let test_graphs = filter_sizes(read_graphs(&test_path)?, eval_filter);
                if test_graphs.is_empty() {
                    None
                } else {
                    let test_data = encode_graph_dataset(&test_graphs)?;
                    let mut rng = ChaCha12Rng::seed_from_u64(cfg.train.seed ^ 0x7e57);
                    Some(nll_bits_per_dim(&model, &test_data, &mut rng)?)
                }
            } else {
                None
            };
            (report, test_bits)
        }
    };

    report.write_csv(out_dir.join("loss.csv"))?;
    save_checkpoint(&ckpt_path, &model, &opt, cfg.train.seed, Some(task_meta))?;

    let summary = json!({
        "final_train_bits_per_dim": report.final_bits_per_dim,
        "test_bits_per_dim": test_bits,
        "param_count": model.param_count(),
        "steps": report.curve.len(),
    });
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    println!("final nll: {:.4} bits/dim", report.final_bits_per_dim);
    if let Some(tb) = test_bits {
        println!("test nll: {tb:.4} bits/dim");
    }
    Ok(())
}

/// Runs training; on divergence the rolled-back parameters are still
/// written out so the last good checkpoint is what remains on disk.
fn run_training(
    model: &mut FlowModel,
    opt: &mut AdamState,
    data: &[cgflow::graph::TypedGraph],
    cfg: &RunConfig,
    ckpt_path: &Path,
    task_meta: &TaskMeta,
) -> Result<TrainReport> {
    match train(model, opt, data, &cfg.train) {
        Ok(report) => Ok(report),
        Err(e @ CgError::Diverged { .. }) => {
            save_checkpoint(ckpt_path, model, opt, cfg.train.seed, Some(task_meta.clone()))?;
            Err(e)
        }
        Err(other) => Err(other),
    }
}

#[derive(serde::Deserialize)]
struct KnownEdges {
    n: usize,
    /// [u, v, present] triples over the original graph's nodes.
    known_edges: Vec<(usize, usize, u8)>,
}

#[derive(serde::Deserialize)]
struct KnownStates {
    entries: Vec<(usize, Vec<f64>)>,
}

pub fn sample_cmd(
    checkpoint: &str,
    num: usize,
    seed: u64,
    out: &str,
    dot_dir: Option<String>,
    conditional: Option<String>,
) -> Result<()> {
    let (model, _, extras) = load_checkpoint(checkpoint)?;
    let task = extras.task.as_ref().map(|t| t.task.as_str()).unwrap_or("graph-gen");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    match task {
        "graph-gen" => {
            let (n_min, n_max) = match extras.task.as_ref() {
                Some(TaskMeta { n_min: Some(lo), n_max: Some(hi), .. }) => (*lo, *hi),
                _ => {
                    return Err(CgError::Checkpoint(
                        "checkpoint does not record a graph size range".into(),
                    ))
                }
            };
            let observed = match &conditional {
                Some(path) => {
                    let text = std::fs::read_to_string(path)?;
                    let spec: KnownEdges = serde_json::from_str(&text)?;
                    Some(spec)
                }
                None => None,
            };
            let mut graphs = Vec::with_capacity(num);
            for _ in 0..num {
                let g = match &observed {
                    None => {
                        let n = rng.random_range(n_min..=n_max);
                        let template = line_graph_of_complete(n)?;
                        let states = model.sample(template.neighborhoods(), &mut rng)?;
                        template.decode_graph(&states, DECODE_THRESHOLD)?
                    }
                    Some(spec) => {
                        let template = line_graph_of_complete(spec.n)?;
                        let index: HashMap<(usize, usize), usize> = template
                            .pairs()
                            .iter()
                            .enumerate()
                            .map(|(i, &p)| (p, i))
                            .collect();
                        let mut obs = Vec::with_capacity(spec.known_edges.len());
                        for &(u, v, present) in &spec.known_edges {
                            let key = (u.min(v), u.max(v));
                            let var = *index.get(&key).ok_or_else(|| {
                                CgError::Config(format!("edge ({u},{v}) outside K_{}", spec.n))
                            })?;
                            // Bin midpoints of the dequantized indicator.
                            let value = if present != 0 { 1.5 } else { 0.5 };
                            obs.push((var, vec![value]));
                        }
                        let states =
                            model.conditional_sample(template.neighborhoods(), &obs, &mut rng)?;
                        template.decode_graph(&states, DECODE_THRESHOLD)?
                    }
                };
                graphs.push(g);
            }
            write_graphs(out, &graphs)?;
            if let Some(dir) = dot_dir {
                let dir = PathBuf::from(dir);
                std::fs::create_dir_all(&dir)?;
                for (i, g) in graphs.iter().enumerate() {
                    std::fs::write(dir.join(format!("sample_{i:04}.dot")), graph_to_dot(g))?;
                }
            }
            println!("wrote {num} graphs to {out}");
        }
        "toy-gaussian" => {
            let nbrs = cgflow::graph::Neighborhoods::new(
                vec![vec![(1, 0)], vec![(0, 0)]],
                1,
            )?;
            let observed: Vec<(usize, Vec<f64>)> = match &conditional {
                Some(path) => {
                    let text = std::fs::read_to_string(path)?;
                    let spec: KnownStates = serde_json::from_str(&text)?;
                    spec.entries
                }
                None => Vec::new(),
            };
            use std::io::Write;
            let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
            for _ in 0..num {
                let states = if observed.is_empty() {
                    model.sample(&nbrs, &mut rng)?
                } else {
                    model.conditional_sample(&nbrs, &observed, &mut rng)?
                };
                let rows: Vec<Vec<f64>> =
                    (0..states.rows()).map(|r| states.row(r).to_vec()).collect();
                writeln!(w, "{}", serde_json::to_string(&json!({"states": rows}))?)?;
            }
            println!("wrote {num} state samples to {out}");
        }
        other => {
            return Err(CgError::Checkpoint(format!("unknown task {other:?} in checkpoint")))
        }
    }
    Ok(())
}

pub fn eval_cmd(
    reference: &str,
    generated: &str,
    out: &str,
    metrics_filter: Option<String>,
    sigma: f64,
    distance: &str,
) -> Result<()> {
    let reference_graphs = read_graphs(reference)?;
    let generated_graphs = read_graphs(generated)?;
    if reference_graphs.is_empty() || generated_graphs.is_empty() {
        return Err(CgError::Config("both graph sets must be non-empty".into()));
    }
    let distance = match distance {
        "tv" => GroundDistance::TotalVariation,
        "w1" => GroundDistance::Wasserstein1,
        other => {
            return Err(CgError::Config(format!(
                "unknown distance {other:?}; use tv or w1"
            )))
        }
    };
    if sigma <= 0.0 {
        return Err(CgError::Config("sigma must be positive".into()));
    }
    let cfg = MmdConfig { sigma, distance };

    let wanted: Vec<String> = match metrics_filter {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => vec!["degree".into(), "clustering".into(), "orbit".into()],
    };
    for w in &wanted {
        if !["degree", "clustering", "orbit"].contains(&w.as_str()) {
            return Err(CgError::Config(format!(
                "unknown metric {w:?}; available: degree, clustering, orbit"
            )));
        }
    }

    let compute = |name: &str| -> Result<Option<f64>> {
        if !wanted.iter().any(|w| w == name) {
            return Ok(None);
        }
        let value = match name {
            "degree" => {
                let a: Vec<_> = reference_graphs.iter().map(degree_hist).collect();
                let b: Vec<_> = generated_graphs.iter().map(degree_hist).collect();
                mmd(&a, &b, &cfg)?
            }
            "clustering" => {
                let a: Vec<_> = reference_graphs
                    .iter()
                    .map(|g| clustering_hist(g, CLUSTERING_BINS))
                    .collect();
                let b: Vec<_> = generated_graphs
                    .iter()
                    .map(|g| clustering_hist(g, CLUSTERING_BINS))
                    .collect();
                mmd(&a, &b, &cfg)?
            }
            _ => {
                let a: Vec<_> = reference_graphs
                    .iter()
                    .map(orbit4_counts)
                    .collect::<Result<_>>()?;
                let b: Vec<_> = generated_graphs
                    .iter()
                    .map(orbit4_counts)
                    .collect::<Result<_>>()?;
                mmd(&a, &b, &cfg)?
            }
        };
        Ok(Some(value))
    };

    let report = json!({
        "degree_mmd": compute("degree")?,
        "clustering_mmd": compute("clustering")?,
        "orbit_mmd": compute("orbit")?,
        "n_generated": generated_graphs.len(),
        "seed": 0,
    });
    let text = serde_json::to_string_pretty(&report)? + "\n";
    std::fs::write(out, &text)?;
    print!("{text}");
    Ok(())
}

pub fn selftest_cmd(seed: u64) -> Result<()> {
    let results = diagnostics::run_all(seed)?;
    let mut failed = None;
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status} {:<34} measured {:>12.3e}  tolerance {:>9.0e}  ({})",
            r.name, r.measured, r.threshold, r.detail
        );
        if !r.passed() && failed.is_none() {
            failed = Some(r.name);
        }
    }
    match failed {
        Some(name) => Err(CgError::Solver(format!("self-test failed: {name}"))),
        None => {
            println!("all {} checks passed", results.len());
            Ok(())
        }
    }
}
