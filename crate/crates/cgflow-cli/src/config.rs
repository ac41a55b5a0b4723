//! The run configuration: one JSON file whose keys can be overridden
//! from the command line with dotted flags (`--train.lr 0.01`).

use serde::{Deserialize, Serialize};

use cgflow::dequant::DequantConfig;
use cgflow::dynamics::Aggregator;
use cgflow::error::{CgError, Result};
use cgflow::flow::ModelConfig;
use cgflow::odeint::SolverConfig;
use cgflow::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    GraphGen,
    ToyGaussian,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default = "default_generator")]
    pub generator: String,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_n_min")]
    pub n_min: usize,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_data_dir")]
    pub dir: String,
    /// Toy-task target correlation.
    #[serde(default = "default_correlation")]
    pub correlation: f64,
}

fn default_generator() -> String {
    "community-small".into()
}
fn default_count() -> usize {
    200
}
fn default_n_min() -> usize {
    12
}
fn default_n_max() -> usize {
    16
}
fn default_data_dir() -> String {
    "data".into()
}
fn default_correlation() -> f64 {
    0.8
}

impl Default for DatasetSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_var_dim")]
    pub var_dim: usize,
    #[serde(default = "default_edge_types")]
    pub edge_types: usize,
    #[serde(default = "default_aggregator")]
    pub aggregator: Aggregator,
    #[serde(default)]
    pub factor_out: Vec<bool>,
    /// "variational", "uniform", or null for continuous data.
    #[serde(default)]
    pub dequant: Option<DequantConfig>,
    #[serde(default = "default_init_seed")]
    pub init_seed: u64,
}

fn default_blocks() -> usize {
    2
}
fn default_hidden() -> usize {
    32
}
fn default_var_dim() -> usize {
    1
}
fn default_edge_types() -> usize {
    1
}
fn default_aggregator() -> Aggregator {
    Aggregator::Sum
}
fn default_init_seed() -> u64 {
    1
}

impl Default for ModelSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    /// Evaluation/sampling solver.
    #[serde(default = "default_solver")]
    pub solver: SolverConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
}

fn default_solver() -> SolverConfig {
    SolverConfig::standard()
}
fn default_out_dir() -> String {
    "runs/out".into()
}

impl RunConfig {
    pub fn load(path: &str, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CgError::Config(format!("cannot read config {path:?}: {e}"))
        })?;
        let mut value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CgError::Config(format!("config {path:?}: {e}")))?;
        apply_overrides(&mut value, overrides)?;
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| CgError::Config(format!("config {path:?}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.solver.validate()?;
        if self.task == Task::GraphGen && self.model.var_dim != 1 {
            return Err(CgError::Config(
                "graph generation uses scalar edge-indicator variables (var_dim = 1)".into(),
            ));
        }
        Ok(())
    }

    /// The model configuration this run describes.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            var_dim: self.model.var_dim,
            hidden: self.model.hidden,
            blocks: self.model.blocks,
            edge_types: self.model.edge_types,
            aggregator: self.model.aggregator,
            factor_out: self.model.factor_out.clone(),
            dequant: self.model.dequant,
            init_seed: self.model.init_seed,
            solver: self.solver,
        }
    }
}

/// Sets `value[a][b][c] = parsed(raw)` for a dotted path `a.b.c`. Raw
/// values parse as JSON when possible, otherwise as strings.
pub fn apply_overrides(
    value: &mut serde_json::Value,
    overrides: &[(String, String)],
) -> Result<()> {
    for (path, raw) in overrides {
        let parsed: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
        let parts: Vec<&str> = path.split('.').collect();
        set_path(value, &parts, &parsed, path)?;
    }
    Ok(())
}

fn set_path(
    value: &mut serde_json::Value,
    parts: &[&str],
    parsed: &serde_json::Value,
    full_path: &str,
) -> Result<()> {
    let Some((head, rest)) = parts.split_first() else {
        return Ok(());
    };
    let serde_json::Value::Object(map) = value else {
        return Err(CgError::Config(format!(
            "override {full_path:?}: {head:?} is not an object"
        )));
    };
    if rest.is_empty() {
        map.insert(head.to_string(), parsed.clone());
        Ok(())
    } else {
        let child = map
            .entry(head.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
        set_path(child, rest, parsed, full_path)
    }
}

/// Splits dotted `--a.b.c value` flags out of the raw argument list so
/// clap only sees the flags it knows about.
pub fn extract_dotted_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        if let Some(name) = arg.strip_prefix("--") {
            if name.contains('.') {
                if let Some((key, inline)) = name.split_once('=') {
                    overrides.push((key.to_string(), inline.to_string()));
                    i += 1;
                    continue;
                }
                if i + 1 < args.len() {
                    overrides.push((name.to_string(), args[i + 1].clone()));
                    i += 2;
                    continue;
                }
            }
        }
        rest.push(arg.clone());
        i += 1;
    }
    (rest, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_keys() {
        let mut v: serde_json::Value = serde_json::json!({"task": "toy-gaussian"});
        apply_overrides(
            &mut v,
            &[
                ("train.lr".into(), "0.01".into()),
                ("dataset.generator".into(), "ego-small".into()),
            ],
        )
        .unwrap();
        assert_eq!(v["train"]["lr"], serde_json::json!(0.01));
        assert_eq!(v["dataset"]["generator"], serde_json::json!("ego-small"));
        let cfg: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.dataset.generator, "ego-small");
    }

    #[test]
    fn dotted_flags_are_extracted() {
        let args: Vec<String> = ["train", "--config", "c.json", "--train.lr", "0.5", "--model.hidden=16"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (rest, ov) = extract_dotted_overrides(args);
        assert_eq!(rest, vec!["train", "--config", "c.json"]);
        assert_eq!(
            ov,
            vec![
                ("train.lr".to_string(), "0.5".to_string()),
                ("model.hidden".to_string(), "16".to_string())
            ]
        );
    }
}
