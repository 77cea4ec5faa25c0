//! The four commands behind the `bridge` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bridge_core::data::ingest::write_dataset;
use bridge_core::data::synthetic::{generate_synthetic, SyntheticSpec};
use bridge_core::data::Dataset;
use bridge_core::eval::{evaluate_fraud, evaluate_link, EvalSplit};
use bridge_core::metrics::EvalReport;
use bridge_core::model::{bridge_forward, parameter_group, BridgeParams, ModelError};
use bridge_core::rng::substream;
use bridge_core::tensor::{
    finite_difference_check_per_param, Tape, Tensor, TensorError, TensorId, DEFAULT_FD_EPS,
};
use bridge_core::train::{link_loss, sample_negatives, train, Task, TrainOutcome};

use crate::checkpoint;
use crate::config::{config_digest, RunConfig};
use crate::CliError;

pub const HISTORY_FILE: &str = "loss_history.tsv";
pub const VALID_REPORT_FILE: &str = "valid_report.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";

/// What `train` leaves on disk, plus the in-memory results so callers
/// can compare against the written artifacts.
pub struct TrainArtifacts {
    pub out_dir: PathBuf,
    pub manifest_path: PathBuf,
    pub history_path: PathBuf,
    pub report_path: PathBuf,
    pub outcome: TrainOutcome,
    pub valid_report: EvalReport,
    pub digest: String,
}

/// Trains per the config and writes checkpoint, loss history, and a
/// validation-split evaluation under `out_dir`.
pub fn run_train(config: &RunConfig, out_dir: &Path) -> Result<TrainArtifacts, CliError> {
    config.validate()?;
    let digest = config_digest(config);
    let dataset = config.load_dataset()?;
    let model_config = config.bridge_config(dataset.vocab.len());
    model_config.validate()?;
    let params = BridgeParams::init(model_config, config.seed)?;
    let outcome = train(&dataset, params, &config.train.to_config(config.seed), config.task)?;

    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let history_path = out_dir.join(HISTORY_FILE);
    let mut history_text = format!("# config_digest={digest}\n");
    for (epoch, loss) in outcome.history.iter().enumerate() {
        history_text.push_str(&format!("{epoch}\t{loss}\n"));
    }
    std::fs::write(&history_path, history_text).map_err(|e| CliError::io(&history_path, e))?;

    let manifest_path = checkpoint::save(out_dir, &outcome.params, &digest)?;

    let valid_report = evaluate_split(&outcome.params, &dataset, config, EvalSplit::Validation, &digest)?;
    let report_path = out_dir.join(VALID_REPORT_FILE);
    std::fs::write(&report_path, valid_report.to_json() + "\n")
        .map_err(|e| CliError::io(&report_path, e))?;

    Ok(TrainArtifacts {
        out_dir: out_dir.to_path_buf(),
        manifest_path,
        history_path,
        report_path,
        outcome,
        valid_report,
        digest,
    })
}

fn evaluate_split(
    params: &BridgeParams,
    dataset: &Dataset,
    config: &RunConfig,
    split: EvalSplit,
    digest: &str,
) -> Result<EvalReport, CliError> {
    Ok(match config.task {
        Task::Link => evaluate_link(params, dataset, config.seed, split, &config.eval, digest)?,
        Task::Node => evaluate_fraud(params, dataset, config.seed, split, digest)?,
    })
}

/// Evaluates a checkpoint on the test split and writes the report next
/// to the checkpoint (or into `out_dir`).
pub fn run_eval(
    manifest_path: &Path,
    config: &RunConfig,
    allow_digest_mismatch: bool,
    out_dir: Option<&Path>,
) -> Result<(EvalReport, PathBuf), CliError> {
    config.validate()?;
    let digest = config_digest(config);
    let (params, manifest) = checkpoint::load(manifest_path)?;
    if manifest.config_digest != digest && !allow_digest_mismatch {
        return Err(CliError::DigestMismatch {
            expected: manifest.config_digest,
            found: digest,
        });
    }
    let dataset = config.load_dataset()?;
    let expected_model = config.bridge_config(dataset.vocab.len());
    if expected_model != manifest.model {
        return Err(CliError::Checkpoint {
            reason: format!(
                "checkpoint architecture {:?} does not match the config's {:?}",
                manifest.model, expected_model
            ),
        });
    }

    let report = evaluate_split(&params, &dataset, config, EvalSplit::Test, &digest)?;
    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| {
            manifest_path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .to_path_buf()
        });
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let report_path = dir.join(EVAL_REPORT_FILE);
    std::fs::write(&report_path, report.to_json() + "\n")
        .map_err(|e| CliError::io(&report_path, e))?;
    Ok((report, report_path))
}

/// Generates a synthetic dataset and writes it in the ingestion format.
pub fn run_synth(spec_path: &Path, seed: u64, out_dir: &Path) -> Result<(PathBuf, PathBuf), CliError> {
    let text = std::fs::read_to_string(spec_path).map_err(|e| CliError::io(spec_path, e))?;
    let spec: SyntheticSpec = serde_json::from_str(&text).map_err(|e| CliError::Config {
        reason: format!("{}: {e}", spec_path.display()),
    })?;
    let dataset = generate_synthetic(&spec, seed)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let nodes_path = out_dir.join("nodes.jsonl");
    let edges_path = out_dir.join("edges.jsonl");
    write_dataset(&dataset, &nodes_path, &edges_path)?;
    Ok((nodes_path, edges_path))
}

/// Per-group worst relative gradient error from central differences.
#[derive(Debug)]
pub struct GradcheckReport {
    /// Group name → worst relative error among the group's tensors.
    pub groups: Vec<(String, f64)>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn pass(&self) -> bool {
        self.groups.iter().all(|&(_, err)| err < self.tolerance)
    }
}

/// Compares every parameter's reverse-mode gradient against central
/// finite differences through the full pipeline (encode, message
/// passing, task loss), grouped by parameter family.
///
/// Cost is two full forward passes per scalar parameter, so the config
/// is required to be tiny: at most 8 nodes and max_seq_len at most 6.
pub fn run_gradcheck(config: &RunConfig) -> Result<GradcheckReport, CliError> {
    config.validate()?;
    let dataset = config.load_dataset()?;
    if dataset.num_nodes() > 8 || config.model.max_seq_len > 6 {
        return Err(CliError::Config {
            reason: format!(
                "gradcheck runs two forward passes per scalar parameter; \
                 keep it tiny (at most 8 nodes and max_seq_len 6, got {} and {})",
                dataset.num_nodes(),
                config.model.max_seq_len
            ),
        });
    }
    let model_config = config.bridge_config(dataset.vocab.len());
    model_config.validate()?;
    let params = BridgeParams::init(model_config.clone(), config.seed)?;

    let mut names = Vec::new();
    let mut tensors = Vec::new();
    params.visit(&mut |name, t| {
        names.push(name.to_string());
        tensors.push(t.clone());
    });

    // Plan the single full batch up front so sampling and split errors
    // surface here, leaving nothing but tape arithmetic in the repeatedly
    // evaluated loss closure.
    enum LossPlan {
        Link {
            mp_dataset: Dataset,
            positives: Vec<(u32, u32)>,
            negatives: Vec<(u32, u32)>,
        },
        Node {
            rows: Vec<usize>,
            targets: Vec<f64>,
        },
    }
    let plan = match config.task {
        Task::Link => {
            let split = dataset.edge_split(config.seed);
            if split.train.is_empty() {
                return Err(CliError::Config {
                    reason: "gradcheck on the link task needs at least one training edge".into(),
                });
            }
            let train_graph = split.train_graph(dataset.num_nodes()).map_err(|e| {
                CliError::Train(bridge_core::train::TrainError::from(e))
            })?;
            let mut rng = substream(config.seed, "train-negatives");
            let mut negatives = Vec::new();
            for &(u, v) in &split.train {
                for w in
                    sample_negatives(&train_graph, u, config.train.k_train, &mut rng, &[v])?
                {
                    negatives.push((u, w));
                }
            }
            LossPlan::Link {
                mp_dataset: Dataset {
                    graph: train_graph,
                    sequences: dataset.sequences.clone(),
                    node_labels: dataset.node_labels.clone(),
                    vocab: dataset.vocab.clone(),
                },
                positives: split.train,
                negatives,
            }
        }
        Task::Node => {
            let labels = dataset.node_labels.as_ref().ok_or(CliError::Config {
                reason: "gradcheck on the fraud task needs node labels".into(),
            })?;
            let split = dataset.node_split(config.seed);
            if split.train.is_empty() {
                return Err(CliError::Config {
                    reason: "gradcheck on the fraud task needs labeled training nodes".into(),
                });
            }
            LossPlan::Node {
                rows: split.train.iter().map(|&n| n as usize).collect(),
                targets: split
                    .train
                    .iter()
                    .map(|&n| f64::from(labels[n as usize].expect("labeled split")))
                    .collect(),
            }
        }
    };

    let to_tensor_err = |e: ModelError| -> TensorError {
        match e {
            ModelError::Tensor(t) => t,
            other => panic!("gradcheck forward failed: {other}"),
        }
    };
    let loss = |tape: &mut Tape, ids: &[TensorId]| -> Result<TensorId, TensorError> {
        let bridge_ids = BridgeParams::ids_from_slice(&model_config, ids);
        match &plan {
            LossPlan::Link {
                mp_dataset,
                positives,
                negatives,
            } => {
                let h = bridge_forward(tape, &bridge_ids, &model_config, mp_dataset)
                    .map_err(to_tensor_err)?;
                let mut score = |pairs: &[(u32, u32)]| -> Result<Vec<TensorId>, TensorError> {
                    pairs
                        .iter()
                        .map(|&(a, b)| {
                            let h_a = tape.select_rows(h, &[a as usize])?;
                            let h_b = tape.select_rows(h, &[b as usize])?;
                            tape.matmul_nt(h_a, h_b)
                        })
                        .collect()
                };
                let pos = score(positives)?;
                let neg = score(negatives)?;
                link_loss(tape, &pos, &neg).map_err(|e| match e {
                    bridge_core::train::TrainError::Model(ModelError::Tensor(t)) => t,
                    other => panic!("gradcheck loss failed: {other}"),
                })
            }
            LossPlan::Node { rows, targets } => {
                let h = bridge_forward(tape, &bridge_ids, &model_config, &dataset)
                    .map_err(to_tensor_err)?;
                let selected = tape.select_rows(h, rows)?;
                let projected = tape.matmul(selected, bridge_ids.head.weight)?;
                let logits = tape.add_bias(projected, bridge_ids.head.bias)?;
                let t = tape.constant(
                    Tensor::new(rows.len(), 1, targets.clone()).expect("shape"),
                );
                tape.bce_with_logits(logits, t)
            }
        }
    };

    let errors = finite_difference_check_per_param(&loss, &tensors, DEFAULT_FD_EPS)
        .map_err(|e| CliError::Model(e.into()))?;
    let mut by_group: BTreeMap<String, f64> = BTreeMap::new();
    for (name, err) in names.iter().zip(errors) {
        let group = parameter_group(name).to_string();
        let worst = by_group.entry(group).or_insert(0.0);
        *worst = worst.max(err);
    }
    Ok(GradcheckReport {
        groups: by_group.into_iter().collect(),
        tolerance: 1e-4,
    })
}
