//! Command implementations behind the binary: synthetic data generation,
//! fragmentation dumps, context-graph inspection, training, evaluation,
//! explanation, and similarity reports.
//!
//! Every command writes only under its `--out` directory, stamps artifacts
//! with the config digest, and ends stdout with one machine-readable JSON
//! status line. Exit codes: 0 success, 1 validation error, 2 runtime error.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, RunConfig};
use crate::dataset::{load_groundtruth, Dataset, Splits};
use crate::evalrun::{run_eval, EvalOptions};
use crate::evalx::{property_similarity, select_explanation};
use crate::fragment::RuleTable;
use crate::meta::{Checkpoint, MetaConfig, RunContext};
use crate::model::MolTable;
use crate::synth::{gen_dataset, write_dataset, SynthSpec};

#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
    pub exit: u8,
}

impl CliError {
    fn validation(message: impl Into<String>) -> Self {
        CliError { code: "validation", message: message.into(), exit: 1 }
    }

    fn runtime(message: impl Into<String>) -> Self {
        CliError { code: "runtime", message: message.into(), exit: 2 }
    }
}

macro_rules! impl_from_validation {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::validation(e.to_string())
            }
        }
    )*};
}
macro_rules! impl_from_runtime {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::runtime(e.to_string())
            }
        }
    )*};
}
impl_from_validation!(ConfigError, crate::dataset::DatasetError, crate::smiles::SmilesError);
impl_from_runtime!(
    crate::synth::SynthError,
    crate::meta::MetaError,
    crate::model::ModelError,
    crate::evalrun::EvalRunError,
    crate::evalx::EvalError,
    crate::fragment::FragmentError,
    crate::context::ContextError,
    std::io::Error
);

pub const ARTIFACT_FORMAT_VERSION: u32 = 1;

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    std::fs::write(path, serde_json::to_string_pretty(value).expect("serializable"))
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

/// Parse `key = value` lines into a synthetic-data spec. Lists use commas.
pub fn synth_spec_from_text(text: &str, path: &str) -> Result<SynthSpec, CliError> {
    let mut spec = SynthSpec::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        // full-line comments only: SMILES values may contain `#`
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::validation(format!(
                "{path}:{}: expected `key = value`, got `{raw}`",
                idx + 1
            )));
        };
        let (key, value) = (key.trim(), value.trim());
        let bad = |ty: &str| {
            CliError::validation(format!("{path}: key `{key}`: cannot parse `{value}` as {ty}"))
        };
        match key {
            "n_tasks_train" => spec.n_tasks_train = value.parse().map_err(|_| bad("usize"))?,
            "n_tasks_test" => spec.n_tasks_test = value.parse().map_err(|_| bad("usize"))?,
            "molecules_per_task" => {
                spec.molecules_per_task = value.parse().map_err(|_| bad("usize"))?
            }
            "label_noise" => spec.label_noise = value.parse().map_err(|_| bad("f64"))?,
            "seed" => spec.seed = value.parse().map_err(|_| bad("u64"))?,
            "motif_vocab" => {
                spec.motif_vocab = value.split(',').map(|s| s.trim().to_string()).collect()
            }
            "scaffold_vocab" => {
                spec.scaffold_vocab = value.split(',').map(|s| s.trim().to_string()).collect()
            }
            other => return Err(CliError::validation(format!("unknown config key `{other}`"))),
        }
    }
    Ok(spec)
}

pub fn synth_digest(spec: &SynthSpec) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_string(spec).expect("serializable"));
    let out = hasher.finalize();
    out[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn cmd_gen_synth(
    config: &Path,
    out: &Path,
    seed_override: Option<u64>,
) -> Result<serde_json::Value, CliError> {
    let text = std::fs::read_to_string(config)
        .map_err(|e| CliError::validation(format!("{}: {e}", config.display())))?;
    let mut spec = synth_spec_from_text(&text, &config.display().to_string())?;
    if let Some(seed) = seed_override {
        spec.seed = seed;
    }
    ensure_out_dir(out)?;
    let generated = gen_dataset(&spec, &RuleTable::v1())?;
    write_dataset(&generated, out)?;
    let digest = synth_digest(&spec);
    write_json(
        &out.join("manifest.json"),
        &json!({
            "format_version": ARTIFACT_FORMAT_VERSION,
            "config_digest": digest,
            "molecules": generated.dataset.num_molecules(),
            "tasks": generated.dataset.num_tasks(),
        }),
    )?;
    Ok(json!({
        "molecules": generated.dataset.num_molecules(),
        "tasks": generated.dataset.num_tasks(),
        "config_digest": digest,
        "out": out.display().to_string(),
    }))
}

pub fn cmd_fragment(input: &Path, out: &Path) -> Result<serde_json::Value, CliError> {
    let dataset = Dataset::load_tsv(input)?;
    ensure_out_dir(out)?;
    let rules = RuleTable::v1();
    let mut lines = String::new();
    let mut total_fragments = 0usize;
    for (id, smiles) in dataset.smiles.iter().enumerate() {
        let graph = crate::smiles::parse(smiles)?;
        let fragments = crate::fragment::fragment_molecule(&graph, id, &rules)?;
        total_fragments += fragments.len();
        let record = json!({
            "molecule_id": id,
            "smiles": smiles,
            "fragments": fragments.iter().map(|f| json!({
                "atom_indices": f.atom_indices,
                "canonical_key": f.canonical_key,
                "attachment_points": f.attachment_points,
            })).collect::<Vec<_>>(),
        });
        lines.push_str(&serde_json::to_string(&record).expect("serializable"));
        lines.push('\n');
    }
    let path = out.join("fragments.jsonl");
    std::fs::write(&path, lines)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    Ok(json!({
        "molecules": dataset.num_molecules(),
        "fragments": total_fragments,
        "rule_table": RuleTable::v1().version,
        "out": path.display().to_string(),
    }))
}

pub fn cmd_build_context(
    episode_path: &Path,
    data: &Path,
    out: &Path,
    context_aux: bool,
) -> Result<serde_json::Value, CliError> {
    let text = std::fs::read_to_string(episode_path)
        .map_err(|e| CliError::validation(format!("{}: {e}", episode_path.display())))?;
    let episode: crate::meta::Episode = serde_json::from_str(&text)
        .map_err(|e| CliError::validation(format!("{}: {e}", episode_path.display())))?;
    let dataset = Dataset::load_tsv(data)?;
    let table = MolTable::from_dataset(&dataset, &RuleTable::v1())?;
    ensure_out_dir(out)?;
    let fragments: std::collections::HashMap<usize, Vec<crate::fragment::FunctionalGroup>> =
        episode
            .support
            .iter()
            .chain(episode.query.iter())
            .map(|(m, _)| (*m, table.mols[*m].fragments.clone()))
            .collect();
    let aux = if context_aux {
        crate::meta::aux_labels_for(&dataset, &episode)
    } else {
        Vec::new()
    };
    let cg = crate::context::build_context_graph(&episode, &aux, &fragments)?;
    let payload = json!({
        "format_version": ARTIFACT_FORMAT_VERSION,
        "graph": cg,
    });
    write_json(&out.join("context.json"), &payload)?;
    Ok(json!({
        "nodes": cg.num_nodes(),
        "edges": cg.edges.len(),
        "out": out.join("context.json").display().to_string(),
    }))
}

fn load_run_inputs(
    config: &Path,
    data: &Path,
    splits: &Path,
    seed_override: Option<u64>,
) -> Result<(RunConfig, Dataset, Splits), CliError> {
    let mut run_cfg = RunConfig::parse_file(config)?;
    if let Some(seed) = seed_override {
        run_cfg.seed = seed;
    }
    let dataset = Dataset::load_tsv(data)?;
    let splits = Splits::load(splits)?;
    for task in splits.train_tasks.iter().chain(&splits.test_tasks) {
        if *task >= dataset.num_tasks() {
            return Err(CliError::validation(format!(
                "split references task {task} but the dataset has {}",
                dataset.num_tasks()
            )));
        }
    }
    Ok((run_cfg, dataset, splits))
}

pub fn cmd_train(
    config: &Path,
    data: &Path,
    splits_path: &Path,
    out: &Path,
    resume: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<serde_json::Value, CliError> {
    let (run_cfg, dataset, splits) = load_run_inputs(config, data, splits_path, seed_override)?;
    ensure_out_dir(out)?;
    let outcome = crate::meta::train(&run_cfg, &dataset, &splits, out, resume)?;
    Ok(json!({
        "checkpoint": outcome.checkpoint_path.display().to_string(),
        "metrics": outcome.metrics_path.display().to_string(),
        "config_digest": run_cfg.digest(),
        "final_query_auc": outcome.last_metrics.as_ref().map(|m| m.query_auc),
    }))
}

struct EvalInputs {
    run_cfg: RunConfig,
    dataset: Dataset,
    splits: Splits,
    table: MolTable,
    checkpoint: Checkpoint,
}

fn load_eval_inputs(
    config: &Path,
    checkpoint: &Path,
    data: &Path,
    splits_path: &Path,
    seed_override: Option<u64>,
) -> Result<EvalInputs, CliError> {
    let (run_cfg, dataset, splits) = load_run_inputs(config, data, splits_path, seed_override)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let table = MolTable::from_dataset(&dataset, &RuleTable::v1())?;
    Ok(EvalInputs { run_cfg, dataset, splits, table, checkpoint: ckpt })
}

fn eval_context<'a>(inputs: &'a EvalInputs) -> RunContext<'a> {
    let mut meta = MetaConfig::from(&inputs.run_cfg);
    meta.inner_steps = inputs.run_cfg.eval_inner_steps.max(1);
    RunContext {
        table: &inputs.table,
        dataset: &inputs.dataset,
        model_cfg: inputs.run_cfg.model_config(inputs.dataset.num_tasks()),
        meta,
        global_seed: inputs.run_cfg.seed,
        k_shot: inputs.run_cfg.k_shot,
        query_per_class: inputs.run_cfg.query_per_class,
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    config: &Path,
    checkpoint: &Path,
    data: &Path,
    splits_path: &Path,
    groundtruth: Option<&Path>,
    out: &Path,
    seed_override: Option<u64>,
) -> Result<serde_json::Value, CliError> {
    let inputs = load_eval_inputs(config, checkpoint, data, splits_path, seed_override)?;
    let ctx = eval_context(&inputs);
    let theta = inputs.checkpoint.params()?;
    let truth = match groundtruth {
        Some(path) => Some(load_groundtruth(path)?),
        None => None,
    };
    ensure_out_dir(out)?;
    let opts = EvalOptions::from_run(&inputs.run_cfg);
    let report = run_eval(
        &ctx,
        &theta,
        &inputs.checkpoint.fragment_bank,
        &inputs.splits.test_tasks,
        truth.as_ref(),
        &opts,
        &inputs.run_cfg.digest(),
    )?;
    let payload = serde_json::to_value(&report).expect("serializable");
    write_json(&out.join("report.json"), &payload)?;
    Ok(json!({
        "auc_mean": report.auc_mean,
        "tasks": report.tasks.len(),
        "out": out.join("report.json").display().to_string(),
    }))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_explain(
    config: &Path,
    checkpoint: &Path,
    data: &Path,
    splits_path: &Path,
    out: &Path,
    seed_override: Option<u64>,
) -> Result<serde_json::Value, CliError> {
    let inputs = load_eval_inputs(config, checkpoint, data, splits_path, seed_override)?;
    let ctx = eval_context(&inputs);
    let theta = inputs.checkpoint.params()?;
    ensure_out_dir(out)?;
    let opts = EvalOptions::from_run(&inputs.run_cfg);
    let collection = crate::evalrun::collect_task_evaluations(
        &ctx,
        &theta,
        &inputs.checkpoint.fragment_bank,
        &inputs.splits.test_tasks,
        &opts,
    )?;
    let mut lines = String::new();
    for m in &collection.molecules {
        let explanation =
            select_explanation(m.molecule_id, &m.relevance, opts.explanation_ratio)?;
        let record = json!({
            "molecule_id": m.molecule_id,
            "smiles": inputs.dataset.smiles[m.molecule_id],
            "task_id": m.task_id,
            "p": m.relevance,
            "selected": explanation.selected_atoms,
            "prediction": m.prediction,
        });
        lines.push_str(&serde_json::to_string(&record).expect("serializable"));
        lines.push('\n');
    }
    let path = out.join("explanations.jsonl");
    std::fs::write(&path, lines)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    Ok(json!({
        "molecules": collection.molecules.len(),
        "out": path.display().to_string(),
    }))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_report(
    config: &Path,
    checkpoint: &Path,
    data: &Path,
    splits_path: &Path,
    out: &Path,
    seed_override: Option<u64>,
) -> Result<serde_json::Value, CliError> {
    let inputs = load_eval_inputs(config, checkpoint, data, splits_path, seed_override)?;
    let ctx = eval_context(&inputs);
    let theta = inputs.checkpoint.params()?;
    ensure_out_dir(out)?;
    let opts = EvalOptions::from_run(&inputs.run_cfg);

    // property-property similarity over every task with enough data
    let mut tasks: Vec<usize> = Vec::new();
    for t in 0..inputs.dataset.num_tasks() {
        let labeled: Vec<bool> = inputs.dataset.labeled_molecules(t).map(|(_, l)| l).collect();
        let actives = labeled.iter().filter(|l| **l).count();
        let inactives = labeled.len() - actives;
        if actives > ctx.k_shot && inactives > ctx.k_shot {
            tasks.push(t);
        }
    }
    if tasks.len() < 2 {
        return Err(CliError::validation("need at least two evaluable properties"));
    }
    let collection = crate::evalrun::collect_task_evaluations(
        &ctx,
        &theta,
        &inputs.checkpoint.fragment_bank,
        &tasks,
        &opts,
    )?;
    let mut embeddings: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for m in &collection.molecules {
        if m.label {
            embeddings.entry(m.task_id).or_default().push(m.causal_vec.clone());
        }
    }
    let mut fragment_sets: BTreeMap<usize, std::collections::BTreeSet<String>> = BTreeMap::new();
    for &t in &tasks {
        let mut keys = std::collections::BTreeSet::new();
        for (mol, label) in inputs.dataset.labeled_molecules(t) {
            if label {
                for fg in &inputs.table.mols[mol].fragments {
                    keys.insert(fg.canonical_key.clone());
                }
            }
        }
        fragment_sets.insert(t, keys);
    }
    // keep only tasks with at least one collected active embedding
    let usable: Vec<usize> =
        tasks.iter().copied().filter(|t| embeddings.contains_key(t)).collect();
    fragment_sets.retain(|t, _| usable.contains(t));
    let embeddings: BTreeMap<usize, Vec<Vec<f64>>> =
        embeddings.into_iter().filter(|(t, _)| usable.contains(t)).collect();
    let report = property_similarity(&fragment_sets, &embeddings);

    let csv = |matrix: &Vec<Vec<f64>>| -> String {
        let mut s = String::from("property");
        for p in &report.properties {
            s.push_str(&format!(",task_{p}"));
        }
        s.push('\n');
        for (i, row) in matrix.iter().enumerate() {
            s.push_str(&format!("task_{}", report.properties[i]));
            for v in row {
                s.push_str(&format!(",{v:.6}"));
            }
            s.push('\n');
        }
        s
    };
    std::fs::write(out.join("jaccard.csv"), csv(&report.jaccard))
        .map_err(|e| CliError::runtime(e.to_string()))?;
    std::fs::write(out.join("inverse_jsd.csv"), csv(&report.inverse_jsd))
        .map_err(|e| CliError::runtime(e.to_string()))?;
    write_json(
        &out.join("correlation.json"),
        &json!({
            "format_version": ARTIFACT_FORMAT_VERSION,
            "config_digest": inputs.run_cfg.digest(),
            "pearson": report.pearson,
            "spearman": report.spearman,
            "properties": report.properties,
        }),
    )?;
    Ok(json!({
        "pearson": report.pearson,
        "spearman": report.spearman,
        "properties": report.properties.len(),
        "out": out.display().to_string(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_spec_parsing() {
        let spec = synth_spec_from_text(
            "n_tasks_train = 3\nn_tasks_test = 1\nmotif_vocab = O, N, Cl, S\nseed = 5",
            "t",
        )
        .unwrap();
        assert_eq!(spec.n_tasks_train, 3);
        assert_eq!(spec.motif_vocab, vec!["O", "N", "Cl", "S"]);
        assert!(synth_spec_from_text("bogus = 1", "t").is_err());
    }

    #[test]
    fn synth_digest_changes_with_spec() {
        let a = SynthSpec::default();
        let mut b = SynthSpec::default();
        b.seed = 9;
        assert_ne!(synth_digest(&a), synth_digest(&b));
    }
}
