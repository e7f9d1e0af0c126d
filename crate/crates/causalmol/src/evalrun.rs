//! Evaluation orchestration over held-out tasks: episode sampling with
//! confounder pools from the training fragment bank, adapted predictions,
//! and every reported metric in one pass.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::autodiff::{ParameterStore, Tape};
use crate::config::RunConfig;
use crate::evalx::{
    conditional_mi, consistency_jsd, explanation_quality, fidelity, roc_auc,
    select_explanation, CmiReport, EvalError,
};
use crate::intervene::{build_pool, ConfounderPool, PoolEntry};
use crate::meta::{
    aux_labels_for, inner_adapt, sample_episode, Episode, FragmentBankEntry, MetaError,
    RunContext,
};
use crate::model::{episode_forward, ForwardMode, LossSubset, ModelConfig, ModelError};
use crate::smiles::atom_features;
use crate::util::{derive_rng, derive_seed};

#[derive(Debug, Error)]
pub enum EvalRunError {
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("no tasks to evaluate")]
    NoTasks,
}

/// Encode every bank fragment with the current parameters and assemble a
/// pool that excludes the target property.
pub fn pool_from_bank(
    store: &ParameterStore,
    cfg: &ModelConfig,
    bank: &[FragmentBankEntry],
    target_property: usize,
    seed: u64,
) -> Result<ConfounderPool, EvalRunError> {
    let enc = cfg.molecular_encoder();
    let mut candidates = Vec::with_capacity(bank.len());
    for entry in bank {
        let graph = crate::smiles::parse(&entry.smiles).map_err(ModelError::Smiles)?;
        let feats = atom_features(&graph);
        let x = crate::autodiff::Tensor::matrix(
            graph.num_atoms(),
            crate::smiles::ATOM_FEATURE_DIM,
            feats.into_iter().flatten().collect(),
        )
        .map_err(ModelError::Tensor)?;
        let mut tape = Tape::new();
        let mut stats = crate::encoder::MessageStats::default();
        let xc = tape.constant(x);
        let h = enc
            .encode(
                &mut tape,
                store,
                xc,
                &crate::encoder::molecular_edges(&graph),
                graph.num_atoms(),
                &mut stats,
            )
            .map_err(ModelError::Tensor)?;
        let r = crate::encoder::readout_sum(&mut tape, h, None).map_err(ModelError::Tensor)?;
        candidates.push(PoolEntry {
            embedding: cfg.lift_confounder(tape.value(r).values()),
            source_property: entry.source_property,
            fragment_key: entry.key.clone(),
        });
    }
    let mut rng = derive_rng(&[seed, 0xBA2C]);
    Ok(build_pool(candidates, target_property, cfg.pool_size, &mut rng))
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskEval {
    pub task_id: usize,
    pub episodes: usize,
    pub auc_mean: f64,
    pub auc_std: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FidelityAggregate {
    pub mean_plus: f64,
    pub mean_minus: f64,
    pub frac_plus_greater: f64,
    pub molecules: usize,
    /// How masking was applied when computing the drops.
    pub masking: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExplanationAggregate {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub molecules: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub config_digest: String,
    pub tasks: Vec<TaskEval>,
    pub auc_mean: f64,
    pub auc_std: f64,
    /// Mean pairwise JSD of causal embeddings per property, trained masks.
    pub jsd_per_property: BTreeMap<usize, Option<f64>>,
    /// Same quantity under random masks of matched ratio.
    pub jsd_random_control: BTreeMap<usize, Option<f64>>,
    pub fidelity: Option<FidelityAggregate>,
    pub explanation: Option<ExplanationAggregate>,
    pub cmi: Option<CmiReport>,
    /// Softmax normalization turns embeddings into distributions for JSD.
    pub embedding_distribution: &'static str,
}

pub struct EvalOptions {
    pub episodes_per_task: usize,
    pub explanation_ratio: f64,
    /// Cap on fidelity evaluations (three forward passes per molecule).
    pub fidelity_molecules: usize,
    pub cmi_clusters: usize,
    pub seed: u64,
    /// Include auxiliary label edges at evaluation; off by default since
    /// unseen properties carry no trained signal.
    pub eval_aux: bool,
}

impl EvalOptions {
    pub fn from_run(cfg: &RunConfig) -> Self {
        EvalOptions {
            episodes_per_task: cfg.eval_episodes_per_task,
            explanation_ratio: cfg.explanation_ratio,
            fidelity_molecules: 64,
            cmi_clusters: 8,
            seed: cfg.seed,
            eval_aux: false,
        }
    }
}

/// One query molecule's evaluation artifacts, with the adapted parameters of
/// the episode it was scored in.
pub struct CollectedMolecule {
    pub molecule_id: usize,
    pub task_id: usize,
    pub label: bool,
    pub prediction: f64,
    pub relevance: Vec<f64>,
    pub causal_vec: Vec<f64>,
    pub confound_vec: Vec<f64>,
    pub causal_vec_random: Vec<f64>,
    pub episode: Arc<Episode>,
    pub adapted: Arc<ParameterStore>,
}

pub struct EvalCollection {
    pub tasks: Vec<TaskEval>,
    pub molecules: Vec<CollectedMolecule>,
}

/// Sample episodes on each listed task, adapt on the support set with a
/// bank-sourced confounder pool, and score queries deterministically.
/// Embeddings are collected under both trained and random masks.
pub fn collect_task_evaluations(
    ctx: &RunContext,
    theta: &ParameterStore,
    bank: &[FragmentBankEntry],
    tasks: &[usize],
    opts: &EvalOptions,
) -> Result<EvalCollection, EvalRunError> {
    if tasks.is_empty() {
        return Err(EvalRunError::NoTasks);
    }
    let mut out_tasks = Vec::new();
    let mut molecules: Vec<CollectedMolecule> = Vec::new();
    let mut seen: BTreeSet<(usize, usize)> = BTreeSet::new();
    for &task in tasks {
        let mut aucs = Vec::new();
        for e in 0..opts.episodes_per_task {
            let ep_seed = derive_seed(&[opts.seed, task as u64, e as u64, 0xEA1]);
            let episode =
                sample_episode(ctx.dataset, task, ctx.k_shot, ctx.query_per_class, ep_seed)?;
            let aux =
                if opts.eval_aux { aux_labels_for(ctx.dataset, &episode) } else { Vec::new() };
            let pool = pool_from_bank(theta, &ctx.model_cfg, bank, task, ep_seed)?;
            let adapted =
                inner_adapt(ctx, theta, &episode, &aux, &pool, ctx.model_cfg.mask.tau_floor)?;

            let mut tape = Tape::new();
            let out = episode_forward(
                &mut tape,
                &adapted,
                ctx.table,
                &ctx.model_cfg,
                &episode,
                &aux,
                &LossSubset::Query,
                &pool,
                ForwardMode::HardEval,
                None,
            )?;
            let labels: Vec<bool> = out.labels.iter().map(|l| *l > 0.5).collect();
            if let Ok(auc) = roc_auc(&out.predictions, &labels) {
                aucs.push(auc);
            }
            // the random control keeps exactly as many atoms per molecule as
            // the trained hard mask did
            let keep: Vec<usize> = out
                .diagnostics
                .iter()
                .map(|d| d.mask.iter().filter(|v| **v > 0.5).count())
                .collect();
            let mut rand_tape = Tape::new();
            let rand_out = episode_forward(
                &mut rand_tape,
                &adapted,
                ctx.table,
                &ctx.model_cfg,
                &episode,
                &aux,
                &LossSubset::Query,
                &pool,
                ForwardMode::RandomMask { keep, draw_seed: derive_seed(&[ep_seed, 0xACE]) },
                None,
            )?;
            let episode = Arc::new(episode);
            let adapted = Arc::new(adapted);
            for (i, diag) in out.diagnostics.iter().enumerate() {
                if !seen.insert((task, diag.molecule_id)) {
                    continue;
                }
                molecules.push(CollectedMolecule {
                    molecule_id: diag.molecule_id,
                    task_id: task,
                    label: labels[i],
                    prediction: out.predictions[i],
                    relevance: diag.relevance.clone(),
                    causal_vec: diag.causal_vec.clone(),
                    confound_vec: diag.confound_vec.clone(),
                    causal_vec_random: rand_out.diagnostics[i].causal_vec.clone(),
                    episode: episode.clone(),
                    adapted: adapted.clone(),
                });
            }
        }
        let n = aucs.len().max(1) as f64;
        let mean = aucs.iter().sum::<f64>() / n;
        let var = aucs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        out_tasks.push(TaskEval {
            task_id: task,
            episodes: aucs.len(),
            auc_mean: mean,
            auc_std: var.sqrt(),
        });
    }
    Ok(EvalCollection { tasks: out_tasks, molecules })
}

/// Full evaluation: AUC per task, JSD consistency against the random-mask
/// control, fidelity, explanation quality when ground truth is available,
/// and the conditional-MI diagnostic.
pub fn run_eval(
    ctx: &RunContext,
    theta: &ParameterStore,
    bank: &[FragmentBankEntry],
    tasks: &[usize],
    ground_truth: Option<&BTreeMap<usize, Vec<usize>>>,
    opts: &EvalOptions,
    config_digest: &str,
) -> Result<EvalReport, EvalRunError> {
    let collection = collect_task_evaluations(ctx, theta, bank, tasks, opts)?;
    let aucs: Vec<f64> = collection.tasks.iter().map(|t| t.auc_mean).collect();
    let auc_mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    let auc_std = (aucs.iter().map(|a| (a - auc_mean) * (a - auc_mean)).sum::<f64>()
        / aucs.len() as f64)
        .sqrt();

    let mut trained_groups: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    let mut random_groups: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for m in &collection.molecules {
        if m.label {
            trained_groups.entry(m.task_id).or_default().push(m.causal_vec.clone());
            random_groups.entry(m.task_id).or_default().push(m.causal_vec_random.clone());
        }
    }
    let jsd_per_property = consistency_jsd(&trained_groups);
    let jsd_random_control = consistency_jsd(&random_groups);

    let mut fid = None;
    let mut expl = None;
    let subset: Vec<&CollectedMolecule> =
        collection.molecules.iter().take(opts.fidelity_molecules).collect();
    if !subset.is_empty() {
        let mut plus_sum = 0.0;
        let mut minus_sum = 0.0;
        let mut plus_greater = 0usize;
        let mut pr = (0.0, 0.0, 0.0);
        let mut truth_count = 0usize;
        for m in &subset {
            let explanation =
                select_explanation(m.molecule_id, &m.relevance, opts.explanation_ratio)?;
            let (fp, fm) = fidelity(
                &m.adapted,
                ctx.table,
                &ctx.model_cfg,
                &m.episode,
                m.label,
                &explanation,
            )?;
            plus_sum += fp;
            minus_sum += fm;
            if fp > fm {
                plus_greater += 1;
            }
            if let (Some(gt), true) = (ground_truth, m.label) {
                if let Some(truth) = gt.get(&m.molecule_id) {
                    let (p, r, f1) = explanation_quality(&explanation.selected_atoms, truth);
                    pr = (pr.0 + p, pr.1 + r, pr.2 + f1);
                    truth_count += 1;
                }
            }
        }
        let n = subset.len() as f64;
        fid = Some(FidelityAggregate {
            mean_plus: plus_sum / n,
            mean_minus: minus_sum / n,
            frac_plus_greater: plus_greater as f64 / n,
            molecules: subset.len(),
            masking: "node_embeddings_zeroed",
        });
        if truth_count > 0 {
            let t = truth_count as f64;
            expl = Some(ExplanationAggregate {
                precision: pr.0 / t,
                recall: pr.1 / t,
                f1: pr.2 / t,
                molecules: truth_count,
            });
        }
    }

    let cmi = {
        let c: Vec<Vec<f64>> =
            collection.molecules.iter().map(|m| m.causal_vec.clone()).collect();
        let s: Vec<Vec<f64>> =
            collection.molecules.iter().map(|m| m.confound_vec.clone()).collect();
        let y: Vec<bool> = collection.molecules.iter().map(|m| m.label).collect();
        conditional_mi(&c, &s, &y, opts.cmi_clusters, opts.seed).ok()
    };

    Ok(EvalReport {
        format_version: 1,
        config_digest: config_digest.to_string(),
        tasks: collection.tasks,
        auc_mean,
        auc_std,
        jsd_per_property,
        jsd_random_control,
        fidelity: fid,
        explanation: expl,
        cmi,
        embedding_distribution: "softmax_t1",
    })
}
