//! Episodic sampling and MAML-style inner/outer optimization.
//!
//! Each outer step samples a batch of episodes, adapts a copy of the
//! parameters per episode on its support set, evaluates the adapted copy on
//! the query set, and applies the averaged meta-gradient to the shared
//! parameters. First-order mode applies the query gradient directly; the
//! second-order mode corrects it with a Hessian-vector product obtained by
//! replaying the support gradient at shifted parameters.

use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sgd_step, GradientMap, ParameterStore, SerializedTensor, Tape, TensorError};
use crate::config::RunConfig;
use crate::context::AuxLabel;
use crate::dataset::{Dataset, Splits};
use crate::evalx::roc_auc;
use crate::model::{
    episode_forward, init_params, pool_from_sibling_episodes, ForwardMode, LossSubset,
    ModelConfig, ModelError, MolTable,
};
use crate::util::{derive_rng, derive_seed};
use rand::seq::SliceRandom;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("task {task}: need {need} labeled {class} molecules, found {found}")]
    InsufficientMolecules { task: usize, class: &'static str, need: usize, found: usize },
    #[error("task {task}: no query candidates for class {class}")]
    NoQueryCandidates { task: usize, class: &'static str },
    #[error("no training tasks in the split")]
    NoTrainTasks,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

fn io_err(path: &Path, source: std::io::Error) -> MetaError {
    MetaError::Io { path: path.display().to_string(), source }
}

/// A 2-way K-shot task instance: K actives and K inactives in the support
/// set, held-out labeled query molecules, one target property.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub task_id: usize,
    pub support: Vec<(usize, bool)>,
    pub query: Vec<(usize, bool)>,
    pub k_shot: usize,
    pub rng_seed: u64,
}

/// Sample without replacement: K per class into the support set, then up to
/// `query_per_class` per class (capped at availability) into the query set.
pub fn sample_episode(
    dataset: &Dataset,
    task_id: usize,
    k_shot: usize,
    query_per_class: usize,
    seed: u64,
) -> Result<Episode, MetaError> {
    let mut actives = Vec::new();
    let mut inactives = Vec::new();
    for (mol, label) in dataset.labeled_molecules(task_id) {
        if label {
            actives.push(mol);
        } else {
            inactives.push(mol);
        }
    }
    for (class, pool) in [("active", &actives), ("inactive", &inactives)] {
        if pool.len() < k_shot + 1 {
            if pool.len() < k_shot {
                return Err(MetaError::InsufficientMolecules {
                    task: task_id,
                    class,
                    need: k_shot,
                    found: pool.len(),
                });
            }
            return Err(MetaError::NoQueryCandidates { task: task_id, class });
        }
    }
    let mut rng = derive_rng(&[seed, task_id as u64]);
    actives.shuffle(&mut rng);
    inactives.shuffle(&mut rng);

    let mut support: Vec<(usize, bool)> = Vec::with_capacity(2 * k_shot);
    support.extend(actives[..k_shot].iter().map(|m| (*m, true)));
    support.extend(inactives[..k_shot].iter().map(|m| (*m, false)));
    let mut query: Vec<(usize, bool)> = Vec::new();
    let take_a = query_per_class.min(actives.len() - k_shot);
    let take_i = query_per_class.min(inactives.len() - k_shot);
    query.extend(actives[k_shot..k_shot + take_a].iter().map(|m| (*m, true)));
    query.extend(inactives[k_shot..k_shot + take_i].iter().map(|m| (*m, false)));

    Ok(Episode { task_id, support, query, k_shot, rng_seed: seed })
}

/// Known labels on non-target properties for the episode's molecules.
pub fn aux_labels_for(dataset: &Dataset, episode: &Episode) -> Vec<AuxLabel> {
    let mut out = Vec::new();
    for (m, _) in episode.support.iter().chain(episode.query.iter()) {
        for task in 0..dataset.num_tasks() {
            if task == episode.task_id {
                continue;
            }
            if let Some(label) = dataset.label(*m, task) {
                out.push((*m, task, label));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OuterOptimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub batch_episodes: usize,
    pub inner_steps: usize,
    pub epochs: usize,
    pub first_order: bool,
    pub outer_optimizer: OuterOptimizer,
    pub weight_decay: f64,
    /// Outer meta-gradient norm clip; 0 disables.
    pub grad_clip: f64,
}

impl From<&RunConfig> for MetaConfig {
    fn from(cfg: &RunConfig) -> Self {
        MetaConfig {
            inner_lr: cfg.inner_lr,
            outer_lr: cfg.outer_lr,
            batch_episodes: cfg.batch_episodes,
            inner_steps: cfg.inner_steps,
            epochs: cfg.epochs,
            first_order: cfg.first_order,
            outer_optimizer: cfg.outer_optimizer,
            weight_decay: cfg.weight_decay,
            grad_clip: cfg.grad_clip,
        }
    }
}

/// First/second moment state for the outer Adam updates. The inner loop
/// stays plain gradient descent.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub m: IndexMap<String, Vec<f64>>,
    pub v: IndexMap<String, Vec<f64>>,
    pub t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Weight matrices decay; biases, eps scalars, and embedding tables do not
/// (an unused embedding row would otherwise shrink to zero on pure decay).
fn decays(name: &str) -> bool {
    name.ends_with(".w") || name.ends_with(".w1") || name.ends_with(".w2")
}

/// One Adam step with L2 weight decay folded into the gradient.
pub fn adam_step(
    params: &ParameterStore,
    grads: &GradientMap,
    lr: f64,
    weight_decay: f64,
    state: &mut AdamState,
) -> Result<ParameterStore, TensorError> {
    state.t += 1;
    let t = state.t as i32;
    let mut out = ParameterStore::new(params.rng_seed);
    for (name, tensor) in params.iter() {
        let zeros = vec![0.0; tensor.numel()];
        let wd = if decays(name) { weight_decay } else { 0.0 };
        let g: Vec<f64> = match grads.get(name) {
            Some(g) => g
                .values()
                .iter()
                .zip(tensor.values())
                .map(|(g, w)| g + wd * w)
                .collect(),
            None => zeros.clone(),
        };
        let m = state.m.entry(name.to_string()).or_insert_with(|| zeros.clone());
        let v = state.v.entry(name.to_string()).or_insert_with(|| zeros.clone());
        let mut values = tensor.values().to_vec();
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..values.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        out.insert(name, crate::autodiff::Tensor::new(tensor.shape().to_vec(), values)?)?;
    }
    Ok(out)
}

/// Shared read-only state for one training or evaluation run.
pub struct RunContext<'a> {
    pub table: &'a MolTable,
    pub dataset: &'a Dataset,
    pub model_cfg: ModelConfig,
    pub meta: MetaConfig,
    pub global_seed: u64,
    pub k_shot: usize,
    pub query_per_class: usize,
}

const STREAM_SUPPORT: u64 = 0x50;
const STREAM_QUERY: u64 = 0x90;
const STREAM_POOL: u64 = 0xB0;

fn support_draw_seed(ctx: &RunContext, episode: &Episode, inner_step: usize) -> u64 {
    derive_seed(&[ctx.global_seed, episode.rng_seed, inner_step as u64, STREAM_SUPPORT])
}

fn query_draw_seed(ctx: &RunContext, episode: &Episode) -> u64 {
    derive_seed(&[ctx.global_seed, episode.rng_seed, STREAM_QUERY])
}

/// Adapt a copy of the parameters on the episode's support set. The input
/// parameters are never touched; the adapted copy is returned.
pub fn inner_adapt(
    ctx: &RunContext,
    theta: &ParameterStore,
    episode: &Episode,
    aux: &[AuxLabel],
    pool: &crate::intervene::ConfounderPool,
    tau: f64,
) -> Result<ParameterStore, MetaError> {
    let mut adapted = theta.clone();
    for step in 0..ctx.meta.inner_steps {
        let mut tape = Tape::new();
        let out = episode_forward(
            &mut tape,
            &adapted,
            ctx.table,
            &ctx.model_cfg,
            episode,
            aux,
            &LossSubset::Support,
            pool,
            ForwardMode::Train { tau, draw_seed: support_draw_seed(ctx, episode, step) },
            None,
        )?;
        let grads = tape.backward(out.loss, &adapted)?;
        adapted = sgd_step(&adapted, &grads, ctx.meta.inner_lr)?;
    }
    Ok(adapted)
}

/// Support-set gradient at arbitrary parameters with the episode's frozen
/// draws; used by the second-order correction to replay the inner step.
fn support_grads(
    ctx: &RunContext,
    theta: &ParameterStore,
    episode: &Episode,
    aux: &[AuxLabel],
    pool: &crate::intervene::ConfounderPool,
    tau: f64,
) -> Result<GradientMap, MetaError> {
    let mut tape = Tape::new();
    let out = episode_forward(
        &mut tape,
        theta,
        ctx.table,
        &ctx.model_cfg,
        episode,
        aux,
        &LossSubset::Support,
        pool,
        ForwardMode::Train { tau, draw_seed: support_draw_seed(ctx, episode, 0) },
        None,
    )?;
    Ok(tape.backward(out.loss, theta)?)
}

fn add_scaled(theta: &ParameterStore, v: &GradientMap, scale: f64) -> ParameterStore {
    let mut out = theta.clone();
    let names: Vec<String> = out.names().map(|s| s.to_string()).collect();
    for name in names {
        if let Some(g) = v.get(&name) {
            for i in 0..g.numel() {
                out.perturb(&name, i, scale * g.values()[i]);
            }
        }
    }
    out
}

/// Full meta-gradient for a single inner step:
/// `g_meta = g_q - inner_lr * H_support(theta) g_q`, with the Hessian-vector
/// product from central differences of the support gradient.
fn second_order_meta_grad(
    ctx: &RunContext,
    theta: &ParameterStore,
    episode: &Episode,
    aux: &[AuxLabel],
    pool: &crate::intervene::ConfounderPool,
    tau: f64,
    g_q: &GradientMap,
) -> Result<GradientMap, MetaError> {
    let v_norm = g_q.l2_norm();
    if v_norm == 0.0 {
        return Ok(g_q.clone());
    }
    let r = 1e-4 / v_norm;
    let plus = support_grads(ctx, &add_scaled(theta, g_q, r), episode, aux, pool, tau)?;
    let minus = support_grads(ctx, &add_scaled(theta, g_q, -r), episode, aux, pool, tau)?;
    let mut hvp = plus;
    hvp.add_scaled(&minus, -1.0);
    hvp.scale(1.0 / (2.0 * r));
    let mut meta = g_q.clone();
    meta.add_scaled(&hvp, -ctx.meta.inner_lr);
    Ok(meta)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub tau: f64,
    pub loss_causal: f64,
    pub loss_kl: f64,
    pub loss_var: f64,
    pub query_loss: f64,
    pub query_auc: f64,
    pub episodes: usize,
    pub skipped: bool,
}

struct EpisodeOutcome {
    meta_grad: GradientMap,
    loss_causal: f64,
    loss_kl: f64,
    loss_var: f64,
    query_loss: f64,
    query_auc: f64,
}

/// One outer step over a batch of episodes: per-episode confounder pools
/// come from the sibling episodes. Episodes may evaluate in parallel;
/// accumulation stays in episode order so results are thread-count
/// independent. A non-finite episode skips the whole batch.
pub fn outer_step(
    ctx: &RunContext,
    theta: &ParameterStore,
    episodes: &[Episode],
    epoch: usize,
    step: usize,
    tau: f64,
    adam: &mut Option<AdamState>,
) -> Result<(ParameterStore, StepMetrics), MetaError> {
    let prepared: Vec<(Episode, Vec<AuxLabel>, crate::intervene::ConfounderPool)> = episodes
        .iter()
        .enumerate()
        .map(|(i, ep)| {
            let aux = if ctx.model_cfg.context_aux {
                aux_labels_for(ctx.dataset, ep)
            } else {
                Vec::new()
            };
            let mut rng =
                derive_rng(&[ctx.global_seed, epoch as u64, i as u64, STREAM_POOL]);
            let pool = pool_from_sibling_episodes(
                theta,
                ctx.table,
                &ctx.model_cfg,
                episodes,
                ep.task_id,
                &mut rng,
            )?;
            Ok((ep.clone(), aux, pool))
        })
        .collect::<Result<_, MetaError>>()?;

    let eval_episode = |(ep, aux, pool): &(
        Episode,
        Vec<AuxLabel>,
        crate::intervene::ConfounderPool,
    )|
     -> Result<EpisodeOutcome, MetaError> {
        let adapted = inner_adapt(ctx, theta, ep, aux, pool, tau)?;
        let mut tape = Tape::new();
        let out = episode_forward(
            &mut tape,
            &adapted,
            ctx.table,
            &ctx.model_cfg,
            ep,
            aux,
            &LossSubset::Query,
            pool,
            ForwardMode::Train { tau, draw_seed: query_draw_seed(ctx, ep) },
            None,
        )?;
        let g_q = tape.backward(out.loss, &adapted)?;
        let meta_grad = if ctx.meta.first_order {
            g_q
        } else {
            second_order_meta_grad(ctx, theta, ep, aux, pool, tau, &g_q)?
        };
        let labels: Vec<bool> = out.labels.iter().map(|l| *l > 0.5).collect();
        let auc = roc_auc(&out.predictions, &labels).unwrap_or(0.5);
        Ok(EpisodeOutcome {
            meta_grad,
            loss_causal: out.loss_causal,
            loss_kl: out.loss_kl,
            loss_var: out.loss_var,
            query_loss: out.loss_causal
                + ctx.model_cfg.weights.alpha1 * out.loss_kl
                + ctx.model_cfg.weights.alpha2 * out.loss_var,
            query_auc: auc,
        })
    };

    let results: Vec<Result<EpisodeOutcome, MetaError>> =
        prepared.par_iter().map(eval_episode).collect();

    let mut outcomes = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(o) => outcomes.push(o),
            Err(MetaError::Model(ModelError::NonFiniteLoss(task))) => {
                // batch skipped; parameters unchanged
                let metrics = StepMetrics {
                    step,
                    epoch,
                    tau,
                    loss_causal: f64::NAN,
                    loss_kl: f64::NAN,
                    loss_var: f64::NAN,
                    query_loss: f64::NAN,
                    query_auc: f64::NAN,
                    episodes: episodes.len(),
                    skipped: true,
                };
                eprintln!("skipping batch at step {step}: non-finite loss in task {task}");
                return Ok((theta.clone(), metrics));
            }
            Err(e) => return Err(e),
        }
    }

    let b = outcomes.len() as f64;
    let mut mean_grad = GradientMap::zeros_like(theta);
    for o in &outcomes {
        mean_grad.add_scaled(&o.meta_grad, 1.0 / b);
    }
    if ctx.meta.grad_clip > 0.0 {
        let norm = mean_grad.l2_norm();
        if norm > ctx.meta.grad_clip {
            mean_grad.scale(ctx.meta.grad_clip / norm);
        }
    }
    let updated = match ctx.meta.outer_optimizer {
        OuterOptimizer::Sgd => sgd_step(theta, &mean_grad, ctx.meta.outer_lr)?,
        OuterOptimizer::Adam => {
            let state = adam.get_or_insert_with(AdamState::default);
            adam_step(theta, &mean_grad, ctx.meta.outer_lr, ctx.meta.weight_decay, state)?
        }
    };
    let metrics = StepMetrics {
        step,
        epoch,
        tau,
        loss_causal: outcomes.iter().map(|o| o.loss_causal).sum::<f64>() / b,
        loss_kl: outcomes.iter().map(|o| o.loss_kl).sum::<f64>() / b,
        loss_var: outcomes.iter().map(|o| o.loss_var).sum::<f64>() / b,
        query_loss: outcomes.iter().map(|o| o.query_loss).sum::<f64>() / b,
        query_auc: outcomes.iter().map(|o| o.query_auc).sum::<f64>() / b,
        episodes: episodes.len(),
        skipped: false,
    };
    Ok((updated, metrics))
}

/// A fragment remembered from training, re-encodable at evaluation time for
/// confounder pools on unseen properties.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FragmentBankEntry {
    pub smiles: String,
    pub source_property: usize,
    pub key: String,
}

const BANK_KEYS_PER_PROPERTY: usize = 64;

/// Distinct fragment keys per training property, capped and ordered by first
/// appearance over molecule ids.
pub fn build_fragment_bank(
    dataset: &Dataset,
    table: &MolTable,
    train_tasks: &[usize],
) -> Vec<FragmentBankEntry> {
    let mut bank = Vec::new();
    for &task in train_tasks {
        let mut seen = std::collections::HashSet::new();
        for (mol, _) in dataset.labeled_molecules(task) {
            if seen.len() >= BANK_KEYS_PER_PROPERTY {
                break;
            }
            for fg in &table.mols[mol].fragments {
                if seen.len() >= BANK_KEYS_PER_PROPERTY {
                    break;
                }
                if seen.insert(fg.canonical_key.clone()) {
                    let sub = fg.subgraph(&table.mols[mol].graph);
                    if let Ok(smiles) = crate::smiles::serialize(&sub) {
                        bank.push(FragmentBankEntry {
                            smiles,
                            source_property: task,
                            key: fg.canonical_key.clone(),
                        });
                    }
                }
            }
        }
    }
    bank
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_digest: String,
    pub rng_seed: u64,
    pub epoch: usize,
    pub parameters: IndexMap<String, SerializedTensor>,
    pub fragment_bank: Vec<FragmentBankEntry>,
    #[serde(default)]
    pub optimizer_state: Option<AdamState>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), MetaError> {
        let text = serde_json::to_string(self).expect("serializable checkpoint");
        std::fs::write(path, text).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint, MetaError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| MetaError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(MetaError::Checkpoint {
                path: path.display().to_string(),
                message: format!(
                    "format version {} (expected {})",
                    ckpt.format_version, CHECKPOINT_FORMAT_VERSION
                ),
            });
        }
        Ok(ckpt)
    }

    pub fn params(&self) -> Result<ParameterStore, MetaError> {
        Ok(ParameterStore::from_serializable(self.rng_seed, &self.parameters)?)
    }
}

pub struct TrainOutcome {
    pub params: ParameterStore,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub last_metrics: Option<StepMetrics>,
}

/// Full training loop: `epochs` outer steps of `batch_episodes` episodes
/// each, checkpointing every `checkpoint_every` steps and at the end,
/// metrics appended as JSON lines. Fully reproducible from (seed, config).
pub fn train(
    run_cfg: &RunConfig,
    dataset: &Dataset,
    splits: &Splits,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome, MetaError> {
    if splits.train_tasks.is_empty() {
        return Err(MetaError::NoTrainTasks);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let table = MolTable::from_dataset(dataset, &crate::fragment::RuleTable::v1())?;
    let model_cfg = run_cfg.model_config(dataset.num_tasks());
    let ctx = RunContext {
        table: &table,
        dataset,
        model_cfg,
        meta: MetaConfig::from(run_cfg),
        global_seed: run_cfg.seed,
        k_shot: run_cfg.k_shot,
        query_per_class: run_cfg.query_per_class,
    };
    let digest = run_cfg.digest();
    let bank = build_fragment_bank(dataset, &table, &splits.train_tasks);

    let (mut theta, start_epoch, mut adam) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config_digest != digest {
                return Err(MetaError::Checkpoint {
                    path: path.display().to_string(),
                    message: format!(
                        "config digest {} does not match current {digest}",
                        ckpt.config_digest
                    ),
                });
            }
            let next = ckpt.epoch + 1;
            let state = ckpt.optimizer_state.clone();
            (ckpt.params()?, next, state)
        }
        None => (init_params(&ctx.model_cfg, run_cfg.seed)?, 0, None),
    };

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| io_err(&metrics_path, e))?;
    let checkpoint_path = out_dir.join("checkpoint.json");
    let mask = run_cfg.mask_config(false);

    let save = |theta: &ParameterStore, epoch: usize, adam: &Option<AdamState>| -> Result<(), MetaError> {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config_digest: digest.clone(),
            rng_seed: run_cfg.seed,
            epoch,
            parameters: theta.to_serializable(),
            fragment_bank: bank.clone(),
            optimizer_state: adam.clone(),
        }
        .save(&checkpoint_path)
    };

    let mut last_metrics = None;
    if run_cfg.epochs == 0 || start_epoch >= run_cfg.epochs {
        save(&theta, start_epoch.saturating_sub(1), &adam)?;
        return Ok(TrainOutcome { params: theta, checkpoint_path, metrics_path, last_metrics });
    }

    for epoch in start_epoch..run_cfg.epochs {
        let tau = mask.tau_at_epoch(epoch);
        let mut episodes = Vec::with_capacity(ctx.meta.batch_episodes);
        for i in 0..ctx.meta.batch_episodes {
            let mut task_rng =
                derive_rng(&[run_cfg.seed, epoch as u64, i as u64, 0x7A5C]);
            let task = splits.train_tasks[task_rng.gen_range(0..splits.train_tasks.len())];
            let ep_seed = derive_seed(&[run_cfg.seed, epoch as u64, i as u64, 0xE9]);
            episodes.push(sample_episode(
                dataset,
                task,
                run_cfg.k_shot,
                run_cfg.query_per_class,
                ep_seed,
            )?);
        }
        let (updated, metrics) =
            outer_step(&ctx, &theta, &episodes, epoch, epoch, tau, &mut adam)?;
        theta = updated;
        let line = serde_json::to_string(&metrics).expect("serializable metrics");
        writeln!(metrics_file, "{line}").map_err(|e| io_err(&metrics_path, e))?;
        last_metrics = Some(metrics);
        if run_cfg.checkpoint_every > 0 && (epoch + 1) % run_cfg.checkpoint_every == 0 {
            save(&theta, epoch, &adam)?;
        }
    }
    save(&theta, run_cfg.epochs - 1, &adam)?;
    Ok(TrainOutcome { params: theta, checkpoint_path, metrics_path, last_metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;

    fn toy_dataset(actives: usize, inactives: usize) -> Dataset {
        let mut smiles = Vec::new();
        let mut labels = Vec::new();
        for i in 0..actives + inactives {
            smiles.push(if i % 2 == 0 { "CCO".to_string() } else { "CCN".to_string() });
            labels.push(vec![Some(i < actives)]);
        }
        Dataset { smiles, labels, task_names: vec!["task_0".into()] }
    }

    #[test]
    fn minimum_feasible_episode() {
        let ds = toy_dataset(2, 2);
        let ep = sample_episode(&ds, 0, 1, 4, 7).unwrap();
        assert_eq!(ep.support.len(), 2);
        assert_eq!(ep.support.iter().filter(|(_, l)| *l).count(), 1);
        assert!(!ep.query.is_empty());
    }

    #[test]
    fn same_seed_same_episode() {
        let ds = toy_dataset(30, 30);
        let a = sample_episode(&ds, 0, 5, 8, 42).unwrap();
        let b = sample_episode(&ds, 0, 5, 8, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_episode(&ds, 0, 5, 8, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn support_and_query_disjoint() {
        let ds = toy_dataset(100, 100);
        let ep = sample_episode(&ds, 0, 5, 16, 3).unwrap();
        assert_eq!(ep.support.len(), 10);
        let support: std::collections::HashSet<usize> =
            ep.support.iter().map(|(m, _)| *m).collect();
        assert!(ep.query.iter().all(|(m, _)| !support.contains(m)));
    }

    #[test]
    fn insufficient_data_reports_counts() {
        let ds = toy_dataset(3, 9);
        let err = sample_episode(&ds, 0, 5, 4, 1).unwrap_err();
        match err {
            MetaError::InsufficientMolecules { need, found, .. } => {
                assert_eq!((need, found), (5, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn support_without_query_candidates_rejected() {
        let ds = toy_dataset(5, 6);
        assert!(matches!(
            sample_episode(&ds, 0, 5, 4, 1),
            Err(MetaError::NoQueryCandidates { .. })
        ));
    }

    fn small_run() -> (Dataset, MolTable, ModelConfig) {
        let smiles =
            ["Oc1ccccc1", "Cc1ccccc1", "OC1CCCCC1", "CCC", "CCO", "CCN", "NC1CCCCC1", "CCS"];
        let dataset = Dataset {
            smiles: smiles.iter().map(|s| s.to_string()).collect(),
            labels: (0..smiles.len())
                .map(|i| vec![Some(i % 2 == 0), if i < 6 { Some(i < 3) } else { None }])
                .collect(),
            task_names: vec!["t0".into(), "t1".into()],
        };
        let table = MolTable::from_dataset(&dataset, &crate::fragment::RuleTable::v1()).unwrap();
        let run = RunConfig { dim: 4, encoder_layers: 2, context_layers: 2, ..Default::default() };
        let model_cfg = run.model_config(2);
        (dataset, table, model_cfg)
    }

    fn run_ctx<'a>(
        dataset: &'a Dataset,
        table: &'a MolTable,
        model_cfg: &ModelConfig,
        inner_lr: f64,
        outer_lr: f64,
        first_order: bool,
    ) -> RunContext<'a> {
        RunContext {
            table,
            dataset,
            model_cfg: model_cfg.clone(),
            meta: MetaConfig {
                inner_lr,
                outer_lr,
                batch_episodes: 2,
                inner_steps: 1,
                epochs: 1,
                first_order,
                outer_optimizer: OuterOptimizer::Sgd,
                weight_decay: 0.0,
                grad_clip: 0.0,
            },
            global_seed: 11,
            k_shot: 1,
            query_per_class: 2,
        }
    }

    fn episode_pair(dataset: &Dataset) -> Vec<Episode> {
        vec![
            sample_episode(dataset, 0, 1, 2, 5).unwrap(),
            sample_episode(dataset, 1, 1, 1, 6).unwrap(),
        ]
    }

    #[test]
    fn inner_adapt_zero_lr_is_identity_and_nonmutating() {
        let (dataset, table, model_cfg) = small_run();
        let ctx = run_ctx(&dataset, &table, &model_cfg, 0.0, 0.1, true);
        let theta = init_params(&model_cfg, 3).unwrap();
        let ep = &episode_pair(&dataset)[0];
        let adapted =
            inner_adapt(&ctx, &theta, ep, &[], &crate::intervene::ConfounderPool::empty(0), 1.0)
                .unwrap();
        for (name, t) in theta.iter() {
            assert_eq!(t.values(), adapted.get(name).unwrap().values(), "{name}");
        }
    }

    #[test]
    fn inner_adapt_descends_support_loss() {
        let (dataset, table, model_cfg) = small_run();
        let ctx = run_ctx(&dataset, &table, &model_cfg, 0.05, 0.1, true);
        let theta = init_params(&model_cfg, 3).unwrap();
        let ep = &episode_pair(&dataset)[0];
        let pool = crate::intervene::ConfounderPool::empty(0);
        let support_loss = |params: &ParameterStore| -> f64 {
            let mut tape = Tape::new();
            let out = episode_forward(
                &mut tape,
                params,
                &table,
                &model_cfg,
                ep,
                &[],
                &LossSubset::Support,
                &pool,
                ForwardMode::Train { tau: 1.0, draw_seed: support_draw_seed(&ctx, ep, 0) },
                None,
            )
            .unwrap();
            tape.value(out.loss).values()[0]
        };
        let before = support_loss(&theta);
        let adapted = inner_adapt(&ctx, &theta, ep, &[], &pool, 1.0).unwrap();
        let after = support_loss(&adapted);
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn outer_step_zero_lr_keeps_parameters() {
        let (dataset, table, model_cfg) = small_run();
        let mut ctx = run_ctx(&dataset, &table, &model_cfg, 0.05, 0.0, true);
        ctx.meta.outer_lr = 0.0;
        let theta = init_params(&model_cfg, 3).unwrap();
        let eps = episode_pair(&dataset);
        let (updated, metrics) = outer_step(&ctx, &theta, &eps, 0, 0, 1.0, &mut None).unwrap();
        for (name, t) in theta.iter() {
            assert_eq!(t.values(), updated.get(name).unwrap().values(), "{name}");
        }
        assert!(!metrics.skipped);
        assert!(metrics.query_auc.is_finite());
    }

    #[test]
    fn second_order_matches_analytic_on_quadratic() {
        // support loss 0.5||w - a||^2, query loss 0.5||w - b||^2:
        // meta-gradient of the one-step objective is (1 - lr) * (w' - b)
        let mut theta = ParameterStore::new(0);
        theta
            .insert("w", crate::autodiff::Tensor::vector(vec![0.5, -1.0]).unwrap())
            .unwrap();
        let a = [2.0, 1.0];
        let b = [-1.0, 3.0];
        let lr = 0.3;
        let grad_at = |params: &ParameterStore, target: &[f64]| -> GradientMap {
            let mut g = GradientMap::zeros_like(params);
            let w = params.get("w").unwrap().values();
            g.insert(
                "w".into(),
                crate::autodiff::Tensor::vector(vec![w[0] - target[0], w[1] - target[1]])
                    .unwrap(),
            );
            g
        };
        // inner step
        let g_s = grad_at(&theta, &a);
        let adapted = sgd_step(&theta, &g_s, lr).unwrap();
        let g_q = grad_at(&adapted, &b);
        // replicate the hvp construction by hand on the quadratic (H = I)
        let v_norm = g_q.l2_norm();
        let r = 1e-4 / v_norm;
        let plus = grad_at(&add_scaled(&theta, &g_q, r), &a);
        let minus = grad_at(&add_scaled(&theta, &g_q, -r), &a);
        let mut hvp = plus;
        hvp.add_scaled(&minus, -1.0);
        hvp.scale(1.0 / (2.0 * r));
        let mut meta = g_q.clone();
        meta.add_scaled(&hvp, -lr);
        let w_adapted = adapted.get("w").unwrap().values();
        for i in 0..2 {
            let expect = (1.0 - lr) * (w_adapted[i] - b[i]);
            let got = meta.get("w").unwrap().values()[i];
            assert!((got - expect).abs() < 1e-7, "{got} vs {expect}");
        }
    }

    #[test]
    fn second_order_mode_runs_and_differs_from_first_order() {
        let (dataset, table, model_cfg) = small_run();
        let theta = init_params(&model_cfg, 3).unwrap();
        let eps = episode_pair(&dataset);
        let ctx_fo = run_ctx(&dataset, &table, &model_cfg, 0.05, 0.01, true);
        let ctx_so = run_ctx(&dataset, &table, &model_cfg, 0.05, 0.01, false);
        let (fo, _) = outer_step(&ctx_fo, &theta, &eps, 0, 0, 1.0, &mut None).unwrap();
        let (so, _) = outer_step(&ctx_so, &theta, &eps, 0, 0, 1.0, &mut None).unwrap();
        let mut differs = false;
        for (name, t) in fo.iter() {
            if t.values() != so.get(name).unwrap().values() {
                differs = true;
                break;
            }
        }
        assert!(differs);
    }

    #[test]
    fn outer_step_deterministic_across_thread_counts() {
        let (dataset, table, model_cfg) = small_run();
        let ctx = run_ctx(&dataset, &table, &model_cfg, 0.05, 0.01, true);
        let theta = init_params(&model_cfg, 3).unwrap();
        let eps = episode_pair(&dataset);
        let run_with = |threads: usize| -> Vec<f64> {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let (updated, _) =
                pool.install(|| outer_step(&ctx, &theta, &eps, 0, 0, 1.0, &mut None)).unwrap();
            updated.iter().flat_map(|(_, t)| t.values().to_vec()).collect()
        };
        assert_eq!(run_with(1), run_with(4));
    }
}
