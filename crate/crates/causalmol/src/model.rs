//! Full episode forward pass: molecular encoding, context graph encoding,
//! contextual concatenation, causal masking, and the three-part objective,
//! all recorded on one tape per evaluation.

use std::collections::HashMap;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{OpKind, ParameterStore, Tape, Tensor, TensorError, TensorId};
use crate::causal::{
    gumbel_sigmoid, hard_mask, init_relevance_params, noise_from_stats, relevance,
    sample_noise_logits, split, MaskConfig,
};
use crate::context::{
    build_context_graph, contextual_concat, encode_context, AuxLabel, ContextError,
};
use crate::dataset::Dataset;
use crate::encoder::{
    gauss_matrix, molecular_edges, readout_sum, EncoderConfig, GinEncoder,
    MessageStats,
};
use crate::fragment::{fragment_molecule, FragmentError, FunctionalGroup, RuleTable};
use crate::intervene::{loss_var, ConfounderPool, PoolEntry};
use crate::meta::Episode;
use crate::objective::{
    init_classifier_params, loss_causal, loss_kl, loss_total, predict_prob, LossWeights,
};
use crate::smiles::{atom_features, parse, MolecularGraph, SmilesError, ATOM_FEATURE_DIM};
use crate::util::derive_rng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Smiles(#[from] SmilesError),
    #[error(transparent)]
    Fragment(#[from] FragmentError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error("molecule {0} not found")]
    UnknownMolecule(usize),
    #[error("non-finite loss in episode for task {0}")]
    NonFiniteLoss(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Ablation {
    /// The full model.
    None,
    /// No masking: predictions read the whole contextual graph embedding and
    /// the confound losses are disabled.
    NoCausality,
    /// No context graph: atom embeddings go straight into masking.
    NoContext,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub dim: usize,
    pub encoder_layers: usize,
    pub context_layers: usize,
    /// Total number of property ids the embedding table covers.
    pub num_properties: usize,
    pub ablation: Ablation,
    pub weights: LossWeights,
    pub mask: MaskConfig,
    pub pool_size: usize,
    /// Include label edges for auxiliary (non-target) properties.
    pub context_aux: bool,
}

impl ModelConfig {
    pub fn with_context(&self) -> bool {
        self.ablation != Ablation::NoContext
    }

    pub fn with_causality(&self) -> bool {
        self.ablation != Ablation::NoCausality
    }

    /// Width of contextual atom rows: four d-blocks (atom, fragment,
    /// molecule, property) with context, one block without.
    pub fn rep_width(&self) -> usize {
        if self.with_context() {
            4 * self.dim
        } else {
            self.dim
        }
    }

    /// Fragment-derived confounders are encoder readouts, so they live in
    /// the atom-content block of the contextual layout: adding one to a
    /// causal readout splices the foreign fragment's atoms in at the
    /// representation level. Without context there is only one block.
    pub fn lift_confounder(&self, frag_readout: &[f64]) -> Vec<f64> {
        debug_assert_eq!(frag_readout.len(), self.dim);
        if self.with_context() {
            let mut v = vec![0.0; self.rep_width()];
            v[..self.dim].copy_from_slice(frag_readout);
            v
        } else {
            frag_readout.to_vec()
        }
    }

    pub fn molecular_encoder(&self) -> GinEncoder {
        GinEncoder::new("enc", EncoderConfig::molecular(self.dim, self.encoder_layers))
    }
}

/// Register every trainable tensor for this configuration.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore, TensorError> {
    let mut store = ParameterStore::new(seed);
    let mut rng = derive_rng(&[seed, 0xC0DE]);
    cfg.molecular_encoder().init_params(&mut store, &mut rng, ATOM_FEATURE_DIM)?;
    if cfg.with_context() {
        let ctx = GinEncoder::new("ctx", EncoderConfig::context(cfg.dim, cfg.context_layers));
        ctx.init_params(&mut store, &mut rng, cfg.dim)?;
        store.insert("ctx.frag_proj.w", gauss_matrix(&mut rng, ATOM_FEATURE_DIM, cfg.dim, 0.02))?;
        store.insert("ctx.frag_proj.b", crate::encoder::gauss_vector(&mut rng, cfg.dim, 0.01))?;
        store.insert("prop.embed", gauss_matrix(&mut rng, cfg.num_properties, cfg.dim, 0.02))?;
    }
    if cfg.with_causality() {
        init_relevance_params(&mut store, &mut rng, cfg.rep_width(), cfg.dim)?;
    }
    init_classifier_params(&mut store, &mut rng, cfg.rep_width())?;
    Ok(store)
}

/// Parsed molecule with cached features and fragments, keyed by dataset id.
#[derive(Debug, Clone)]
pub struct MolData {
    pub graph: MolecularGraph,
    pub features: Tensor,
    pub fragments: Vec<FunctionalGroup>,
    pub frag_key_per_atom: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct MolTable {
    pub mols: Vec<MolData>,
    /// Representative induced subgraph per fragment key, with raw features.
    pub frag_rep: HashMap<String, (MolecularGraph, Tensor)>,
}

impl MolTable {
    pub fn from_dataset(dataset: &Dataset, rules: &RuleTable) -> Result<Self, ModelError> {
        let mut table = MolTable::default();
        for (id, smiles) in dataset.smiles.iter().enumerate() {
            table.push(id, smiles, rules)?;
        }
        Ok(table)
    }

    pub fn push(&mut self, id: usize, smiles: &str, rules: &RuleTable) -> Result<(), ModelError> {
        debug_assert_eq!(id, self.mols.len());
        let graph = parse(smiles)?;
        let feats = atom_features(&graph);
        let features = Tensor::matrix(
            graph.num_atoms(),
            ATOM_FEATURE_DIM,
            feats.into_iter().flatten().collect(),
        )?;
        let fragments = fragment_molecule(&graph, id, rules)?;
        let mut frag_key_per_atom = vec![String::new(); graph.num_atoms()];
        for fg in &fragments {
            for &a in &fg.atom_indices {
                frag_key_per_atom[a] = fg.canonical_key.clone();
            }
            self.frag_rep.entry(fg.canonical_key.clone()).or_insert_with(|| {
                let sub = fg.subgraph(&graph);
                let f = atom_features(&sub);
                let t = Tensor::matrix(
                    sub.num_atoms(),
                    ATOM_FEATURE_DIM,
                    f.into_iter().flatten().collect(),
                )
                .expect("finite features");
                (sub, t)
            });
        }
        self.mols.push(MolData { graph, features, fragments, frag_key_per_atom });
        Ok(())
    }

    pub fn get(&self, id: usize) -> Result<&MolData, ModelError> {
        self.mols.get(id).ok_or(ModelError::UnknownMolecule(id))
    }
}

#[derive(Debug, Clone)]
pub enum ForwardMode {
    /// Concrete relaxation plus reparametrized noise, drawn from a stream
    /// seeded by `draw_seed` (fixed seed = fixed draws = deterministic loss).
    Train { tau: f64, draw_seed: u64 },
    /// Hard 0/1 masks from thresholded relevance, no noise.
    HardEval,
    /// Control mode: hard masks choose random atoms per molecule instead of
    /// consulting relevance; `keep` lists how many per subset molecule (so
    /// the control matches the trained masks' sizes). No noise.
    RandomMask { keep: Vec<usize>, draw_seed: u64 },
}

/// Which molecules of the episode the loss runs over.
#[derive(Debug, Clone)]
pub enum LossSubset {
    Support,
    Query,
    /// Explicit (molecule id, label) pairs; ids must already be in the
    /// episode's context graph.
    Explicit(Vec<(usize, bool)>),
}

/// Per-atom multipliers for fidelity masking: molecules absent from the map
/// are left untouched; 0 entries erase the atom's embeddings.
pub type AtomMasks = HashMap<usize, Vec<f64>>;

pub struct ForwardOutput {
    pub loss: TensorId,
    pub loss_causal: f64,
    pub loss_kl: f64,
    pub loss_var: f64,
    /// Causal-path probability per subset molecule.
    pub predictions: Vec<f64>,
    pub labels: Vec<f64>,
    pub molecule_ids: Vec<usize>,
    pub diagnostics: Vec<MoleculeDiagnostics>,
    pub mol_messages: MessageStats,
    pub ctx_messages: MessageStats,
}

#[derive(Debug, Clone)]
pub struct MoleculeDiagnostics {
    pub molecule_id: usize,
    pub relevance: Vec<f64>,
    pub mask: Vec<f64>,
    pub causal_vec: Vec<f64>,
    pub confound_vec: Vec<f64>,
}

/// Build the whole episode computation on `tape` and return the scalar loss
/// plus extracted values. One tape per call.
#[allow(clippy::too_many_arguments)]
pub fn episode_forward(
    tape: &mut Tape,
    store: &ParameterStore,
    table: &MolTable,
    cfg: &ModelConfig,
    episode: &Episode,
    aux_labels: &[AuxLabel],
    subset: &LossSubset,
    pool: &ConfounderPool,
    mode: ForwardMode,
    atom_masks: Option<&AtomMasks>,
) -> Result<ForwardOutput, ModelError> {
    let enc = cfg.molecular_encoder();
    let mut mol_messages = MessageStats::default();
    let mut ctx_messages = MessageStats::default();

    // every molecule the context graph includes, in its node order
    let context_mols: Vec<usize> = episode
        .support
        .iter()
        .chain(episode.query.iter())
        .map(|(m, _)| *m)
        .collect();

    // encode each molecule; masked atoms get their embeddings zeroed before
    // any readout sees them
    let mut enc_rows: HashMap<usize, TensorId> = HashMap::new();
    for &m in &context_mols {
        if enc_rows.contains_key(&m) {
            continue;
        }
        let data = table.get(m)?;
        let x = tape.constant(data.features.clone());
        let h = enc.encode(
            tape,
            store,
            x,
            &molecular_edges(&data.graph),
            data.graph.num_atoms(),
            &mut mol_messages,
        )?;
        let h = apply_atom_mask(tape, h, m, cfg.dim, atom_masks)?;
        enc_rows.insert(m, h);
    }

    // context embedding (skipped entirely without context)
    let ce = if cfg.with_context() {
        let fragments: HashMap<usize, Vec<FunctionalGroup>> = context_mols
            .iter()
            .map(|&m| Ok((m, table.get(m)?.fragments.clone())))
            .collect::<Result<_, ModelError>>()?;
        let aux = if cfg.context_aux { aux_labels } else { &[] };
        let cg = build_context_graph(episode, aux, &fragments)?;

        let mol_feats: Vec<TensorId> = cg
            .molecules
            .iter()
            .map(|m| readout_sum(tape, enc_rows[m], None))
            .collect::<Result<_, _>>()?;
        let mol_block = tape.apply(OpKind::ConcatRows, &mol_feats)?;

        let w = tape.param(store, "ctx.frag_proj.w")?;
        let b = tape.param(store, "ctx.frag_proj.b")?;
        let frag_feats: Vec<TensorId> = cg
            .fragment_keys
            .iter()
            .map(|key| {
                let (_, feats) = &table.frag_rep[key];
                let x = tape.constant(feats.clone());
                let rows = feats.shape()[0];
                let projected = crate::encoder::linear(tape, x, w, b, rows)?;
                readout_sum(tape, projected, None)
            })
            .collect::<Result<_, _>>()?;
        let frag_block = tape.apply(OpKind::ConcatRows, &frag_feats)?;

        let embed = tape.param(store, "prop.embed")?;
        let prop_block =
            tape.apply(OpKind::GatherRows { indices: cg.properties.clone() }, &[embed])?;

        let node_feats =
            tape.apply(OpKind::ConcatRows, &[mol_block, frag_block, prop_block])?;
        Some(encode_context(
            tape,
            store,
            &cg,
            node_feats,
            cfg.dim,
            cfg.context_layers,
            &mut ctx_messages,
        )?)
    } else {
        None
    };

    // contextual atom matrices for the molecules the loss runs over
    let loss_mols: Vec<(usize, bool)> = match subset {
        LossSubset::Support => episode.support.clone(),
        LossSubset::Query => episode.query.clone(),
        LossSubset::Explicit(list) => list.clone(),
    };
    let mut h_per_mol: Vec<TensorId> = Vec::with_capacity(loss_mols.len());
    let mut segments: Vec<usize> = Vec::new();
    let mut atom_counts: Vec<usize> = Vec::new();
    for (i, (m, _)) in loss_mols.iter().enumerate() {
        let data = table.get(*m)?;
        let h_enc = *enc_rows.get(m).ok_or(ModelError::UnknownMolecule(*m))?;
        let h = match &ce {
            Some(ce) => {
                let h = contextual_concat(
                    tape,
                    *m,
                    h_enc,
                    ce,
                    &data.frag_key_per_atom,
                    episode.task_id,
                )?;
                // erased atoms stay erased in the contextual view
                apply_atom_mask(tape, h, *m, cfg.rep_width(), atom_masks)?
            }
            None => h_enc,
        };
        h_per_mol.push(h);
        segments.extend(std::iter::repeat(i).take(data.graph.num_atoms()));
        atom_counts.push(data.graph.num_atoms());
    }
    let h_all = tape.apply(OpKind::ConcatRows, &h_per_mol)?;
    let total_atoms: usize = atom_counts.iter().sum();
    let num_loss_mols = loss_mols.len();

    // causal split (or the identity readout without the masking path)
    let (c_stack, s_stack, p_values, lambda_values) = if cfg.with_causality() {
        let p = relevance(tape, store, h_all)?;
        let lambda = match mode {
            ForwardMode::Train { tau, draw_seed } => {
                let mut rng = derive_rng(&[draw_seed, 0x6A5]);
                let logits = sample_noise_logits(&mut rng, total_atoms);
                gumbel_sigmoid(tape, p, &logits, tau)?
            }
            ForwardMode::HardEval => hard_mask(tape, p),
            ForwardMode::RandomMask { ref keep, draw_seed } => {
                let mut rng = derive_rng(&[draw_seed, 0xF1A]);
                let mut vals = vec![0.0; total_atoms];
                let mut offset = 0;
                for (mi, &n) in atom_counts.iter().enumerate() {
                    let k = keep.get(mi).copied().unwrap_or(n / 2).min(n);
                    let mut idx: Vec<usize> = (0..n).collect();
                    use rand::seq::SliceRandom;
                    idx.shuffle(&mut rng);
                    for &i in &idx[..k] {
                        vals[offset + i] = 1.0;
                    }
                    offset += n;
                }
                tape.constant(Tensor::matrix(total_atoms, 1, vals)?)
            }
        };
        let noise = match mode {
            ForwardMode::Train { draw_seed, .. } => {
                let mut rng = derive_rng(&[draw_seed, 0xE95]);
                let z: Vec<f64> = (0..total_atoms * cfg.rep_width())
                    .map(|_| crate::util::randn(&mut rng))
                    .collect();
                Some(noise_from_stats(tape, h_all, &z)?)
            }
            ForwardMode::HardEval | ForwardMode::RandomMask { .. } => None,
        };
        let parts = split(tape, h_all, lambda, noise)?;
        let c = tape.apply(
            OpKind::SegmentSum { segments: segments.clone(), num_segments: num_loss_mols },
            &[parts.causal_nodes],
        )?;
        let s = tape.apply(
            OpKind::SegmentSum { segments: segments.clone(), num_segments: num_loss_mols },
            &[parts.confound_nodes],
        )?;
        (c, Some(s), tape.value(p).values().to_vec(), tape.value(lambda).values().to_vec())
    } else {
        let c = tape.apply(
            OpKind::SegmentSum { segments: segments.clone(), num_segments: num_loss_mols },
            &[h_all],
        )?;
        (c, None, vec![1.0; total_atoms], vec![1.0; total_atoms])
    };

    let labels: Vec<f64> = loss_mols.iter().map(|(_, l)| if *l { 1.0 } else { 0.0 }).collect();
    let l_causal = loss_causal(tape, store, c_stack, &labels)?;
    let l_kl = match &s_stack {
        Some(s) => loss_kl(tape, store, *s)?,
        None => tape.constant(Tensor::vector(vec![0.0])?),
    };
    let l_var = if cfg.with_causality() && !pool.is_empty() {
        let per_mol: Vec<TensorId> = (0..num_loss_mols)
            .map(|i| {
                let c_i = tape.apply(OpKind::GatherRows { indices: vec![i] }, &[c_stack])?;
                loss_var(tape, store, labels[i], c_i, pool)
            })
            .collect::<Result<_, _>>()?;
        let stacked = tape.apply(OpKind::ConcatRows, &per_mol)?;
        tape.apply(OpKind::ReduceMean, &[stacked])?
    } else {
        tape.constant(Tensor::vector(vec![0.0])?)
    };
    let loss = loss_total(tape, l_causal, l_kl, l_var, cfg.weights)?;
    if !tape.value(loss).values()[0].is_finite() {
        return Err(ModelError::NonFiniteLoss(episode.task_id));
    }

    let probs = predict_prob(tape, store, c_stack)?;
    let predictions = tape.value(probs).values().to_vec();

    // per-molecule diagnostics sliced out of the batched tensors
    let mut diagnostics = Vec::with_capacity(num_loss_mols);
    let mut offset = 0usize;
    for (i, (m, _)) in loss_mols.iter().enumerate() {
        let n = atom_counts[i];
        diagnostics.push(MoleculeDiagnostics {
            molecule_id: *m,
            relevance: p_values[offset..offset + n].to_vec(),
            mask: lambda_values[offset..offset + n].to_vec(),
            causal_vec: tape.value(c_stack).row(i).to_vec(),
            confound_vec: match &s_stack {
                Some(s) => tape.value(*s).row(i).to_vec(),
                None => vec![0.0; cfg.rep_width()],
            },
        });
        offset += n;
    }

    Ok(ForwardOutput {
        loss,
        loss_causal: tape.value(l_causal).values()[0],
        loss_kl: tape.value(l_kl).values()[0],
        loss_var: tape.value(l_var).values()[0],
        predictions,
        labels,
        molecule_ids: loss_mols.iter().map(|(m, _)| *m).collect(),
        diagnostics,
        mol_messages,
        ctx_messages,
    })
}

fn apply_atom_mask(
    tape: &mut Tape,
    h: TensorId,
    molecule_id: usize,
    width: usize,
    masks: Option<&AtomMasks>,
) -> Result<TensorId, TensorError> {
    let Some(mask) = masks.and_then(|m| m.get(&molecule_id)) else { return Ok(h) };
    let rows = tape.value(h).rows_cols().0;
    if mask.len() != rows {
        return Err(TensorError::ShapeMismatch {
            op: "atom_mask".into(),
            detail: format!("{rows} atoms vs {} mask entries", mask.len()),
        });
    }
    let col = tape.constant(Tensor::matrix(rows, 1, mask.to_vec())?);
    let ones = tape.constant(Tensor::matrix(1, width, vec![1.0; width])?);
    let full = tape.apply(OpKind::MatMul, &[col, ones])?;
    tape.apply(OpKind::ElementwiseMul, &[h, full])
}

/// Encode one fragment's induced subgraph and return the detached readout
/// (width `dim`), used for confounder pools.
pub fn fragment_readout(
    store: &ParameterStore,
    table: &MolTable,
    cfg: &ModelConfig,
    key: &str,
) -> Result<Vec<f64>, ModelError> {
    let (sub, feats) = table
        .frag_rep
        .get(key)
        .ok_or_else(|| ModelError::UnknownMolecule(usize::MAX))?;
    let enc = cfg.molecular_encoder();
    let mut tape = Tape::new();
    let mut stats = MessageStats::default();
    let x = tape.constant(feats.clone());
    let h = enc.encode(&mut tape, store, x, &molecular_edges(sub), sub.num_atoms(), &mut stats)?;
    let r = readout_sum(&mut tape, h, None)?;
    Ok(tape.value(r).values().to_vec())
}

/// Pool candidates from molecules labeled for non-target properties: every
/// fragment of every eligible molecule, lifted into representation width.
pub fn pool_candidates(
    store: &ParameterStore,
    table: &MolTable,
    cfg: &ModelConfig,
    eligible: &[(usize, usize)], // (molecule id, its property id)
) -> Result<Vec<PoolEntry>, ModelError> {
    let mut out = Vec::new();
    let mut cache: HashMap<String, Vec<f64>> = HashMap::new();
    for (mol, prop) in eligible {
        for fg in &table.get(*mol)?.fragments {
            let emb = match cache.get(&fg.canonical_key) {
                Some(e) => e.clone(),
                None => {
                    let r = fragment_readout(store, table, cfg, &fg.canonical_key)?;
                    cache.insert(fg.canonical_key.clone(), r.clone());
                    r
                }
            };
            out.push(PoolEntry {
                embedding: cfg.lift_confounder(&emb),
                source_property: *prop,
                fragment_key: fg.canonical_key.clone(),
            });
        }
    }
    Ok(out)
}

/// Build one episode's confounder pool from sibling episodes in the batch.
pub fn pool_from_sibling_episodes<R: Rng>(
    store: &ParameterStore,
    table: &MolTable,
    cfg: &ModelConfig,
    episodes: &[Episode],
    target_property: usize,
    rng: &mut R,
) -> Result<ConfounderPool, ModelError> {
    let mut eligible = Vec::new();
    for ep in episodes {
        if ep.task_id == target_property {
            continue;
        }
        for (m, _) in ep.support.iter().chain(ep.query.iter()) {
            eligible.push((*m, ep.task_id));
        }
    }
    let candidates = pool_candidates(store, table, cfg, &eligible)?;
    Ok(crate::intervene::build_pool(candidates, target_property, cfg.pool_size, rng))
}
