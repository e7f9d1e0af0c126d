//! Episode-level context graph over molecules, functional groups, and
//! properties, plus its encoder and the per-atom contextual concatenation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{OpKind, ParameterStore, Tape, TensorError, TensorId};
use crate::encoder::{DirectedEdge, EncoderConfig, GinEncoder, MessageStats};
use crate::fragment::FunctionalGroup;
use crate::meta::Episode;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContextError {
    #[error("molecule {0} has no fragments")]
    MoleculeWithoutFragments(usize),
    #[error("atom {atom} of molecule {molecule} is not mapped to a fragment")]
    UnmappedAtom { molecule: usize, atom: usize },
    #[error("node {0} not present in the context graph")]
    MissingNode(String),
    #[error("context graph invariant violated: {0}")]
    InvariantViolation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeType {
    PositiveLabel,
    NegativeLabel,
    UnknownLabel,
    Membership,
}

impl EdgeType {
    pub fn index(&self) -> usize {
        match self {
            EdgeType::PositiveLabel => 0,
            EdgeType::NegativeLabel => 1,
            EdgeType::UnknownLabel => 2,
            EdgeType::Membership => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextEdge {
    pub src: usize,
    pub dst: usize,
    pub edge_type: EdgeType,
}

/// Known labels on auxiliary (non-target) properties, supplied when the
/// context graph should carry training-property signal.
pub type AuxLabel = (usize, usize, bool); // (molecule_id, property_id, label)

/// Typed node list in fixed order (molecules, then fragment keys, then
/// properties) with undirected typed edges stored once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextGraph {
    pub molecules: Vec<usize>,
    pub fragment_keys: Vec<String>,
    pub properties: Vec<usize>,
    pub edges: Vec<ContextEdge>,
    pub episode_id: u64,
}

impl ContextGraph {
    pub fn num_nodes(&self) -> usize {
        self.molecules.len() + self.fragment_keys.len() + self.properties.len()
    }

    pub fn mol_node(&self, molecule_id: usize) -> Option<usize> {
        self.molecules.iter().position(|m| *m == molecule_id)
    }

    pub fn frag_node(&self, key: &str) -> Option<usize> {
        self.fragment_keys
            .iter()
            .position(|k| k == key)
            .map(|i| self.molecules.len() + i)
    }

    pub fn prop_node(&self, property_id: usize) -> Option<usize> {
        self.properties
            .iter()
            .position(|p| *p == property_id)
            .map(|i| self.molecules.len() + self.fragment_keys.len() + i)
    }

    fn node_kind(&self, node: usize) -> &'static str {
        if node < self.molecules.len() {
            "molecule"
        } else if node < self.molecules.len() + self.fragment_keys.len() {
            "fragment"
        } else {
            "property"
        }
    }

    /// Check the edge-type discipline: label edges join molecule and
    /// property, membership edges join molecule and fragment, and every
    /// molecule has at least one membership edge.
    pub fn validate(&self) -> Result<(), ContextError> {
        for e in &self.edges {
            let kinds = (self.node_kind(e.src), self.node_kind(e.dst));
            let ok = match e.edge_type {
                EdgeType::Membership => kinds == ("molecule", "fragment"),
                _ => kinds == ("molecule", "property"),
            };
            if !ok {
                return Err(ContextError::InvariantViolation(format!(
                    "{:?} edge joins {} and {}",
                    e.edge_type, kinds.0, kinds.1
                )));
            }
        }
        for (i, m) in self.molecules.iter().enumerate() {
            let has_membership = self
                .edges
                .iter()
                .any(|e| e.edge_type == EdgeType::Membership && e.src == i);
            if !has_membership {
                return Err(ContextError::MoleculeWithoutFragments(*m));
            }
        }
        Ok(())
    }

    /// Directed edge list (both orientations) for message passing.
    pub fn directed_edges(&self) -> Vec<DirectedEdge> {
        let mut out = Vec::with_capacity(self.edges.len() * 2);
        for e in &self.edges {
            out.push(DirectedEdge { src: e.src, dst: e.dst, edge_type: e.edge_type.index() });
            out.push(DirectedEdge { src: e.dst, dst: e.src, edge_type: e.edge_type.index() });
        }
        out
    }
}

/// Assemble the episode's context graph. Query molecules contribute only
/// unknown-label edges to the target property, so their true labels cannot
/// leak into the structure. Fragment nodes are deduplicated by canonical key
/// across the episode; parallel membership edges encode multiplicity.
pub fn build_context_graph(
    episode: &Episode,
    aux_labels: &[AuxLabel],
    fragments: &HashMap<usize, Vec<FunctionalGroup>>,
) -> Result<ContextGraph, ContextError> {
    let mut molecules: Vec<usize> = Vec::new();
    for (m, _) in episode.support.iter().chain(episode.query.iter()) {
        molecules.push(*m);
    }

    let mut fragment_keys: Vec<String> = Vec::new();
    let mut key_index: HashMap<String, usize> = HashMap::new();
    for &m in &molecules {
        let frags = fragments.get(&m).filter(|f| !f.is_empty());
        let Some(frags) = frags else {
            return Err(ContextError::MoleculeWithoutFragments(m));
        };
        for fg in frags {
            key_index.entry(fg.canonical_key.clone()).or_insert_with(|| {
                fragment_keys.push(fg.canonical_key.clone());
                fragment_keys.len() - 1
            });
        }
    }

    let mut properties = vec![episode.task_id];
    let mut aux_props: Vec<usize> = aux_labels
        .iter()
        .map(|(_, p, _)| *p)
        .filter(|p| *p != episode.task_id)
        .collect();
    aux_props.sort_unstable();
    aux_props.dedup();
    properties.extend(aux_props);

    let m_count = molecules.len();
    let f_count = fragment_keys.len();
    let prop_node =
        |p: usize| m_count + f_count + properties.iter().position(|x| *x == p).unwrap();

    let mut edges = Vec::new();
    for (i, (_, label)) in episode.support.iter().enumerate() {
        let t = if *label { EdgeType::PositiveLabel } else { EdgeType::NegativeLabel };
        edges.push(ContextEdge { src: i, dst: prop_node(episode.task_id), edge_type: t });
    }
    for qi in 0..episode.query.len() {
        edges.push(ContextEdge {
            src: episode.support.len() + qi,
            dst: prop_node(episode.task_id),
            edge_type: EdgeType::UnknownLabel,
        });
    }
    for (mol, prop, label) in aux_labels {
        if *prop == episode.task_id {
            continue;
        }
        if let Some(mi) = molecules.iter().position(|m| m == mol) {
            let t = if *label { EdgeType::PositiveLabel } else { EdgeType::NegativeLabel };
            edges.push(ContextEdge { src: mi, dst: prop_node(*prop), edge_type: t });
        }
    }
    for (mi, &m) in molecules.iter().enumerate() {
        for fg in &fragments[&m] {
            edges.push(ContextEdge {
                src: mi,
                dst: m_count + key_index[&fg.canonical_key],
                edge_type: EdgeType::Membership,
            });
        }
    }

    let graph = ContextGraph {
        molecules,
        fragment_keys,
        properties,
        edges,
        episode_id: episode.rng_seed,
    };
    graph.validate()?;
    Ok(graph)
}

/// Row bookkeeping for the encoded context matrix `Z`.
pub struct ContextEmbedding {
    pub z: TensorId,
    pub graph: ContextGraph,
    pub dim: usize,
}

/// Run the residual edge-aware GIN over the context graph given stacked node
/// features (molecule rows, fragment rows, property rows in node order).
pub fn encode_context(
    tape: &mut Tape,
    store: &ParameterStore,
    cg: &ContextGraph,
    node_features: TensorId,
    dim: usize,
    layers: usize,
    stats: &mut MessageStats,
) -> Result<ContextEmbedding, TensorError> {
    let enc = GinEncoder::new("ctx", EncoderConfig::context(dim, layers));
    let z = enc.encode(tape, store, node_features, &cg.directed_edges(), cg.num_nodes(), stats)?;
    Ok(ContextEmbedding { z, graph: cg.clone(), dim })
}

pub fn context_encoder(dim: usize, layers: usize) -> GinEncoder {
    GinEncoder::new("ctx", EncoderConfig::context(dim, layers))
}

/// Per-atom contextual rows: `[atom embedding | Z_fragment(atom) | Z_molecule
/// | Z_property]`, width exactly 4 * dim.
pub fn contextual_concat(
    tape: &mut Tape,
    molecule_id: usize,
    atom_embeddings: TensorId,
    ce: &ContextEmbedding,
    fragment_key_per_atom: &[String],
    target_property: usize,
) -> Result<TensorId, ContextError> {
    let n = tape.value(atom_embeddings).rows_cols().0;
    if fragment_key_per_atom.len() != n {
        return Err(ContextError::UnmappedAtom { molecule: molecule_id, atom: fragment_key_per_atom.len() });
    }
    let mol_node = ce
        .graph
        .mol_node(molecule_id)
        .ok_or_else(|| ContextError::MissingNode(format!("molecule {molecule_id}")))?;
    let prop_node = ce
        .graph
        .prop_node(target_property)
        .ok_or_else(|| ContextError::MissingNode(format!("property {target_property}")))?;
    let mut frag_rows = Vec::with_capacity(n);
    for (atom, key) in fragment_key_per_atom.iter().enumerate() {
        let node = ce
            .graph
            .frag_node(key)
            .ok_or(ContextError::UnmappedAtom { molecule: molecule_id, atom })?;
        frag_rows.push(node);
    }
    let apply = |tape: &mut Tape, op, inputs: &[TensorId]| {
        tape.apply(op, inputs)
            .map_err(|e| ContextError::InvariantViolation(e.to_string()))
    };
    let z_f = apply(tape, OpKind::GatherRows { indices: frag_rows }, &[ce.z])?;
    let z_m = apply(tape, OpKind::GatherRows { indices: vec![mol_node; n] }, &[ce.z])?;
    let z_p = apply(tape, OpKind::GatherRows { indices: vec![prop_node; n] }, &[ce.z])?;
    apply(tape, OpKind::Concat, &[atom_embeddings, z_f, z_m, z_p])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::fragment::{fragment_molecule, RuleTable};
    use crate::smiles::parse;

    fn episode(support: &[(usize, bool)], query: &[(usize, bool)], task: usize) -> Episode {
        Episode {
            task_id: task,
            support: support.to_vec(),
            query: query.to_vec(),
            k_shot: support.len() / 2,
            rng_seed: 1,
        }
    }

    fn fragments_of(pairs: &[(usize, &str)]) -> HashMap<usize, Vec<FunctionalGroup>> {
        pairs
            .iter()
            .map(|(id, s)| {
                let mol = parse(s).unwrap();
                (*id, fragment_molecule(&mol, *id, &RuleTable::v1()).unwrap())
            })
            .collect()
    }

    #[test]
    fn two_molecule_episode_counts() {
        // phenol and cyclohexanol share the hydroxyl fragment key
        let frags = fragments_of(&[(0, "Oc1ccccc1"), (1, "OC1CCCCC1")]);
        let ep = episode(&[(0, true), (1, false)], &[], 7);
        let cg = build_context_graph(&ep, &[], &frags).unwrap();
        assert_eq!(cg.molecules.len(), 2);
        assert_eq!(cg.properties, vec![7]);
        // fragments: OH (shared), benzene ring, cyclohexane ring
        assert_eq!(cg.fragment_keys.len(), 3);
        let membership = cg
            .edges
            .iter()
            .filter(|e| e.edge_type == EdgeType::Membership)
            .count();
        assert_eq!(membership, 4); // 2 fragments per molecule
        let label_edges: Vec<EdgeType> = cg
            .edges
            .iter()
            .filter(|e| e.edge_type != EdgeType::Membership)
            .map(|e| e.edge_type)
            .collect();
        assert_eq!(label_edges, vec![EdgeType::PositiveLabel, EdgeType::NegativeLabel]);
    }

    #[test]
    fn no_shared_fragments_means_no_dedup() {
        let frags = fragments_of(&[(0, "Cc1ccccc1"), (1, "OC1CCCCC1")]);
        let per_mol: usize = frags.values().map(|f| f.len()).sum();
        let ep = episode(&[(0, true), (1, false)], &[], 0);
        let cg = build_context_graph(&ep, &[], &frags).unwrap();
        assert_eq!(cg.fragment_keys.len(), per_mol);
    }

    #[test]
    fn shared_fragment_topology_three_molecules() {
        // three molecules, four fragment keys, two properties; the hydroxyl
        // key is shared by molecules 1 and 2
        let frags = fragments_of(&[(0, "Cc1ccccc1"), (1, "Oc1ccccc1"), (2, "OC1CCCCC1")]);
        let ep = episode(&[(0, true), (1, false)], &[(2, true)], 0);
        let aux = vec![(1usize, 1usize, true), (2, 1, true)];
        let cg = build_context_graph(&ep, &aux, &frags).unwrap();
        assert_eq!(cg.molecules.len(), 3);
        assert_eq!(cg.fragment_keys.len(), 4); // methyl, benzene, OH, cyclohexane
        assert_eq!(cg.properties, vec![0, 1]);
        // the OH fragment node receives membership from molecules 1 and 2
        let oh_frags = fragments_of(&[(9, "Oc1ccccc1")]);
        let oh_key = &oh_frags[&9].iter().find(|g| g.atom_indices.len() == 1).unwrap().canonical_key;
        let oh_node = cg.frag_node(oh_key).unwrap();
        let sharers: Vec<usize> = cg
            .edges
            .iter()
            .filter(|e| e.edge_type == EdgeType::Membership && e.dst == oh_node)
            .map(|e| e.src)
            .collect();
        assert_eq!(sharers, vec![1, 2]);
        cg.validate().unwrap();
    }

    #[test]
    fn query_labels_do_not_change_the_graph() {
        let frags = fragments_of(&[(0, "Oc1ccccc1"), (1, "OC1CCCCC1"), (2, "Cc1ccccc1")]);
        let ep_a = episode(&[(0, true), (1, false)], &[(2, true)], 3);
        let ep_b = episode(&[(0, true), (1, false)], &[(2, false)], 3);
        let a = build_context_graph(&ep_a, &[], &frags).unwrap();
        let b = build_context_graph(&ep_b, &[], &frags).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn query_molecules_touch_target_only_via_unknown() {
        let frags = fragments_of(&[(0, "Oc1ccccc1"), (1, "OC1CCCCC1"), (2, "Cc1ccccc1")]);
        let ep = episode(&[(0, true), (1, false)], &[(2, true)], 3);
        let cg = build_context_graph(&ep, &[], &frags).unwrap();
        let query_node = 2;
        for e in cg.edges.iter().filter(|e| e.src == query_node) {
            if e.edge_type != EdgeType::Membership {
                assert_eq!(e.edge_type, EdgeType::UnknownLabel);
            }
        }
    }

    #[test]
    fn zero_layers_with_residual_returns_input_projection() {
        // degenerate parameters: with all layer weights zero and the identity
        // skip, Z equals the projected input features
        let frags = fragments_of(&[(0, "Oc1ccccc1")]);
        let ep = episode(&[(0, true)], &[], 0);
        // single support molecule episodes are legal at this layer
        let cg = build_context_graph(&ep, &[], &frags).unwrap();
        let n = cg.num_nodes();
        let d = 4;
        let mut store = ParameterStore::new(0);
        let enc = context_encoder(d, 2);
        let mut rng = crate::util::derive_rng(&[5]);
        enc.init_params(&mut store, &mut rng, d).unwrap();
        // zero every layer weight; keep the input projection as identity
        let mut zeroed = ParameterStore::new(0);
        for (name, t) in store.iter() {
            let tensor = if name == "ctx.in.w" {
                let mut vals = vec![0.0; d * d];
                for i in 0..d {
                    vals[i * d + i] = 1.0;
                }
                Tensor::matrix(d, d, vals).unwrap()
            } else if name == "ctx.in.b" || name.starts_with("ctx.l") || name == "ctx.edge_embed" {
                Tensor::zeros(t.shape())
            } else {
                t.clone()
            };
            zeroed.insert(name, tensor).unwrap();
        }
        let mut tape = Tape::new();
        let feats: Vec<f64> = (0..n * d).map(|i| (i as f64) * 0.1 - 1.0).collect();
        let x = tape.constant(Tensor::matrix(n, d, feats.clone()).unwrap());
        let mut stats = MessageStats::default();
        let ce = encode_context(&mut tape, &zeroed, &cg, x, d, 2, &mut stats).unwrap();
        assert_eq!(tape.value(ce.z).values(), &feats[..]);
    }

    #[test]
    fn context_message_count_is_layers_times_directed_edges() {
        let frags = fragments_of(&[(0, "Oc1ccccc1"), (1, "OC1CCCCC1"), (2, "Cc1ccccc1")]);
        let ep = episode(&[(0, true), (1, false)], &[(2, true)], 3);
        let cg = build_context_graph(&ep, &[], &frags).unwrap();
        let undirected = cg.edges.len();
        let d = 4;
        let layers = 3;
        let mut store = ParameterStore::new(0);
        let enc = context_encoder(d, layers);
        let mut rng = crate::util::derive_rng(&[5]);
        enc.init_params(&mut store, &mut rng, d).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[cg.num_nodes(), d]));
        let mut stats = MessageStats::default();
        encode_context(&mut tape, &store, &cg, x, d, layers, &mut stats).unwrap();
        assert_eq!(stats.directed_messages, layers * 2 * undirected);
        assert_eq!(stats.directed_messages / 2, layers * undirected); // per direction
    }

    #[test]
    fn concat_width_and_fragment_rows() {
        let frags = fragments_of(&[(0, "Oc1ccccc1")]);
        let ep = episode(&[(0, true)], &[], 0);
        let cg = build_context_graph(&ep, &[], &frags).unwrap();
        let d = 3;
        let mut tape = Tape::new();
        let n_nodes = cg.num_nodes();
        let zvals: Vec<f64> = (0..n_nodes * d).map(|i| i as f64).collect();
        let z = tape.constant(Tensor::matrix(n_nodes, d, zvals).unwrap());
        let ce = ContextEmbedding { z, graph: cg.clone(), dim: d };
        let mol = parse("Oc1ccccc1").unwrap();
        let n_atoms = mol.num_atoms();
        let h = tape.constant(Tensor::matrix(n_atoms, d, vec![0.5; n_atoms * d]).unwrap());
        let key_per_atom: Vec<String> = {
            let mut keys = vec![String::new(); n_atoms];
            for fg in &frags[&0] {
                for &a in &fg.atom_indices {
                    keys[a] = fg.canonical_key.clone();
                }
            }
            keys
        };
        let out = contextual_concat(&mut tape, 0, h, &ce, &key_per_atom, 0).unwrap();
        assert_eq!(tape.value(out).shape(), &[n_atoms, 4 * d]);
        // atoms in the same fragment share their Z_f slice; different
        // fragments get different slices when embeddings differ
        let row_o = tape.value(out).row(0).to_vec(); // hydroxyl oxygen
        let row_c1 = tape.value(out).row(1).to_vec(); // ring atom
        let row_c2 = tape.value(out).row(2).to_vec(); // ring atom
        assert_eq!(row_c1[d..2 * d], row_c2[d..2 * d]);
        assert_ne!(row_o[d..2 * d], row_c1[d..2 * d]);
        // molecule and property slices are shared by every atom
        assert_eq!(row_o[2 * d..], row_c1[2 * d..]);
    }

    #[test]
    fn one_atom_molecule_width() {
        let frags = fragments_of(&[(0, "C"), (1, "CC")]);
        let ep = episode(&[(0, true), (1, false)], &[], 0);
        let cg = build_context_graph(&ep, &[], &frags).unwrap();
        let d = 2;
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[cg.num_nodes(), d]));
        let ce = ContextEmbedding { z, graph: cg, dim: d };
        let h = tape.constant(Tensor::matrix(1, d, vec![1.0, 2.0]).unwrap());
        let key = frags[&0][0].canonical_key.clone();
        let out = contextual_concat(&mut tape, 0, h, &ce, &[key], 0).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 4 * d]);
    }

    #[test]
    fn unmapped_atom_rejected() {
        let frags = fragments_of(&[(0, "C"), (1, "CC")]);
        let ep = episode(&[(0, true), (1, false)], &[], 0);
        let cg = build_context_graph(&ep, &[], &frags).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[cg.num_nodes(), 2]));
        let ce = ContextEmbedding { z, graph: cg, dim: 2 };
        let h = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let err = contextual_concat(&mut tape, 0, h, &ce, &["nonsense".into()], 0).unwrap_err();
        assert!(matches!(err, ContextError::UnmappedAtom { .. }));
    }

    #[test]
    fn permutation_equivariance_of_context_encoder() {
        let frags = fragments_of(&[(0, "Oc1ccccc1"), (1, "OC1CCCCC1"), (2, "Cc1ccccc1")]);
        let ep = episode(&[(0, true), (1, false)], &[(2, true)], 3);
        let cg = build_context_graph(&ep, &[], &frags).unwrap();
        let n = cg.num_nodes();
        let d = 4;
        let mut store = ParameterStore::new(0);
        let enc = context_encoder(d, 2);
        let mut rng = crate::util::derive_rng(&[17]);
        enc.init_params(&mut store, &mut rng, d).unwrap();
        let feats: Vec<f64> = (0..n * d).map(|i| ((i * 37 % 11) as f64) * 0.3 - 1.0).collect();

        let run = |perm: &[usize]| -> Vec<Vec<f64>> {
            // perm[new] = old node index
            let inv: Vec<usize> = {
                let mut v = vec![0; n];
                for (new, &old) in perm.iter().enumerate() {
                    v[old] = new;
                }
                v
            };
            let mut tape = Tape::new();
            let permuted: Vec<f64> = perm
                .iter()
                .flat_map(|&old| feats[old * d..(old + 1) * d].to_vec())
                .collect();
            let x = tape.constant(Tensor::matrix(n, d, permuted).unwrap());
            let edges: Vec<DirectedEdge> = cg
                .directed_edges()
                .iter()
                .map(|e| DirectedEdge { src: inv[e.src], dst: inv[e.dst], edge_type: e.edge_type })
                .collect();
            let mut stats = MessageStats::default();
            let z = enc.encode(&mut tape, &store, x, &edges, n, &mut stats).unwrap();
            (0..n).map(|i| tape.value(z).row(i).to_vec()).collect()
        };

        let identity: Vec<usize> = (0..n).collect();
        let base = run(&identity);
        let mut perm: Vec<usize> = (0..n).rev().collect();
        perm.swap(0, n / 2);
        let shuffled = run(&perm);
        for (new, &old) in perm.iter().enumerate() {
            for (a, b) in shuffled[new].iter().zip(&base[old]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
