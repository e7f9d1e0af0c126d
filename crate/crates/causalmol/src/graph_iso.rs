//! Brute-force labeled graph isomorphism (VF2-style backtracking).
//!
//! Used as an independent oracle: round-trip checks for the SMILES writer and
//! soundness checks for fragment canonical keys. Intentionally simple; fine
//! for the molecule sizes this project handles.

use crate::smiles::MolecularGraph;

/// Adjacency with labels reduced to u64 fingerprints.
#[derive(Debug, Clone)]
pub struct LabeledGraph {
    pub node_labels: Vec<u64>,
    /// Per node: sorted (neighbor, edge_label) pairs.
    pub adj: Vec<Vec<(usize, u64)>>,
}

impl LabeledGraph {
    pub fn new(num_nodes: usize, node_labels: Vec<u64>, edges: &[(usize, usize, u64)]) -> Self {
        assert_eq!(node_labels.len(), num_nodes);
        let mut adj = vec![Vec::new(); num_nodes];
        for &(a, b, l) in edges {
            adj[a].push((b, l));
            adj[b].push((a, l));
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        LabeledGraph { node_labels, adj }
    }

    fn degree(&self, v: usize) -> usize {
        self.adj[v].len()
    }

    fn edge_label(&self, a: usize, b: usize) -> Option<u64> {
        self.adj[a].iter().find(|(n, _)| *n == b).map(|(_, l)| *l)
    }
}

/// Full molecular-graph label: element, aromaticity, charge, explicit H.
pub fn labeled_graph(mol: &MolecularGraph) -> LabeledGraph {
    labeled_graph_with(mol, &vec![false; mol.num_atoms()])
}

/// Same, with a per-atom attachment flag mixed into the node label (used for
/// fragment comparisons where severed bonds matter).
pub fn labeled_graph_with(mol: &MolecularGraph, attach_flags: &[bool]) -> LabeledGraph {
    let node_labels = mol
        .atoms
        .iter()
        .zip(attach_flags)
        .map(|(a, flag)| {
            (a.element.index() as u64)
                | (u64::from(a.aromatic) << 8)
                | (((a.formal_charge + 2) as u64) << 9)
                | ((a.explicit_h as u64) << 12)
                | (u64::from(*flag) << 20)
        })
        .collect();
    let edges: Vec<(usize, usize, u64)> = mol
        .bonds
        .iter()
        .map(|b| (b.a, b.b, b.order.index() as u64))
        .collect();
    LabeledGraph::new(mol.num_atoms(), node_labels, &edges)
}

/// True when a label- and edge-preserving bijection exists.
pub fn isomorphic(g1: &LabeledGraph, g2: &LabeledGraph) -> bool {
    let n = g1.node_labels.len();
    if n != g2.node_labels.len() {
        return false;
    }
    let mut sorted1: Vec<(u64, usize)> =
        g1.node_labels.iter().enumerate().map(|(i, l)| (*l, g1.degree(i))).collect();
    let mut sorted2: Vec<(u64, usize)> =
        g2.node_labels.iter().enumerate().map(|(i, l)| (*l, g2.degree(i))).collect();
    sorted1.sort_unstable();
    sorted2.sort_unstable();
    if sorted1 != sorted2 {
        return false;
    }
    let mut mapping = vec![usize::MAX; n]; // g1 node -> g2 node
    let mut used = vec![false; n];
    // match higher-degree nodes first to prune early
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|v| std::cmp::Reverse(g1.degree(*v)));
    extend(g1, g2, &order, 0, &mut mapping, &mut used)
}

fn extend(
    g1: &LabeledGraph,
    g2: &LabeledGraph,
    order: &[usize],
    depth: usize,
    mapping: &mut [usize],
    used: &mut [bool],
) -> bool {
    if depth == order.len() {
        return true;
    }
    let v = order[depth];
    'candidates: for cand in 0..g2.node_labels.len() {
        if used[cand]
            || g2.node_labels[cand] != g1.node_labels[v]
            || g2.degree(cand) != g1.degree(v)
        {
            continue;
        }
        // consistency with already-mapped neighbors, both directions
        for &(u, l) in &g1.adj[v] {
            if mapping[u] != usize::MAX && g2.edge_label(cand, mapping[u]) != Some(l) {
                continue 'candidates;
            }
        }
        for &(u2, l2) in &g2.adj[cand] {
            if let Some(u1) = mapping.iter().position(|m| *m == u2) {
                if g1.edge_label(v, u1) != Some(l2) {
                    continue 'candidates;
                }
            }
        }
        mapping[v] = cand;
        used[cand] = true;
        if extend(g1, g2, order, depth + 1, mapping, used) {
            return true;
        }
        mapping[v] = usize::MAX;
        used[cand] = false;
    }
    false
}

/// Round-trip oracle: parse -> serialize -> parse preserves the labeled graph.
pub fn molecules_isomorphic(a: &MolecularGraph, b: &MolecularGraph) -> bool {
    isomorphic(&labeled_graph(a), &labeled_graph(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smiles::parse;

    #[test]
    fn isomorphic_to_self_under_relabeling() {
        let a = parse("CC(N)O").unwrap();
        let b = parse("OC(N)C").unwrap();
        assert!(molecules_isomorphic(&a, &b));
    }

    #[test]
    fn different_elements_not_isomorphic() {
        let a = parse("CCO").unwrap();
        let b = parse("CCN").unwrap();
        assert!(!molecules_isomorphic(&a, &b));
    }

    #[test]
    fn bond_orders_matter() {
        let a = parse("C=CC").unwrap();
        let b = parse("CC=C").unwrap();
        assert!(molecules_isomorphic(&a, &b));
        let c = parse("CCC").unwrap();
        assert!(!molecules_isomorphic(&a, &c));
    }

    #[test]
    fn ring_vs_chain() {
        let ring = parse("C1CCCCC1").unwrap();
        let chain = parse("CCCCCC").unwrap();
        assert!(!molecules_isomorphic(&ring, &chain));
    }

    #[test]
    fn charge_breaks_isomorphism() {
        let a = parse("[O-]").unwrap();
        let b = parse("O").unwrap();
        assert!(!molecules_isomorphic(&a, &b));
    }
}
