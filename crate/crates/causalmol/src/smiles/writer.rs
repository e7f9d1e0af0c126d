//! Subset SMILES emission. `parse(serialize(g))` is graph-isomorphic to `g`.

use std::collections::HashMap;

use thiserror::Error;

use super::{BondOrder, MolecularGraph};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum SerializeError {
    #[error("graph has no atoms")]
    Empty,
    #[error("aromatic atom {0} not on any ring")]
    AromaticAtomNotInRing(usize),
    #[error("aromatic bond {0} outside a ring or with non-aromatic endpoint")]
    InvalidAromaticBond(usize),
    #[error("atom {0}: element has no aromatic form")]
    UnsupportedAromaticElement(usize),
    #[error("more than 99 rings open at once")]
    TooManyRings,
    #[error("graph is not connected")]
    Disconnected,
}

/// Serialize and also report the emission order: entry `k` of the returned
/// vector is the original index of the k-th atom in the output string, which
/// is the numbering `parse` assigns on a round trip.
pub fn serialize_with_atom_order(
    graph: &MolecularGraph,
) -> Result<(String, Vec<usize>), SerializeError> {
    if graph.atoms.is_empty() {
        return Err(SerializeError::Empty);
    }
    for (ai, atom) in graph.atoms.iter().enumerate() {
        if atom.aromatic {
            if !atom.element.supports_aromatic() {
                return Err(SerializeError::UnsupportedAromaticElement(ai));
            }
            if !graph.atom_in_ring(ai) {
                return Err(SerializeError::AromaticAtomNotInRing(ai));
            }
        }
    }
    for (bi, bond) in graph.bonds.iter().enumerate() {
        if bond.order == BondOrder::Aromatic
            && !(graph.ring_bond_flags[bi]
                && graph.atoms[bond.a].aromatic
                && graph.atoms[bond.b].aromatic)
        {
            return Err(SerializeError::InvalidAromaticBond(bi));
        }
    }

    let adj = graph.adjacency();
    let n = graph.num_atoms();
    let mut visited = vec![false; n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    // spanning tree children and back edges discovered by one DFS from atom 0
    let mut children: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    let mut back_edges: Vec<(usize, usize, usize)> = Vec::new(); // (from, to, bond)
    let mut seen_bond = vec![false; graph.bonds.len()];

    let mut stack = vec![(0usize, usize::MAX, usize::MAX)]; // (node, via bond, parent)
    while let Some((v, pbond, parent)) = stack.pop() {
        if visited[v] {
            continue; // stale stack entry; the bond is handled at v's scan
        }
        visited[v] = true;
        order.push(v);
        if parent != usize::MAX {
            seen_bond[pbond] = true;
            children[parent].push((v, pbond));
        }
        // reverse keeps lowest-index neighbors first off the stack, so
        // children are appended in emission order
        for &(u, bi) in adj[v].iter().rev() {
            if !visited[u] {
                stack.push((u, bi, v));
            } else if !seen_bond[bi] {
                seen_bond[bi] = true;
                back_edges.push((v, u, bi));
            }
        }
    }
    if order.len() != n {
        return Err(SerializeError::Disconnected);
    }
    let pos: HashMap<usize, usize> = order.iter().enumerate().map(|(i, v)| (*v, i)).collect();

    // ring-closure bookkeeping: atom -> list of (number, bond index, first?)
    let mut closures: HashMap<usize, Vec<(usize, usize, bool)>> = HashMap::new();
    let mut open: Vec<bool> = vec![false; 100];
    let mut assigned: HashMap<usize, usize> = HashMap::new(); // bond -> number
    let mut events: Vec<(usize, usize, bool)> = Vec::new(); // (atom emission pos, bond, open?)
    for &(from, to, bi) in &back_edges {
        let (first, second) = if pos[&from] <= pos[&to] { (from, to) } else { (to, from) };
        events.push((pos[&first], bi, true));
        events.push((pos[&second], bi, false));
    }
    events.sort_unstable();
    for (apos, bi, is_open) in events {
        let atom = order[apos];
        if is_open {
            let num = (1..100).find(|i| !open[*i]).ok_or(SerializeError::TooManyRings)?;
            open[num] = true;
            assigned.insert(bi, num);
            closures.entry(atom).or_default().push((num, bi, true));
        } else {
            let num = assigned[&bi];
            open[num] = false;
            closures.entry(atom).or_default().push((num, bi, false));
        }
    }

    let mut out = String::new();
    emit(graph, 0, usize::MAX, &children, &closures, &mut out);
    Ok((out, order))
}

pub fn serialize(graph: &MolecularGraph) -> Result<String, SerializeError> {
    serialize_with_atom_order(graph).map(|(s, _)| s)
}

fn bond_token(graph: &MolecularGraph, bi: usize) -> &'static str {
    let bond = &graph.bonds[bi];
    match bond.order {
        BondOrder::Double => "=",
        BondOrder::Triple => "#",
        BondOrder::Aromatic => "", // implicit between aromatic atoms
        BondOrder::Single => {
            // implicit single between aromatics would re-parse as aromatic on
            // a ring, so spell it out
            if graph.atoms[bond.a].aromatic && graph.atoms[bond.b].aromatic {
                "-"
            } else {
                ""
            }
        }
    }
}

fn atom_token(graph: &MolecularGraph, ai: usize) -> String {
    let atom = &graph.atoms[ai];
    let sym = if atom.aromatic {
        atom.element.symbol().to_ascii_lowercase()
    } else {
        atom.element.symbol().to_string()
    };
    if atom.formal_charge == 0 && atom.explicit_h == 0 {
        return sym;
    }
    let mut s = String::from("[");
    s.push_str(&sym);
    match atom.explicit_h {
        0 => {}
        1 => s.push('H'),
        h => {
            s.push('H');
            s.push((b'0' + h) as char);
        }
    }
    match atom.formal_charge {
        0 => {}
        1 => s.push('+'),
        -1 => s.push('-'),
        c if c > 0 => s.push_str(&format!("+{c}")),
        c => s.push_str(&format!("-{}", -c)),
    }
    s.push(']');
    s
}

fn emit(
    graph: &MolecularGraph,
    v: usize,
    via_bond: usize,
    children: &[Vec<(usize, usize)>],
    closures: &HashMap<usize, Vec<(usize, usize, bool)>>,
    out: &mut String,
) {
    if via_bond != usize::MAX {
        out.push_str(bond_token(graph, via_bond));
    }
    out.push_str(&atom_token(graph, v));
    if let Some(list) = closures.get(&v) {
        for &(num, bi, is_open) in list {
            // the closing side carries the bond symbol
            if !is_open {
                out.push_str(bond_token(graph, bi));
            }
            if num < 10 {
                out.push((b'0' + num as u8) as char);
            } else {
                out.push_str(&format!("%{num:02}"));
            }
        }
    }
    let kids = &children[v];
    for (i, &(u, bi)) in kids.iter().enumerate() {
        let last = i + 1 == kids.len();
        if last {
            emit(graph, u, bi, children, closures, out);
        } else {
            out.push('(');
            emit(graph, u, bi, children, closures, out);
            out.push(')');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::parse;
    use super::*;

    #[test]
    fn simple_round_trip_strings() {
        for s in ["C", "CC", "CCO", "C=C", "C#N", "[O-]", "[NH3+]", "CC(C)C"] {
            let g = parse(s).unwrap();
            let emitted = serialize(&g).unwrap();
            let g2 = parse(&emitted).unwrap();
            assert_eq!(g.num_atoms(), g2.num_atoms(), "{s} -> {emitted}");
            assert_eq!(g.bonds.len(), g2.bonds.len(), "{s} -> {emitted}");
        }
    }

    #[test]
    fn benzene_round_trip_keeps_aromatic_ring() {
        let g = parse("c1ccccc1").unwrap();
        let emitted = serialize(&g).unwrap();
        let g2 = parse(&emitted).unwrap();
        assert_eq!(g2.bonds.len(), 6);
        assert!(g2.bonds.iter().all(|b| b.order == BondOrder::Aromatic));
    }

    #[test]
    fn atom_order_mapping_is_a_permutation() {
        let g = parse("CC(C)(N)O").unwrap();
        let (emitted, order) = serialize_with_atom_order(&g).unwrap();
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..g.num_atoms()).collect::<Vec<_>>());
        let g2 = parse(&emitted).unwrap();
        for (new_idx, &old_idx) in order.iter().enumerate() {
            assert_eq!(g2.atoms[new_idx].element, g.atoms[old_idx].element);
        }
    }

    #[test]
    fn empty_graph_rejected() {
        let g = MolecularGraph {
            atoms: vec![],
            bonds: vec![],
            ring_bond_flags: vec![],
            source_smiles: String::new(),
        };
        assert_eq!(serialize(&g).unwrap_err(), SerializeError::Empty);
    }
}
