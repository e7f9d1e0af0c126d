//! SMILES subset parsing, molecular graphs, and raw atom features.
//!
//! The subset: organic-subset atoms (B C N O P S F Cl Br I), lowercase
//! aromatic b c n o p s, bracket atoms with H-count and charge, bonds
//! `- = # :`, branches, ring closures `1`-`9` and `%nn`. No stereochemistry,
//! no isotopes, no multi-fragment input, no valence checking.

mod parser;
mod writer;

pub use parser::{parse, SmilesError, SmilesErrorKind};
pub use writer::{serialize, serialize_with_atom_order};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Element {
    B,
    C,
    N,
    O,
    P,
    S,
    F,
    Cl,
    Br,
    I,
}

impl Element {
    pub const ALL: [Element; 10] = [
        Element::B,
        Element::C,
        Element::N,
        Element::O,
        Element::P,
        Element::S,
        Element::F,
        Element::Cl,
        Element::Br,
        Element::I,
    ];

    pub fn symbol(&self) -> &'static str {
        match self {
            Element::B => "B",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::P => "P",
            Element::S => "S",
            Element::F => "F",
            Element::Cl => "Cl",
            Element::Br => "Br",
            Element::I => "I",
        }
    }

    pub fn index(&self) -> usize {
        Element::ALL.iter().position(|e| e == self).expect("listed element")
    }

    /// Elements with an aromatic (lowercase) form in the subset.
    pub fn supports_aromatic(&self) -> bool {
        matches!(
            self,
            Element::B | Element::C | Element::N | Element::O | Element::P | Element::S
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    pub fn index(&self) -> usize {
        match self {
            BondOrder::Single => 0,
            BondOrder::Double => 1,
            BondOrder::Triple => 2,
            BondOrder::Aromatic => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Atom {
    pub element: Element,
    pub aromatic: bool,
    /// Formal charge in [-2, 2].
    pub formal_charge: i8,
    /// Bracket-specified hydrogen count; implicit hydrogens are not modeled.
    pub explicit_h: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MolecularGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
    /// Per bond: true when the bond lies on at least one simple cycle.
    pub ring_bond_flags: Vec<bool>,
    pub source_smiles: String,
}

impl MolecularGraph {
    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    /// Neighbor lists with bond index, sorted by neighbor for determinism.
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for (bi, bond) in self.bonds.iter().enumerate() {
            adj[bond.a].push((bond.b, bi));
            adj[bond.b].push((bond.a, bi));
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn degree(&self, atom: usize) -> usize {
        self.bonds.iter().filter(|b| b.a == atom || b.b == atom).count()
    }

    pub fn atom_in_ring(&self, atom: usize) -> bool {
        self.bonds
            .iter()
            .enumerate()
            .any(|(bi, b)| self.ring_bond_flags[bi] && (b.a == atom || b.b == atom))
    }

    /// Induced subgraph over `atom_indices` (ascending order defines the new
    /// atom numbering). Ring flags are recomputed on the subgraph.
    pub fn induced_subgraph(&self, atom_indices: &[usize]) -> MolecularGraph {
        let mut sorted: Vec<usize> = atom_indices.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let lookup: std::collections::HashMap<usize, usize> =
            sorted.iter().enumerate().map(|(new, old)| (*old, new)).collect();
        let atoms: Vec<Atom> = sorted.iter().map(|&i| self.atoms[i]).collect();
        let bonds: Vec<Bond> = self
            .bonds
            .iter()
            .filter_map(|b| {
                let (na, nb) = (lookup.get(&b.a)?, lookup.get(&b.b)?);
                Some(Bond { a: *na, b: *nb, order: b.order })
            })
            .collect();
        let ring_bond_flags = ring_bonds(atoms.len(), &bonds);
        MolecularGraph { atoms, bonds, ring_bond_flags, source_smiles: String::new() }
    }
}

/// Ring bonds are exactly the non-bridge edges: an edge lies on a simple
/// cycle iff removing it keeps its endpoints connected.
pub(crate) fn ring_bonds(num_atoms: usize, bonds: &[Bond]) -> Vec<bool> {
    let mut adj = vec![Vec::new(); num_atoms];
    for (bi, bond) in bonds.iter().enumerate() {
        adj[bond.a].push((bond.b, bi));
        adj[bond.b].push((bond.a, bi));
    }
    let mut flags = vec![true; bonds.len()];
    let mut disc = vec![usize::MAX; num_atoms];
    let mut low = vec![0usize; num_atoms];
    let mut timer = 0usize;
    // iterative DFS frames: (node, bond to parent, neighbor cursor)
    let mut stack: Vec<(usize, usize, usize)> = Vec::new();
    for root in 0..num_atoms {
        if disc[root] != usize::MAX {
            continue;
        }
        disc[root] = timer;
        low[root] = timer;
        timer += 1;
        stack.push((root, usize::MAX, 0));
        while let Some(top) = stack.len().checked_sub(1) {
            let (v, pbond, cursor) = stack[top];
            if cursor < adj[v].len() {
                stack[top].2 += 1;
                let (u, bi) = adj[v][cursor];
                if bi == pbond {
                    continue;
                }
                if disc[u] == usize::MAX {
                    disc[u] = timer;
                    low[u] = timer;
                    timer += 1;
                    stack.push((u, bi, 0));
                } else {
                    low[v] = low[v].min(disc[u]);
                }
            } else {
                stack.pop();
                if let Some(&(parent, _, _)) = stack.last() {
                    low[parent] = low[parent].min(low[v]);
                    if low[v] > disc[parent] {
                        flags[pbond] = false; // bridge
                    }
                }
            }
        }
    }
    flags
}

/// Test-only re-export of ring perception for oracle comparisons.
pub fn ring_flags_for_tests(num_atoms: usize, bonds: &[Bond]) -> Vec<bool> {
    ring_bonds(num_atoms, bonds)
}

/// Raw atom feature width: element one-hot (10) + degree one-hot 0-5 (6) +
/// aromatic flag (1) + charge bucket -2..2 (5) + explicit-H bucket 0-4 (5).
pub const ATOM_FEATURE_DIM: usize = 27;

/// Per-atom feature matrix (`num_atoms x 27`), deterministic in the graph.
pub fn atom_features(graph: &MolecularGraph) -> Vec<Vec<f64>> {
    graph
        .atoms
        .iter()
        .enumerate()
        .map(|(i, atom)| {
            let mut f = vec![0.0; ATOM_FEATURE_DIM];
            f[atom.element.index()] = 1.0;
            f[10 + graph.degree(i).min(5)] = 1.0;
            if atom.aromatic {
                f[16] = 1.0;
            }
            f[17 + (atom.formal_charge + 2) as usize] = 1.0;
            f[22 + (atom.explicit_h as usize).min(4)] = 1.0;
            f
        })
        .collect()
}
