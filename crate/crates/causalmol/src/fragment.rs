//! Functional-group decomposition via an explicit bond-cleavage rule table.
//!
//! A small stand-in for retrosynthetic fragmentation schemes: acyclic single
//! bonds matching any rule are severed all at once and the connected
//! components become fragments. Atoms partition exactly; ring bonds are never
//! touched. The table is data, not code, so rules can be extended per run.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::smiles::{BondOrder, Element, MolecularGraph};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FragmentError {
    #[error("fragment has {0} atoms; canonical keys support at most {MAX_KEY_ATOMS}")]
    OversizedFragment(usize),
}

/// Atom-side predicate of a cleavage rule.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AtomPredicate {
    /// Accepted elements; empty means any element.
    #[serde(default)]
    pub elements: Vec<Element>,
    #[serde(default)]
    pub aromatic: Option<bool>,
    #[serde(default)]
    pub in_ring: Option<bool>,
    #[serde(default)]
    pub min_degree: Option<usize>,
}

impl AtomPredicate {
    fn matches(&self, mol: &MolecularGraph, atom: usize) -> bool {
        let a = &mol.atoms[atom];
        if !self.elements.is_empty() && !self.elements.contains(&a.element) {
            return false;
        }
        if let Some(want) = self.aromatic {
            if a.aromatic != want {
                return false;
            }
        }
        if let Some(want) = self.in_ring {
            if mol.atom_in_ring(atom) != want {
                return false;
            }
        }
        if let Some(min) = self.min_degree {
            if mol.degree(atom) < min {
                return false;
            }
        }
        true
    }
}

/// One rule: an acyclic single bond whose endpoints match the two predicates
/// in either orientation is cleavable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleavageRule {
    pub id: String,
    pub endpoint_a: AtomPredicate,
    pub endpoint_b: AtomPredicate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuleTable {
    pub version: String,
    pub rules: Vec<CleavageRule>,
}

impl Default for RuleTable {
    fn default() -> Self {
        RuleTable::v1()
    }
}

impl RuleTable {
    /// R1: ring atom to non-ring heavy atom. R2: non-ring C to non-ring N.
    /// R3: non-ring C to non-ring O.
    pub fn v1() -> Self {
        let ring = AtomPredicate { in_ring: Some(true), ..Default::default() };
        let non_ring = AtomPredicate { in_ring: Some(false), ..Default::default() };
        let non_ring_of = |elements: Vec<Element>| AtomPredicate {
            elements,
            in_ring: Some(false),
            ..Default::default()
        };
        RuleTable {
            version: "v1".to_string(),
            rules: vec![
                CleavageRule { id: "R1".into(), endpoint_a: ring, endpoint_b: non_ring },
                CleavageRule {
                    id: "R2".into(),
                    endpoint_a: non_ring_of(vec![Element::C]),
                    endpoint_b: non_ring_of(vec![Element::N]),
                },
                CleavageRule {
                    id: "R3".into(),
                    endpoint_a: non_ring_of(vec![Element::C]),
                    endpoint_b: non_ring_of(vec![Element::O]),
                },
            ],
        }
    }
}

/// Bond indices matched by the rule table, ascending. Only acyclic single
/// bonds are eligible; rules apply symmetrically to the two endpoints.
pub fn find_cleavable_bonds(mol: &MolecularGraph, table: &RuleTable) -> Vec<usize> {
    mol.bonds
        .iter()
        .enumerate()
        .filter(|(bi, bond)| {
            bond.order == BondOrder::Single
                && !mol.ring_bond_flags[*bi]
                && table.rules.iter().any(|rule| {
                    (rule.endpoint_a.matches(mol, bond.a) && rule.endpoint_b.matches(mol, bond.b))
                        || (rule.endpoint_a.matches(mol, bond.b)
                            && rule.endpoint_b.matches(mol, bond.a))
                })
        })
        .map(|(bi, _)| bi)
        .collect()
}

/// A connected fragment of a parent molecule. `atom_indices` refer to parent
/// numbering; attachment points record which severed neighbor each boundary
/// atom had. Fragments of one molecule partition its atoms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionalGroup {
    pub parent_molecule: usize,
    pub atom_indices: Vec<usize>,
    /// (atom index within the parent, severed partner index within the parent)
    pub attachment_points: Vec<(usize, usize)>,
    pub canonical_key: String,
}

impl FunctionalGroup {
    /// The fragment as a standalone graph (parent ring flags do not transfer;
    /// they are recomputed on the induced subgraph).
    pub fn subgraph(&self, parent: &MolecularGraph) -> MolecularGraph {
        parent.induced_subgraph(&self.atom_indices)
    }
}

/// Sever every cleavable bond at once and return connected components as
/// functional groups, ordered by their smallest atom index. A molecule with
/// no cleavable bonds yields one fragment equal to the whole molecule.
pub fn fragment_molecule(
    mol: &MolecularGraph,
    molecule_id: usize,
    table: &RuleTable,
) -> Result<Vec<FunctionalGroup>, FragmentError> {
    let cleaved: std::collections::HashSet<usize> =
        find_cleavable_bonds(mol, table).into_iter().collect();
    let n = mol.num_atoms();
    let mut component = vec![usize::MAX; n];
    let mut next = 0usize;
    for start in 0..n {
        if component[start] != usize::MAX {
            continue;
        }
        let id = next;
        next += 1;
        let mut stack = vec![start];
        component[start] = id;
        while let Some(v) = stack.pop() {
            for (bi, bond) in mol.bonds.iter().enumerate() {
                if cleaved.contains(&bi) {
                    continue;
                }
                let u = if bond.a == v {
                    bond.b
                } else if bond.b == v {
                    bond.a
                } else {
                    continue;
                };
                if component[u] == usize::MAX {
                    component[u] = id;
                    stack.push(u);
                }
            }
        }
    }
    let mut groups: Vec<FunctionalGroup> = (0..next)
        .map(|id| FunctionalGroup {
            parent_molecule: molecule_id,
            atom_indices: (0..n).filter(|a| component[*a] == id).collect(),
            attachment_points: Vec::new(),
            canonical_key: String::new(),
        })
        .collect();
    for &bi in &cleaved {
        let bond = &mol.bonds[bi];
        groups[component[bond.a]].attachment_points.push((bond.a, bond.b));
        groups[component[bond.b]].attachment_points.push((bond.b, bond.a));
    }
    for g in &mut groups {
        g.attachment_points.sort_unstable();
        g.canonical_key = canonical_key_for(mol, &g.atom_indices, &g.attachment_points)?;
    }
    Ok(groups)
}

pub const MAX_KEY_ATOMS: usize = 64;

/// Canonical key by iterative neighborhood refinement (3 rounds) over labels
/// (element, aromatic, charge, attachment flag) and bond orders, then a
/// sorted multiset hash. Equal keys for isomorphic labeled fragments.
pub fn canonical_key(fg: &FunctionalGroup, parent: &MolecularGraph) -> Result<String, FragmentError> {
    canonical_key_for(parent, &fg.atom_indices, &fg.attachment_points)
}

fn canonical_key_for(
    parent: &MolecularGraph,
    atom_indices: &[usize],
    attachment_points: &[(usize, usize)],
) -> Result<String, FragmentError> {
    if atom_indices.len() > MAX_KEY_ATOMS {
        return Err(FragmentError::OversizedFragment(atom_indices.len()));
    }
    let sub = parent.induced_subgraph(atom_indices);
    let mut sorted: Vec<usize> = atom_indices.to_vec();
    sorted.sort_unstable();
    let local: HashMap<usize, usize> =
        sorted.iter().enumerate().map(|(new, old)| (*old, new)).collect();
    let mut attach = vec![false; sub.num_atoms()];
    for (atom, _) in attachment_points {
        attach[local[atom]] = true;
    }

    let adj = sub.adjacency();
    let mut colors: Vec<u64> = sub
        .atoms
        .iter()
        .zip(&attach)
        .map(|(a, flag)| {
            hash_parts(&[
                a.element.index() as u64,
                u64::from(a.aromatic),
                (a.formal_charge + 2) as u64,
                u64::from(*flag),
            ])
        })
        .collect();
    for _ in 0..3 {
        let mut next = Vec::with_capacity(colors.len());
        for (i, &c) in colors.iter().enumerate() {
            let mut neigh: Vec<u64> = adj[i]
                .iter()
                .map(|(u, bi)| hash_parts(&[colors[*u], sub.bonds[*bi].order.index() as u64]))
                .collect();
            neigh.sort_unstable();
            let mut parts = vec![c];
            parts.extend(neigh);
            next.push(hash_parts(&parts));
        }
        colors = next;
    }
    let mut node_multiset = colors.clone();
    node_multiset.sort_unstable();
    let mut edge_multiset: Vec<(u64, u64, u64)> = sub
        .bonds
        .iter()
        .map(|b| {
            let (x, y) = (colors[b.a].min(colors[b.b]), colors[b.a].max(colors[b.b]));
            (x, y, b.order.index() as u64)
        })
        .collect();
    edge_multiset.sort_unstable();

    let mut hasher = Sha256::new();
    for c in &node_multiset {
        hasher.update(c.to_le_bytes());
    }
    for (x, y, o) in &edge_multiset {
        hasher.update(x.to_le_bytes());
        hasher.update(y.to_le_bytes());
        hasher.update(o.to_le_bytes());
    }
    let digest = hasher.finalize();
    Ok(hex16(&digest[..8]))
}

fn hex16(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_parts(parts: &[u64]) -> u64 {
    // FNV-1a over the little-endian words: stable across platforms and runs
    let mut h: u64 = 0xcbf29ce484222325;
    for p in parts {
        for byte in p.to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smiles::parse;

    fn frags(s: &str) -> Vec<FunctionalGroup> {
        fragment_molecule(&parse(s).unwrap(), 0, &RuleTable::v1()).unwrap()
    }

    #[test]
    fn ethane_is_uncleavable() {
        let mol = parse("CC").unwrap();
        assert!(find_cleavable_bonds(&mol, &RuleTable::v1()).is_empty());
        let f = frags("CC");
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].atom_indices, vec![0, 1]);
        assert!(f[0].attachment_points.is_empty());
    }

    #[test]
    fn toluene_splits_at_the_ring_bond() {
        let mol = parse("Cc1ccccc1").unwrap();
        let cleavable = find_cleavable_bonds(&mol, &RuleTable::v1());
        assert_eq!(cleavable.len(), 1);
        let f = frags("Cc1ccccc1");
        assert_eq!(f.len(), 2);
        let sizes: Vec<usize> = f.iter().map(|g| g.atom_indices.len()).collect();
        assert_eq!(sizes, vec![1, 6]);
        assert_eq!(f[0].attachment_points.len(), 1);
    }

    #[test]
    fn nitrophenol_gives_hydroxyl_nitro_and_ring() {
        let mol = parse("Oc1ccc(cc1)[N+](=O)[O-]").unwrap();
        let cleavable = find_cleavable_bonds(&mol, &RuleTable::v1());
        assert_eq!(cleavable.len(), 2, "aryl-O and aryl-N only");
        let f = frags("Oc1ccc(cc1)[N+](=O)[O-]");
        assert_eq!(f.len(), 3);
        let mut sizes: Vec<usize> = f.iter().map(|g| g.atom_indices.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![1, 3, 6]); // OH, NO2, arene core
    }

    #[test]
    fn fragments_partition_atoms() {
        for s in ["CC", "Cc1ccccc1", "Oc1ccc(cc1)[N+](=O)[O-]", "CCNCCO"] {
            let mol = parse(s).unwrap();
            let f = fragment_molecule(&mol, 0, &RuleTable::v1()).unwrap();
            let mut all: Vec<usize> = f.iter().flat_map(|g| g.atom_indices.clone()).collect();
            all.sort_unstable();
            assert_eq!(all, (0..mol.num_atoms()).collect::<Vec<_>>(), "{s}");
        }
    }

    #[test]
    fn ring_bonds_never_cleaved() {
        let mol = parse("C1CC1NC2CC2").unwrap();
        for bi in find_cleavable_bonds(&mol, &RuleTable::v1()) {
            assert!(!mol.ring_bond_flags[bi]);
        }
    }

    #[test]
    fn identical_hydroxyl_keys_across_molecules() {
        let a = frags("Oc1ccccc1");
        let b = frags("OC1CCCCC1");
        let key_a = &a.iter().find(|g| g.atom_indices.len() == 1).unwrap().canonical_key;
        let key_b = &b.iter().find(|g| g.atom_indices.len() == 1).unwrap().canonical_key;
        assert_eq!(key_a, key_b);
    }

    #[test]
    fn hydroxyl_vs_thiol_keys_differ() {
        let a = frags("Oc1ccccc1");
        let b = frags("Sc1ccccc1");
        let key_a = &a.iter().find(|g| g.atom_indices.len() == 1).unwrap().canonical_key;
        let key_b = &b.iter().find(|g| g.atom_indices.len() == 1).unwrap().canonical_key;
        assert_ne!(key_a, key_b);
    }

    #[test]
    fn benzene_key_ignores_attachment_position() {
        // ortho vs para substitution: ring fragments have 2 attach-flagged
        // atoms either way, and the flagged positions are symmetric
        let para = frags("Oc1ccc(O)cc1");
        let ring_para = para.iter().find(|g| g.atom_indices.len() == 6).unwrap();
        let meta = frags("Oc1cccc(O)c1");
        let ring_meta = meta.iter().find(|g| g.atom_indices.len() == 6).unwrap();
        // different substitution patterns are genuinely non-isomorphic
        assert_ne!(ring_para.canonical_key, ring_meta.canonical_key);
        // but the same pattern from different parents collides
        let para2 = frags("Nc1ccc(N)cc1");
        let ring_para2 = para2.iter().find(|g| g.atom_indices.len() == 6).unwrap();
        assert_eq!(ring_para.canonical_key, ring_para2.canonical_key);
    }

    #[test]
    fn oversized_fragment_rejected() {
        // a 70-atom ring is one fragment with no cleavable bonds
        let smiles = format!("C1{}C1", "C".repeat(68));
        let mol = parse(&smiles).unwrap();
        assert_eq!(
            fragment_molecule(&mol, 0, &RuleTable::v1()).unwrap_err(),
            FragmentError::OversizedFragment(70)
        );
    }
}
