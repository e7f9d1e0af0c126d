//! Property test: serialize -> parse preserves the labeled graph, for random
//! connected molecules over the supported element/bond/charge space.

use causalmol::graph_iso::molecules_isomorphic;
use causalmol::smiles::{
    parse, serialize, Atom, Bond, BondOrder, Element, MolecularGraph,
};
use proptest::prelude::*;

fn build_molecule(
    elements: Vec<u8>,
    parents: Vec<u16>,
    orders: Vec<u8>,
    extra_edges: Vec<(u16, u16, u8)>,
    charges: Vec<i8>,
    hydrogens: Vec<u8>,
) -> MolecularGraph {
    let n = elements.len();
    let non_aromatic = [
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
    let atoms: Vec<Atom> = (0..n)
        .map(|i| Atom {
            element: non_aromatic[elements[i] as usize % non_aromatic.len()],
            aromatic: false,
            formal_charge: (charges[i] % 3) * if charges[i] % 2 == 0 { 1 } else { -1 },
            explicit_h: hydrogens[i] % 5,
        })
        .collect();
    let order_of = |o: u8| match o % 3 {
        0 => BondOrder::Single,
        1 => BondOrder::Double,
        _ => BondOrder::Triple,
    };
    let mut bonds: Vec<Bond> = Vec::new();
    let mut pairs = std::collections::HashSet::new();
    for i in 1..n {
        let p = parents[i] as usize % i;
        bonds.push(Bond { a: p, b: i, order: order_of(orders[i]) });
        pairs.insert((p, i));
    }
    for &(a, b, o) in &extra_edges {
        let (a, b) = (a as usize % n, b as usize % n);
        let key = (a.min(b), a.max(b));
        if a != b && !pairs.contains(&key) {
            pairs.insert(key);
            bonds.push(Bond { a: key.0, b: key.1, order: order_of(o) });
        }
    }
    let flags = causalmol::smiles::ring_flags_for_tests(n, &bonds);
    MolecularGraph { atoms, bonds, ring_bond_flags: flags, source_smiles: String::new() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn serialize_parse_round_trip(
        n in 1usize..12,
        elements in prop::collection::vec(any::<u8>(), 12),
        parents in prop::collection::vec(any::<u16>(), 12),
        orders in prop::collection::vec(any::<u8>(), 12),
        extra_edges in prop::collection::vec((any::<u16>(), any::<u16>(), any::<u8>()), 0..4),
        charges in prop::collection::vec(-2i8..=2, 12),
        hydrogens in prop::collection::vec(any::<u8>(), 12),
    ) {
        let mol = build_molecule(
            elements[..n].to_vec(),
            parents[..n].to_vec(),
            orders[..n].to_vec(),
            extra_edges,
            charges[..n].to_vec(),
            hydrogens[..n].to_vec(),
        );
        let emitted = serialize(&mol).expect("constructed graphs serialize");
        let reparsed = parse(&emitted).unwrap_or_else(|e| panic!("{emitted}: {e}"));
        prop_assert!(molecules_isomorphic(&mol, &reparsed), "{emitted}");
        // idempotence: a second round trip emits an isomorphic graph again
        let emitted2 = serialize(&reparsed).expect("serializable");
        let reparsed2 = parse(&emitted2).unwrap();
        prop_assert!(molecules_isomorphic(&reparsed, &reparsed2), "{emitted2}");
    }

    #[test]
    fn ring_flags_match_bruteforce_cycle_search(
        n in 2usize..10,
        parents in prop::collection::vec(any::<u16>(), 10),
        extra_edges in prop::collection::vec((any::<u16>(), any::<u16>(), any::<u8>()), 0..4),
    ) {
        let mol = build_molecule(
            vec![1; n],
            parents[..n].to_vec(),
            vec![0; n],
            extra_edges,
            vec![0; n],
            vec![0; n],
        );
        // a bond is on a simple cycle iff its endpoints stay connected
        // without it
        for (bi, bond) in mol.bonds.iter().enumerate() {
            let mut reach = vec![false; n];
            let mut stack = vec![bond.a];
            reach[bond.a] = true;
            while let Some(v) = stack.pop() {
                for (bj, other) in mol.bonds.iter().enumerate() {
                    if bj == bi { continue; }
                    let u = if other.a == v { other.b } else if other.b == v { other.a } else { continue };
                    if !reach[u] {
                        reach[u] = true;
                        stack.push(u);
                    }
                }
            }
            prop_assert_eq!(mol.ring_bond_flags[bi], reach[bond.b]);
        }
    }
}
