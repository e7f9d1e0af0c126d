//! Recursive-descent SMILES subset parser with byte-offset error reporting.

use std::collections::HashMap;

use thiserror::Error;

use super::{ring_bonds, Atom, Bond, BondOrder, Element, MolecularGraph};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum SmilesErrorKind {
    #[error("empty input")]
    Empty,
    #[error("unknown token `{0}`")]
    UnknownToken(char),
    #[error("unknown element `{0}`")]
    UnknownElement(String),
    #[error("unclosed branch opened here")]
    UnclosedBranch,
    #[error("unmatched `)`")]
    UnmatchedParen,
    #[error("unclosed ring {0} opened here")]
    UnclosedRing(usize),
    #[error("ring closure bond mismatch")]
    RingBondMismatch,
    #[error("ring closure to the same atom")]
    RingSelfBond,
    #[error("duplicate bond between atoms")]
    DuplicateBond,
    #[error("expected an atom")]
    ExpectedAtom,
    #[error("expected `]`")]
    ExpectedBracketClose,
    #[error("charge outside [-2, 2]")]
    ChargeOutOfRange,
    #[error("expected two digits after `%`")]
    BadPercentRing,
    #[error("aromatic atom outside any ring")]
    AromaticAtomNotInRing,
    #[error("aromatic bond outside any ring or with non-aromatic atom")]
    InvalidAromaticBond,
    #[error("bond symbol without a following atom or ring closure")]
    DanglingBond,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("SMILES error at byte {offset}: {kind}")]
pub struct SmilesError {
    pub offset: usize,
    pub kind: SmilesErrorKind,
}

fn err(offset: usize, kind: SmilesErrorKind) -> SmilesError {
    SmilesError { offset, kind }
}

struct Parser<'a> {
    input: &'a [u8],
    pos: usize,
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    bond_offsets: Vec<usize>,
    bond_explicit_aromatic: Vec<bool>,
    // ring number -> (atom, pending bond symbol, open offset)
    open_rings: HashMap<usize, (usize, Option<BondOrder>, usize)>,
    bond_pairs: std::collections::HashSet<(usize, usize)>,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<u8> {
        self.input.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let c = self.peek();
        if c.is_some() {
            self.pos += 1;
        }
        c
    }

    fn add_atom(&mut self, atom: Atom) -> usize {
        self.atoms.push(atom);
        self.atoms.len() - 1
    }

    fn add_bond(
        &mut self,
        a: usize,
        b: usize,
        symbol: Option<BondOrder>,
        offset: usize,
    ) -> Result<(), SmilesError> {
        if a == b {
            return Err(err(offset, SmilesErrorKind::RingSelfBond));
        }
        let key = (a.min(b), a.max(b));
        if !self.bond_pairs.insert(key) {
            return Err(err(offset, SmilesErrorKind::DuplicateBond));
        }
        let (order, explicit_aromatic) = match symbol {
            Some(BondOrder::Aromatic) => (BondOrder::Aromatic, true),
            Some(o) => (o, false),
            None => {
                if self.atoms[a].aromatic && self.atoms[b].aromatic {
                    (BondOrder::Aromatic, false)
                } else {
                    (BondOrder::Single, false)
                }
            }
        };
        self.bonds.push(Bond { a, b, order });
        self.bond_offsets.push(offset);
        self.bond_explicit_aromatic.push(explicit_aromatic);
        Ok(())
    }

    fn bond_symbol(&mut self) -> Option<BondOrder> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Some(BondOrder::Single)
            }
            Some(b'=') => {
                self.pos += 1;
                Some(BondOrder::Double)
            }
            Some(b'#') => {
                self.pos += 1;
                Some(BondOrder::Triple)
            }
            Some(b':') => {
                self.pos += 1;
                Some(BondOrder::Aromatic)
            }
            _ => None,
        }
    }

    fn organic_atom(&mut self) -> Result<Option<Atom>, SmilesError> {
        let Some(c) = self.peek() else { return Ok(None) };
        let two = if self.pos + 1 < self.input.len() {
            Some(&self.input[self.pos..self.pos + 2])
        } else {
            None
        };
        let (element, aromatic, len) = match (c, two) {
            (b'C', Some(b"Cl")) => (Element::Cl, false, 2),
            (b'B', Some(b"Br")) => (Element::Br, false, 2),
            (b'B', _) => (Element::B, false, 1),
            (b'C', _) => (Element::C, false, 1),
            (b'N', _) => (Element::N, false, 1),
            (b'O', _) => (Element::O, false, 1),
            (b'P', _) => (Element::P, false, 1),
            (b'S', _) => (Element::S, false, 1),
            (b'F', _) => (Element::F, false, 1),
            (b'I', _) => (Element::I, false, 1),
            (b'b', _) => (Element::B, true, 1),
            (b'c', _) => (Element::C, true, 1),
            (b'n', _) => (Element::N, true, 1),
            (b'o', _) => (Element::O, true, 1),
            (b'p', _) => (Element::P, true, 1),
            (b's', _) => (Element::S, true, 1),
            _ => return Ok(None),
        };
        self.pos += len;
        Ok(Some(Atom { element, aromatic, formal_charge: 0, explicit_h: 0 }))
    }

    fn bracket_atom(&mut self) -> Result<Atom, SmilesError> {
        let open = self.pos;
        self.pos += 1; // consume '['
        let sym_start = self.pos;
        let mut sym = String::new();
        match self.peek() {
            Some(c) if c.is_ascii_alphabetic() => {
                sym.push(c as char);
                self.pos += 1;
                // second letter of Cl/Br
                if let Some(c2) = self.peek() {
                    if (sym == "C" && c2 == b'l') || (sym == "B" && c2 == b'r') {
                        sym.push(c2 as char);
                        self.pos += 1;
                    }
                }
            }
            _ => return Err(err(self.pos, SmilesErrorKind::ExpectedAtom)),
        }
        let (element, aromatic) = match sym.as_str() {
            "B" => (Element::B, false),
            "C" => (Element::C, false),
            "N" => (Element::N, false),
            "O" => (Element::O, false),
            "P" => (Element::P, false),
            "S" => (Element::S, false),
            "F" => (Element::F, false),
            "Cl" => (Element::Cl, false),
            "Br" => (Element::Br, false),
            "I" => (Element::I, false),
            "b" => (Element::B, true),
            "c" => (Element::C, true),
            "n" => (Element::N, true),
            "o" => (Element::O, true),
            "p" => (Element::P, true),
            "s" => (Element::S, true),
            _ => return Err(err(sym_start, SmilesErrorKind::UnknownElement(sym))),
        };
        let mut explicit_h = 0u8;
        if self.peek() == Some(b'H') {
            self.pos += 1;
            explicit_h = 1;
            if let Some(d) = self.peek().filter(|c| c.is_ascii_digit()) {
                explicit_h = d - b'0';
                self.pos += 1;
            }
        }
        let mut charge: i32 = 0;
        match self.peek() {
            Some(sign @ (b'+' | b'-')) => {
                let unit: i32 = if sign == b'+' { 1 } else { -1 };
                self.pos += 1;
                charge = unit;
                if let Some(d) = self.peek().filter(|c| c.is_ascii_digit()) {
                    charge = unit * i32::from(d - b'0');
                    self.pos += 1;
                } else {
                    while self.peek() == Some(sign) {
                        charge += unit;
                        self.pos += 1;
                    }
                }
            }
            _ => {}
        }
        if !(-2..=2).contains(&charge) {
            return Err(err(open, SmilesErrorKind::ChargeOutOfRange));
        }
        if self.bump() != Some(b']') {
            return Err(err(self.pos.saturating_sub(1).max(open), SmilesErrorKind::ExpectedBracketClose));
        }
        Ok(Atom { element, aromatic, formal_charge: charge as i8, explicit_h })
    }

    fn atom(&mut self) -> Result<Option<usize>, SmilesError> {
        if self.peek() == Some(b'[') {
            let a = self.bracket_atom()?;
            return Ok(Some(self.add_atom(a)));
        }
        Ok(self.organic_atom()?.map(|a| self.add_atom(a)))
    }

    fn ring_closure(&mut self, current: usize, symbol: Option<BondOrder>) -> Result<bool, SmilesError> {
        let start = self.pos;
        let number = match self.peek() {
            Some(d @ b'1'..=b'9') => {
                self.pos += 1;
                (d - b'0') as usize
            }
            Some(b'%') => {
                self.pos += 1;
                let d1 = self.bump().filter(u8::is_ascii_digit);
                let d2 = self.bump().filter(u8::is_ascii_digit);
                match (d1, d2) {
                    (Some(a), Some(b)) => ((a - b'0') as usize) * 10 + (b - b'0') as usize,
                    _ => return Err(err(start, SmilesErrorKind::BadPercentRing)),
                }
            }
            _ => return Ok(false),
        };
        match self.open_rings.remove(&number) {
            Some((other, other_sym, _)) => {
                let merged = match (symbol, other_sym) {
                    (Some(a), Some(b)) if a != b => {
                        return Err(err(start, SmilesErrorKind::RingBondMismatch))
                    }
                    (Some(a), _) => Some(a),
                    (None, b) => b,
                };
                self.add_bond(other, current, merged, start)?;
            }
            None => {
                self.open_rings.insert(number, (current, symbol, start));
            }
        }
        Ok(true)
    }

    /// Parse a chain; `start` is the atom the chain attaches to, with an
    /// optional pending bond symbol consumed by the first atom.
    fn chain(&mut self, mut prev: Option<usize>) -> Result<(), SmilesError> {
        loop {
            match self.peek() {
                None => return Ok(()),
                Some(b')') => return Ok(()),
                Some(b'(') => {
                    let open = self.pos;
                    self.pos += 1;
                    let anchor = prev.ok_or_else(|| err(open, SmilesErrorKind::ExpectedAtom))?;
                    self.chain(Some(anchor))?;
                    if self.bump() != Some(b')') {
                        return Err(err(open, SmilesErrorKind::UnclosedBranch));
                    }
                }
                Some(_) => {
                    let bond_off = self.pos;
                    let symbol = self.bond_symbol();
                    // ring closures may follow a bond symbol
                    if let Some(current) = prev {
                        if self.ring_closure(current, symbol)? {
                            continue;
                        }
                    }
                    let atom_off = self.pos;
                    match self.atom()? {
                        Some(idx) => {
                            if let Some(p) = prev {
                                self.add_bond(p, idx, symbol, bond_off)?;
                            } else if symbol.is_some() {
                                return Err(err(bond_off, SmilesErrorKind::DanglingBond));
                            }
                            // ring openings/closures attached to this atom
                            loop {
                                let sym2_off = self.pos;
                                let sym2 = self.bond_symbol();
                                if !self.ring_closure(idx, sym2)? {
                                    if sym2.is_some() {
                                        // bond symbol belongs to the next atom
                                        self.pos = sym2_off;
                                    }
                                    break;
                                }
                            }
                            prev = Some(idx);
                        }
                        None => {
                            let c = self.input[atom_off] as char;
                            let kind = if symbol.is_some() {
                                SmilesErrorKind::DanglingBond
                            } else {
                                SmilesErrorKind::UnknownToken(c)
                            };
                            return Err(err(atom_off, kind));
                        }
                    }
                }
            }
        }
    }
}

/// Parse a subset SMILES string into a molecular graph with ring perception
/// completed. Implicit bonds between two aromatic atoms become aromatic when
/// they lie on a ring and single otherwise; explicit `:` bonds must lie on a
/// ring between aromatic atoms.
pub fn parse(smiles: &str) -> Result<MolecularGraph, SmilesError> {
    if smiles.is_empty() {
        return Err(err(0, SmilesErrorKind::Empty));
    }
    if !smiles.is_ascii() {
        let offset = smiles.find(|c: char| !c.is_ascii()).unwrap_or(0);
        let ch = smiles[offset..].chars().next().unwrap_or('?');
        return Err(err(offset, SmilesErrorKind::UnknownToken(ch)));
    }
    let mut p = Parser {
        input: smiles.as_bytes(),
        pos: 0,
        atoms: Vec::new(),
        bonds: Vec::new(),
        bond_offsets: Vec::new(),
        bond_explicit_aromatic: Vec::new(),
        open_rings: HashMap::new(),
        bond_pairs: std::collections::HashSet::new(),
    };
    p.chain(None)?;
    if p.peek() == Some(b')') {
        return Err(err(p.pos, SmilesErrorKind::UnmatchedParen));
    }
    if p.atoms.is_empty() {
        return Err(err(0, SmilesErrorKind::ExpectedAtom));
    }
    if let Some((num, (_, _, open_at))) =
        p.open_rings.iter().min_by_key(|(_, (_, _, off))| *off)
    {
        return Err(err(*open_at, SmilesErrorKind::UnclosedRing(*num)));
    }

    let flags = ring_bonds(p.atoms.len(), &p.bonds);
    // settle aromatic bond orders against ring membership
    for (bi, bond) in p.bonds.iter_mut().enumerate() {
        if bond.order != BondOrder::Aromatic {
            continue;
        }
        let endpoints_aromatic = p.atoms[bond.a].aromatic && p.atoms[bond.b].aromatic;
        if flags[bi] && endpoints_aromatic {
            continue;
        }
        if p.bond_explicit_aromatic[bi] {
            return Err(err(p.bond_offsets[bi], SmilesErrorKind::InvalidAromaticBond));
        }
        bond.order = BondOrder::Single; // e.g. the biphenyl linker
    }
    // aromatic atoms must sit on a ring
    for (ai, atom) in p.atoms.iter().enumerate() {
        if !atom.aromatic {
            continue;
        }
        let on_ring = p
            .bonds
            .iter()
            .enumerate()
            .any(|(bi, b)| flags[bi] && (b.a == ai || b.b == ai));
        if !on_ring {
            return Err(err(0, SmilesErrorKind::AromaticAtomNotInRing));
        }
    }

    Ok(MolecularGraph {
        atoms: p.atoms,
        bonds: p.bonds,
        ring_bond_flags: flags,
        source_smiles: smiles.to_string(),
    })
}
