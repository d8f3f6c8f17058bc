use std::collections::BTreeMap;

use super::elements::{aromatic_bracket_symbol, atomic_number, organic_valences};
use super::rings::perceive_rings;
use super::{Atom, Bond, BondDirection, BondOrder, Chirality, MolGraph, SmilesError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BondSymbol {
    Single,
    Double,
    Triple,
    Aromatic,
    Up,
    Down,
}

impl BondSymbol {
    fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            b'-' => BondSymbol::Single,
            b'=' => BondSymbol::Double,
            b'#' => BondSymbol::Triple,
            b':' => BondSymbol::Aromatic,
            b'/' => BondSymbol::Up,
            b'\\' => BondSymbol::Down,
            _ => return None,
        })
    }
}

struct RingOpening {
    atom: usize,
    symbol: Option<BondSymbol>,
    pos: usize,
}

struct PendingBond {
    begin: usize,
    end: usize,
    symbol: Option<BondSymbol>,
    pos: usize,
}

#[derive(Default)]
struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    atoms: Vec<Atom>,
    atom_pos: Vec<usize>,
    organic: Vec<bool>,
    bonds: Vec<PendingBond>,
    branches: Vec<(usize, usize)>,
    rings: BTreeMap<u32, RingOpening>,
    prev: Option<usize>,
    pending: Option<(BondSymbol, usize)>,
    atoms_since_branch: Vec<usize>,
}

/// Parse a single-fragment SMILES string into a [`MolGraph`] with ring
/// membership and implicit hydrogens assigned.
pub fn parse_smiles(s: &str) -> Result<MolGraph, SmilesError> {
    if s.is_empty() {
        return Err(SmilesError::Empty);
    }
    let mut p = Parser {
        src: s.as_bytes(),
        ..Default::default()
    };
    p.run()?;
    p.finish()
}

impl Parser<'_> {
    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn unexpected(&self, pos: usize) -> SmilesError {
        let ch = std::str::from_utf8(&self.src[pos..])
            .ok()
            .and_then(|s| s.chars().next())
            .unwrap_or(char::REPLACEMENT_CHARACTER);
        SmilesError::UnexpectedChar { pos, ch }
    }

    fn run(&mut self) -> Result<(), SmilesError> {
        while let Some(c) = self.peek() {
            let start = self.pos;
            match c {
                b'(' => {
                    if self.prev.is_none() || self.pending.is_some() {
                        return Err(self.unexpected(start));
                    }
                    self.branches.push((self.prev.unwrap(), start));
                    self.atoms_since_branch.push(self.atoms.len());
                    self.pos += 1;
                }
                b')' => {
                    let (anchor, _) = self
                        .branches
                        .pop()
                        .ok_or(SmilesError::UnmatchedParen { pos: start })?;
                    let count_before = self.atoms_since_branch.pop().unwrap_or(0);
                    if let Some((_, bpos)) = self.pending {
                        return Err(SmilesError::DanglingBond { pos: bpos });
                    }
                    if self.atoms.len() == count_before {
                        return Err(self.unexpected(start));
                    }
                    self.prev = Some(anchor);
                    self.pos += 1;
                }
                b'.' => return Err(SmilesError::MultipleFragments { pos: start }),
                b'0'..=b'9' | b'%' => self.ring_closure()?,
                b'[' => {
                    let atom = self.bracket_atom()?;
                    self.push_atom(atom, start, false)?;
                }
                _ => {
                    if let Some(sym) = BondSymbol::from_byte(c) {
                        if self.prev.is_none() || self.pending.is_some() {
                            return Err(self.unexpected(start));
                        }
                        self.pending = Some((sym, start));
                        self.pos += 1;
                    } else if c.is_ascii_alphabetic() {
                        let atom = self.organic_atom()?;
                        self.push_atom(atom, start, true)?;
                    } else {
                        return Err(self.unexpected(start));
                    }
                }
            }
        }
        if let Some((_, pos)) = self.pending {
            return Err(SmilesError::DanglingBond { pos });
        }
        if let Some(&(_, pos)) = self.branches.first() {
            return Err(SmilesError::UnmatchedParen { pos });
        }
        if let Some(pos) = self.rings.values().map(|r| r.pos).min() {
            return Err(SmilesError::UnclosedRing { pos });
        }
        Ok(())
    }

    fn push_atom(&mut self, atom: Atom, pos: usize, organic: bool) -> Result<(), SmilesError> {
        let idx = self.atoms.len();
        self.atoms.push(atom);
        self.atom_pos.push(pos);
        self.organic.push(organic);
        if let Some(prev) = self.prev {
            let (symbol, bpos) = match self.pending.take() {
                Some((sym, p)) => (Some(sym), p),
                None => (None, pos),
            };
            self.bonds.push(PendingBond {
                begin: prev,
                end: idx,
                symbol,
                pos: bpos,
            });
        }
        self.prev = Some(idx);
        Ok(())
    }

    fn organic_atom(&mut self) -> Result<Atom, SmilesError> {
        let start = self.pos;
        let c = self.src[start];
        let next = self.src.get(start + 1).copied();
        let (z, aromatic, len) = match (c, next) {
            (b'C', Some(b'l')) => (17, false, 2),
            (b'B', Some(b'r')) => (35, false, 2),
            (b'B', _) => (5, false, 1),
            (b'C', _) => (6, false, 1),
            (b'N', _) => (7, false, 1),
            (b'O', _) => (8, false, 1),
            (b'P', _) => (15, false, 1),
            (b'S', _) => (16, false, 1),
            (b'F', _) => (9, false, 1),
            (b'I', _) => (53, false, 1),
            (b'b', _) => (5, true, 1),
            (b'c', _) => (6, true, 1),
            (b'n', _) => (7, true, 1),
            (b'o', _) => (8, true, 1),
            (b'p', _) => (15, true, 1),
            (b's', _) => (16, true, 1),
            _ => return Err(SmilesError::UnknownAtom { pos: start }),
        };
        self.pos += len;
        Ok(Atom {
            atomic_number: z,
            formal_charge: 0,
            explicit_h: None,
            implicit_h: 0,
            aromatic,
            chirality: Chirality::None,
            degree: 0,
        })
    }

    fn read_number(&mut self) -> Option<u32> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return None;
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .ok()?
            .parse()
            .ok()
    }

    fn bracket_atom(&mut self) -> Result<Atom, SmilesError> {
        let open = self.pos;
        self.pos += 1;
        // Isotope labels are accepted and discarded.
        if self.peek().is_some_and(|c| c.is_ascii_digit()) && self.read_number().is_none() {
            return Err(SmilesError::BracketSyntax { pos: open + 1 });
        }

        let sym_start = self.pos;
        let (z, aromatic) = self.bracket_symbol()?;

        let mut chirality = Chirality::None;
        if self.peek() == Some(b'@') {
            self.pos += 1;
            chirality = Chirality::CounterClockwise;
            if self.peek() == Some(b'@') {
                self.pos += 1;
                chirality = Chirality::Clockwise;
            } else {
                let rest = &self.src[self.pos..];
                let extended = [&b"TH"[..], b"AL", b"SP", b"TB", b"OH"]
                    .iter()
                    .any(|tag| rest.starts_with(tag));
                if extended {
                    self.pos += 2;
                    if self.read_number().is_none() {
                        return Err(SmilesError::BracketSyntax { pos: self.pos });
                    }
                    chirality = Chirality::Other;
                }
            }
        }

        let mut explicit_h = 0u8;
        if self.peek() == Some(b'H') {
            self.pos += 1;
            if self.peek().is_some_and(|c| c.is_ascii_digit()) {
                let digit_pos = self.pos;
                explicit_h = self
                    .read_number()
                    .and_then(|n| u8::try_from(n).ok())
                    .ok_or(SmilesError::BracketSyntax { pos: digit_pos })?;
            } else {
                explicit_h = 1;
            }
        }

        let mut charge = 0i32;
        if let Some(sign @ (b'+' | b'-')) = self.peek() {
            let sign_pos = self.pos;
            let unit = if sign == b'+' { 1 } else { -1 };
            self.pos += 1;
            if self.peek() == Some(sign) {
                self.pos += 1;
                charge = 2 * unit;
            } else if self.peek().is_some_and(|c| c.is_ascii_digit()) {
                let magnitude = self
                    .read_number()
                    .filter(|&n| n <= 15)
                    .ok_or(SmilesError::BracketSyntax { pos: sign_pos })?;
                charge = unit * magnitude as i32;
            } else {
                charge = unit;
            }
            if matches!(self.peek(), Some(b'+' | b'-')) {
                return Err(SmilesError::BracketSyntax { pos: self.pos });
            }
        }

        if self.peek() == Some(b':') {
            self.pos += 1;
            if self.read_number().is_none() {
                return Err(SmilesError::BracketSyntax { pos: self.pos });
            }
        }

        if self.peek() != Some(b']') {
            return Err(SmilesError::BracketSyntax {
                pos: self.pos.min(self.src.len()),
            });
        }
        self.pos += 1;
        debug_assert!(sym_start > open);

        Ok(Atom {
            atomic_number: z,
            formal_charge: charge as i8,
            explicit_h: Some(explicit_h),
            implicit_h: explicit_h,
            aromatic,
            chirality,
            degree: 0,
        })
    }

    fn bracket_symbol(&mut self) -> Result<(u8, bool), SmilesError> {
        let start = self.pos;
        let c = self.peek().ok_or(SmilesError::BracketSyntax { pos: start })?;
        if c.is_ascii_uppercase() {
            if let Some(n) = self.src.get(start + 1).filter(|n| n.is_ascii_lowercase()) {
                let two = [c, *n];
                if let Some(z) = std::str::from_utf8(&two).ok().and_then(atomic_number) {
                    self.pos += 2;
                    return Ok((z, false));
                }
            }
            let one = [c];
            let z = std::str::from_utf8(&one)
                .ok()
                .and_then(atomic_number)
                .ok_or(SmilesError::UnknownAtom { pos: start })?;
            self.pos += 1;
            Ok((z, false))
        } else if c.is_ascii_lowercase() {
            if let Some(two) = self.src.get(start..start + 2) {
                if let Some(z) = std::str::from_utf8(two).ok().and_then(aromatic_bracket_symbol) {
                    self.pos += 2;
                    return Ok((z, true));
                }
            }
            let z = std::str::from_utf8(&self.src[start..start + 1])
                .ok()
                .and_then(aromatic_bracket_symbol)
                .ok_or(SmilesError::UnknownAtom { pos: start })?;
            self.pos += 1;
            Ok((z, true))
        } else if c == b']' {
            Err(SmilesError::BracketSyntax { pos: start })
        } else {
            Err(SmilesError::UnknownAtom { pos: start })
        }
    }

    fn ring_closure(&mut self) -> Result<(), SmilesError> {
        let start = self.pos;
        let label = if self.src[start] == b'%' {
            let digits = self.src.get(start + 1..start + 3);
            match digits {
                Some(d) if d.iter().all(u8::is_ascii_digit) => {
                    self.pos += 3;
                    u32::from(d[0] - b'0') * 10 + u32::from(d[1] - b'0')
                }
                _ => return Err(self.unexpected(start)),
            }
        } else {
            self.pos += 1;
            u32::from(self.src[start] - b'0')
        };
        let atom = self.prev.ok_or_else(|| self.unexpected(start))?;
        let symbol = self.pending.take().map(|(s, _)| s);

        match self.rings.remove(&label) {
            None => {
                self.rings.insert(
                    label,
                    RingOpening {
                        atom,
                        symbol,
                        pos: start,
                    },
                );
            }
            Some(open) => {
                if open.atom == atom {
                    return Err(SmilesError::InvalidRingClosure { pos: start });
                }
                let symbol = match (open.symbol, symbol) {
                    (Some(a), Some(b)) if a != b => {
                        return Err(SmilesError::InvalidRingClosure { pos: start })
                    }
                    (a, b) => a.or(b),
                };
                self.bonds.push(PendingBond {
                    begin: open.atom,
                    end: atom,
                    symbol,
                    pos: start,
                });
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<MolGraph, SmilesError> {
        let mut graph = MolGraph {
            atoms: self.atoms,
            bonds: Vec::with_capacity(self.bonds.len()),
            adjacency: Vec::new(),
        };
        let mut seen = std::collections::HashSet::new();
        let mut implicit = Vec::with_capacity(self.bonds.len());
        for pb in &self.bonds {
            let key = (pb.begin.min(pb.end), pb.begin.max(pb.end));
            if !seen.insert(key) {
                return Err(SmilesError::DuplicateBond { pos: pb.pos });
            }
            let (order, direction) = match pb.symbol {
                None | Some(BondSymbol::Single) => (BondOrder::Single, BondDirection::None),
                Some(BondSymbol::Double) => (BondOrder::Double, BondDirection::None),
                Some(BondSymbol::Triple) => (BondOrder::Triple, BondDirection::None),
                Some(BondSymbol::Aromatic) => (BondOrder::Aromatic, BondDirection::None),
                Some(BondSymbol::Up) => (BondOrder::Single, BondDirection::Up),
                Some(BondSymbol::Down) => (BondOrder::Single, BondDirection::Down),
            };
            let both_aromatic = graph.atoms[pb.begin].aromatic && graph.atoms[pb.end].aromatic;
            if order == BondOrder::Aromatic && !both_aromatic {
                return Err(SmilesError::AromaticBondMismatch { pos: pb.pos });
            }
            implicit.push(pb.symbol.is_none() && both_aromatic);
            graph.bonds.push(Bond {
                begin: pb.begin,
                end: pb.end,
                order,
                direction,
                in_ring: false,
            });
        }
        graph.rebuild_adjacency();
        let mut graph = perceive_rings(graph);

        // Unmarked bonds between aromatic atoms are aromatic only inside rings.
        for (bond, is_implicit) in graph.bonds.iter_mut().zip(implicit) {
            if is_implicit && bond.in_ring {
                bond.order = BondOrder::Aromatic;
            }
        }

        for i in 0..graph.atoms.len() {
            if !self.organic[i] {
                continue;
            }
            let valences = organic_valences(graph.atoms[i].atomic_number)
                .expect("organic-subset atom has a valence table");
            let used = graph.bond_valence(i);
            let max = u32::from(*valences.last().unwrap());
            let pos = self.atom_pos[i];
            let atom = &mut graph.atoms[i];
            atom.implicit_h = if atom.aromatic {
                if used + 1 > max {
                    return Err(SmilesError::ValenceExceeded { pos });
                }
                u32::from(valences[0]).saturating_sub(used + 1) as u8
            } else {
                let target = valences
                    .iter()
                    .map(|&v| u32::from(v))
                    .find(|&v| v >= used)
                    .ok_or(SmilesError::ValenceExceeded { pos })?;
                (target - used) as u8
            };
        }
        Ok(graph)
    }
}
