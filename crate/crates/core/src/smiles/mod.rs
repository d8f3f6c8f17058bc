//! SMILES parsing into molecular graphs.
//!
//! The supported grammar covers single-fragment SMILES: the organic subset
//! (`B C N O P S F Cl Br I` and the aromatic `b c n o p s`), bracket atoms with
//! isotope, chirality, hydrogen count, charge and atom class, the bond symbols
//! `- = # : / \`, branches, and ring closures written as digits or `%nn`.
//!
//! Aromaticity is read verbatim from lowercase symbols; no aromaticity
//! perception is attempted.

mod elements;
mod parser;
mod rings;

pub use elements::{atomic_number, symbol};
pub use parser::parse_smiles;
pub use rings::{bridges, perceive_rings};

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Chirality {
    #[default]
    None,
    Clockwise,
    CounterClockwise,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atom {
    pub atomic_number: u8,
    pub formal_charge: i8,
    /// Hydrogen count written inside a bracket atom.
    pub explicit_h: Option<u8>,
    /// Hydrogens attached but not written as graph nodes. For bracket atoms
    /// this equals the bracket hydrogen count.
    pub implicit_h: u8,
    pub aromatic: bool,
    pub chirality: Chirality,
    pub degree: u8,
}

impl Atom {
    /// Total attached hydrogens that are not graph nodes.
    pub fn total_h(&self) -> u8 {
        self.implicit_h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Valence contribution, with aromatic bonds counting as one.
    pub fn valence(self) -> u8 {
        match self {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum BondDirection {
    #[default]
    None,
    Up,
    Down,
    BeginWedge,
    BeginDash,
    Either,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bond {
    pub begin: usize,
    pub end: usize,
    pub order: BondOrder,
    pub direction: BondDirection,
    pub in_ring: bool,
}

impl Bond {
    pub fn other(&self, atom: usize) -> usize {
        if atom == self.begin {
            self.end
        } else {
            self.begin
        }
    }
}

/// A parsed molecule. `adjacency[a]` lists `(neighbor, bond index)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MolGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
    pub adjacency: Vec<Vec<(usize, usize)>>,
}

impl MolGraph {
    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn num_bonds(&self) -> usize {
        self.bonds.len()
    }

    /// Sum of bond valence contributions around `atom`.
    pub fn bond_valence(&self, atom: usize) -> u32 {
        self.adjacency[atom]
            .iter()
            .map(|&(_, b)| u32::from(self.bonds[b].order.valence()))
            .sum()
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<usize> {
        self.adjacency[a]
            .iter()
            .find(|&&(n, _)| n == b)
            .map(|&(_, bond)| bond)
    }

    pub(crate) fn rebuild_adjacency(&mut self) {
        self.adjacency = vec![Vec::new(); self.atoms.len()];
        for (i, b) in self.bonds.iter().enumerate() {
            self.adjacency[b.begin].push((b.end, i));
            self.adjacency[b.end].push((b.begin, i));
        }
        for (atom, adj) in self.atoms.iter_mut().zip(&self.adjacency) {
            atom.degree = adj.len().min(u8::MAX as usize) as u8;
        }
    }
}

/// Parse failures, each carrying the byte offset where the problem was found.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SmilesError {
    #[error("empty SMILES string")]
    Empty,
    #[error("ring closure opened at byte {pos} is never closed")]
    UnclosedRing { pos: usize },
    #[error("unmatched parenthesis at byte {pos}")]
    UnmatchedParen { pos: usize },
    #[error("unknown atom symbol at byte {pos}")]
    UnknownAtom { pos: usize },
    #[error("malformed bracket atom (charge, hydrogen count or closing bracket) at byte {pos}")]
    BracketSyntax { pos: usize },
    #[error("unexpected character {ch:?} at byte {pos}")]
    UnexpectedChar { pos: usize, ch: char },
    #[error("bond symbol at byte {pos} is not followed by an atom")]
    DanglingBond { pos: usize },
    #[error("multi-fragment SMILES are not supported (byte {pos})")]
    MultipleFragments { pos: usize },
    #[error("invalid ring closure at byte {pos}")]
    InvalidRingClosure { pos: usize },
    #[error("second bond between the same atom pair at byte {pos}")]
    DuplicateBond { pos: usize },
    #[error("aromatic bond between non-aromatic atoms at byte {pos}")]
    AromaticBondMismatch { pos: usize },
    #[error("atom at byte {pos} exceeds its allowed valence")]
    ValenceExceeded { pos: usize },
}

impl SmilesError {
    pub fn position(&self) -> usize {
        match *self {
            SmilesError::Empty => 0,
            SmilesError::UnclosedRing { pos }
            | SmilesError::UnmatchedParen { pos }
            | SmilesError::UnknownAtom { pos }
            | SmilesError::BracketSyntax { pos }
            | SmilesError::UnexpectedChar { pos, .. }
            | SmilesError::DanglingBond { pos }
            | SmilesError::MultipleFragments { pos }
            | SmilesError::InvalidRingClosure { pos }
            | SmilesError::DuplicateBond { pos }
            | SmilesError::AromaticBondMismatch { pos }
            | SmilesError::ValenceExceeded { pos } => pos,
        }
    }
}
