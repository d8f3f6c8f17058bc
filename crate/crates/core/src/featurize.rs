//! Categorical atom and bond features.
//!
//! Each atom becomes seven indices (atomic type, formal charge, degree,
//! chirality tag, hydrogen count, aromaticity, hybridization) and each bond
//! three (direction, type, ring membership). The indices select rows of the
//! model's embedding tables, which is equivalent to multiplying one-hot
//! vectors of the widths in [`ATOM_FIELD_WIDTHS`] and [`BOND_FIELD_WIDTHS`].

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::smiles::{BondDirection, BondOrder, Chirality, MolGraph};

pub const NUM_ATOM_FIELDS: usize = 7;
pub const NUM_BOND_FIELDS: usize = 3;

pub const ATOM_FIELD_WIDTHS: [usize; NUM_ATOM_FIELDS] = [119, 16, 11, 4, 9, 2, 5];
pub const BOND_FIELD_WIDTHS: [usize; NUM_BOND_FIELDS] = [7, 4, 2];

pub const ATOM_FIELD_NAMES: [&str; NUM_ATOM_FIELDS] = [
    "atomic_type",
    "formal_charge",
    "degree",
    "chirality",
    "num_hydrogens",
    "aromatic",
    "hybridization",
];
pub const BOND_FIELD_NAMES: [&str; NUM_BOND_FIELDS] = ["direction", "bond_type", "in_ring"];

const MAPPING_VERSION: &str = "dockmtl-features-v1";

/// Hybridization buckets used by the featurizer heuristic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hybridization {
    S = 0,
    Sp = 1,
    Sp2 = 2,
    Sp3 = 3,
    Other = 4,
}

/// Field widths of the one-hot encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSchema;

impl FeatureSchema {
    pub fn atom_widths(&self) -> &'static [usize; NUM_ATOM_FIELDS] {
        &ATOM_FIELD_WIDTHS
    }

    pub fn bond_widths(&self) -> &'static [usize; NUM_BOND_FIELDS] {
        &BOND_FIELD_WIDTHS
    }

    pub fn atom_width_total(&self) -> usize {
        ATOM_FIELD_WIDTHS.iter().sum()
    }

    pub fn bond_width_total(&self) -> usize {
        BOND_FIELD_WIDTHS.iter().sum()
    }

    /// Stable fingerprint of the widths and index mappings, stored in
    /// checkpoints so a model is never fed features it was not trained on.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(MAPPING_VERSION.as_bytes());
        for w in ATOM_FIELD_WIDTHS.iter().chain(&BOND_FIELD_WIDTHS) {
            h.update((*w as u64).to_le_bytes());
        }
        h.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizedGraph {
    pub atom_indices: Vec<[u16; NUM_ATOM_FIELDS]>,
    pub bond_indices: Vec<[u16; NUM_BOND_FIELDS]>,
    /// Bond endpoints, aligned with `bond_indices`.
    pub bonds: Vec<(usize, usize)>,
}

impl FeaturizedGraph {
    pub fn num_atoms(&self) -> usize {
        self.atom_indices.len()
    }

    pub fn num_bonds(&self) -> usize {
        self.bond_indices.len()
    }
}

pub fn hybridization(g: &MolGraph, atom: usize) -> Hybridization {
    let a = &g.atoms[atom];
    let heavy_and_h = u32::from(a.degree) + u32::from(a.total_h());
    if a.atomic_number == 1 || heavy_and_h == 0 {
        return Hybridization::S;
    }
    let (mut doubles, mut triples) = (0, 0);
    for &(_, b) in &g.adjacency[atom] {
        match g.bonds[b].order {
            BondOrder::Double => doubles += 1,
            BondOrder::Triple => triples += 1,
            _ => {}
        }
    }
    if a.aromatic {
        Hybridization::Sp2
    } else if triples > 0 || doubles >= 2 {
        Hybridization::Sp
    } else if doubles == 1 {
        if heavy_and_h <= 3 {
            Hybridization::Sp2
        } else {
            Hybridization::Other
        }
    } else {
        Hybridization::Sp3
    }
}

pub fn atom_features(g: &MolGraph, atom: usize) -> [u16; NUM_ATOM_FIELDS] {
    let a = &g.atoms[atom];
    let atomic = if (1..=118).contains(&a.atomic_number) {
        u16::from(a.atomic_number)
    } else {
        0
    };
    let charge = if (-7..=7).contains(&a.formal_charge) {
        (a.formal_charge + 7) as u16
    } else {
        15
    };
    let degree = u16::from(a.degree.min(10));
    let chirality = match a.chirality {
        Chirality::None => 0,
        Chirality::Clockwise => 1,
        Chirality::CounterClockwise => 2,
        Chirality::Other => 3,
    };
    let hydrogens = u16::from(a.total_h().min(8));
    let aromatic = u16::from(a.aromatic);
    let hyb = hybridization(g, atom) as u16;
    [atomic, charge, degree, chirality, hydrogens, aromatic, hyb]
}

pub fn bond_features(g: &MolGraph, bond: usize) -> [u16; NUM_BOND_FIELDS] {
    let b = &g.bonds[bond];
    let direction = match b.direction {
        BondDirection::None => 0,
        BondDirection::Up => 1,
        BondDirection::Down => 2,
        BondDirection::BeginWedge => 3,
        BondDirection::BeginDash => 4,
        BondDirection::Either => 5,
        BondDirection::Unknown => 6,
    };
    let kind = match b.order {
        BondOrder::Single => 0,
        BondOrder::Double => 1,
        BondOrder::Triple => 2,
        BondOrder::Aromatic => 3,
    };
    [direction, kind, u16::from(b.in_ring)]
}

/// Categorical indices for every atom and bond of a ring-perceived graph.
pub fn featurize(g: &MolGraph) -> FeaturizedGraph {
    FeaturizedGraph {
        atom_indices: (0..g.num_atoms()).map(|i| atom_features(g, i)).collect(),
        bond_indices: (0..g.num_bonds()).map(|i| bond_features(g, i)).collect(),
        bonds: g.bonds.iter().map(|b| (b.begin, b.end)).collect(),
    }
}

/// Parse and featurize in one step.
pub fn featurize_smiles(s: &str) -> Result<FeaturizedGraph, crate::smiles::SmilesError> {
    crate::smiles::parse_smiles(s).map(|g| featurize(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smiles::parse_smiles;

    #[test]
    fn schema_totals() {
        let schema = FeatureSchema;
        assert_eq!(schema.atom_width_total(), 166);
        assert_eq!(schema.bond_width_total(), 13);
        assert_eq!(schema.hash().len(), 16);
    }

    #[test]
    fn benzene_carbon() {
        let f = featurize_smiles("c1ccccc1").unwrap();
        // atomic 6, charge 0 -> 7, degree 2, no chirality, 1 H, aromatic, sp2
        assert_eq!(f.atom_indices[0], [6, 7, 2, 0, 1, 1, Hybridization::Sp2 as u16]);
        assert_eq!(f.bond_indices[0], [0, 3, 1]);
    }

    #[test]
    fn methane_carbon() {
        let f = featurize_smiles("C").unwrap();
        let a = f.atom_indices[0];
        assert_eq!(a[2], 0);
        assert_eq!(a[4], 4);
        assert_eq!(a[5], 0);
        assert_eq!(a[6], Hybridization::Sp3 as u16);
    }

    #[test]
    fn hybridization_heuristic() {
        let g = parse_smiles("C=CC#N").unwrap();
        let h: Vec<_> = (0..4).map(|i| hybridization(&g, i)).collect();
        assert_eq!(
            h,
            [
                Hybridization::Sp2,
                Hybridization::Sp2,
                Hybridization::Sp,
                Hybridization::Sp
            ]
        );
        let g = parse_smiles("O=C=O").unwrap();
        assert_eq!(hybridization(&g, 1), Hybridization::Sp);
        let g = parse_smiles("OP(=O)(O)O").unwrap();
        assert_eq!(hybridization(&g, 1), Hybridization::Other);
        let g = parse_smiles("[H][H]").unwrap();
        assert_eq!(hybridization(&g, 0), Hybridization::S);
    }

    #[test]
    fn out_of_range_values_use_misc_buckets() {
        let f = featurize_smiles("[Fe+9]").unwrap();
        assert_eq!(f.atom_indices[0][1], 15);
        let f = featurize_smiles("[CH10]").unwrap();
        assert_eq!(f.atom_indices[0][4], 8);
    }

    #[test]
    fn atom_order_permutation_gives_same_multiset() {
        let mut a = featurize_smiles("CCO").unwrap().atom_indices;
        let mut b = featurize_smiles("OCC").unwrap().atom_indices;
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }
}
