use crate::featurize::{
    FeaturizedGraph, ATOM_FIELD_WIDTHS, BOND_FIELD_WIDTHS, NUM_ATOM_FIELDS, NUM_BOND_FIELDS,
};

use super::ModelError;

/// Several featurized graphs concatenated into one disjoint graph.
///
/// Each bond appears as two directed edges so message passing can use a
/// single gather/scatter per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    pub atom_fields: Vec<Vec<usize>>,
    pub bond_fields: Vec<Vec<usize>>,
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    /// Bond index (into `bond_fields`) of each directed edge.
    pub edge_bond: Vec<usize>,
    pub node_graph: Vec<usize>,
    pub node_counts: Vec<usize>,
}

impl GraphBatch {
    pub fn new(graphs: &[&FeaturizedGraph]) -> Result<Self, ModelError> {
        if graphs.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut b = GraphBatch {
            atom_fields: vec![Vec::new(); NUM_ATOM_FIELDS],
            bond_fields: vec![Vec::new(); NUM_BOND_FIELDS],
            edge_src: Vec::new(),
            edge_dst: Vec::new(),
            edge_bond: Vec::new(),
            node_graph: Vec::new(),
            node_counts: Vec::with_capacity(graphs.len()),
        };
        for (gi, g) in graphs.iter().enumerate() {
            if g.num_atoms() == 0 {
                return Err(ModelError::EmptyGraph { index: gi });
            }
            let offset = b.node_graph.len();
            for atom in &g.atom_indices {
                for (field, (&idx, &width)) in atom.iter().zip(&ATOM_FIELD_WIDTHS).enumerate() {
                    let idx = usize::from(idx);
                    if idx >= width {
                        return Err(ModelError::FeatureOutOfRange { field, index: idx, width });
                    }
                    b.atom_fields[field].push(idx);
                }
                b.node_graph.push(gi);
            }
            for (bond, &(u, v)) in g.bond_indices.iter().zip(&g.bonds) {
                let bi = b.bond_fields[0].len();
                for (field, (&idx, &width)) in bond.iter().zip(&BOND_FIELD_WIDTHS).enumerate() {
                    let idx = usize::from(idx);
                    if idx >= width {
                        return Err(ModelError::FeatureOutOfRange {
                            field: NUM_ATOM_FIELDS + field,
                            index: idx,
                            width,
                        });
                    }
                    b.bond_fields[field].push(idx);
                }
                b.edge_src.extend([offset + u, offset + v]);
                b.edge_dst.extend([offset + v, offset + u]);
                b.edge_bond.extend([bi, bi]);
            }
            b.node_counts.push(g.num_atoms());
        }
        Ok(b)
    }

    pub fn num_graphs(&self) -> usize {
        self.node_counts.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.node_graph.len()
    }

    pub fn num_bonds(&self) -> usize {
        self.bond_fields[0].len()
    }
}
