//! Ring-bond perception: a bond is in a ring iff it is not a bridge.

use super::MolGraph;

/// Mark every bond's `in_ring` flag.
pub fn perceive_rings(mut g: MolGraph) -> MolGraph {
    let edges: Vec<(usize, usize)> = g.bonds.iter().map(|b| (b.begin, b.end)).collect();
    let is_bridge = bridges(g.atoms.len(), &edges);
    for (bond, bridge) in g.bonds.iter_mut().zip(is_bridge) {
        bond.in_ring = !bridge;
    }
    g
}

/// Bridge flags for an undirected simple graph, via iterative Tarjan low-links.
pub fn bridges(n: usize, edges: &[(usize, usize)]) -> Vec<bool> {
    let mut adj = vec![Vec::new(); n];
    for (i, &(a, b)) in edges.iter().enumerate() {
        adj[a].push((b, i));
        adj[b].push((a, i));
    }
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut out = vec![false; edges.len()];
    let mut timer = 0;
    // (node, edge used to enter it, next adjacency slot)
    let mut stack: Vec<(usize, usize, usize)> = Vec::new();

    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        disc[root] = timer;
        low[root] = timer;
        timer += 1;
        stack.push((root, usize::MAX, 0));
        while let Some(top) = stack.last_mut() {
            let (v, parent_edge, slot) = *top;
            if slot < adj[v].len() {
                top.2 += 1;
                let (u, e) = adj[v][slot];
                if e == parent_edge {
                    continue;
                }
                if disc[u] == usize::MAX {
                    disc[u] = timer;
                    low[u] = timer;
                    timer += 1;
                    stack.push((u, e, 0));
                } else {
                    low[v] = low[v].min(disc[u]);
                }
            } else {
                stack.pop();
                if let Some(&(p, _, _)) = stack.last() {
                    low[p] = low[p].min(low[v]);
                    if low[v] > disc[p] {
                        out[parent_edge] = true;
                    }
                }
            }
        }
    }
    out
}
