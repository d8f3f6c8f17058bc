//! Synthetic task families: random C/N/O molecules scored by a shared
//! descriptor-linear latent function.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Compound, DataError, HitDirection, TaskDataset};
use crate::featurize::featurize;
use crate::rng::SeedKey;
use crate::smiles::{bridges, parse_smiles, MolGraph, SmilesError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least 2 tasks, got {0}")]
    TooFewTasks(usize),
    #[error("generated SMILES {smiles:?} failed to parse: {source}")]
    Writer { smiles: String, source: SmilesError },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Weights of the latent score over (atom count, ring-bond count,
/// heteroatom count, mean degree), plus an offset.
pub const LATENT_WEIGHTS: [f64; 4] = [-0.35, -0.15, 0.4, -1.2];
pub const LATENT_OFFSET: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Descriptors {
    pub atoms: usize,
    pub ring_bonds: usize,
    pub heteroatoms: usize,
    pub mean_degree: f64,
}

impl Descriptors {
    pub fn of(g: &MolGraph) -> Self {
        let n = g.num_atoms();
        Descriptors {
            atoms: n,
            ring_bonds: g.bonds.iter().filter(|b| b.in_ring).count(),
            heteroatoms: g.atoms.iter().filter(|a| a.atomic_number != 6 && a.atomic_number != 1).count(),
            mean_degree: if n == 0 { 0.0 } else { 2.0 * g.num_bonds() as f64 / n as f64 },
        }
    }

    pub fn latent(&self) -> f64 {
        let x = [
            self.atoms as f64,
            self.ring_bonds as f64,
            self.heteroatoms as f64,
            self.mean_degree,
        ];
        LATENT_OFFSET + x.iter().zip(LATENT_WEIGHTS).map(|(a, w)| a * w).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCoefficients {
    pub name: String,
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_tasks: usize,
    pub n_compounds: usize,
    pub seed: u64,
    /// Base noise level; each task draws its sigma from `[0.5, 1.5]` times this.
    pub noise: f64,
    /// Force `a = 1`, `b = 0` for every task.
    pub identical_tasks: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_tasks: 4,
            n_compounds: 1000,
            seed: 0,
            noise: 0.1,
            identical_tasks: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub descriptor_names: [String; 4],
    pub descriptor_weights: [f64; 4],
    pub offset: f64,
    pub tasks: Vec<TaskCoefficients>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub smiles: Vec<String>,
    pub latent: Vec<f64>,
    /// `labels[i][t]`; every compound is labelled for every task.
    pub labels: Vec<Vec<f64>>,
    pub truth: GroundTruth,
}

impl SynthData {
    pub fn task_names(&self) -> Vec<String> {
        self.truth.tasks.iter().map(|t| t.name.clone()).collect()
    }

    pub fn to_dataset(&self) -> Result<TaskDataset, SynthError> {
        let compounds = self
            .smiles
            .iter()
            .map(|s| {
                let g = parse_smiles(s).map_err(|source| SynthError::Writer {
                    smiles: s.clone(),
                    source,
                })?;
                Ok(Compound {
                    smiles: s.clone(),
                    graph: featurize(&g),
                })
            })
            .collect::<Result<Vec<_>, SynthError>>()?;
        let n_tasks = self.truth.tasks.len();
        Ok(TaskDataset::new(
            compounds,
            self.task_names(),
            vec![HitDirection::LowerIsBetter; n_tasks],
            self.labels.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect(),
        )?)
    }
}

/// A bare molecular graph: elements and bonds with orders 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMolecule {
    pub elements: Vec<u8>,
    pub bonds: Vec<(usize, usize, u8)>,
}

fn max_valence(z: u8) -> u8 {
    match z {
        7 => 3,
        8 => 2,
        _ => 4,
    }
}

fn bfs_distances(n: usize, adj: &[Vec<usize>], from: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; n];
    dist[from] = 0;
    let mut queue = std::collections::VecDeque::from([from]);
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if dist[w] == usize::MAX {
                dist[w] = dist[v] + 1;
                queue.push_back(w);
            }
        }
    }
    dist
}

/// A random connected molecule with 6 to 22 heavy atoms, up to three ring
/// closures of size 5 or 6, and occasional acyclic double bonds.
pub fn random_molecule<R: Rng + ?Sized>(rng: &mut R) -> RawMolecule {
    let n = rng.gen_range(6..=22);
    let elements: Vec<u8> = (0..n)
        .map(|_| match rng.gen_range(0..20) {
            0..=13 => 6,
            14..=16 => 7,
            _ => 8,
        })
        .collect();
    let mut used = vec![0u8; n];
    let mut adj = vec![Vec::new(); n];
    let mut bonds = Vec::new();
    for i in 1..n {
        let open: Vec<usize> = (0..i).filter(|&j| used[j] < max_valence(elements[j])).collect();
        // A tree on i atoms uses 2(i - 1) valence out of at least 2i.
        let &j = open.choose(rng).expect("tree always has an open atom");
        bonds.push((j, i, 1));
        adj[i].push(j);
        adj[j].push(i);
        used[i] += 1;
        used[j] += 1;
    }
    for _ in 0..rng.gen_range(0..=3) {
        for _attempt in 0..10 {
            let u = rng.gen_range(0..n);
            if used[u] >= max_valence(elements[u]) {
                continue;
            }
            let dist = bfs_distances(n, &adj, u);
            let candidates: Vec<usize> = (0..n)
                .filter(|&v| (dist[v] == 4 || dist[v] == 5) && used[v] < max_valence(elements[v]))
                .collect();
            if let Some(&v) = candidates.choose(rng) {
                bonds.push((u.min(v), u.max(v), 1));
                adj[u].push(v);
                adj[v].push(u);
                used[u] += 1;
                used[v] += 1;
                break;
            }
        }
    }
    let edges: Vec<(usize, usize)> = bonds.iter().map(|&(a, b, _)| (a, b)).collect();
    let is_bridge = bridges(n, &edges);
    for (k, bond) in bonds.iter_mut().enumerate() {
        let (a, b, _) = *bond;
        if is_bridge[k]
            && used[a] < max_valence(elements[a])
            && used[b] < max_valence(elements[b])
            && rng.gen_bool(0.2)
        {
            bond.2 = 2;
            used[a] += 1;
            used[b] += 1;
        }
    }
    RawMolecule { elements, bonds }
}

/// Depth-first SMILES writer for connected molecules over C, N and O.
pub fn write_smiles(mol: &RawMolecule) -> String {
    let n = mol.elements.len();
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (k, &(a, b, _)) in mol.bonds.iter().enumerate() {
        adj[a].push((b, k));
        adj[b].push((a, k));
    }
    // First pass: spanning tree and ring-closure bonds.
    let mut order = vec![usize::MAX; n];
    let mut children: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    let mut closures_at: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut bond_seen = vec![false; mol.bonds.len()];
    let mut counter = 0;
    classify(0, &adj, &mut order, &mut counter, &mut children, &mut closures_at, &mut bond_seen);

    let mut out = String::new();
    let mut digit_of = vec![0usize; mol.bonds.len()];
    let mut free: Vec<bool> = vec![true; 100];
    free[0] = false;
    emit(0, mol, &children, &closures_at, &mut digit_of, &mut free, &mut out);
    out
}

fn classify(
    v: usize,
    adj: &[Vec<(usize, usize)>],
    order: &mut [usize],
    counter: &mut usize,
    children: &mut [Vec<(usize, usize)>],
    closures_at: &mut [Vec<usize>],
    bond_seen: &mut [bool],
) {
    order[v] = *counter;
    *counter += 1;
    for &(w, k) in &adj[v] {
        if bond_seen[k] {
            continue;
        }
        bond_seen[k] = true;
        if order[w] == usize::MAX {
            children[v].push((w, k));
            classify(w, adj, order, counter, children, closures_at, bond_seen);
        } else {
            closures_at[w].push(k);
            closures_at[v].push(k);
        }
    }
}

fn bond_symbol(order: u8) -> &'static str {
    if order == 2 {
        "="
    } else {
        ""
    }
}

fn emit(
    v: usize,
    mol: &RawMolecule,
    children: &[Vec<(usize, usize)>],
    closures_at: &[Vec<usize>],
    digit_of: &mut [usize],
    free: &mut [bool],
    out: &mut String,
) {
    out.push_str(match mol.elements[v] {
        7 => "N",
        8 => "O",
        _ => "C",
    });
    for &k in &closures_at[v] {
        if digit_of[k] == 0 {
            let d = free.iter().position(|&f| f).expect("ring labels exhausted");
            free[d] = false;
            digit_of[k] = d;
            out.push_str(bond_symbol(mol.bonds[k].2));
        } else {
            free[digit_of[k]] = true;
        }
        let d = digit_of[k];
        if d < 10 {
            out.push_str(&d.to_string());
        } else {
            out.push_str(&format!("%{d}"));
        }
    }
    let last = children[v].len().saturating_sub(1);
    for (i, &(w, k)) in children[v].iter().enumerate() {
        if i < last {
            out.push('(');
        }
        out.push_str(bond_symbol(mol.bonds[k].2));
        emit(w, mol, children, closures_at, digit_of, free, out);
        if i < last {
            out.push(')');
        }
    }
}

/// Generate a task family. Deterministic in `config`.
pub fn synth_gen(config: &SynthConfig) -> Result<SynthData, SynthError> {
    if config.n_tasks < 2 {
        return Err(SynthError::TooFewTasks(config.n_tasks));
    }
    let key = SeedKey::new(config.seed).named("synth");
    let mut coef_rng = key.named("coefficients").rng();
    let tasks: Vec<TaskCoefficients> = (0..config.n_tasks)
        .map(|t| {
            let (a, b) = if config.identical_tasks {
                (1.0, 0.0)
            } else {
                (coef_rng.gen_range(0.6..1.4), coef_rng.gen_range(-1.0..1.0))
            };
            TaskCoefficients {
                name: format!("T{t}"),
                a,
                b,
                sigma: config.noise * coef_rng.gen_range(0.5..1.5),
            }
        })
        .collect();

    let mut mol_rng = key.named("molecules").rng();
    let mut noise_rng = key.named("noise").rng();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut smiles = Vec::with_capacity(config.n_compounds);
    let mut latent = Vec::with_capacity(config.n_compounds);
    let mut labels = Vec::with_capacity(config.n_compounds);
    for _ in 0..config.n_compounds {
        let s = write_smiles(&random_molecule(&mut mol_rng));
        let g = parse_smiles(&s).map_err(|source| SynthError::Writer {
            smiles: s.clone(),
            source,
        })?;
        let z = Descriptors::of(&g).latent();
        labels.push(
            tasks
                .iter()
                .map(|c| c.a * z + c.b + c.sigma * std_normal.sample(&mut noise_rng))
                .collect(),
        );
        latent.push(z);
        smiles.push(s);
    }
    Ok(SynthData {
        smiles,
        latent,
        labels,
        truth: GroundTruth {
            seed: config.seed,
            descriptor_names: ["atom_count", "ring_bond_count", "heteroatom_count", "mean_degree"].map(String::from),
            descriptor_weights: LATENT_WEIGHTS,
            offset: LATENT_OFFSET,
            tasks,
        },
    })
}
