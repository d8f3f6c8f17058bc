use crate::rng::SeedKey;
use crate::tensor::{BatchStats, Tape, Tensor, Var};

use super::{GraphBatch, ModelError, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Running batch-norm statistics, no dropout.
    Eval,
    /// Batch statistics and dropout; masks are drawn from streams of `key`.
    Train { key: SeedKey },
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    None,
    HeadsOnly,
    All,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `B × |tasks|` predictions.
    pub predictions: Var,
    /// `B × dim` graph embeddings.
    pub embeddings: Var,
    /// Tape handles aligned with [`ModelParams::trainable`].
    pub param_vars: Vec<Var>,
    /// Batch statistics per GIN layer (training mode only).
    pub bn_stats: Vec<BatchStats>,
}

/// Initial node states and per-layer bond states.
#[derive(Debug)]
pub struct EmbeddedInputs {
    pub nodes: Var,
    pub edges: Vec<Var>,
}

struct ParamVars {
    node_tables: Vec<Var>,
    layers: Vec<[Var; 10]>,
    heads: Vec<[Var; 4]>,
    all: Vec<Var>,
}

fn register(tape: &mut Tape, params: &ModelParams, scope: GradScope) -> ParamVars {
    let backbone_grad = scope == GradScope::All;
    let head_grad = scope != GradScope::None;
    let mut all = Vec::new();
    let mut leaf = |tape: &mut Tape, t: &Tensor, g: bool| {
        let v = tape.leaf(t.clone(), g);
        all.push(v);
        v
    };
    let node_tables = params
        .node_tables
        .iter()
        .map(|t| leaf(tape, t, backbone_grad))
        .collect();
    let layers = params
        .layers
        .iter()
        .map(|l| {
            [
                leaf(tape, &l.edge_tables[0], backbone_grad),
                leaf(tape, &l.edge_tables[1], backbone_grad),
                leaf(tape, &l.edge_tables[2], backbone_grad),
                leaf(tape, &l.self_loop, backbone_grad),
                leaf(tape, &l.w1, backbone_grad),
                leaf(tape, &l.b1, backbone_grad),
                leaf(tape, &l.w2, backbone_grad),
                leaf(tape, &l.b2, backbone_grad),
                leaf(tape, &l.gamma, backbone_grad),
                leaf(tape, &l.beta, backbone_grad),
            ]
        })
        .collect();
    let heads = params
        .heads
        .iter()
        .map(|h| {
            [
                leaf(tape, &h.w1, head_grad),
                leaf(tape, &h.b1, head_grad),
                leaf(tape, &h.w2, head_grad),
                leaf(tape, &h.b2, head_grad),
            ]
        })
        .collect();
    ParamVars {
        node_tables,
        layers,
        heads,
        all,
    }
}

fn sum_lookups(tape: &mut Tape, tables: &[Var], fields: &[Vec<usize>]) -> Result<Var, ModelError> {
    let mut acc = tape.embedding_lookup(tables[0], &fields[0])?;
    for (t, f) in tables.iter().zip(fields).skip(1) {
        let rows = tape.embedding_lookup(*t, f)?;
        acc = tape.add(acc, rows)?;
    }
    Ok(acc)
}

fn embed_with(tape: &mut Tape, vars: &ParamVars, batch: &GraphBatch) -> Result<EmbeddedInputs, ModelError> {
    let nodes = sum_lookups(tape, &vars.node_tables, &batch.atom_fields)?;
    let edges = vars
        .layers
        .iter()
        .map(|l| sum_lookups(tape, &l[0..3], &batch.bond_fields))
        .collect::<Result<_, _>>()?;
    Ok(EmbeddedInputs { nodes, edges })
}

fn gin_with(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &ParamVars,
    batch: &GraphBatch,
    mode: Mode,
) -> Result<(Var, Vec<BatchStats>), ModelError> {
    let train = mode.is_train();
    let inputs = embed_with(tape, vars, batch)?;
    let mut h = inputs.nodes;
    let mut stats = Vec::new();
    for (k, (lv, lp)) in vars.layers.iter().zip(&params.layers).enumerate() {
        let [_, _, _, self_loop, w1, b1, w2, b2, gamma, beta] = *lv;
        let neighbours = tape.embedding_lookup(h, &batch.edge_src)?;
        let bond_states = tape.embedding_lookup(inputs.edges[k], &batch.edge_bond)?;
        let messages = tape.add(neighbours, bond_states)?;
        let aggregated = tape.segment_sum(messages, &batch.edge_dst, batch.num_nodes())?;
        let pre = tape.add(h, aggregated)?;
        let pre = tape.add_row(pre, self_loop)?;

        let hidden = tape.matmul(pre, w1)?;
        let hidden = tape.add_row(hidden, b1)?;
        let hidden = tape.relu(hidden);
        let out = tape.matmul(hidden, w2)?;
        let out = tape.add_row(out, b2)?;
        let (normed, batch_stats) = tape.batch_norm(out, gamma, beta, &lp.running, train)?;
        stats.extend(batch_stats);
        let act = tape.relu(normed);
        h = match mode {
            Mode::Train { key } => {
                let mut rng = key.named("gin").split(k as u64).rng();
                tape.dropout(act, params.config.dropout, true, &mut rng)?
            }
            Mode::Eval => act,
        };
    }
    let z = tape.segment_mean(h, &batch.node_graph, batch.num_graphs())?;
    Ok((z, stats))
}

/// Node states `h^0` and the bond states of every layer.
pub fn embed_inputs(tape: &mut Tape, params: &ModelParams, batch: &GraphBatch) -> Result<EmbeddedInputs, ModelError> {
    let vars = register(tape, params, GradScope::None);
    embed_with(tape, &vars, batch)
}

/// Graph embeddings `z` (`B × dim`) from the backbone alone.
pub fn gin_forward(
    tape: &mut Tape,
    params: &ModelParams,
    batch: &GraphBatch,
    mode: Mode,
) -> Result<Var, ModelError> {
    let vars = register(tape, params, GradScope::None);
    Ok(gin_with(tape, params, &vars, batch, mode)?.0)
}

/// Full forward pass for the requested task heads.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    batch: &GraphBatch,
    tasks: &[usize],
    mode: Mode,
    scope: GradScope,
) -> Result<ForwardOutput, ModelError> {
    for &t in tasks {
        if t >= params.heads.len() {
            return Err(ModelError::UnknownTask {
                task: t,
                heads: params.heads.len(),
            });
        }
    }
    let vars = register(tape, params, scope);
    let (z, bn_stats) = gin_with(tape, params, &vars, batch, mode)?;
    let mut columns = Vec::with_capacity(tasks.len());
    for &t in tasks {
        let [w1, b1, w2, b2] = vars.heads[t];
        let hidden = tape.matmul(z, w1)?;
        let hidden = tape.add_row(hidden, b1)?;
        let hidden = tape.relu(hidden);
        let hidden = match mode {
            Mode::Train { key } => {
                let mut rng = key.named("head").split(t as u64).rng();
                tape.dropout(hidden, params.config.dropout, true, &mut rng)?
            }
            Mode::Eval => hidden,
        };
        let out = tape.matmul(hidden, w2)?;
        columns.push(tape.add_row(out, b2)?);
    }
    let predictions = tape.concat_cols(&columns)?;
    Ok(ForwardOutput {
        predictions,
        embeddings: z,
        param_vars: vars.all,
        bn_stats,
    })
}

/// Evaluation-mode predictions, `B × |tasks|`.
pub fn predict(params: &ModelParams, batch: &GraphBatch, tasks: &[usize]) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, params, batch, tasks, Mode::Eval, GradScope::None)?;
    Ok(tape.value(out.predictions).clone())
}

/// Evaluation-mode graph embeddings, `B × dim`.
pub fn embed(params: &ModelParams, batch: &GraphBatch) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let z = gin_forward(&mut tape, params, batch, Mode::Eval)?;
    Ok(tape.value(z).clone())
}
