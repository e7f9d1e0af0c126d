//! Edge-aware GIN message passing.
//!
//! One encoder class serves two graph kinds: molecular graphs (edge types =
//! bond orders) and the episode context graph (edge types = relation kinds,
//! residual layers). Layer update:
//!
//!   h_v <- MLP_k( (1 + eps_k) * h_v + sum_{u in N(v)} relu(h_u + e_uv) )
//!
//! with an optional identity skip (h_v added back) when `residual` is set.

use rand::Rng;

use crate::autodiff::{OpKind, ParameterStore, Tape, Tensor, TensorError, TensorId};
use crate::util::randn;

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub num_edge_types: usize,
    /// Identity skip around each layer MLP (used by the context encoder).
    pub residual: bool,
    /// Divide aggregated messages by 1 + in-degree. The context graph has
    /// hub nodes (a property node hears from every molecule), and raw sums
    /// there grow geometrically with depth; molecular graphs keep the plain
    /// GIN sum.
    pub mean_aggregation: bool,
    /// Init scale of each layer MLP's output weights, as a fraction of the
    /// He std. Below 1 keeps deep sum-aggregated stacks from amplifying.
    pub mlp_out_gain: f64,
    /// Init scale of the input projection, as a fraction of the He std.
    pub input_gain: f64,
    /// Init std of the per-type edge embeddings. The context graph carries
    /// its label signal purely in edge types, so those start salient.
    pub edge_embed_std: f64,
}

impl EncoderConfig {
    pub fn molecular(hidden_dim: usize, layers: usize) -> Self {
        EncoderConfig {
            layers,
            hidden_dim,
            num_edge_types: 4,
            residual: false,
            mean_aggregation: false,
            mlp_out_gain: 0.25,
            input_gain: 0.5,
            edge_embed_std: 0.05,
        }
    }

    pub fn context(hidden_dim: usize, layers: usize) -> Self {
        EncoderConfig {
            layers,
            hidden_dim,
            num_edge_types: 4,
            residual: true,
            mean_aggregation: true,
            mlp_out_gain: 0.25,
            input_gain: 0.25,
            edge_embed_std: 0.5,
        }
    }
}

/// Directed edge of a batched graph: messages flow src -> dst.
#[derive(Debug, Clone, Copy)]
pub struct DirectedEdge {
    pub src: usize,
    pub dst: usize,
    pub edge_type: usize,
}

/// Instrumentation: one unit per directed edge per layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MessageStats {
    pub directed_messages: usize,
}

pub struct GinEncoder {
    pub prefix: String,
    pub cfg: EncoderConfig,
}

impl GinEncoder {
    pub fn new(prefix: &str, cfg: EncoderConfig) -> Self {
        GinEncoder { prefix: prefix.to_string(), cfg }
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{}", self.prefix, suffix)
    }

    /// Register this encoder's parameters: input projection, per-type edge
    /// embeddings, and per-layer 2-layer MLPs with a learned eps scalar.
    pub fn init_params<R: Rng>(
        &self,
        store: &mut ParameterStore,
        rng: &mut R,
        in_dim: usize,
    ) -> Result<(), TensorError> {
        let d = self.cfg.hidden_dim;
        let in_std = self.cfg.input_gain * (2.0 / in_dim as f64).sqrt();
        store.insert(&self.name("in.w"), gauss_matrix(rng, in_dim, d, in_std))?;
        store.insert(&self.name("in.b"), gauss_vector(rng, d, 0.01))?;
        store.insert(
            &self.name("edge_embed"),
            gauss_matrix(rng, self.cfg.num_edge_types, d, self.cfg.edge_embed_std),
        )?;
        let out_std = self.cfg.mlp_out_gain * (2.0 / d as f64).sqrt();
        for k in 0..self.cfg.layers {
            store.insert(&self.name(&format!("l{k}.eps")), Tensor::zeros(&[1]))?;
            store.insert(&self.name(&format!("l{k}.w1")), he_matrix(rng, d, d))?;
            store.insert(&self.name(&format!("l{k}.b1")), gauss_vector(rng, d, 0.01))?;
            store.insert(&self.name(&format!("l{k}.w2")), gauss_matrix(rng, d, d, out_std))?;
            store.insert(&self.name(&format!("l{k}.b2")), gauss_vector(rng, d, 0.01))?;
        }
        Ok(())
    }

    /// Encode a (possibly batched) graph given node features `[n, in_dim]`
    /// and directed edges. Returns `[n, d]` node embeddings.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        features: TensorId,
        edges: &[DirectedEdge],
        num_nodes: usize,
        stats: &mut MessageStats,
    ) -> Result<TensorId, TensorError> {
        let d = self.cfg.hidden_dim;
        let w_in = tape.param(store, &self.name("in.w"))?;
        let b_in = tape.param(store, &self.name("in.b"))?;
        let mut h = linear(tape, features, w_in, b_in, num_nodes)?;

        let src: Vec<usize> = edges.iter().map(|e| e.src).collect();
        let dst: Vec<usize> = edges.iter().map(|e| e.dst).collect();
        let types: Vec<usize> = edges.iter().map(|e| e.edge_type).collect();
        let edge_embed = tape.param(store, &self.name("edge_embed"))?;
        let one = tape.constant(Tensor::scalar(1.0));
        let inv_deg = if self.cfg.mean_aggregation {
            let mut deg = vec![0.0f64; num_nodes];
            for &v in &dst {
                deg[v] += 1.0;
            }
            let col =
                tape.constant(Tensor::matrix(num_nodes, 1, deg.iter().map(|d| 1.0 / (1.0 + d)).collect())?);
            let ones = tape.constant(Tensor::matrix(1, d, vec![1.0; d])?);
            Some(tape.apply(OpKind::MatMul, &[col, ones])?)
        } else {
            None
        };

        for k in 0..self.cfg.layers {
            let agg = if edges.is_empty() {
                tape.constant(Tensor::zeros(&[num_nodes, d]))
            } else {
                let h_src = tape.apply(OpKind::GatherRows { indices: src.clone() }, &[h])?;
                let e = tape.apply(OpKind::GatherRows { indices: types.clone() }, &[edge_embed])?;
                let raw = tape.apply(OpKind::Add, &[h_src, e])?;
                let msg = tape.apply(OpKind::Relu, &[raw])?;
                stats.directed_messages += edges.len();
                let summed = tape.apply(
                    OpKind::SegmentSum { segments: dst.clone(), num_segments: num_nodes },
                    &[msg],
                )?;
                match inv_deg {
                    Some(scale) => tape.apply(OpKind::ElementwiseMul, &[summed, scale])?,
                    None => summed,
                }
            };
            let eps = tape.param(store, &self.name(&format!("l{k}.eps")))?;
            let one_plus = tape.apply(OpKind::Add, &[eps, one])?;
            let scaled = tape.apply(OpKind::ElementwiseMul, &[h, one_plus])?;
            let z = tape.apply(OpKind::Add, &[scaled, agg])?;
            let w1 = tape.param(store, &self.name(&format!("l{k}.w1")))?;
            let b1 = tape.param(store, &self.name(&format!("l{k}.b1")))?;
            let w2 = tape.param(store, &self.name(&format!("l{k}.w2")))?;
            let b2 = tape.param(store, &self.name(&format!("l{k}.b2")))?;
            let hidden = linear(tape, z, w1, b1, num_nodes)?;
            let act = tape.apply(OpKind::Relu, &[hidden])?;
            let out = linear(tape, act, w2, b2, num_nodes)?;
            h = if self.cfg.residual { tape.apply(OpKind::Add, &[h, out])? } else { out };
        }
        Ok(h)
    }
}

/// x @ w + b with the bias row-broadcast.
pub fn linear(
    tape: &mut Tape,
    x: TensorId,
    w: TensorId,
    b: TensorId,
    rows: usize,
) -> Result<TensorId, TensorError> {
    let xw = tape.apply(OpKind::MatMul, &[x, w])?;
    let bb = tape.apply(OpKind::BroadcastRow { rows }, &[b])?;
    tape.apply(OpKind::Add, &[xw, bb])
}

/// Weighted node-sum readout: sum_i w_i * H_i, w_i = 1 when absent.
/// Returns a `[1, d]` row.
pub fn readout_sum(
    tape: &mut Tape,
    h: TensorId,
    weights: Option<&[f64]>,
) -> Result<TensorId, TensorError> {
    let (rows, _cols) = tape.value(h).rows_cols();
    let weighted = match weights {
        None => h,
        Some(w) => {
            if w.len() != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "readout_sum".into(),
                    detail: format!("{rows} rows vs {} weights", w.len()),
                });
            }
            let wcol = tape.constant(Tensor::matrix(rows, 1, w.to_vec())?);
            let ones = tape.constant(Tensor::matrix(1, tape.value(h).rows_cols().1, vec![1.0; tape.value(h).rows_cols().1])?);
            let wexp = tape.apply(OpKind::MatMul, &[wcol, ones])?;
            tape.apply(OpKind::ElementwiseMul, &[h, wexp])?
        }
    };
    tape.apply(OpKind::SegmentSum { segments: vec![0; rows], num_segments: 1 }, &[weighted])
}

pub fn he_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let std = (2.0 / rows as f64).sqrt();
    gauss_matrix(rng, rows, cols, std)
}

pub fn gauss_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let vals: Vec<f64> = (0..rows * cols).map(|_| std * randn(rng)).collect();
    Tensor::matrix(rows, cols, vals).expect("finite init")
}

/// Small nonzero bias init. Exactly-zero biases can park whole embedding
/// rows at 0 (a fully negative relu layer emits b2 alone), which leaves
/// downstream relu inputs sitting on their kink; a tiny offset removes that
/// degenerate set.
pub fn gauss_vector<R: Rng>(rng: &mut R, n: usize, std: f64) -> Tensor {
    let vals: Vec<f64> = (0..n).map(|_| std * randn(rng)).collect();
    Tensor::vector(vals).expect("finite init")
}

/// Both directions of every bond, with the bond order as the edge type.
pub fn molecular_edges(mol: &crate::smiles::MolecularGraph) -> Vec<DirectedEdge> {
    let mut edges = Vec::with_capacity(mol.bonds.len() * 2);
    for bond in &mol.bonds {
        let t = bond.order.index();
        edges.push(DirectedEdge { src: bond.a, dst: bond.b, edge_type: t });
        edges.push(DirectedEdge { src: bond.b, dst: bond.a, edge_type: t });
    }
    edges
}
