//! Causal substructure extraction: per-atom relevance, a binary-Concrete
//! (Gumbel-Sigmoid) relaxation, noise-injected masking into causal and
//! confounding parts, and graph-level readouts.
//!
//! High relevance keeps an atom in the causal part C; the complement is the
//! confound S = (1 - lambda) * H. Masked-out content in C is replaced by
//! noise drawn from the batch feature distribution, reparametrized through
//! the batch mean/std so gradients flow into the statistics.

use rand::Rng;

use crate::autodiff::{OpKind, ParameterStore, Tape, Tensor, TensorError, TensorId};
use crate::encoder::{gauss_matrix, gauss_vector, he_matrix, linear};
use crate::util::rand_open01;

#[derive(Debug, Clone)]
pub struct MaskConfig {
    /// Relaxation temperature; lower is closer to Bernoulli sampling.
    pub tau: f64,
    /// Multiplicative decay applied every `anneal_every` epochs.
    pub tau_decay: f64,
    pub anneal_every: usize,
    pub tau_floor: f64,
    /// Deterministic evaluation: lambda = 1 when p > 0.5, and the noise term
    /// is dropped (masked content becomes zero).
    pub hard_eval: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { tau: 1.0, tau_decay: 0.97, anneal_every: 100, tau_floor: 0.1, hard_eval: false }
    }
}

impl MaskConfig {
    pub fn tau_at_epoch(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.anneal_every) as i32;
        (self.tau * self.tau_decay.powi(steps)).max(self.tau_floor)
    }
}

/// Register the relevance MLP (in_dim -> hidden -> 1).
pub fn init_relevance_params<R: Rng>(
    store: &mut ParameterStore,
    rng: &mut R,
    in_dim: usize,
    hidden: usize,
) -> Result<(), TensorError> {
    store.insert("rel.w1", he_matrix(rng, in_dim, hidden))?;
    store.insert("rel.b1", gauss_vector(rng, hidden, 0.01))?;
    store.insert("rel.w2", gauss_matrix(rng, hidden, 1, 0.01))?;
    store.insert("rel.b2", Tensor::zeros(&[1]))
}

/// Per-atom relevance `p = sigmoid(mlp(H))`, returned as an `[n, 1]` column
/// strictly inside (0, 1).
pub fn relevance(
    tape: &mut Tape,
    store: &ParameterStore,
    h: TensorId,
) -> Result<TensorId, TensorError> {
    let n = tape.value(h).rows_cols().0;
    let w1 = tape.param(store, "rel.w1")?;
    let b1 = tape.param(store, "rel.b1")?;
    let w2 = tape.param(store, "rel.w2")?;
    let b2 = tape.param(store, "rel.b2")?;
    let hidden = linear(tape, h, w1, b1, n)?;
    let act = tape.apply(OpKind::Relu, &[hidden])?;
    let logits = linear(tape, act, w2, b2, n)?;
    tape.apply(OpKind::Sigmoid, &[logits])
}

/// Scalar binary-Concrete sample: `sigmoid((logit(p) + logit(q)) / tau)`.
pub fn gumbel_sigmoid_scalar(p: f64, q: f64, tau: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0 && q > 0.0 && q < 1.0 && tau > 0.0);
    let z = ((p / (1.0 - p)).ln() + (q / (1.0 - q)).ln()) / tau;
    (1.0 / (1.0 + (-z).exp())).clamp(1e-12, 1.0 - 1e-12)
}

/// Draw frozen logistic noise logits `log(q/(1-q))` for `n` atoms.
pub fn sample_noise_logits<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let q = rand_open01(rng);
            (q / (1.0 - q)).ln()
        })
        .collect()
}

/// Tape version of the relaxation over a `[n, 1]` relevance column with the
/// noise logits held constant: differentiable in `p`, reproducible under the
/// caller's seed. Rejects `p` outside the open unit interval.
pub fn gumbel_sigmoid(
    tape: &mut Tape,
    p: TensorId,
    noise_logits: &[f64],
    tau: f64,
) -> Result<TensorId, TensorError> {
    if tau <= 0.0 {
        return Err(TensorError::Invalid(format!("tau {tau} must be positive")));
    }
    let pv = tape.value(p);
    if pv.values().iter().any(|v| *v <= 0.0 || *v >= 1.0) {
        return Err(TensorError::Invalid("relevance must lie strictly in (0,1)".into()));
    }
    let (n, _) = pv.rows_cols();
    if noise_logits.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "gumbel_sigmoid".into(),
            detail: format!("{n} atoms vs {} noise draws", noise_logits.len()),
        });
    }
    let shape = pv.shape().to_vec();
    // flatten the logit beyond the clamp band so saturated relevance behaves
    // identically forward and backward
    let p = crate::objective::clamp_unit(tape, p)?;
    let one = tape.constant(Tensor::scalar(1.0));
    let neg = tape.constant(Tensor::scalar(-1.0));
    let log_p = tape.apply(OpKind::Log, &[p])?;
    let minus_p = tape.apply(OpKind::ElementwiseMul, &[p, neg])?;
    let one_minus_p = tape.apply(OpKind::Add, &[minus_p, one])?;
    let log_omp = tape.apply(OpKind::Log, &[one_minus_p])?;
    let neg_log_omp = tape.apply(OpKind::ElementwiseMul, &[log_omp, neg])?;
    let logit_p = tape.apply(OpKind::Add, &[log_p, neg_log_omp])?;
    let noise = tape.constant(Tensor::new(shape, noise_logits.to_vec())?);
    let sum = tape.apply(OpKind::Add, &[logit_p, noise])?;
    let inv_tau = tape.constant(Tensor::scalar(1.0 / tau));
    let scaled = tape.apply(OpKind::ElementwiseMul, &[sum, inv_tau])?;
    tape.apply(OpKind::Sigmoid, &[scaled])
}

/// Hard evaluation mask: `1[p > 0.5]` as a constant column.
pub fn hard_mask(tape: &mut Tape, p: TensorId) -> TensorId {
    let pv = tape.value(p);
    let vals: Vec<f64> = pv.values().iter().map(|v| if *v > 0.5 { 1.0 } else { 0.0 }).collect();
    let shape = pv.shape().to_vec();
    tape.constant(Tensor::new(shape, vals).expect("0/1 mask"))
}

/// Batch noise statistics reparametrized from the feature matrix: per
/// dimension over all atom rows, mean plus std times frozen standard-normal
/// draws. A single-atom batch cannot estimate spread, so std falls back to 1.
pub fn noise_from_stats(
    tape: &mut Tape,
    h_all: TensorId,
    z_draws: &[f64],
) -> Result<TensorId, TensorError> {
    let (n, d) = tape.value(h_all).rows_cols();
    debug_assert_eq!(z_draws.len(), n * d);
    let mean = tape.apply(OpKind::ReduceMean, &[h_all])?;
    let std = if n == 1 {
        tape.constant(Tensor::filled(&[d], 1.0))
    } else {
        let var = tape.apply(OpKind::ReduceVar, &[h_all])?;
        // sqrt via exp(0.5 ln(var + tiny)); the floor keeps zero-variance
        // dimensions finite
        let tiny = tape.constant(Tensor::filled(&[d], 1e-12));
        let shifted = tape.apply(OpKind::Add, &[var, tiny])?;
        let lv = tape.apply(OpKind::Log, &[shifted])?;
        let half = tape.constant(Tensor::scalar(0.5));
        let hl = tape.apply(OpKind::ElementwiseMul, &[lv, half])?;
        tape.apply(OpKind::Exp, &[hl])?
    };
    let mean_rows = tape.apply(OpKind::BroadcastRow { rows: n }, &[mean])?;
    let std_rows = tape.apply(OpKind::BroadcastRow { rows: n }, &[std])?;
    let z = tape.constant(Tensor::matrix(n, d, z_draws.to_vec())?);
    let scaled = tape.apply(OpKind::ElementwiseMul, &[std_rows, z])?;
    tape.apply(OpKind::Add, &[mean_rows, scaled])
}

pub struct SplitIds {
    pub causal_nodes: TensorId,
    pub confound_nodes: TensorId,
}

/// Noise-injected masking:
///   C_i = lambda_i * H_i + (1 - lambda_i) * eps_i
///   S_i = (1 - lambda_i) * H_i
/// `noise` is `None` in hard evaluation mode, where masked content becomes
/// zero instead of noise.
pub fn split(
    tape: &mut Tape,
    h: TensorId,
    lambda: TensorId,
    noise: Option<TensorId>,
) -> Result<SplitIds, TensorError> {
    let (n, d) = tape.value(h).rows_cols();
    let (ln, _) = tape.value(lambda).rows_cols();
    if ln != n {
        return Err(TensorError::ShapeMismatch {
            op: "split".into(),
            detail: format!("{n} feature rows vs {ln} mask entries"),
        });
    }
    let ones_row = tape.constant(Tensor::matrix(1, d, vec![1.0; d]).expect("ones"));
    let lam_full = tape.apply(OpKind::MatMul, &[lambda, ones_row])?;
    let one = tape.constant(Tensor::scalar(1.0));
    let neg = tape.constant(Tensor::scalar(-1.0));
    let neg_lam = tape.apply(OpKind::ElementwiseMul, &[lam_full, neg])?;
    let inv_lam = tape.apply(OpKind::Add, &[neg_lam, one])?;

    let causal_kept = tape.apply(OpKind::ElementwiseMul, &[lam_full, h])?;
    let causal_nodes = match noise {
        Some(eps) => {
            let masked = tape.apply(OpKind::ElementwiseMul, &[inv_lam, eps])?;
            tape.apply(OpKind::Add, &[causal_kept, masked])?
        }
        None => causal_kept,
    };
    let confound_nodes = tape.apply(OpKind::ElementwiseMul, &[inv_lam, h])?;
    Ok(SplitIds { causal_nodes, confound_nodes })
}

/// Sum readout per molecule over a batched node matrix.
pub fn readout_segments(
    tape: &mut Tape,
    nodes: TensorId,
    segments: &[usize],
    num_molecules: usize,
) -> Result<TensorId, TensorError> {
    tape.apply(
        OpKind::SegmentSum { segments: segments.to_vec(), num_segments: num_molecules },
        &[nodes],
    )
}

/// Materialized view of one molecule's split for inspection and evaluation.
#[derive(Debug, Clone)]
pub struct CausalSplit {
    pub p: Vec<f64>,
    pub lambda: Vec<f64>,
    pub causal_graph_vec: Vec<f64>,
    pub confound_graph_vec: Vec<f64>,
}
