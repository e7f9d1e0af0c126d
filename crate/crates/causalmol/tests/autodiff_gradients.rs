//! Finite-difference verification for every differentiable op and for deep
//! compositions, on random inputs in [-2, 2].

use causalmol::autodiff::{
    finite_difference_check, OpKind, ParameterStore, Tape, Tensor, TensorError, TensorId,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn randn_store(seed: u64, entries: &[(&str, &[usize])]) -> ParameterStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new(seed);
    for (name, shape) in entries {
        let numel: usize = shape.iter().product();
        let vals: Vec<f64> = (0..numel).map(|_| rng.gen_range(-2.0..2.0)).collect();
        store.insert(name, Tensor::new(shape.to_vec(), vals).unwrap()).unwrap();
    }
    store
}

/// Reduce any tensor to a scalar through a fixed weighted sum so the loss is
/// sensitive to every element.
fn to_scalar(tape: &mut Tape, x: TensorId) -> Result<TensorId, TensorError> {
    let t = tape.value(x);
    let n = t.numel();
    let (rows, cols) = t.rows_cols();
    let weights: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * i as f64).collect();
    let w = tape.constant(Tensor::new(t.shape().to_vec(), weights).unwrap());
    let prod = tape.apply(OpKind::ElementwiseMul, &[x, w])?;
    let summed = tape.apply(
        OpKind::SegmentSum { segments: vec![0; rows], num_segments: 1 },
        &[prod],
    )?;
    if cols == 1 {
        return Ok(summed);
    }
    // summed is [1, cols] or [cols]; contract the columns too
    let st = tape.value(summed);
    let (r2, _) = st.rows_cols();
    if r2 == 1 && st.rank() == 2 {
        let ones = tape.constant(Tensor::matrix(cols, 1, vec![1.0; cols]).unwrap());
        tape.apply(OpKind::MatMul, &[summed, ones])
    } else {
        tape.apply(OpKind::SegmentSum { segments: vec![0; cols], num_segments: 1 }, &[summed])
    }
}

fn check<F>(name: &str, store: &ParameterStore, build: F)
where
    F: Fn(&ParameterStore, &mut Tape) -> Result<TensorId, TensorError>,
{
    let report = finite_difference_check(
        |s| {
            let mut tape = Tape::new();
            let out = build(s, &mut tape)?;
            let loss = to_scalar(&mut tape, out)?;
            Ok((tape, loss))
        },
        store,
        EPS,
    )
    .unwrap_or_else(|e| panic!("{name}: {e}"));
    assert!(report.max_rel_err() < TOL, "{name}:\n{}", report.summary());
}

#[test]
fn matmul_gradients() {
    let store = randn_store(1, &[("a", &[3, 4]), ("b", &[4, 2])]);
    check("matmul", &store, |s, tape| {
        let a = tape.param(s, "a")?;
        let b = tape.param(s, "b")?;
        tape.apply(OpKind::MatMul, &[a, b])
    });
}

#[test]
fn add_and_mul_gradients() {
    let store = randn_store(2, &[("a", &[2, 3]), ("b", &[2, 3]), ("s", &[1])]);
    check("add", &store, |s, tape| {
        let a = tape.param(s, "a")?;
        let b = tape.param(s, "b")?;
        tape.apply(OpKind::Add, &[a, b])
    });
    check("elementwise_mul", &store, |s, tape| {
        let a = tape.param(s, "a")?;
        let b = tape.param(s, "b")?;
        tape.apply(OpKind::ElementwiseMul, &[a, b])
    });
    check("scalar_broadcast_mul", &store, |s, tape| {
        let a = tape.param(s, "a")?;
        let sc = tape.param(s, "s")?;
        tape.apply(OpKind::ElementwiseMul, &[a, sc])
    });
    check("scalar_broadcast_add", &store, |s, tape| {
        let a = tape.param(s, "a")?;
        let sc = tape.param(s, "s")?;
        tape.apply(OpKind::Add, &[sc, a])
    });
}

#[test]
fn concat_gradients() {
    let store = randn_store(3, &[("a", &[2, 2]), ("b", &[2, 3]), ("v", &[3]), ("w", &[2])]);
    check("concat_cols", &store, |s, tape| {
        let a = tape.param(s, "a")?;
        let b = tape.param(s, "b")?;
        tape.apply(OpKind::Concat, &[a, b])
    });
    check("concat_vecs", &store, |s, tape| {
        let v = tape.param(s, "v")?;
        let w = tape.param(s, "w")?;
        tape.apply(OpKind::Concat, &[v, w])
    });
    check("concat_rows", &store, |s, tape| {
        let a = tape.param(s, "a")?;
        let b = tape.param(s, "b")?;
        let bt = tape.apply(OpKind::GatherRows { indices: vec![0, 1] }, &[b])?;
        // b is [2,3]; take a [2,2] via matmul to line the columns up
        let proj = tape.constant(Tensor::matrix(3, 2, vec![0.5, -0.2, 0.1, 0.7, -0.3, 0.4]).unwrap());
        let b2 = tape.apply(OpKind::MatMul, &[bt, proj])?;
        tape.apply(OpKind::ConcatRows, &[a, b2])
    });
}

#[test]
fn pointwise_gradients() {
    let store = randn_store(4, &[("x", &[2, 3])]);
    for (name, op) in [
        ("sigmoid", OpKind::Sigmoid),
        ("relu", OpKind::Relu),
        ("exp", OpKind::Exp),
        ("softmax", OpKind::Softmax),
    ] {
        let op = op.clone();
        check(name, &store, move |s, tape| {
            let x = tape.param(s, "x")?;
            tape.apply(op.clone(), &[x])
        });
    }
    // log needs positive inputs: shift through exp first
    check("log", &store, |s, tape| {
        let x = tape.param(s, "x")?;
        let ex = tape.apply(OpKind::Exp, &[x])?;
        tape.apply(OpKind::Log, &[ex])
    });
}

#[test]
fn structural_op_gradients() {
    let store = randn_store(5, &[("x", &[4, 3]), ("v", &[3])]);
    check("segment_sum", &store, |s, tape| {
        let x = tape.param(s, "x")?;
        tape.apply(OpKind::SegmentSum { segments: vec![1, 0, 1, 0], num_segments: 2 }, &[x])
    });
    check("reduce_mean", &store, |s, tape| {
        let x = tape.param(s, "x")?;
        tape.apply(OpKind::ReduceMean, &[x])
    });
    check("reduce_var", &store, |s, tape| {
        let x = tape.param(s, "x")?;
        tape.apply(OpKind::ReduceVar, &[x])
    });
    check("broadcast_row", &store, |s, tape| {
        let v = tape.param(s, "v")?;
        tape.apply(OpKind::BroadcastRow { rows: 4 }, &[v])
    });
    check("gather_rows", &store, |s, tape| {
        let x = tape.param(s, "x")?;
        tape.apply(OpKind::GatherRows { indices: vec![2, 0, 2, 3, 1] }, &[x])
    });
}

/// Depth >= 5 composition: exercises graph traversal, fan-out, and reuse.
#[test]
fn deep_chain_gradients() {
    let store = randn_store(6, &[("w1", &[3, 3]), ("w2", &[3, 3]), ("x", &[2, 3]), ("b", &[3])]);
    check("deep_chain", &store, |s, tape| {
        let x = tape.param(s, "x")?;
        let w1 = tape.param(s, "w1")?;
        let w2 = tape.param(s, "w2")?;
        let b = tape.param(s, "b")?;
        let h1 = tape.apply(OpKind::MatMul, &[x, w1])?; // 1
        let bb = tape.apply(OpKind::BroadcastRow { rows: 2 }, &[b])?;
        let h2 = tape.apply(OpKind::Add, &[h1, bb])?; // 2
        let h3 = tape.apply(OpKind::Relu, &[h2])?; // 3
        let h4 = tape.apply(OpKind::MatMul, &[h3, w2])?; // 4
        let h5 = tape.apply(OpKind::Sigmoid, &[h4])?; // 5
        let h6 = tape.apply(OpKind::ElementwiseMul, &[h5, h3])?; // 6, with fan-out on h3
        let h7 = tape.apply(OpKind::Softmax, &[h6])?; // 7
        tape.apply(OpKind::ElementwiseMul, &[h7, h5])
    });
}
