use earlystop::diffcore::{
    cross_entropy, grad_check, grad_check_with_fault, softmax, ParamSet, Tape, Tensor, Var,
};
use earlystop::Error;
use proptest::prelude::*;

#[derive(Debug, Clone, Copy)]
enum Op {
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    MulCol,
    Scale,
    Shift,
    Sigmoid,
    Tanh,
    Relu,
    Softmax,
    CrossEntropy,
    Slice,
    SumCols,
    Clamp,
    Minimum,
    Gather,
}

const OPS: [Op; 18] = [
    Op::MatMul,
    Op::Add,
    Op::Sub,
    Op::Mul,
    Op::AddRow,
    Op::MulCol,
    Op::Scale,
    Op::Shift,
    Op::Sigmoid,
    Op::Tanh,
    Op::Relu,
    Op::Softmax,
    Op::CrossEntropy,
    Op::Slice,
    Op::SumCols,
    Op::Clamp,
    Op::Minimum,
    Op::Gather,
];

/// Values bounded away from zero so that kinked ops are differentiable at
/// every entry, even after a finite-difference step.
fn away_from_zero(raw: &[f64]) -> Vec<f64> {
    raw.iter()
        .map(|&x| if x >= 0.0 { x + 0.1 } else { x - 0.1 })
        .collect()
}

/// Same-signed values bounded away from zero. Bilinear ops get these so
/// that no gradient entry is a near-cancelling sum, where roundoff in the
/// difference quotient would swamp the relative error.
fn positive(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|x| x.abs() + 0.2).collect()
}

fn params_for(op: Op, m: usize, n: usize, raw: &[f64]) -> ParamSet {
    let take =
        |k: usize, off: usize| -> Vec<f64> { (0..k).map(|i| raw[(off + i) % raw.len()]).collect() };
    let mut p = ParamSet::new();
    let a = Tensor::matrix(m, n, take(m * n, 0)).unwrap();
    match op {
        Op::MatMul => {
            p.push(
                "a",
                Tensor::matrix(m, n, positive(&take(m * n, 0))).unwrap(),
            );
            p.push(
                "b",
                Tensor::matrix(n, 2, positive(&take(n * 2, 3))).unwrap(),
            );
        }
        Op::Mul => {
            p.push(
                "a",
                Tensor::matrix(m, n, positive(&take(m * n, 0))).unwrap(),
            );
            p.push(
                "b",
                Tensor::matrix(m, n, positive(&take(m * n, 5))).unwrap(),
            );
        }
        Op::Add | Op::Sub => {
            p.push("a", a);
            p.push("b", Tensor::matrix(m, n, take(m * n, 5)).unwrap());
        }
        Op::Minimum => {
            // keep the two inputs at least 0.1 apart entrywise
            let a_vals = take(m * n, 0);
            let b_vals: Vec<f64> = a_vals
                .iter()
                .zip(away_from_zero(&take(m * n, 7)))
                .map(|(x, d)| x + d)
                .collect();
            p.push("a", Tensor::matrix(m, n, a_vals).unwrap());
            p.push("b", Tensor::matrix(m, n, b_vals).unwrap());
        }
        Op::AddRow => {
            p.push("a", a);
            p.push("b", Tensor::matrix(1, n, take(n, 2)).unwrap());
        }
        Op::MulCol => {
            p.push(
                "a",
                Tensor::matrix(m, n, positive(&take(m * n, 0))).unwrap(),
            );
            p.push("c", Tensor::matrix(m, 1, positive(&take(m, 4))).unwrap());
        }
        Op::Relu => {
            p.push(
                "a",
                Tensor::matrix(m, n, away_from_zero(&take(m * n, 0))).unwrap(),
            );
        }
        Op::Clamp => {
            // bounds at +-0.5; keep entries 0.05 away from both
            let vals = take(m * n, 0)
                .iter()
                .map(|&x| {
                    if (x.abs() - 0.5).abs() < 0.05 {
                        x * 1.3
                    } else {
                        x
                    }
                })
                .collect();
            p.push("a", Tensor::matrix(m, n, vals).unwrap());
        }
        Op::CrossEntropy => {
            p.push("logits", a);
        }
        _ => {
            p.push("a", a);
        }
    }
    p
}

fn apply(op: Op, tape: &mut Tape, v: &[Var], m: usize, n: usize) -> earlystop::Result<Var> {
    let out = match op {
        Op::MatMul => tape.matmul(v[0], v[1])?,
        Op::Add => tape.add(v[0], v[1])?,
        Op::Sub => tape.sub(v[0], v[1])?,
        Op::Mul => tape.mul(v[0], v[1])?,
        Op::AddRow => tape.add_row(v[0], v[1])?,
        Op::MulCol => tape.mul_col(v[0], v[1])?,
        Op::Scale => tape.scale(v[0], -1.7)?,
        Op::Shift => tape.shift(v[0], 0.3)?,
        Op::Sigmoid => tape.sigmoid(v[0])?,
        Op::Tanh => tape.tanh(v[0])?,
        Op::Relu => tape.relu(v[0])?,
        Op::Softmax => tape.softmax_rows(v[0])?,
        Op::CrossEntropy => {
            let q = tape.softmax_rows(v[0])?;
            let target: Vec<f64> = (0..m)
                .flat_map(|r| (0..n).map(move |c| ((r + c) % n + 1) as f64))
                .collect();
            let rows: Vec<Vec<f64>> = target
                .chunks(n)
                .map(|r| {
                    let s: f64 = r.iter().sum();
                    r.iter().map(|x| x / s).collect()
                })
                .collect();
            let p = tape.constant(Tensor::from_rows(&rows).unwrap());
            tape.cross_entropy_rows(p, q)?
        }
        Op::Slice => tape.slice_cols(v[0], n / 2, n)?,
        Op::SumCols => tape.sum_cols(v[0])?,
        Op::Clamp => tape.clamp(v[0], -0.5, 0.5)?,
        Op::Minimum => tape.minimum(v[0], v[1])?,
        Op::Gather => tape.gather_rows(v[0], (0..m + 1).map(|i| (i * 7) % m).collect())?,
    };
    // a non-uniform readout so that every output entry gets its own weight
    let shape = tape.value(out).shape().to_vec();
    let (rows, cols) = (shape[0], shape[1]);
    let w: Vec<f64> = (0..rows * cols)
        .map(|i| 0.3 + 0.17 * ((i * 5) % 11) as f64)
        .collect();
    let w = tape.constant(Tensor::matrix(rows, cols, w).unwrap());
    let weighted = tape.mul(out, w)?;
    tape.sum_all(weighted)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(144))]

    #[test]
    fn every_op_matches_finite_differences(
        op_idx in 0usize..OPS.len(),
        m in 1usize..4,
        n in 1usize..5,
        raw in prop::collection::vec(-1.5f64..1.5, 24),
    ) {
        let op = OPS[op_idx];
        let mut params = params_for(op, m, n, &raw);
        let report = grad_check(|tape, v| apply(op, tape, v, m, n), &mut params, 1e-6).unwrap();
        // entries whose true gradient nearly cancels have a roundoff-level
        // relative error; their absolute error stays at roundoff scale
        prop_assert!(
            report.max_rel_error < 1e-6 || report.max_abs_error < 1e-8,
            "{op:?} {m}x{n}: {report:?}"
        );
    }

    #[test]
    fn softmax_rows_are_distributions(row in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let p = softmax(&row);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn cross_entropy_is_minimized_by_the_target(
        logits in prop::collection::vec(-5.0f64..5.0, 2..8),
        other in prop::collection::vec(-5.0f64..5.0, 8),
    ) {
        let p = softmax(&logits);
        let q = softmax(&other[..p.len()]);
        let entropy = cross_entropy(&p, &p);
        prop_assert!(entropy >= 0.0);
        prop_assert!(cross_entropy(&p, &q) >= entropy - 1e-12);
    }

    #[test]
    fn backward_is_linear_in_the_loss(
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        raw in prop::collection::vec(-1.0f64..1.0, 6),
    ) {
        let grads = |ca: f64, cb: f64| {
            let mut tape = Tape::new();
            let x = tape.variable(Tensor::matrix(2, 3, raw.clone()).unwrap());
            let f = tape.tanh(x).unwrap();
            let f = tape.sum_all(f).unwrap();
            let g = tape.sigmoid(x).unwrap();
            let g = tape.mul(g, g).unwrap();
            let g = tape.sum_all(g).unwrap();
            let f = tape.scale(f, ca).unwrap();
            let g = tape.scale(g, cb).unwrap();
            let total = tape.add(f, g).unwrap();
            tape.backward(total).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let combined = grads(a, b);
        let (fa, gb) = (grads(1.0, 0.0), grads(0.0, 1.0));
        for i in 0..6 {
            prop_assert!((combined[i] - (a * fa[i] + b * gb[i])).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_twice_is_refused() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::scalar(1.5));
    let y = tape.tanh(x).unwrap();
    tape.backward(y).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::BackwardTwice)));
}

#[test]
fn non_scalar_loss_is_refused() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::zeros(2, 2));
    assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
}

#[test]
fn overflow_is_reported() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(1e308));
    assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { .. })));
}

#[test]
fn injected_fault_is_flagged() {
    let mut params = ParamSet::new();
    params.push("x", Tensor::matrix(1, 3, vec![0.2, -0.4, 1.1]).unwrap());
    let loss = |tape: &mut Tape, v: &[Var]| {
        let t = tape.tanh(v[0])?;
        tape.sum_all(t)
    };
    assert!(grad_check(loss, &mut params, 1e-6).unwrap().max_rel_error < 1e-8);
    assert!(
        grad_check_with_fault(loss, &mut params, 1e-6, 1e-2)
            .unwrap()
            .max_rel_error
            > 1e-4
    );
}

#[test]
fn nondeterministic_loss_is_flagged() {
    let mut params = ParamSet::new();
    params.push("x", Tensor::scalar(0.5));
    let mut calls = 0.0;
    let result = grad_check(
        |tape, v| {
            calls += 1.0;
            tape.shift(v[0], calls)
        },
        &mut params,
        1e-6,
    );
    assert!(matches!(result, Err(Error::NonDeterministic { .. })));
}
