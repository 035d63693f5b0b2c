use elp_autodiff::{finite_difference_check, OpKind, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    // Keep clear of the kinks of relu/abs/clamp so central differences are valid.
    let values = (0..n)
        .map(|_| {
            let mut v: f64 = rng.random_range(lo..hi);
            if v.abs() < 0.05 {
                v += 0.1_f64.copysign(v);
            }
            v
        })
        .collect();
    Tensor::new(shape.to_vec(), values).unwrap()
}

/// (op, input shapes, value range) covering every operation kind.
fn op_cases() -> Vec<(OpKind, Vec<Vec<usize>>, (f64, f64))> {
    vec![
        (OpKind::Add, vec![vec![3, 4], vec![4]], (-2.0, 2.0)),
        (OpKind::Sub, vec![vec![3, 4], vec![3, 4]], (-2.0, 2.0)),
        (OpKind::Mul, vec![vec![2, 3, 4], vec![3, 4]], (-2.0, 2.0)),
        (OpKind::MatMul, vec![vec![2, 3, 4], vec![4, 5]], (-1.0, 1.0)),
        (OpKind::Concat { axis: 1 }, vec![vec![2, 3, 2], vec![2, 1, 2]], (-1.0, 1.0)),
        (OpKind::Slice { axis: 1, start: 1, len: 2 }, vec![vec![2, 4, 3]], (-1.0, 1.0)),
        (OpKind::Reshape { shape: vec![6, 2] }, vec![vec![3, 4]], (-1.0, 1.0)),
        (OpKind::Relu, vec![vec![4, 5]], (-2.0, 2.0)),
        (OpKind::Tanh, vec![vec![4, 5]], (-2.0, 2.0)),
        (OpKind::Sigmoid, vec![vec![4, 5]], (-4.0, 4.0)),
        (OpKind::Softmax { axis: 1 }, vec![vec![3, 5, 2]], (-2.0, 2.0)),
        (OpKind::Log, vec![vec![4, 3]], (0.2, 3.0)),
        (OpKind::Exp, vec![vec![4, 3]], (-2.0, 2.0)),
        (OpKind::Mean { axis: None }, vec![vec![4, 3]], (-2.0, 2.0)),
        (OpKind::Mean { axis: Some(0) }, vec![vec![4, 3]], (-2.0, 2.0)),
        (OpKind::Sum { axis: None }, vec![vec![4, 3]], (-2.0, 2.0)),
        (OpKind::Sum { axis: Some(1) }, vec![vec![2, 4, 3]], (-2.0, 2.0)),
        (OpKind::Variance { axis: 1 }, vec![vec![3, 6]], (-2.0, 2.0)),
        (OpKind::Sqrt, vec![vec![5]], (0.2, 4.0)),
        (OpKind::Abs, vec![vec![5, 2]], (-2.0, 2.0)),
        (OpKind::Scale { factor: -1.7 }, vec![vec![5]], (-2.0, 2.0)),
        (OpKind::Shift { offset: 0.3 }, vec![vec![5]], (-2.0, 2.0)),
        (OpKind::Clamp { lo: -0.5, hi: 0.5 }, vec![vec![6]], (-1.0, 1.0)),
    ]
}

/// Weighted sum of the op output so every output coordinate matters.
fn weighted_objective<'a>(
    kind: &'a OpKind,
    weights: &'a Tensor,
) -> impl Fn(&mut Tape, &[Var]) -> elp_autodiff::Result<Var> + 'a {
    move |tape, inputs| {
        let out = tape.apply(kind, inputs)?;
        let w = tape.leaf(weights);
        let w = if tape.shape(out)? == weights.shape() {
            w
        } else {
            let shape = tape.shape(out)?.to_vec();
            let n: usize = shape.iter().product();
            tape.constant(shape, weights.values()[..n].to_vec())?
        };
        let p = tape.mul(out, w)?;
        tape.sum(p)
    }
}

#[test]
fn every_op_matches_central_differences_over_ten_seeds() {
    for (kind, shapes, (lo, hi)) in op_cases() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let point: Vec<Tensor> = shapes
                .iter()
                .map(|s| random_tensor(&mut rng, s, lo, hi))
                .collect();
            let mut tape = Tape::new();
            let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t)).collect();
            let out = tape.apply(&kind, &vars).unwrap();
            let out_shape = tape.shape(out).unwrap().to_vec();
            let weights = random_tensor(&mut rng, &out_shape, -1.0, 1.0);
            let report =
                finite_difference_check(weighted_objective(&kind, &weights), &point, 1e-5)
                    .unwrap();
            assert!(
                report.max_rel_error < 1e-4,
                "{kind:?} seed {seed}: {report:?}"
            );
        }
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
    let c = tape.matmul(va, vb).unwrap();
    assert_eq!(tape.shape(c).unwrap(), &[2, 4]);
    let got = tape.value(c).unwrap();
    for i in 0..2 {
        for j in 0..4 {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += a.values()[i * 3 + k] * b.values()[k * 4 + j];
            }
            assert!((got[i * 4 + j] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn random_four_op_graph_matches_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let point = vec![
            random_tensor(&mut rng, &[3, 4], -1.0, 1.0),
            random_tensor(&mut rng, &[4, 2], -1.0, 1.0),
        ];
        let report = finite_difference_check(
            |tape, v| {
                let h = tape.matmul(v[0], v[1])?;
                let h = tape.tanh(h)?;
                let h = tape.softmax(h, 1)?;
                let h = tape.mul(h, h)?;
                tape.sum(h)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

fn graph_a(tape: &mut Tape, x: Var) -> Var {
    let y = tape.tanh(x).unwrap();
    let y = tape.mul(y, x).unwrap();
    tape.sum(y).unwrap()
}

fn graph_b(tape: &mut Tape, x: Var) -> Var {
    let y = tape.exp(x).unwrap();
    let y = tape.scale(y, 0.5).unwrap();
    tape.mean(y).unwrap()
}

#[test]
fn sum_of_independent_graphs_concatenates_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_tensor(&mut rng, &[4], -1.0, 1.0).with_requires_grad(true);
    let b = random_tensor(&mut rng, &[3], -1.0, 1.0).with_requires_grad(true);

    let separate = |build: fn(&mut Tape, Var) -> Var, t: &Tensor| {
        let mut tape = Tape::new();
        let x = tape.leaf(t);
        let r = build(&mut tape, x);
        tape.backward(r).unwrap();
        tape.grad(x).unwrap().unwrap().to_vec()
    };
    let ga = separate(graph_a, &a);
    let gb = separate(graph_b, &b);

    let mut tape = Tape::new();
    let (xa, xb) = (tape.leaf(&a), tape.leaf(&b));
    let ra = graph_a(&mut tape, xa);
    let rb = graph_b(&mut tape, xb);
    let r = tape.add(ra, rb).unwrap();
    tape.backward(r).unwrap();
    let joint: Vec<f64> = tape
        .grad(xa)
        .unwrap()
        .unwrap()
        .iter()
        .chain(tape.grad(xb).unwrap().unwrap())
        .copied()
        .collect();
    let expected: Vec<f64> = ga.into_iter().chain(gb).collect();
    assert_eq!(joint, expected);
}

fn seeded_run(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_tensor(&mut rng, &[5, 3], -1.0, 1.0).with_requires_grad(true);
    let w = random_tensor(&mut rng, &[3, 2], -1.0, 1.0).with_requires_grad(true);
    let mut tape = Tape::new();
    let (va, vw) = (tape.leaf(&a), tape.leaf(&w));
    let h = tape.matmul(va, vw).unwrap();
    let h = tape.sigmoid(h).unwrap();
    let v = tape.variance_axis(h, 0).unwrap();
    let r = tape.sum(v).unwrap();
    tape.backward(r).unwrap();
    (
        tape.value(h).unwrap().to_vec(),
        tape.grad(vw).unwrap().unwrap().to_vec(),
    )
}

#[test]
fn replay_is_bit_identical() {
    let (v1, g1) = seeded_run(42);
    let (v2, g2) = seeded_run(42);
    assert_eq!(
        v1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        v2.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(
        g1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        g2.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant([3, 4], values).unwrap();
        let s = tape.softmax(x, 1).unwrap();
        let v = tape.value(s).unwrap();
        for row in v.chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reshape_preserves_values(values in proptest::collection::vec(-5.0f64..5.0, 24)) {
        let mut tape = Tape::new();
        let x = tape.constant([2, 3, 4], values.clone()).unwrap();
        let y = tape.reshape(x, [6, 4]).unwrap();
        prop_assert_eq!(tape.value(y).unwrap(), &values[..]);
    }
}
