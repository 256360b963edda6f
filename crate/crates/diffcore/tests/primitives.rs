use diffcore::{
    check_gradients, finite_difference_check, AdamConfig, DiffError, GradCheckOptions, NumericEval, ParameterStore, Reduction, Result, Tape,
    Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Contracts an arbitrary output with fixed random weights so the upstream
/// gradient is not uniform.
fn contract(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.value(x).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.leaf(rand_tensor(&mut rng, r, c, 1.0));
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn check<F>(store: &ParameterStore, build: F) -> f64
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let report = finite_difference_check(store, build, &GradCheckOptions::default()).unwrap();
    assert!(report.entries_checked > 0);
    report.max_rel_error
}

#[test]
fn sigmoid_at_zero_and_its_slope() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::row(&[0.0]));
    let y = tape.sigmoid(x).unwrap();
    let s = tape.scale(y, 3.0).unwrap();
    let s = tape.sum(s).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.value(y).item(), 0.5);
    assert_eq!(tape.grad(x).unwrap().item(), 0.75);
}

#[test]
fn concat_shapes_and_split_gradient() {
    let mut tape = Tape::new();
    let a = tape.variable(Tensor::full(3, 64, 1.0));
    let b = tape.variable(Tensor::full(3, 64, 2.0));
    let c = tape.concat(&[a, b]).unwrap();
    assert_eq!(tape.value(c).shape(), (3, 128));
    let w = tape.leaf(Tensor::new(3, 128, (0..384).map(|i| i as f64).collect()).unwrap());
    let p = tape.mul(c, w).unwrap();
    let s = tape.sum(p).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(a).unwrap().get(1, 0), 128.0);
    assert_eq!(tape.grad(b).unwrap().get(1, 0), 192.0);
}

#[test]
fn masked_mean_uses_selected_rows_only() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::column(&[1.0, 10.0, 3.0, 100.0]));
    let m = tape.mean_rows(x, Some(&[1.0, 0.0, 1.0, 0.0])).unwrap();
    assert_eq!(tape.value(m).item(), 2.0);
    let v = tape.var_rows(x, Some(&[1.0, 0.0, 1.0, 0.0])).unwrap();
    assert_eq!(tape.value(v).item(), 1.0);
    assert!(tape.mean_rows(x, Some(&[0.0; 4])).is_err());
}

#[test]
fn identity_graph_has_unit_gradient() {
    let mut store = ParameterStore::new();
    store.insert("x", Tensor::scalar(0.37)).unwrap();
    let mut tape = Tape::new();
    let x = tape.param(&store, "x").unwrap();
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 1.0);
}

#[test]
fn every_primitive_matches_central_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        store.insert("x", rand_tensor(&mut rng, 5, 4, 2.0)).unwrap();
        store.insert("w", rand_tensor(&mut rng, 4, 3, 1.0)).unwrap();
        store.insert("b", rand_tensor(&mut rng, 1, 3, 1.0)).unwrap();
        store.insert("slope", rand_tensor(&mut rng, 1, 3, 0.5)).unwrap();
        store.insert("pos", rand_tensor(&mut rng, 5, 4, 1.0).map(|v| v.abs() + 0.5)).unwrap();
        store.insert("table", rand_tensor(&mut rng, 7, 4, 1.0)).unwrap();
        store.insert("scores", rand_tensor(&mut rng, 2, 3, 2.0)).unwrap();
        store.insert("values", rand_tensor(&mut rng, 6, 4, 1.0)).unwrap();
        store.insert("logit", rand_tensor(&mut rng, 6, 1, 2.0)).unwrap();
        let ids: Vec<usize> = (0..5).map(|_| rng.random_range(0..7)).collect();
        let targets: Vec<f64> = (0..6).map(|_| rng.random_range(0..2) as f64).collect();
        let weights: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..3.0)).collect();
        let mask = [1.0, 0.0, 1.0, 1.0, 0.0];

        let graphs: Vec<(&str, Box<dyn Fn(&mut Tape, &ParameterStore) -> Result<Var>>)> = vec![
            (
                "affine+relu",
                Box::new(move |t, s| {
                    let x = t.param(s, "x")?;
                    let w = t.param(s, "w")?;
                    let b = t.param(s, "b")?;
                    let h = t.affine(x, w, b)?;
                    let h = t.relu(h)?;
                    contract(t, h, seed)
                }),
            ),
            (
                "affine+prelu",
                Box::new(move |t, s| {
                    let x = t.param(s, "x")?;
                    let w = t.param(s, "w")?;
                    let b = t.param(s, "b")?;
                    let sl = t.param(s, "slope")?;
                    let h = t.affine(x, w, b)?;
                    let h = t.prelu(h, sl)?;
                    contract(t, h, seed)
                }),
            ),
            (
                "sigmoid+elementwise",
                Box::new(move |t, s| {
                    let x = t.param(s, "x")?;
                    let p = t.param(s, "pos")?;
                    let a = t.sigmoid(x)?;
                    let m = t.mul(a, p)?;
                    let d = t.div(m, p)?;
                    let d = t.div(d, p)?;
                    let q = t.sub(d, x)?;
                    let q = t.add_scalar(q, 0.3)?;
                    let q = t.square(q)?;
                    let l = t.log(p)?;
                    let r = t.sqrt(p)?;
                    let o = t.add(q, l)?;
                    let o = t.add(o, r)?;
                    let o = t.scale(o, -0.7)?;
                    contract(t, o, seed)
                }),
            ),
            (
                "broadcast",
                Box::new(move |t, s| {
                    let x = t.param(s, "x")?;
                    let p = t.param(s, "pos")?;
                    let mu = t.mean_rows(x, None)?;
                    let c = t.sub(x, mu)?;
                    let col = t.gather_rows(p, &[0, 1, 2, 3, 4])?;
                    let col = t.reshape(col, 20, 1)?;
                    let col = t.gather_rows(col, &[0, 1, 2, 3, 4])?;
                    let o = t.mul(c, col)?;
                    contract(t, o, seed)
                }),
            ),
            (
                "masked batch statistics",
                Box::new(move |t, s| {
                    let x = t.param(s, "x")?;
                    let mu = t.mean_rows(x, Some(&mask))?;
                    let var = t.var_rows(x, Some(&mask))?;
                    let v = t.add_scalar(var, 1e-3)?;
                    let sd = t.sqrt(v)?;
                    let c = t.sub(x, mu)?;
                    let n = t.div(c, sd)?;
                    contract(t, n, seed)
                }),
            ),
            (
                "embedding+concat+rows",
                Box::new({
                    let ids = ids.clone();
                    move |t, s| {
                        let tab = t.param(s, "table")?;
                        let e = t.embedding_gather(tab, &ids)?;
                        let x = t.param(s, "x")?;
                        let c = t.concat(&[e, x])?;
                        let top = t.gather_rows(c, &[3, 4])?;
                        let rest = t.gather_rows(c, &[0, 1, 2])?;
                        let back = t.assemble_rows(&[(rest, vec![0, 2, 4]), (top, vec![1, 3])], 5)?;
                        let both = t.concat_rows(&[back, top])?;
                        contract(t, both, seed)
                    }
                }),
            ),
            (
                "masked softmax attention",
                Box::new(move |t, s| {
                    let sc = t.param(s, "scores")?;
                    let valid = [true, false, true, false, false, false];
                    let w = t.masked_softmax(sc, &valid)?;
                    let v = t.param(s, "values")?;
                    let o = t.segment_weighted_sum(v, w)?;
                    contract(t, o, seed)
                }),
            ),
            (
                "pearson penalty",
                Box::new(move |t, s| {
                    let x = t.param(s, "x")?;
                    let w = t.param(s, "w")?;
                    let q = t.matmul(x, w)?;
                    let q = t.sigmoid(q)?;
                    t.pearson_pairwise_penalty(x, q, 1e-8)
                }),
            ),
            (
                "weighted bce",
                Box::new({
                    let targets = targets.clone();
                    let weights = weights.clone();
                    move |t, s| {
                        let l = t.param(s, "logit")?;
                        let p = t.sigmoid(l)?;
                        let a = t.binary_cross_entropy(p, &targets, Some(&weights), Reduction::Sum)?;
                        let b = t.binary_cross_entropy(p, &targets, None, Reduction::Mean)?;
                        t.add(a, b)
                    }
                }),
            ),
        ];

        for (name, g) in &graphs {
            let err = check(&store, g.as_ref());
            assert!(err < TOL, "{name} seed {seed}: max rel err {err:e}");
        }
    }
}

#[test]
fn grl_forward_is_bitwise_identity_and_backward_is_exact() {
    let input = [0.3, -1.2];
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::row(&input));
    let y = tape.grl(x, 0.1).unwrap();
    assert_eq!(tape.value(y).data(), &input);
    let up = tape.leaf(Tensor::row(&[1.0, 2.0]));
    let p = tape.mul(y, up).unwrap();
    let s = tape.sum(p).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[-0.1 * 1.0, -0.1 * 2.0]);
    assert_eq!(tape.grad(x).unwrap().data(), &[-0.1, -0.2]);
}

#[test]
fn grl_with_zero_alpha_detaches() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::row(&[0.3, -1.2]));
    let y = tape.grl(x, 0.0).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|g| *g == 0.0));
    let mut t2 = Tape::new();
    let x2 = t2.variable(Tensor::row(&[1.0]));
    assert!(t2.grl(x2, -0.5).is_err());
}

#[test]
fn grl_path_is_negated_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParameterStore::new();
    store.insert("x", rand_tensor(&mut rng, 4, 3, 1.0)).unwrap();
    store.insert("w", rand_tensor(&mut rng, 3, 1, 1.0)).unwrap();
    let graph = |alpha: Option<f64>| {
        move |t: &mut Tape, s: &ParameterStore| -> Result<Var> {
            let x = t.param(s, "x")?;
            let x = match alpha {
                Some(a) => t.grl(x, a)?,
                None => x,
            };
            let w = t.param(s, "w")?;
            let h = t.matmul(x, w)?;
            let h = t.sigmoid(h)?;
            t.binary_cross_entropy(h, &[1.0, 0.0, 1.0, 1.0], None, Reduction::Sum)
        }
    };
    // Finite differences see the forward identity, i.e. the un-reversed slope.
    let opts = GradCheckOptions::default();
    let plain = finite_difference_check(&store, graph(None), &opts).unwrap();
    assert!(plain.max_rel_error < TOL);

    let mut tape = Tape::new();
    let out = graph(Some(0.1))(&mut tape, &store).unwrap();
    tape.backward(out).unwrap();
    let reversed = tape.param_grad("x").unwrap().clone();
    let mut probe = store.clone();
    for idx in 0..reversed.len() {
        let orig = store.value("x").unwrap().data()[idx];
        let mut f = |v: f64| {
            probe.value_mut("x").unwrap().data_mut()[idx] = v;
            let mut t = Tape::new();
            let o = graph(Some(0.1))(&mut t, &probe).unwrap();
            t.value(o).item()
        };
        let numeric = (f(orig + 1e-5) - f(orig - 1e-5)) / 2e-5;
        f(orig);
        let negated = -0.1 * numeric;
        let rel = (reversed.data()[idx] - negated).abs() / negated.abs().max(1e-6);
        assert!(rel < TOL, "entry {idx}: {} vs {}", reversed.data()[idx], negated);
    }
    // The parameter after the reversal is unaffected.
    let w_plain = {
        let mut t = Tape::new();
        let o = graph(None)(&mut t, &store).unwrap();
        t.backward(o).unwrap();
        t.param_grad("w").unwrap().clone()
    };
    assert_eq!(tape.param_grad("w").unwrap(), &w_plain);
}

#[test]
fn bce_reference_values() {
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::row(&[0.5]));
    let l = tape.binary_cross_entropy(p, &[1.0], None, Reduction::Sum).unwrap();
    assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

    let p2 = tape.leaf(Tensor::row(&[0.5, 0.5]));
    let l2 = tape.binary_cross_entropy(p2, &[1.0, 0.0], None, Reduction::Sum).unwrap();
    assert!((tape.value(l2).item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);

    let p3 = tape.leaf(Tensor::row(&[1.0 - 1e-12]));
    let l3 = tape.binary_cross_entropy(p3, &[1.0], None, Reduction::Sum).unwrap();
    assert!(tape.value(l3).item() < 1e-6);

    let bad = tape.binary_cross_entropy(p, &[0.5], None, Reduction::Sum);
    assert!(matches!(bad, Err(DiffError::InvalidArgument { .. })));
}

#[test]
fn unit_weights_equal_unweighted_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let preds = rand_tensor(&mut rng, 50, 1, 1.0).map(|x| 0.5 + 0.45 * x);
    let targets: Vec<f64> = (0..50).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let mut tape = Tape::new();
    let p = tape.leaf(preds);
    let a = tape.binary_cross_entropy(p, &targets, None, Reduction::Sum).unwrap();
    let b = tape.binary_cross_entropy(p, &targets, Some(&[1.0; 50]), Reduction::Sum).unwrap();
    assert!((tape.value(a).item() - tape.value(b).item()).abs() < 1e-12);
}

#[test]
fn non_finite_values_halt_with_diagnostics() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::row(&[1.0, -1.0]));
    match tape.log(x) {
        Err(DiffError::NonFinite { op, index, .. }) => {
            assert_eq!(op, "log");
            assert_eq!(index, 1);
        }
        other => panic!("expected NonFinite, got {:?}", other.map(|v| v.index())),
    }
}

#[test]
fn shape_mismatches_are_rejected() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(2, 3));
    let b = tape.leaf(Tensor::zeros(2, 3));
    let c = tape.leaf(Tensor::zeros(3, 2));
    assert!(matches!(tape.matmul(a, b), Err(DiffError::ShapeMismatch { .. })));
    assert!(tape.add(a, c).is_err());
    assert!(tape.concat(&[a, c]).is_err());
    let one = tape.leaf(Tensor::zeros(1, 3));
    assert!(tape.pearson_pairwise_penalty(one, one, 0.0).is_err());
    assert!(tape.backward(a).is_err());
}

#[test]
fn backward_visits_ops_in_reverse_and_accumulates() {
    // x used twice: gradients from both uses add up.
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::row(&[3.0]));
    let y = tape.mul(x, x).unwrap();
    let z = tape.add(y, x).unwrap();
    let s = tape.sum(z).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 7.0);
    // A second backward starts from clean gradients.
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 7.0);
}

#[test]
fn empty_sequence_softmax_is_all_zero() {
    let mut tape = Tape::new();
    let s = tape.leaf(Tensor::new(2, 2, vec![0.3, 0.1, 5.0, 2.0]).unwrap());
    let w = tape.masked_softmax(s, &[false, false, true, false]).unwrap();
    assert_eq!(tape.value(w).data(), &[0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn adam_reduces_loss_on_separable_problem() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 64;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for _ in 0..n {
        let a: f64 = rng.random_range(-1.0..1.0);
        let b: f64 = rng.random_range(-1.0..1.0);
        xs.extend([a, b]);
        ys.push(if a + 0.5 * b > 0.0 { 1.0 } else { 0.0 });
    }
    let x = Tensor::new(n, 2, xs).unwrap();
    let mut store = ParameterStore::new();
    store.insert("w", Tensor::zeros(2, 1)).unwrap();
    store.insert("b", Tensor::zeros(1, 1)).unwrap();
    let cfg = AdamConfig {
        lr: 0.05,
        ..AdamConfig::default()
    };
    let mut losses = Vec::new();
    for _ in 0..50 {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let w = tape.param(&store, "w").unwrap();
        let b = tape.param(&store, "b").unwrap();
        let h = tape.affine(xv, w, b).unwrap();
        let p = tape.sigmoid(h).unwrap();
        let l = tape.binary_cross_entropy(p, &ys, None, Reduction::Mean).unwrap();
        losses.push(tape.value(l).item());
        tape.backward(l).unwrap();
        store.accumulate_grads(&tape).unwrap();
        store.adam_step(&cfg).unwrap();
    }
    assert!(losses[49] < 0.5 * losses[0], "{losses:?}");
    assert!(losses.windows(10).all(|w| w[9] < w[0]));
}

#[test]
fn surrogate_check_covers_reversal_and_detach() {
    let mut store = ParameterStore::new();
    store.insert("w", Tensor::new(1, 3, vec![0.3, -0.7, 1.1]).unwrap()).unwrap();
    let w0 = store.value("w").unwrap().clone();
    let build = |t: &mut Tape, s: &ParameterStore| -> Result<Var> {
        let w = t.param(s, "w")?;
        let r = t.grl(w, 0.5)?;
        let sq = t.square(r)?;
        let a = t.sum(sq)?;
        let frozen = t.leaf(t.value(w).clone());
        let prod = t.mul(frozen, w)?;
        let prod = t.scale(prod, 3.0)?;
        let b = t.sum(prod)?;
        t.add(a, b)
    };
    let surrogate = |s: &ParameterStore| -> Result<NumericEval> {
        let w = s.value("w").unwrap().data();
        Ok(NumericEval {
            terms: w.iter().zip(w0.data()).map(|(x, x0)| -0.5 * x * x + 3.0 * x0 * x).collect(),
            pattern: vec![],
        })
    };
    let report = check_gradients(&store, build, surrogate, &GradCheckOptions::default()).unwrap();
    assert_eq!(report.entries_checked, 3);
    assert!(report.passes(1e-6), "{report:?}");
    let wrong = |s: &ParameterStore| -> Result<NumericEval> {
        let w = s.value("w").unwrap().data();
        Ok(NumericEval {
            terms: vec![w.iter().map(|x| 0.5 * x * x + 3.0 * x * x).sum()],
            pattern: vec![],
        })
    };
    assert!(!check_gradients(&store, build, wrong, &GradCheckOptions::default()).unwrap().passes(1e-3));
}

#[test]
fn steps_across_a_relu_kink_are_set_aside() {
    let mut store = ParameterStore::new();
    store.insert("w", Tensor::new(1, 3, vec![2e-6, 0.5, -0.3]).unwrap()).unwrap();
    let build = |t: &mut Tape, s: &ParameterStore| -> Result<Var> {
        let w = t.param(s, "w")?;
        let r = t.relu(w)?;
        let sq = t.square(r)?;
        let lin = t.sum(r)?;
        let quad = t.sum(sq)?;
        t.add(lin, quad)
    };
    let report = finite_difference_check(&store, build, &GradCheckOptions::default()).unwrap();
    assert_eq!(report.kinks_skipped, 1);
    assert_eq!(report.entries_checked, 2);
    assert!(report.passes(1e-6), "{report:?}");

    let mut tape = Tape::new();
    let w = tape.param(&store, "w").unwrap();
    tape.relu(w).unwrap();
    assert_eq!(tape.activation_pattern(), vec![true, true, false]);
}
