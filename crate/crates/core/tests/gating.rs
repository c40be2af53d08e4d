use hybridcast::gating::{
    balance_loss, combine, cov, dispatch, topk_gate_from_logits, DispatchPlan, GateDecision, LoadEstimate, NoisyTopKGate,
};
use hybridcast::ndgrad::{check_gradients_at, Tensor};
use hybridcast::nn::{ParamStore, Session};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn decide(logits: &[f64], e: usize, k: usize) -> GateDecision {
    let t = Tensor::new([logits.len() / e, e], logits.to_vec()).unwrap();
    topk_gate_from_logits(&t, &t, k).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-2.0..2.0))
}

/// All experts on all rows, then gate-weighted.
fn dense_mix(outputs: &[Tensor], gates: &Tensor) -> Tensor {
    let (b, e) = (gates.shape()[0], gates.shape()[1]);
    let width = outputs[0].len() / b;
    let mut out = vec![0.0; b * width];
    for r in 0..b {
        for (j, o) in outputs.iter().enumerate().take(e) {
            let g = gates.at(&[r, j]);
            for c in 0..width {
                out[r * width + c] += g * o.data()[r * width + c];
            }
        }
    }
    Tensor::new(outputs[0].shape().to_vec(), out).unwrap()
}

fn routed(outputs: &[Tensor], d: &GateDecision) -> Vec<Option<Tensor>> {
    let plan = DispatchPlan::new(d);
    outputs
        .iter()
        .zip(&plan.rows)
        .map(|(o, rows)| {
            (!rows.is_empty()).then(|| Tensor::stack(&rows.iter().map(|&r| o.row(r)).collect::<Vec<_>>()).unwrap())
        })
        .collect()
}

#[test]
fn pair_softmax_example() {
    let d = decide(&[2.0, 1.0, 0.0, -1.0], 4, 2);
    let g = d.gates.data();
    assert!((g[0] - 0.731058578630005).abs() < 1e-9);
    assert!((g[1] - 0.268941421369995).abs() < 1e-9);
    assert_eq!(&g[2..], &[0.0, 0.0]);
    assert_eq!(d.topk_indices, vec![vec![0, 1]]);
}

#[test]
fn equal_logits_are_uniform() {
    let d = decide(&[0.3; 4], 4, 4);
    assert!(d.gates.data().iter().all(|g| (g - 0.25).abs() < 1e-15));
}

#[test]
fn ties_go_to_lower_index() {
    let d = decide(&[1.0, 3.0, 3.0, 3.0], 4, 2);
    assert_eq!(d.topk_indices, vec![vec![1, 2]]);
}

#[test]
fn top1_selects_argmax_expert_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = decide(&[0.1, 0.9, -0.3, 0.2, 1.5, 0.0, 0.0, 0.0], 4, 1);
    assert_eq!(d.gates.data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    let outs: Vec<Tensor> = (0..4).map(|_| uniform(&mut rng, &[2, 3])).collect();
    let y = combine(&routed(&outs, &d), &d).unwrap();
    assert_eq!(y.row(0), outs[1].row(0));
    assert_eq!(y.row(1), outs[0].row(1));
}

#[test]
fn dispatch_bookkeeping() {
    let d = GateDecision {
        gates: Tensor::new([3, 4], vec![0., 1., 0., 0., 0., 1., 0., 0., 0., 0., 0., 1.]).unwrap(),
        topk_indices: vec![vec![1], vec![1], vec![3]],
        load: vec![0.0, 2.0, 0.0, 1.0],
        raw_logits: Tensor::zeros([3, 4]),
    };
    assert_eq!(DispatchPlan::new(&d).rows, vec![vec![], vec![0, 1], vec![], vec![2]]);
    let x = Tensor::from_fn([3, 2], |i| (10 * i[0] + i[1]) as f64);
    let parts = dispatch(&x, &d).unwrap();
    assert!(parts[0].is_none() && parts[2].is_none());
    assert_eq!(parts[1].as_ref().unwrap().data(), &[0.0, 1.0, 10.0, 11.0]);
    assert_eq!(parts[3].as_ref().unwrap().data(), &[20.0, 21.0]);
}

#[test]
fn dense_routing_sends_full_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = uniform(&mut rng, &[5, 4]);
    let d = topk_gate_from_logits(&logits, &logits, 4).unwrap();
    let x = uniform(&mut rng, &[5, 3]);
    for p in dispatch(&x, &d).unwrap() {
        assert_eq!(p.unwrap(), x);
    }
}

#[test]
fn equal_outputs_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = uniform(&mut rng, &[6, 4]);
    let d = topk_gate_from_logits(&logits, &logits, 2).unwrap();
    let x = uniform(&mut rng, &[6, 5]);
    let parts = dispatch(&x, &d).unwrap();
    let y = combine(&parts, &d).unwrap();
    assert!(y.max_abs_diff(&x) < 1e-12);
}

#[test]
fn combine_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let outs: Vec<Tensor> = (0..4).map(|_| uniform(&mut rng, &[1, 3])).collect();
    let one_hot = GateDecision {
        gates: Tensor::new([1, 4], vec![0.0, 1.0, 0.0, 0.0]).unwrap(),
        topk_indices: vec![vec![1]],
        load: vec![0.0, 1.0, 0.0, 0.0],
        raw_logits: Tensor::zeros([1, 4]),
    };
    assert_eq!(combine(&routed(&outs, &one_hot), &one_hot).unwrap(), outs[1]);
    let half = GateDecision {
        gates: Tensor::new([1, 4], vec![0.5, 0.5, 0.0, 0.0]).unwrap(),
        topk_indices: vec![vec![0, 1]],
        load: vec![1.0, 1.0, 0.0, 0.0],
        raw_logits: Tensor::zeros([1, 4]),
    };
    let want = outs[0].zip_map(&outs[1], |u, v| 0.5 * u + 0.5 * v).unwrap();
    assert!(combine(&routed(&outs, &half), &half).unwrap().max_abs_diff(&want) < 1e-15);
}

#[test]
fn balance_oracles() {
    let uniform = decide(&[0.0; 16], 4, 4);
    assert_eq!(balance_loss(&uniform), 0.0);
    let skewed = GateDecision {
        gates: Tensor::new([2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap(),
        topk_indices: vec![vec![1], vec![1]],
        load: vec![0.0, 2.0],
        raw_logits: Tensor::zeros([2, 2]),
    };
    assert_eq!(skewed.gate_sums(), vec![0.0, 2.0]);
    assert!((balance_loss(&skewed) - 2.0).abs() < 1e-9);
    assert!((cov(&[0.0, 2.0]) - 1.0).abs() < 1e-9);
}

#[test]
fn gate_rejects_bad_k_and_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    assert!(NoisyTopKGate::new(&mut store, 3, 4, 0, &mut rng).is_err());
    assert!(NoisyTopKGate::new(&mut store, 3, 4, 5, &mut rng).is_err());
    let t = Tensor::zeros([4]);
    assert!(topk_gate_from_logits(&t, &t, 1).is_err());
}

fn skewed_gate(rng: &mut ChaCha8Rng) -> (ParamStore, NoisyTopKGate, Tensor) {
    let mut store = ParamStore::new();
    let gate = NoisyTopKGate::new(&mut store, 3, 4, 2, rng).unwrap();
    store.set(gate.w_gate, Tensor::new([3, 4], vec![2.0, 1.0, 0.0, 0.1, 1.5, 0.8, 0.2, 0.0, 1.0, 0.9, 0.1, 0.3]).unwrap()).unwrap();
    let x = Tensor::from_fn([16, 3], |_| rng.random_range(0.0..1.0));
    (store, gate, x)
}

#[test]
fn balance_step_reduces_gate_mass_cov() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut store, gate, x) = skewed_gate(&mut rng);
    let before = cov(&gate.evaluate(&store, &x, None).unwrap().gate_sums());
    let grad = {
        let mut sess = Session::new(&store, true);
        let f = sess.constant(x.clone());
        let out = gate.forward(&mut sess, f, None).unwrap();
        let loss = out.balance_loss(&mut sess.tape).unwrap();
        sess.backward(loss).unwrap();
        sess.param_grads().into_iter().find(|(id, _)| *id == gate.w_gate).unwrap().1
    };
    let w = store.value(gate.w_gate).zip_map(&grad, |w, g| w - 1e-2 * g).unwrap();
    store.set(gate.w_gate, w).unwrap();
    let after = cov(&gate.evaluate(&store, &x, None).unwrap().gate_sums());
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn soft_load_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut store, mut gate, x) = skewed_gate(&mut rng);
    gate.load_estimate = LoadEstimate::Soft;
    let w = store.value(gate.w_gate).clone();
    let entries: Vec<(usize, usize)> = (0..12).map(|j| (0, j)).collect();
    let r = check_gradients_at(&[w], &entries, |t, v| {
        let f = t.constant(x.clone());
        let logits = t.matmul(f, v[0])?;
        let d = topk_gate_from_logits(t.value(logits), t.value(logits), 2).unwrap();
        let mut mask = Tensor::full([16, 4], -1e30);
        for (r, sel) in d.topk_indices.iter().enumerate() {
            for &j in sel {
                mask.set(&[r, j], 0.0);
            }
        }
        let m = t.constant(mask);
        let masked = t.add(logits, m)?;
        let gates = t.softmax(masked, 1)?;
        let g_sum = t.sum_axis(gates, 0, false)?;
        let probs = t.softmax(logits, 1)?;
        let load = t.sum_axis(probs, 0, false)?;
        let load = t.scale(load, 2.0);
        let a = t.cov(g_sum, 1e-10);
        let b = t.cov(load, 1e-10);
        t.add(a, b)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");

    // The gate's own tape agrees with the hand-built graph above.
    let mut sess = Session::new(&store, true);
    let f = sess.constant(x.clone());
    let out = gate.forward(&mut sess, f, None).unwrap();
    let loss = out.balance_loss(&mut sess.tape).unwrap();
    sess.backward(loss).unwrap();
    let g = sess.param_grads().into_iter().find(|(id, _)| *id == gate.w_gate).unwrap().1;
    drop(sess);
    let h = 1e-5;
    for j in 0..12 {
        let orig = store.value(gate.w_gate).data()[j];
        let eval = |store: &ParamStore| {
            let mut sess = Session::new(store, false);
            let f = sess.constant(x.clone());
            let out = gate.forward(&mut sess, f, None).unwrap();
            let l = out.balance_loss(&mut sess.tape).unwrap();
            sess.value(l).item()
        };
        store.value_mut(gate.w_gate).data_mut()[j] = orig + h;
        let up = eval(&store);
        store.value_mut(gate.w_gate).data_mut()[j] = orig - h;
        let down = eval(&store);
        store.value_mut(gate.w_gate).data_mut()[j] = orig;
        let num = (up - down) / (2.0 * h);
        assert!((num - g.data()[j]).abs() < 1e-6 * num.abs().max(1.0), "{j}: {} vs {num}", g.data()[j]);
    }
}

#[test]
fn straight_through_reports_hard_load() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (store, gate, x) = skewed_gate(&mut rng);
    let mut sess = Session::new(&store, true);
    let f = sess.constant(x);
    let out = gate.forward(&mut sess, f, None).unwrap();
    assert_eq!(sess.value(out.load).data(), &out.decision.load[..]);
    assert_eq!(out.decision.load.iter().sum::<f64>(), 32.0);
}

#[test]
fn noise_only_in_training_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut store, gate, x) = skewed_gate(&mut rng);
    let a = gate.evaluate(&store, &x, None).unwrap();
    let b = gate.evaluate(&store, &x, None).unwrap();
    assert_eq!(a, b);
    store.set(gate.w_noise, Tensor::full([3, 4], 3.0)).unwrap();
    let mut n1 = ChaCha8Rng::seed_from_u64(9);
    let mut n2 = ChaCha8Rng::seed_from_u64(9);
    let c = gate.evaluate(&store, &x, Some(&mut n1)).unwrap();
    let d = gate.evaluate(&store, &x, Some(&mut n2)).unwrap();
    assert_eq!(c, d);
    assert_ne!(c.gates, a.gates);
    assert_eq!(c.raw_logits, a.raw_logits);
}

#[test]
fn tape_combine_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let logits = uniform(&mut rng, &[5, 4]);
    let d = topk_gate_from_logits(&logits, &logits, 2).unwrap();
    let plan = DispatchPlan::new(&d);
    let inputs = [uniform(&mut rng, &[5, 3]), d.gates.clone()];
    let entries: Vec<(usize, usize)> = (0..15).map(|j| (0, j)).chain((0..20).map(|j| (1, j))).collect();
    let r = check_gradients_at(&inputs, &entries, |t, v| {
        let parts = plan.dispatch(t, v[0]).unwrap();
        let outs: Vec<_> = parts.into_iter().map(|p| p.map(|x| t.tanh(x))).collect();
        let y = plan.combine(t, &outs, v[1]).unwrap();
        let sq = t.mul(y, y)?;
        Ok(t.sum_all(sq))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn support_and_mass(logits in prop::collection::vec(-5.0..5.0f64, 8 * 4), k in 1usize..=4) {
        let d = decide(&logits, 4, k);
        for row in d.gates.data().chunks(4) {
            prop_assert_eq!(row.iter().filter(|g| **g != 0.0).count(), k);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        prop_assert_eq!(d.load.iter().sum::<f64>(), (8 * k) as f64);
    }

    #[test]
    fn combine_matches_dense(seed in 0u64..1000, k in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = uniform(&mut rng, &[7, 4]);
        let d = topk_gate_from_logits(&logits, &logits, k).unwrap();
        let outs: Vec<Tensor> = (0..4).map(|_| uniform(&mut rng, &[7, 2, 3])).collect();
        let got = combine(&routed(&outs, &d), &d).unwrap();
        prop_assert!(got.max_abs_diff(&dense_mix(&outs, &d.gates)) < 1e-10);
    }

    #[test]
    fn identity_experts_preserve_input(seed in 0u64..1000, k in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = uniform(&mut rng, &[6, 4]);
        let d = topk_gate_from_logits(&logits, &logits, k).unwrap();
        let x = uniform(&mut rng, &[6, 5]);
        let y = combine(&dispatch(&x, &d).unwrap(), &d).unwrap();
        prop_assert!(y.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn balance_is_relabeling_invariant(seed in 0u64..1000, perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = uniform(&mut rng, &[9, 4]);
        let permuted = Tensor::from_fn([9, 4], |i| logits.at(&[i[0], perm[i[1]]]));
        let a = topk_gate_from_logits(&logits, &logits, 2).unwrap();
        let b = topk_gate_from_logits(&permuted, &permuted, 2).unwrap();
        prop_assert!((balance_loss(&a) - balance_loss(&b)).abs() < 1e-12);
    }

    #[test]
    fn argmax_shift_invariant(logits in prop::collection::vec(-5.0..5.0f64, 4), c in -100.0..100.0f64) {
        let a = decide(&logits, 4, 2);
        let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
        let b = decide(&shifted, 4, 2);
        prop_assert_eq!(a.topk_indices[0][0], b.topk_indices[0][0]);
    }
}
