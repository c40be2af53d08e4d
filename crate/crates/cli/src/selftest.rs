//! Built-in invariant checks: gradient checks, round trips and gate contracts.

use std::time::Instant;

use hybridcast::decomp::{dft, ema_decompose, freq_seasonal, idft, instance_normalize, denormalize, EmaConfig};
use hybridcast::experts::partition;
use hybridcast::gating::{balance_loss, combine, dispatch, topk_gate_from_logits, GateDecision};
use hybridcast::model::{Model, ModelConfig};
use hybridcast::ndgrad::{check_gradients, relative_error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Check {
    name: &'static str,
    run: fn(&mut ChaCha8Rng, bool) -> Result<(), String>,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-2.0..2.0))
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ema_identity(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let cfg = EmaConfig::new(0.3).map_err(|e| e.to_string())?;
    for _ in 0..50 {
        let x = random(rng, &[2, 3, 48]);
        let (s, t) = ema_decompose(&x, cfg);
        let err = s.zip_map(&t, |a, b| a + b).unwrap().max_abs_diff(&x);
        ensure(err < 1e-9, || format!("reconstruction error {err:e}"))?;
    }
    Ok(())
}

fn dft_round_trip(rng: &mut ChaCha8Rng, fault: bool) -> Result<(), String> {
    for l in [1, 2, 7, 32, 50, 336] {
        let x = random(rng, &[l]);
        let mut s = dft(&x);
        if fault {
            s.bins[0].re += 1e-3;
        }
        let err = idft(&s).max_abs_diff(&x);
        ensure(err < 1e-9, || format!("L={l}: round trip error {err:e}"))?;
    }
    Ok(())
}

fn top1_recovery(_: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let x = Tensor::from_fn([64], |i| 1.3 * (2.0 * std::f64::consts::PI * 5.0 * i[0] as f64 / 64.0 + 0.4).sin());
    let y = freq_seasonal(&x, 1).map_err(|e| e.to_string())?;
    let err = y.max_abs_diff(&x);
    ensure(err < 1e-8, || format!("residual {err:e}"))
}

fn norm_round_trip(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let x = random(rng, &[4, 3, 20]).map(|v| 10.0 * v + 3.0);
    let (n, stats) = instance_normalize(&x).map_err(|e| e.to_string())?;
    let err = denormalize(&n, &stats).max_abs_diff(&x);
    ensure(err < 1e-9, || format!("round trip error {err:e}"))
}

fn random_decision(rng: &mut ChaCha8Rng, b: usize, e: usize, k: usize) -> GateDecision {
    let logits = random(rng, &[b, e]);
    topk_gate_from_logits(&logits, &logits, k).expect("valid k")
}

fn gate_contract(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    for _ in 0..200 {
        let k = rng.random_range(1..=4);
        let d = random_decision(rng, 16, 4, k);
        for row in d.gates.data().chunks(4) {
            let nz = row.iter().filter(|g| **g != 0.0).count();
            let sum: f64 = row.iter().sum();
            ensure(nz == k && (sum - 1.0).abs() < 1e-9, || format!("row {row:?} for k={k}"))?;
        }
    }
    Ok(())
}

fn combine_dense(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let d = random_decision(rng, 6, 4, 2);
    let outs: Vec<Tensor> = (0..4).map(|_| random(rng, &[6, 3])).collect();
    let parts = dispatch(&Tensor::zeros([6, 3]), &d).map_err(|e| e.to_string())?;
    let routed: Vec<Option<Tensor>> = parts
        .iter()
        .enumerate()
        .map(|(e, p)| {
            p.as_ref().map(|_| {
                let rows: Vec<Tensor> = (0..6).filter(|b| d.topk_indices[*b].contains(&e)).map(|b| outs[e].row(b)).collect();
                Tensor::stack(&rows).unwrap()
            })
        })
        .collect();
    let got = combine(&routed, &d).map_err(|e| e.to_string())?;
    let dense = Tensor::from_fn([6, 3], |i| (0..4).map(|e| d.gates.at(&[i[0], e]) * outs[e].at(i)).sum());
    let err = got.max_abs_diff(&dense);
    ensure(err < 1e-10, || format!("combine differs from dense mixing by {err:e}"))
}

fn balance_oracle(_: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let d = GateDecision {
        gates: Tensor::new([2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap(),
        topk_indices: vec![vec![1], vec![1]],
        load: vec![0.0, 2.0],
        raw_logits: Tensor::zeros([2, 2]),
    };
    let v = balance_loss(&d);
    ensure((v - 2.0).abs() < 1e-9, || format!("skewed case gives {v}"))?;
    let u = GateDecision {
        gates: Tensor::full([4, 4], 0.25),
        topk_indices: vec![vec![0, 1, 2, 3]; 4],
        load: vec![4.0; 4],
        raw_logits: Tensor::zeros([4, 4]),
    };
    ensure(balance_loss(&u) == 0.0, || "uniform case is nonzero".into())
}

fn primitive_gradients(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let inputs = [random(rng, &[3, 4]), random(rng, &[4, 2])];
    let r = check_gradients(&inputs, |t, v| {
        let m = t.matmul(v[0], v[1])?;
        let g = t.gelu(m);
        let s = t.softmax(g, 1)?;
        let l = t.layer_norm(s, 1e-5);
        let sq = t.mul(l, m)?;
        Ok(t.sum_all(sq))
    })
    .map_err(|e| e.to_string())?;
    ensure(r.max_rel_err < 1e-4, || format!("max relative error {:e}", r.max_rel_err))
}

fn model_gradients(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let cfg = ModelConfig {
        channels: 2,
        lookback: 16,
        horizon: 4,
        width: 4,
        heads: 1,
        patch_sizes: vec![2, 4, 8, 16],
        trend_kernels: vec![3, 5],
        k_freq: 3,
        soft_load: true,
        ..ModelConfig::default()
    };
    let mut model = Model::new(cfg).map_err(|e| e.to_string())?;
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for v in model.store.value_mut(id).data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let x = random(rng, &[3, 2, 16]);
    let y = random(rng, &[3, 2, 4]);
    let mut sess = hybridcast::nn::Session::new(&model.store, true);
    let pass = model.forward(&mut sess, &x, None).map_err(|e| e.to_string())?;
    let loss = model.loss(&mut sess, &pass, &y).map_err(|e| e.to_string())?;
    sess.backward(loss.total).map_err(|e| e.to_string())?;
    let grads = sess.param_grads();
    drop(sess);
    for _ in 0..5 {
        let (id, g) = &grads[rng.random_range(0..grads.len())];
        let j = rng.random_range(0..g.len());
        let orig = model.store.value(*id).data()[j];
        let h = 1e-5;
        model.store.value_mut(*id).data_mut()[j] = orig + h;
        let up = model.loss_value(&x, &y).map_err(|e| e.to_string())?;
        model.store.value_mut(*id).data_mut()[j] = orig - h;
        let down = model.loss_value(&x, &y).map_err(|e| e.to_string())?;
        model.store.value_mut(*id).data_mut()[j] = orig;
        let err = relative_error(g.data()[j], (up - down) / (2.0 * h));
        ensure(err < 1e-3, || format!("{}[{j}]: relative error {err:e}", model.store.name(*id)))?;
    }
    Ok(())
}

fn patch_round_trip(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    for (l, p) in [(12, 4), (10, 4), (48, 24), (7, 7), (9, 2)] {
        let x = random(rng, &[2, 3, l]);
        let ps = partition(&x, p).map_err(|e| e.to_string())?;
        ensure(ps.unpartition() == x, || format!("L={l} p={p} does not round trip"))?;
    }
    Ok(())
}

const CHECKS: [Check; 10] = [
    Check { name: "ema decomposition identity", run: ema_identity },
    Check { name: "dft round trip", run: dft_round_trip },
    Check { name: "top-1 frequency recovery", run: top1_recovery },
    Check { name: "instance norm round trip", run: norm_round_trip },
    Check { name: "gate support and mass", run: gate_contract },
    Check { name: "combine vs dense mixing", run: combine_dense },
    Check { name: "balance loss oracle", run: balance_oracle },
    Check { name: "primitive gradients", run: primitive_gradients },
    Check { name: "model gradients", run: model_gradients },
    Check { name: "patch round trip", run: patch_round_trip },
];

/// Prints one line per check; returns whether all passed.
pub fn run(inject_fault: bool) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ok = true;
    let start = Instant::now();
    println!("{:<30} {:<6} detail", "check", "result");
    for c in CHECKS {
        let t = Instant::now();
        let res = (c.run)(&mut rng, inject_fault);
        let status = if res.is_ok() { "PASS" } else { "FAIL" };
        let detail = res.as_ref().err().cloned().unwrap_or_else(|| format!("{:.2?}", t.elapsed()));
        println!("{:<30} {status:<6} {detail}", c.name);
        ok &= res.is_ok();
    }
    println!("{} in {:.2?}", if ok { "all checks passed" } else { "some checks failed" }, start.elapsed());
    ok
}
