#![allow(dead_code)]

use hybridcast::ndgrad::{relative_error, Tensor, Var, FD_STEP};
use hybridcast::nn::{ParamId, ParamStore, Session};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound))
}

/// Worst relative error between session gradients of the scalar `f` and
/// central differences, over every entry of every parameter in `store`.
pub fn param_grad_error(store: &mut ParamStore, f: impl Fn(&mut Session) -> Var) -> f64 {
    let grads = {
        let mut sess = Session::new(store, true);
        let loss = f(&mut sess);
        sess.backward(loss).unwrap();
        sess.param_grads()
    };
    let eval = |store: &ParamStore| {
        let mut sess = Session::new(store, false);
        let loss = f(&mut sess);
        sess.value(loss).item()
    };
    let mut worst = 0.0f64;
    for (id, g) in grads {
        for j in 0..g.len() {
            worst = worst.max(fd_entry(store, id, j, g.data()[j], &eval));
        }
    }
    worst
}

pub fn fd_entry(store: &mut ParamStore, id: ParamId, j: usize, analytic: f64, eval: &impl Fn(&ParamStore) -> f64) -> f64 {
    let orig = store.value(id).data()[j];
    store.value_mut(id).data_mut()[j] = orig + FD_STEP;
    let up = eval(store);
    store.value_mut(id).data_mut()[j] = orig - FD_STEP;
    let down = eval(store);
    store.value_mut(id).data_mut()[j] = orig;
    relative_error(analytic, (up - down) / (2.0 * FD_STEP))
}

/// `sum(y * w)` for a fixed random `w`, so every output entry matters.
pub fn probe_loss(sess: &mut Session, y: Var, seed: u64) -> Var {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = sess.tape.shape(y).to_vec();
    let w = sess.constant(uniform(&mut rng, &shape, 1.0));
    let p = sess.tape.mul(y, w).unwrap();
    sess.tape.sum_all(p)
}

use hybridcast::model::{Model, ModelConfig};

/// Smallest configuration exercising every stage.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        channels: 2,
        lookback: 16,
        horizon: 4,
        width: 4,
        heads: 1,
        patch_sizes: vec![2, 4, 8, 16],
        trend_kernels: vec![3, 5],
        k_freq: 3,
        batch_size: 4,
        ..ModelConfig::default()
    }
}

/// Finite-difference check of the total loss on `samples` parameter entries
/// drawn uniformly over all scalars, with the parameters jittered off their
/// initial values so that no branch is silenced by a zero init. Returns the
/// worst relative error.
pub fn model_fd_check(seed: u64, samples: usize) -> f64 {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig { soft_load: true, seed, ..micro_config() };
    let mut model = Model::new(cfg).unwrap();
    for id in model.store.ids().collect::<Vec<_>>() {
        for v in model.store.value_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let x = uniform(&mut rng, &[3, 2, 16], 2.0);
    let y = uniform(&mut rng, &[3, 2, 4], 2.0);
    let grads = {
        let mut sess = Session::new(&model.store, true);
        let pass = model.forward(&mut sess, &x, None).unwrap();
        let loss = model.loss(&mut sess, &pass, &y).unwrap();
        sess.backward(loss.total).unwrap();
        sess.param_grads()
    };
    let offsets: Vec<usize> = grads.iter().scan(0, |acc, (_, g)| {
        let o = *acc;
        *acc += g.len();
        Some(o)
    }).collect();
    let total: usize = grads.iter().map(|(_, g)| g.len()).sum();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let flat = rng.random_range(0..total);
        let i = offsets.partition_point(|&o| o <= flat) - 1;
        let (id, g) = &grads[i];
        let j = flat - offsets[i];
        let orig = model.store.value(*id).data()[j];
        model.store.value_mut(*id).data_mut()[j] = orig + FD_STEP;
        let up = model.loss_value(&x, &y).unwrap();
        model.store.value_mut(*id).data_mut()[j] = orig - FD_STEP;
        let down = model.loss_value(&x, &y).unwrap();
        model.store.value_mut(*id).data_mut()[j] = orig;
        worst = worst.max(relative_error(g.data()[j], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}
