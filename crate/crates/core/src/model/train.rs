use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AdamW, Model};
use crate::dataio::WindowDataset;
use crate::ndgrad::Tensor;
use crate::nn::Session;
use crate::{Error, Result};

/// Stream offsets so batch order and gate noise never share a generator.
const SHUFFLE_STREAM: u64 = 0x5eed_0001;
const NOISE_STREAM: u64 = 0x5eed_0002;

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub train_mse: f64,
    pub balance: f64,
    pub val_mse: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    pub best_val_mse: Option<f64>,
    /// Step whose parameters were restored, when validation ran.
    pub best_step: Option<usize>,
    pub stopped_early: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HorizonMetrics {
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Debug)]
pub struct ForecastReport {
    /// `[N, M, T]` on the input scale.
    pub predictions: Tensor,
    pub mse: f64,
    pub mae: f64,
    /// Indexed by forecast step `0..T`.
    pub per_horizon: Vec<HorizonMetrics>,
    /// Share of total gate mass per expert; sums to 1.
    pub gate_utilization: Vec<f64>,
}

struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(len: usize, batch: usize, seed: u64) -> Self {
        let mut s = Self { order: (0..len).collect(), pos: len, batch: batch.min(len), rng: ChaCha8Rng::seed_from_u64(seed) };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.reshuffle();
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

/// Runs AdamW for `cfg.max_steps` steps (fewer on early stop). With a
/// non-empty validation set, the parameters of the best validation MSE are
/// restored at the end.
pub fn train(model: &mut Model, train: &WindowDataset, val: Option<&WindowDataset>) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::contract("training set holds no windows"));
    }
    let cfg = model.cfg.clone();
    let val = val.filter(|v| !v.is_empty());
    let mut sampler = BatchSampler::new(train.len(), cfg.batch_size, cfg.seed ^ SHUFFLE_STREAM);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ NOISE_STREAM);
    let mut opt = AdamW::new(&model.store, cfg.learning_rate, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.max_steps);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut stale = 0;
    let mut stopped_early = false;

    for step in 1..=cfg.max_steps {
        let (x, y) = train.batch(&sampler.next());
        let (grads, mse, balance) = {
            let mut sess = Session::new(&model.store, true);
            let pass = model.forward(&mut sess, &x, Some(&mut noise_rng))?;
            let parts = model.loss(&mut sess, &pass, &y)?;
            let total = sess.value(parts.total).item();
            if !total.is_finite() {
                let stage = Model::first_non_finite_stage(&sess, &pass).unwrap_or("loss");
                return Err(Error::NonFinite { step, stage: stage.to_string() });
            }
            sess.backward(parts.total)?;
            (sess.param_grads(), sess.value(parts.mse).item(), sess.value(parts.balance).item())
        };
        model.store.zero_grad();
        model.store.accumulate(grads);
        let norm = AdamW::clip_grad_norm(&mut model.store, cfg.grad_clip);
        if !norm.is_finite() {
            return Err(Error::NonFinite { step, stage: "backward".into() });
        }
        opt.step(&mut model.store);

        let mut row = HistoryRow { step, train_mse: mse, balance, val_mse: None };
        if let Some(val) = val {
            if step % cfg.eval_every == 0 || step == cfg.max_steps {
                let v = evaluate(model, val)?.mse;
                row.val_mse = Some(v);
                log::info!("step {step}: train_mse {mse:.6} val_mse {v:.6}");
                if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                    best = Some((v, step, model.store.snapshot()));
                    stale = 0;
                } else {
                    stale += 1;
                }
            }
        }
        history.push(row);
        if cfg.patience > 0 && stale >= cfg.patience {
            stopped_early = true;
            break;
        }
    }

    let (best_val_mse, best_step) = match best {
        Some((v, s, params)) => {
            model.store.restore(params);
            (Some(v), Some(s))
        }
        None => (None, None),
    };
    Ok(TrainOutcome { history, best_val_mse, best_step, stopped_early })
}

/// Overall and per-step MSE/MAE of `[N, M, T]` forecasts.
pub fn metrics(pred: &Tensor, target: &Tensor) -> Result<(f64, f64, Vec<HorizonMetrics>)> {
    if pred.shape() != target.shape() || pred.ndim() != 3 {
        return Err(Error::contract(format!("metrics need matching [N, M, T], got {:?} vs {:?}", pred.shape(), target.shape())));
    }
    let t = pred.shape()[2];
    let rows = pred.len() / t;
    let mut per = vec![(0.0, 0.0); t];
    for (p, y) in pred.data().chunks(t).zip(target.data().chunks(t)) {
        for h in 0..t {
            let e = p[h] - y[h];
            per[h].0 += e * e;
            per[h].1 += e.abs();
        }
    }
    let n = pred.len() as f64;
    let mse = per.iter().map(|v| v.0).sum::<f64>() / n;
    let mae = per.iter().map(|v| v.1).sum::<f64>() / n;
    let per_horizon = per.into_iter().map(|(s, a)| HorizonMetrics { mse: s / rows as f64, mae: a / rows as f64 }).collect();
    Ok((mse, mae, per_horizon))
}

/// Eval-mode forecasts for every window of `data`, scored on the input scale.
pub fn evaluate(model: &Model, data: &WindowDataset) -> Result<ForecastReport> {
    if data.is_empty() {
        return Err(Error::contract("evaluation set holds no windows"));
    }
    let mut preds = Vec::with_capacity(data.len());
    let mut targets = Vec::with_capacity(data.len());
    let mut gate_mass = vec![0.0; model.cfg.experts()];
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(model.cfg.batch_size) {
        let (x, y) = data.batch(chunk);
        let (p, decision) = model.predict(&x)?;
        gate_mass.iter_mut().zip(decision.gate_sums()).for_each(|(a, b)| *a += b);
        for b in 0..chunk.len() {
            preds.push(p.row(b));
            targets.push(y.row(b));
        }
    }
    let predictions = Tensor::stack(&preds)?;
    let targets = Tensor::stack(&targets)?;
    let (mse, mae, per_horizon) = metrics(&predictions, &targets)?;
    let total: f64 = gate_mass.iter().sum();
    let gate_utilization = gate_mass.iter().map(|g| g / total).collect();
    Ok(ForecastReport { predictions, mse, mae, per_horizon, gate_utilization })
}

/// `step,train_mse,balance,val_mse`; `val_mse` is empty on steps without
/// validation.
pub fn write_history_csv(rows: &[HistoryRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "step,train_mse,balance,val_mse")?;
    for r in rows {
        let val = r.val_mse.map(|v| format!("{v:e}")).unwrap_or_default();
        writeln!(out, "{},{:e},{:e},{}", r.step, r.train_mse, r.balance, val)?;
    }
    Ok(())
}
