//! End-to-end forecaster: normalization, hybrid decomposition, dual streams,
//! gated multi-scale experts and the fusion head, plus training, evaluation
//! and checkpointing.

mod checkpoint;
mod config;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use optim::AdamW;
pub use train::{
    evaluate, metrics, train, write_history_csv, ForecastReport, HistoryRow, HorizonMetrics, TrainOutcome,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decomp::{trend_matrix, ChannelChange, FourierBasis, RevIn};
use crate::error::StageContext;
use crate::experts::{Expert, ExpertConfig};
use crate::gating::{DispatchPlan, GateDecision, GateOutput, NoisyTopKGate};
use crate::ndgrad::{NdError, Tape, Tensor, Var};
use crate::nn::{Activation, ParamStore, Session};
use crate::streams::{CnnStream, FusionHead, MlpStream, StreamConfig};
use crate::{Error, Result};

/// Forward stages in execution order; NaN diagnostics report the first of
/// these whose output is non-finite.
pub const STAGES: [&str; 14] = [
    "instance_normalize",
    "ema_decompose",
    "cnn_stream",
    "mlp_stream",
    "channel_change",
    "dft",
    "freq_seasonal",
    "multi_kernel_trend",
    "gate_features",
    "gate",
    "experts",
    "combine",
    "fuse_heads",
    "denormalize",
];

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    revin: RevIn,
    cnn: CnnStream,
    mlp: MlpStream,
    channel_change: ChannelChange,
    basis: FourierBasis,
    /// `[L, L]` multi-kernel moving average.
    trend: Tensor,
    /// `[L/2 + 1, 4]` band-quartile pooling of non-DC amplitudes.
    bands: Tensor,
    gate: NoisyTopKGate,
    experts: Vec<Expert>,
    head: FusionHead,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `[B, M, T]` on the input scale.
    pub forecast: Var,
    pub gate: GateOutput,
    /// Output of every entry of [`STAGES`] that ran.
    pub stages: Vec<(&'static str, Var)>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub mse: Var,
    pub balance: Var,
}

fn band_matrix(len: usize) -> Tensor {
    let nb = len / 2 + 1;
    let non_dc = nb - 1;
    let band = |j: usize| (j - 1) * 4 / non_dc;
    let mut counts = [0usize; 4];
    (1..nb).for_each(|j| counts[band(j)] += 1);
    Tensor::from_fn([nb, 4], |i| {
        let (j, b) = (i[0], i[1]);
        if j > 0 && band(j) == b {
            1.0 / (counts[b] * len) as f64
        } else {
            0.0
        }
    })
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let (m, l, d) = (cfg.channels, cfg.lookback, cfg.width);
        let stream = StreamConfig {
            depth: cfg.stream_depth,
            kernels: cfg.stream_kernels.clone(),
            residual: true,
            activation: Activation::Gelu,
        };
        let revin = RevIn::new(&mut store, m, cfg.revin_affine, &mut rng);
        let cnn = CnnStream::new(&mut store, "cnn", m, stream.clone(), &mut rng)?;
        let mlp = MlpStream::new(&mut store, "mlp", l, stream, &mut rng)?;
        let channel_change = ChannelChange::new(&mut store, m, d, &mut rng);
        let mut gate = NoisyTopKGate::new(&mut store, cfg.gate_features(), cfg.experts(), cfg.k_gate, &mut rng)?;
        gate.load_estimate = cfg.load_estimate();
        let experts = cfg
            .patch_sizes
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let ec = ExpertConfig { patch_size: p, width: d, heads: cfg.heads, activation: Activation::Gelu };
                Expert::new(&mut store, &format!("expert{i}"), ec, l, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let head = FusionHead::new(&mut store, m, d, l, cfg.horizon, &mut rng);
        Ok(Self {
            trend: trend_matrix(l, &cfg.trend_kernels)?,
            bands: band_matrix(l),
            basis: FourierBasis::new(l),
            cfg,
            store,
            revin,
            cnn,
            mlp,
            channel_change,
            gate,
            experts,
            head,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = [self.cfg.channels, self.cfg.lookback];
        if x.ndim() != 3 || x.shape()[1..] != want {
            return Err(Error::contract(format!(
                "instance_normalize: expected [B, {}, {}], got {:?}",
                want[0],
                want[1],
                x.shape()
            )));
        }
        Ok(())
    }

    /// Records the full forward pass of `x: [B, M, L]` on `sess`. Gate noise
    /// is drawn only when `noise_rng` is given.
    pub fn forward(&self, sess: &mut Session, x: &Tensor, noise_rng: Option<&mut ChaCha8Rng>) -> Result<ForwardPass> {
        self.check_input(x)?;
        let mut stages = Vec::with_capacity(STAGES.len());
        let (xn, stats) = self.revin.normalize(sess, x)?;
        stages.push(("instance_normalize", xn));

        let (seasonal, trend) = if self.cfg.hybrid_decomposition {
            let trend = sess.tape.ema(xn, self.cfg.alpha);
            let seasonal = sess.tape.sub(xn, trend).stage("ema_decompose")?;
            stages.push(("ema_decompose", seasonal));
            (seasonal, trend)
        } else {
            (xn, xn)
        };
        let s_out = self.cnn.forward(sess, seasonal).stage("cnn_stream")?;
        stages.push(("cnn_stream", s_out));
        let t_out = self.mlp.forward(sess, trend).stage("mlp_stream")?;
        stages.push(("mlp_stream", t_out));

        let xc = self.channel_change.forward(sess, xn).stage("channel_change")?;
        stages.push(("channel_change", xc));
        let (re, im) = self.basis.forward(&mut sess.tape, xc).stage("dft")?;
        let amp = self.basis.amplitude(&mut sess.tape, re, im).stage("dft")?;
        stages.push(("dft", amp));
        let (s_freq, expert_in) = if self.cfg.hybrid_decomposition {
            let s_freq = self.basis.top_k_seasonal(&mut sess.tape, re, im, self.cfg.k_freq)?;
            stages.push(("freq_seasonal", s_freq));
            let a = sess.constant(self.trend.clone());
            let t_freq = sess.tape.matmul(xc, a).stage("multi_kernel_trend")?;
            stages.push(("multi_kernel_trend", t_freq));
            (s_freq, t_freq)
        } else {
            (xc, xc)
        };

        let features = self.gate_features(&mut sess.tape, amp, s_freq, expert_in).stage("gate_features")?;
        stages.push(("gate_features", features));
        let gate = self.gate.forward(sess, features, noise_rng)?;
        stages.push(("gate", gate.gates));

        let plan = DispatchPlan::new(&gate.decision);
        let inputs = plan.dispatch(&mut sess.tape, expert_in)?;
        let mut outputs = Vec::with_capacity(self.experts.len());
        for (expert, input) in self.experts.iter().zip(inputs) {
            outputs.push(match input {
                Some(v) => Some(expert.forward(sess, v).stage("experts")?),
                None => None,
            });
        }
        if let Some(&Some(v)) = outputs.iter().find(|o| o.is_some()) {
            stages.push(("experts", v));
        }
        let mixed = plan.combine(&mut sess.tape, &outputs, gate.gates)?;
        stages.push(("combine", mixed));

        let y = self.head.forward(sess, t_out, s_out, mixed)?;
        stages.push(("fuse_heads", y));
        let forecast = self.revin.denormalize(sess, y, &stats).stage("denormalize")?;
        stages.push(("denormalize", forecast));
        Ok(ForwardPass { forecast, gate, stages })
    }

    /// `[B, 4 + 2d]`: band-quartile mean amplitude, per-width RMS of the
    /// frequency seasonal part and per-width mean of the expert input.
    fn gate_features(&self, tape: &mut Tape, amp: Var, s_freq: Var, trend: Var) -> Result<Var, NdError> {
        let bands = tape.constant(self.bands.clone());
        let pooled = tape.matmul(amp, bands)?;
        let pooled = tape.mean_axis(pooled, 1, false)?;
        let sq = tape.mul(s_freq, s_freq)?;
        let ms = tape.mean_axis(sq, 2, false)?;
        let ms = tape.add_scalar(ms, 1e-12);
        let rms = tape.sqrt(ms);
        let tm = tape.mean_axis(trend, 2, false)?;
        tape.concat(&[pooled, rms, tm], 1)
    }

    /// `MSE(forecast, target) + balance_loss_weight * balance`.
    pub fn loss(&self, sess: &mut Session, pass: &ForwardPass, target: &Tensor) -> Result<LossParts> {
        if sess.tape.shape(pass.forecast) != target.shape() {
            return Err(Error::contract(format!(
                "target {:?} does not match forecast {:?}",
                target.shape(),
                sess.tape.shape(pass.forecast)
            )));
        }
        let t = sess.constant(target.clone());
        let diff = sess.tape.sub(pass.forecast, t)?;
        let sq = sess.tape.mul(diff, diff)?;
        let mse = sess.tape.mean_all(sq);
        let balance = pass.gate.balance_loss(&mut sess.tape)?;
        let weighted = sess.tape.scale(balance, self.cfg.balance_loss_weight);
        let total = sess.tape.add(mse, weighted)?;
        Ok(LossParts { total, mse, balance })
    }

    /// Gradient-free evaluation; returns the forecast and gate decision.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, GateDecision)> {
        let mut sess = Session::new(&self.store, false);
        let pass = self.forward(&mut sess, x, None)?;
        Ok((sess.value(pass.forecast).clone(), pass.gate.decision))
    }

    /// Scalar total loss without gradients, for finite-difference checks.
    pub fn loss_value(&self, x: &Tensor, target: &Tensor) -> Result<f64> {
        let mut sess = Session::new(&self.store, false);
        let pass = self.forward(&mut sess, x, None)?;
        let parts = self.loss(&mut sess, &pass, target)?;
        Ok(sess.value(parts.total).item())
    }

    /// First stage whose output holds a non-finite value.
    pub fn first_non_finite_stage(sess: &Session, pass: &ForwardPass) -> Option<&'static str> {
        pass.stages.iter().find(|(_, v)| !sess.value(*v).all_finite()).map(|(s, _)| *s)
    }
}
