//! Dual-stream residual blocks and the affine forecast head.
//!
//! The convolutional stream runs over the EMA seasonal part, the MLP stream
//! over the EMA trend part; both keep the `[B, C, L]` shape. Each block is
//! `h + act(f(h))`, or `act(f(h))` with `residual` off.

use rand_chacha::ChaCha8Rng;

use crate::ndgrad::{NdError, Var};
use crate::nn::{Activation, Init, ParamId, ParamStore, Session};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct StreamConfig {
    pub depth: usize,
    /// Convolution length per block, cycled when shorter than `depth`.
    pub kernels: Vec<usize>,
    pub residual: bool,
    pub activation: Activation,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self { depth: 2, kernels: vec![3, 5], residual: true, activation: Activation::Gelu }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("stream depth must be at least 1"));
        }
        if self.kernels.is_empty() {
            return Err(Error::config("at least one stream kernel is required"));
        }
        if let Some(k) = self.kernels.iter().find(|k| *k % 2 == 0) {
            return Err(Error::config(format!("stream kernel {k} must be odd")));
        }
        Ok(())
    }

    fn kernel(&self, layer: usize) -> usize {
        self.kernels[layer % self.kernels.len()]
    }
}

fn block_out(sess: &mut Session, h: Var, f: Var, cfg: &StreamConfig) -> Result<Var, NdError> {
    let a = cfg.activation.apply(&mut sess.tape, f);
    if cfg.residual {
        sess.tape.add(h, a)
    } else {
        Ok(a)
    }
}

#[derive(Clone, Debug)]
pub struct ConvBlock {
    /// `[C, C, K]`
    pub weight: ParamId,
    /// `[C]`
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct CnnStream {
    pub cfg: StreamConfig,
    pub blocks: Vec<ConvBlock>,
}

impl CnnStream {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, cfg: StreamConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.depth)
            .map(|l| {
                let k = cfg.kernel(l);
                ConvBlock {
                    weight: store.init(format!("{name}.{l}.weight"), &[channels, channels, k], Init::FanIn(channels * k), rng),
                    bias: store.init(format!("{name}.{l}.bias"), &[channels], Init::Zeros, rng),
                }
            })
            .collect();
        Ok(Self { cfg, blocks })
    }

    /// `x: [B, C, L]` -> `[B, C, L]`.
    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var, NdError> {
        let mut h = x;
        for b in &self.blocks {
            let (w, bias) = (sess.param(b.weight), sess.param(b.bias));
            let f = sess.tape.conv1d(h, w, Some(bias))?;
            h = block_out(sess, h, f, &self.cfg)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct MlpBlock {
    /// `[L, L]`, applied as `h W` along time.
    pub weight: ParamId,
    /// `[L]`
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct MlpStream {
    pub cfg: StreamConfig,
    pub blocks: Vec<MlpBlock>,
}

impl MlpStream {
    pub fn new(store: &mut ParamStore, name: &str, len: usize, cfg: StreamConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.depth)
            .map(|l| MlpBlock {
                weight: store.init(format!("{name}.{l}.weight"), &[len, len], Init::FanIn(len), rng),
                bias: store.init(format!("{name}.{l}.bias"), &[len], Init::Zeros, rng),
            })
            .collect();
        Ok(Self { cfg, blocks })
    }

    /// `x: [B, C, L]` -> `[B, C, L]`.
    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var, NdError> {
        let mut h = x;
        for b in &self.blocks {
            let (w, bias) = (sess.param(b.weight), sess.param(b.bias));
            let f = sess.tape.matmul(h, w)?;
            let f = sess.tape.add(f, bias)?;
            h = block_out(sess, h, f, &self.cfg)?;
        }
        Ok(h)
    }
}

/// Affine head over `[trend; seasonal; expert]` stacked on the feature axis,
/// factorized as a feature mix followed by a time projection:
/// `((W_mix z + b_mix) W_time) + b_time`.
#[derive(Clone, Debug)]
pub struct FusionHead {
    /// `[M, F]` with `F = 2M + d`
    pub w_mix: ParamId,
    /// `[M, 1]`
    pub b_mix: ParamId,
    /// `[L, T]`
    pub w_time: ParamId,
    /// `[T]`
    pub b_time: ParamId,
    pub horizon: usize,
}

impl FusionHead {
    pub fn new(
        store: &mut ParamStore,
        channels: usize,
        width: usize,
        len: usize,
        horizon: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let f = 2 * channels + width;
        Self {
            w_mix: store.init("head.w_mix", &[channels, f], Init::FanIn(f), rng),
            b_mix: store.init("head.b_mix", &[channels, 1], Init::Zeros, rng),
            // Zero time projection: an untrained model forecasts the window mean.
            w_time: store.init("head.w_time", &[len, horizon], Init::Zeros, rng),
            b_time: store.init("head.b_time", &[horizon], Init::Zeros, rng),
            horizon,
        }
    }

    /// `trend, seasonal: [B, M, L]`, `expert: [B, d, L]` -> `[B, M, T]`.
    pub fn forward(&self, sess: &mut Session, trend: Var, seasonal: Var, expert: Var) -> Result<Var> {
        let t = sess.store().value(self.w_time).shape()[1];
        if t != self.horizon {
            return Err(Error::contract(format!("head projects to {t} steps, configured horizon is {}", self.horizon)));
        }
        let z = sess.tape.concat(&[trend, seasonal, expert], 1)?;
        let (wm, bm) = (sess.param(self.w_mix), sess.param(self.b_mix));
        let (wt, bt) = (sess.param(self.w_time), sess.param(self.b_time));
        let h = sess.tape.matmul(wm, z)?;
        let h = sess.tape.add(h, bm)?;
        let y = sess.tape.matmul(h, wt)?;
        Ok(sess.tape.add(y, bt)?)
    }
}
