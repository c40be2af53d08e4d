//! Multi-scale attention experts.
//!
//! An expert sees its routed sub-batch `[n, d, L]` as `L` tokens of width `d`.
//! The local stream walks non-overlapping patches left to right, fusing each
//! patch with the state left by the previous one and attending within the
//! patch. The global stream attends over all `L` positions. A learned fusion
//! merges both. Attention blocks are pre-normalized with a residual add.

use rand_chacha::ChaCha8Rng;

use crate::ndgrad::{NdError, Tape, Tensor, Var};
use crate::nn::{Activation, Init, Linear, ParamId, ParamStore, Session};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertConfig {
    pub patch_size: usize,
    pub width: usize,
    pub heads: usize,
    /// Activation of both fusion maps.
    pub activation: Activation,
}

impl ExpertConfig {
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.patch_size == 0 || self.patch_size > len {
            return Err(Error::config(format!("patch size {} must lie in [1, {len}]", self.patch_size)));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(format!("{} heads do not divide width {}", self.heads, self.width)));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }
}

// ---- patches ------------------------------------------------------------------

/// Contiguous time segments of a `[B, d, L]` tensor, the last one padded by
/// repeating the final step.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    /// `ceil(L / p)` tensors of shape `[B, d, p]`.
    pub patches: Vec<Tensor>,
    pub original_length: usize,
    /// Number of replicated steps at the end of the last patch.
    pub padding: usize,
}

impl PatchSet {
    pub fn patch_size(&self) -> usize {
        self.patches[0].shape()[2]
    }

    /// `true` for padded steps of the last patch.
    pub fn padding_mask(&self) -> Vec<bool> {
        let p = self.patch_size();
        (0..p).map(|t| t >= p - self.padding).collect()
    }

    /// Concatenates the patches and drops the padding.
    pub fn unpartition(&self) -> Tensor {
        let s = self.patches[0].shape();
        let (b, d, p) = (s[0], s[1], s[2]);
        let l = self.original_length;
        Tensor::from_fn([b, d, l], |i| self.patches[i[2] / p].at(&[i[0], i[1], i[2] % p]))
    }
}

pub fn partition(x: &Tensor, p: usize) -> Result<PatchSet> {
    let [b, d, l] = *x.shape() else {
        return Err(Error::contract(format!("partition expects [B, d, L], got {:?}", x.shape())));
    };
    if p == 0 {
        return Err(Error::config("patch size must be positive"));
    }
    let count = l.div_ceil(p);
    let patches = (0..count)
        .map(|c| Tensor::from_fn([b, d, p], |i| x.at(&[i[0], i[1], (c * p + i[2]).min(l - 1)])))
        .collect();
    Ok(PatchSet { patches, original_length: l, padding: count * p - l })
}

// ---- attention ------------------------------------------------------------------

/// Pre-normalized multi-head self-attention with a residual add:
/// `x + softmax(q k^T / sqrt(d_h)) v W_o`, `q, k, v = LN(x) W_{q,k,v}`.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub normalize: bool,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut proj = |s: &str| store.init(format!("{name}.{s}"), &[width, width], Init::FanIn(width), rng);
        Self { wq: proj("wq"), wk: proj("wk"), wv: proj("wv"), wo: proj("wo"), heads, normalize: true }
    }

    /// `x: [n, S, d]` -> output `[n, S, d]` and attention weights `[n, H, S, S]`.
    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<(Var, Var), NdError> {
        let h = if self.normalize { sess.tape.layer_norm(x, LN_EPS) } else { x };
        let (wq, wk, wv, wo) = (sess.param(self.wq), sess.param(self.wk), sess.param(self.wv), sess.param(self.wo));
        let q = sess.tape.matmul(h, wq)?;
        let k = sess.tape.matmul(h, wk)?;
        let v = sess.tape.matmul(h, wv)?;
        let (ctx, probs) = multi_head_attention(&mut sess.tape, q, k, v, self.heads)?;
        let o = sess.tape.matmul(ctx, wo)?;
        Ok((sess.tape.add(x, o)?, probs))
    }
}

/// Scaled dot-product attention of already projected `q, k, v: [n, S, d]`,
/// split into `heads` groups of width `d / heads`.
pub fn multi_head_attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Var), NdError> {
    let [n, s, d] = *tape.shape(q) else {
        return Err(NdError::shape("attention", format!("expected [n, S, d], got {:?}", tape.shape(q))));
    };
    if heads == 0 || d % heads != 0 {
        return Err(NdError::shape("attention", format!("{heads} heads do not divide width {d}")));
    }
    let dh = d / heads;
    let mut split = |t: Var| -> Result<Var, NdError> {
        let t = tape.reshape(t, &[n, s, heads, dh])?;
        tape.permute(t, &[0, 2, 1, 3])
    };
    let (q, k, v) = (split(q)?, split(k)?, split(v)?);
    let kt = tape.transpose(k, 2, 3)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let probs = tape.softmax(scores, 3)?;
    let ctx = tape.matmul(probs, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    Ok((tape.reshape(ctx, &[n, s, d])?, probs))
}

// ---- streams --------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LocalStream {
    pub patch_size: usize,
    pub init_state: ParamId,
    pub fusion: Linear,
    pub position: ParamId,
    pub attention: AttentionBlock,
    pub activation: Activation,
}

impl LocalStream {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ExpertConfig, rng: &mut ChaCha8Rng) -> Self {
        let (p, d) = (cfg.patch_size, cfg.width);
        Self {
            patch_size: p,
            init_state: store.init(format!("{name}.init_state"), &[p, d], Init::Zeros, rng),
            fusion: Linear::new(store, &format!("{name}.fusion"), 2 * d, d, true, rng),
            position: store.init(format!("{name}.position"), &[p, d], Init::Uniform(0.02), rng),
            attention: AttentionBlock::new(store, &format!("{name}.attention"), d, cfg.heads, rng),
            activation: cfg.activation,
        }
    }

    /// `x: [n, L, d]` -> `[n, L, d]`; also returns each patch's attention weights.
    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<(Var, Vec<Var>), NdError> {
        let [n, l, d] = *sess.tape.shape(x) else {
            return Err(NdError::shape("local_stream", format!("expected [n, L, d], got {:?}", sess.tape.shape(x))));
        };
        let p = self.patch_size;
        let count = l.div_ceil(p);
        let idx: Vec<usize> = (0..count * p).map(|t| t.min(l - 1)).collect();
        let padded = sess.tape.index_select(x, 1, &idx)?;
        let init = sess.param(self.init_state);
        let init = sess.tape.reshape(init, &[1, p, d])?;
        let zeros = sess.constant(Tensor::zeros([n, p, d]));
        let mut state = sess.tape.add(zeros, init)?;
        let pos = sess.param(self.position);
        let mut states = Vec::with_capacity(count);
        let mut probs = Vec::with_capacity(count);
        for c in 0..count {
            let patch = sess.tape.narrow(padded, 1, c * p, p)?;
            let joined = sess.tape.concat(&[patch, state], 2)?;
            let fused = self.fusion.forward(sess, joined)?;
            let fused = self.activation.apply(&mut sess.tape, fused);
            let fused = sess.tape.add(fused, pos)?;
            let (out, pr) = self.attention.forward(sess, fused)?;
            state = out;
            states.push(out);
            probs.push(pr);
        }
        let all = if states.len() == 1 { states[0] } else { sess.tape.concat(&states, 1)? };
        Ok((sess.tape.narrow(all, 1, 0, l)?, probs))
    }
}

#[derive(Clone, Debug)]
pub struct GlobalStream {
    pub position: ParamId,
    pub attention: AttentionBlock,
}

impl GlobalStream {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ExpertConfig, len: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            position: store.init(format!("{name}.position"), &[len, cfg.width], Init::Uniform(0.02), rng),
            attention: AttentionBlock::new(store, &format!("{name}.attention"), cfg.width, cfg.heads, rng),
        }
    }

    /// `x: [n, L, d]` -> `[n, L, d]` and attention weights `[n, H, L, L]`.
    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<(Var, Var), NdError> {
        let pos = sess.param(self.position);
        let h = sess.tape.add(x, pos)?;
        self.attention.forward(sess, h)
    }
}

/// One expert: `act([H_L; H_R] W + b)`.
#[derive(Clone, Debug)]
pub struct Expert {
    pub cfg: ExpertConfig,
    pub local: LocalStream,
    pub global: GlobalStream,
    pub fusion: Linear,
}

/// Intermediate products of [`Expert::forward_traced`], all `[n, L, d]`.
#[derive(Clone, Debug)]
pub struct ExpertTrace {
    pub local: Var,
    pub global: Var,
    pub local_probs: Vec<Var>,
    pub global_probs: Var,
}

impl Expert {
    pub fn new(store: &mut ParamStore, name: &str, cfg: ExpertConfig, len: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate(len)?;
        Ok(Self {
            cfg,
            local: LocalStream::new(store, &format!("{name}.local"), &cfg, rng),
            global: GlobalStream::new(store, &format!("{name}.global"), &cfg, len, rng),
            fusion: Linear::new(store, &format!("{name}.fusion"), 2 * cfg.width, cfg.width, true, rng),
        })
    }

    /// `x: [n, d, L]` -> `[n, d, L]`.
    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var, NdError> {
        Ok(self.forward_traced(sess, x)?.0)
    }

    pub fn forward_traced(&self, sess: &mut Session, x: Var) -> Result<(Var, ExpertTrace), NdError> {
        let tokens = sess.tape.permute(x, &[0, 2, 1])?;
        let (hl, local_probs) = self.local.forward(sess, tokens)?;
        let (hr, global_probs) = self.global.forward(sess, tokens)?;
        let joined = sess.tape.concat(&[hl, hr], 2)?;
        let h = self.fusion.forward(sess, joined)?;
        let h = self.cfg.activation.apply(&mut sess.tape, h);
        let out = sess.tape.permute(h, &[0, 2, 1])?;
        Ok((out, ExpertTrace { local: hl, global: hr, local_probs, global_probs }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_examples() {
        let x = Tensor::from_fn([1, 1, 12], |i| i[2] as f64);
        let ps = partition(&x, 4).unwrap();
        assert_eq!(ps.patches.len(), 3);
        assert_eq!(ps.patches[2].data(), &[8.0, 9.0, 10.0, 11.0]);
        assert_eq!(ps.padding, 0);

        let x = Tensor::from_fn([1, 1, 10], |i| i[2] as f64);
        let ps = partition(&x, 4).unwrap();
        assert_eq!(ps.patches.len(), 3);
        assert_eq!(ps.patches[2].data(), &[8.0, 9.0, 9.0, 9.0]);
        assert_eq!(ps.padding_mask(), vec![false, false, true, true]);
        assert_eq!(ps.unpartition(), x);

        let ps = partition(&x, 10).unwrap();
        assert_eq!(ps.patches, vec![x]);
    }

    #[test]
    fn attention_single_position_returns_values() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_fn([2, 1, 4], |i| i[2] as f64 - 1.0));
        let k = tape.constant(Tensor::from_fn([2, 1, 4], |i| (i[0] + i[2]) as f64));
        let v = tape.constant(Tensor::from_fn([2, 1, 4], |i| (3 * i[0] + i[2]) as f64 * 0.5));
        let (ctx, probs) = multi_head_attention(&mut tape, q, k, v, 2).unwrap();
        assert!(tape.value(probs).data().iter().all(|p| *p == 1.0));
        assert_eq!(tape.value(ctx), tape.value(v));
    }

    #[test]
    fn identical_keys_split_evenly() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_fn([1, 2, 2], |i| (i[1] * 5 + i[2]) as f64));
        let k = tape.constant(Tensor::from_fn([1, 2, 2], |i| i[2] as f64 + 0.3));
        let v = tape.constant(Tensor::from_fn([1, 2, 2], |i| (i[1] * 2 + i[2]) as f64));
        let (_, probs) = multi_head_attention(&mut tape, q, k, v, 1).unwrap();
        assert!(tape.value(probs).data().iter().all(|p| (p - 0.5).abs() < 1e-15));
    }
}
