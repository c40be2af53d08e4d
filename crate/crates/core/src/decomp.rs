//! Instance normalization, EMA and frequency-domain decomposition.
//!
//! Every operation works on the last axis of a tensor, so a `[B, M, L]` batch
//! is treated as `B * M` independent series of length `L`. Each operation has a
//! plain [`Tensor`] form (used by exports and tests) and, where the model needs
//! gradients, a tape form built from the same definitions.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;

use crate::ndgrad::{NdError, Tape, Tensor, Var};
use crate::nn::{Init, ParamId, ParamStore, Session};
use crate::{Error, Result};

/// Floor applied to per-instance standard deviations.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmaConfig {
    alpha: f64,
}

impl EmaConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::config(format!("ema alpha must lie in (0, 1), got {alpha}")));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { alpha: 0.3 }
    }
}

/// `v_0 = 0`, `v_t = alpha * v_{t-1} + (1 - alpha) * x_t` along the last axis.
pub fn ema(x: &Tensor, cfg: EmaConfig) -> Tensor {
    crate::ndgrad::ema_forward(x, cfg.alpha)
}

/// Returns `(seasonal, trend)` with `trend = ema(x)` and `seasonal = x - trend`.
pub fn ema_decompose(x: &Tensor, cfg: EmaConfig) -> (Tensor, Tensor) {
    let trend = ema(x, cfg);
    let seasonal = x.zip_map(&trend, |a, b| a - b).expect("same shape");
    (seasonal, trend)
}

// ---- instance normalization ------------------------------------------------

/// Per-series statistics, shaped like the input with the last axis set to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Tensor,
    pub std: Tensor,
}

impl NormStats {
    pub fn of(x: &Tensor) -> Self {
        let len = *x.shape().last().expect("rank >= 1");
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let (mean, std): (Vec<f64>, Vec<f64>) = x
            .data()
            .chunks(len)
            .map(|row| {
                let (m, s) = crate::ndgrad::mean_std(row);
                (m, s.max(NORM_EPS))
            })
            .unzip();
        Self {
            mean: Tensor::new(shape.clone(), mean).expect("stat shape"),
            std: Tensor::new(shape, std).expect("stat shape"),
        }
    }
}

/// Standardises every series along the last axis (population variance).
pub fn instance_normalize(x: &Tensor) -> Result<(Tensor, NormStats)> {
    if x.shape().last().copied().unwrap_or(0) < 2 {
        return Err(Error::contract(format!("instance normalization needs length >= 2, got {:?}", x.shape())));
    }
    let stats = NormStats::of(x);
    let len = x.shape()[x.ndim() - 1];
    let mut out = x.clone();
    for (r, row) in out.data_mut().chunks_mut(len).enumerate() {
        let (m, s) = (stats.mean.data()[r], stats.std.data()[r]);
        row.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    Ok((out, stats))
}

/// Inverse of [`instance_normalize`]; `y` may have a different last extent.
pub fn denormalize(y: &Tensor, stats: &NormStats) -> Tensor {
    let len = y.shape()[y.ndim() - 1];
    let mut out = y.clone();
    for (r, row) in out.data_mut().chunks_mut(len).enumerate() {
        let (m, s) = (stats.mean.data()[r], stats.std.data()[r]);
        row.iter_mut().for_each(|v| *v = *v * s + m);
    }
    out
}

/// Reversible instance normalization with an optional per-channel affine
/// transform. Statistics are treated as constants on the tape.
#[derive(Clone, Debug)]
pub struct RevIn {
    pub scale: Option<ParamId>,
    pub shift: Option<ParamId>,
}

impl RevIn {
    pub fn new(store: &mut ParamStore, channels: usize, affine: bool, rng: &mut ChaCha8Rng) -> Self {
        if !affine {
            return Self { scale: None, shift: None };
        }
        Self {
            scale: Some(store.init("revin.scale", &[channels, 1], Init::Ones, rng)),
            shift: Some(store.init("revin.shift", &[channels, 1], Init::Zeros, rng)),
        }
    }

    /// `x: [B, M, L]` -> normalized `[B, M, L]` and the statistics.
    pub fn normalize(&self, sess: &mut Session, x: &Tensor) -> Result<(Var, NormStats)> {
        let (xn, stats) = instance_normalize(x)?;
        let mut v = sess.constant(xn);
        if let (Some(g), Some(b)) = (self.scale, self.shift) {
            let (g, b) = (sess.param(g), sess.param(b));
            v = sess.tape.mul(v, g)?;
            v = sess.tape.add(v, b)?;
        }
        Ok((v, stats))
    }

    /// `y: [B, M, T]` back to the input scale.
    pub fn denormalize(&self, sess: &mut Session, y: Var, stats: &NormStats) -> Result<Var, NdError> {
        let mut v = y;
        if let (Some(g), Some(b)) = (self.scale, self.shift) {
            let (g, b) = (sess.param(g), sess.param(b));
            v = sess.tape.sub(v, b)?;
            let denom = sess.tape.add_scalar(g, 1e-10);
            v = sess.tape.div(v, denom)?;
        }
        let std = sess.constant(stats.std.clone());
        let mean = sess.constant(stats.mean.clone());
        v = sess.tape.mul(v, std)?;
        sess.tape.add(v, mean)
    }
}

// ---- discrete Fourier transform ------------------------------------------------

/// Full complex spectrum of every series along the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    /// Shape of the transformed tensor; the last extent is the series length.
    pub shape: Vec<usize>,
    /// `rows * len` bins, row-major.
    pub bins: Vec<Complex64>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn row(&self, r: usize) -> &[Complex64] {
        let l = self.len();
        &self.bins[r * l..(r + 1) * l]
    }

    pub fn rows(&self) -> usize {
        self.bins.len() / self.len()
    }

    pub fn amplitudes(&self, r: usize) -> Vec<f64> {
        self.row(r).iter().map(|c| c.norm()).collect()
    }
}

/// `e^{-2 pi i j / L}` for `j = 0..L`; indices are reduced mod `L` before use.
fn twiddles(len: usize, sign: f64) -> Vec<Complex64> {
    (0..len)
        .map(|j| Complex64::from_polar(1.0, sign * 2.0 * PI * j as f64 / len as f64))
        .collect()
}

/// Direct O(L^2) transform `X_j = sum_t x_t e^{-2 pi i j t / L}`; any `L >= 1`.
pub fn dft(x: &Tensor) -> Spectrum {
    let len = x.shape()[x.ndim() - 1];
    let w = twiddles(len, -1.0);
    let mut bins = Vec::with_capacity(x.len());
    for row in x.data().chunks(len) {
        for j in 0..len {
            bins.push(row.iter().enumerate().map(|(t, &v)| w[(j * t) % len] * v).sum());
        }
    }
    Spectrum { shape: x.shape().to_vec(), bins }
}

/// Complex inverse transform, including any imaginary residue.
pub fn idft_complex(s: &Spectrum) -> Vec<Complex64> {
    let len = s.len();
    let w = twiddles(len, 1.0);
    let mut out = Vec::with_capacity(s.bins.len());
    for row in s.bins.chunks(len) {
        for t in 0..len {
            let acc: Complex64 = row.iter().enumerate().map(|(j, &c)| w[(j * t) % len] * c).sum();
            out.push(acc / len as f64);
        }
    }
    out
}

/// Real part of the inverse transform.
pub fn idft(s: &Spectrum) -> Tensor {
    let data = idft_complex(s).into_iter().map(|c| c.re).collect();
    Tensor::new(s.shape.clone(), data).expect("spectrum shape")
}

/// The `k` non-DC bins in `1..=L/2` with the largest amplitude, strongest
/// first; equal amplitudes rank the lower bin first.
pub fn top_frequencies(amplitudes: &[f64], k: usize) -> Vec<usize> {
    let half = amplitudes.len() / 2;
    let mut bins: Vec<usize> = (1..=half).collect();
    bins.sort_by(|&a, &b| amplitudes[b].total_cmp(&amplitudes[a]).then(a.cmp(&b)));
    bins.truncate(k);
    bins
}

fn check_k_freq(len: usize, k: usize) -> Result<()> {
    if k == 0 || k > len / 2 {
        return Err(Error::config(format!("k_freq must lie in [1, {}] for length {len}, got {k}", len / 2)));
    }
    Ok(())
}

/// Keeps the `k_freq` strongest non-DC bins (with their mirrors) of every
/// series and transforms back.
pub fn freq_seasonal(x: &Tensor, k_freq: usize) -> Result<Tensor> {
    let (out, _) = freq_seasonal_with_residue(x, k_freq)?;
    Ok(out)
}

/// [`freq_seasonal`] plus the largest imaginary residue seen before it was
/// discarded.
pub fn freq_seasonal_with_residue(x: &Tensor, k_freq: usize) -> Result<(Tensor, f64)> {
    let len = x.shape()[x.ndim() - 1];
    check_k_freq(len, k_freq)?;
    let mut spec = dft(x);
    for r in 0..spec.rows() {
        let keep = top_frequencies(&spec.amplitudes(r), k_freq);
        let mut mask = vec![false; len];
        for j in keep {
            mask[j] = true;
            mask[(len - j) % len] = true;
        }
        for (c, m) in spec.bins[r * len..(r + 1) * len].iter_mut().zip(&mask) {
            if !m {
                *c = Complex64::new(0.0, 0.0);
            }
        }
    }
    let full = idft_complex(&spec);
    let residue = full.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    let data = full.into_iter().map(|c| c.re).collect();
    Ok((Tensor::new(x.shape().to_vec(), data)?, residue))
}

/// Real-input DFT as two constant matrices so it can run on the tape:
/// `re = x C`, `im_neg = x S` with `C[t, j] = cos(2 pi j t / L)`,
/// `S[t, j] = sin(2 pi j t / L)` for `j = 0..=L/2` (so `X_j = re - i * im_neg`).
#[derive(Clone, Debug)]
pub struct FourierBasis {
    len: usize,
    cos: Tensor,
    sin: Tensor,
}

impl FourierBasis {
    pub fn new(len: usize) -> Self {
        let nb = len / 2 + 1;
        let angle = |t: usize, j: usize| 2.0 * PI * ((j * t) % len) as f64 / len as f64;
        Self {
            len,
            cos: Tensor::from_fn([len, nb], |i| angle(i[0], i[1]).cos()),
            sin: Tensor::from_fn([len, nb], |i| angle(i[0], i[1]).sin()),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bins(&self) -> usize {
        self.len / 2 + 1
    }

    /// `x: [.., L]` -> `(re, im_neg)`, each `[.., L/2 + 1]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var), NdError> {
        let c = tape.constant(self.cos.clone());
        let s = tape.constant(self.sin.clone());
        Ok((tape.matmul(x, c)?, tape.matmul(x, s)?))
    }

    /// `sqrt(re^2 + im^2 + eps)`; the offset keeps the gradient finite at 0.
    pub fn amplitude(&self, tape: &mut Tape, re: Var, im: Var) -> Result<Var, NdError> {
        let r2 = tape.mul(re, re)?;
        let i2 = tape.mul(im, im)?;
        let p = tape.add(r2, i2)?;
        let p = tape.add_scalar(p, 1e-12);
        Ok(tape.sqrt(p))
    }

    /// Tape form of [`freq_seasonal`]. Bin selection is read from the forward
    /// values and held fixed; gradients flow through the kept coefficients.
    pub fn top_k_seasonal(&self, tape: &mut Tape, re: Var, im: Var, k_freq: usize) -> Result<Var> {
        check_k_freq(self.len, k_freq)?;
        let nb = self.bins();
        let shape = tape.shape(re).to_vec();
        let (rv, iv) = (tape.value(re).data(), tape.value(im).data());
        let mut weights = vec![0.0; rv.len()];
        for r in 0..rv.len() / nb {
            let amps: Vec<f64> = (0..nb).map(|j| rv[r * nb + j].hypot(iv[r * nb + j])).collect();
            // Amplitudes of the full spectrum are mirrored, so ranking over the
            // half spectrum matches ranking over all bins.
            let mut full = amps.clone();
            full.resize(self.len, 0.0);
            for j in top_frequencies(&full, k_freq) {
                let mirrored = 2 * j != self.len;
                weights[r * nb + j] = if mirrored { 2.0 } else { 1.0 } / self.len as f64;
            }
        }
        let w = tape.constant(Tensor::new(shape, weights)?);
        let rw = tape.mul(re, w)?;
        let iw = tape.mul(im, w)?;
        let ct = tape.constant(transpose2(&self.cos));
        let st = tape.constant(transpose2(&self.sin));
        let a = tape.matmul(rw, ct)?;
        let b = tape.matmul(iw, st)?;
        Ok(tape.add(a, b)?)
    }
}

fn transpose2(m: &Tensor) -> Tensor {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    Tensor::from_fn([c, r], |i| m.at(&[i[1], i[0]]))
}

// ---- multi-kernel trend ---------------------------------------------------------

fn check_kernels(len: usize, kernels: &[usize]) -> Result<()> {
    if kernels.is_empty() {
        return Err(Error::config("at least one trend kernel is required"));
    }
    for &k in kernels {
        if k % 2 == 0 {
            return Err(Error::config(format!("trend kernel {k} must be odd")));
        }
        if k > len {
            return Err(Error::config(format!("trend kernel {k} exceeds series length {len}")));
        }
    }
    Ok(())
}

/// Mean of replicate-padded centred moving averages, one per kernel size.
pub fn multi_kernel_trend(x: &Tensor, kernels: &[usize]) -> Result<Tensor> {
    let len = x.shape()[x.ndim() - 1];
    check_kernels(len, kernels)?;
    let mut out = Tensor::zeros(x.shape().to_vec());
    for (src, dst) in x.data().chunks(len).zip(out.data_mut().chunks_mut(len)) {
        for &k in kernels {
            let half = (k / 2) as isize;
            for (t, d) in dst.iter_mut().enumerate() {
                let s: f64 = (-half..=half)
                    .map(|o| src[(t as isize + o).clamp(0, len as isize - 1) as usize])
                    .sum();
                *d += s / (k * kernels.len()) as f64;
            }
        }
    }
    Ok(out)
}

/// `[L, L]` matrix `A` with `multi_kernel_trend(x) == x A` for row vectors `x`.
pub fn trend_matrix(len: usize, kernels: &[usize]) -> Result<Tensor> {
    check_kernels(len, kernels)?;
    let mut a = Tensor::zeros([len, len]);
    for &k in kernels {
        let half = (k / 2) as isize;
        let w = 1.0 / (k * kernels.len()) as f64;
        for t in 0..len {
            for o in -half..=half {
                let s = (t as isize + o).clamp(0, len as isize - 1) as usize;
                let cur = a.at(&[s, t]);
                a.set(&[s, t], cur + w);
            }
        }
    }
    Ok(a)
}

// ---- channel change ---------------------------------------------------------------

/// Learned affine map across the channel axis: `[B, M, L] -> [B, d, L]`.
#[derive(Clone, Debug)]
pub struct ChannelChange {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ChannelChange {
    pub fn new(store: &mut ParamStore, channels: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: store.init("channel_change.weight", &[width, channels], Init::FanIn(channels), rng),
            bias: store.init("channel_change.bias", &[width, 1], Init::Zeros, rng),
        }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var, NdError> {
        let w = sess.param(self.weight);
        let b = sess.param(self.bias);
        let y = sess.tape.matmul(w, x)?;
        sess.tape.add(y, b)
    }
}

// ---- full decomposition ----------------------------------------------------------

/// The four decomposition products of one batch of raw series.
#[derive(Clone, Debug)]
pub struct DecompResult {
    pub seasonal_ema: Tensor,
    pub trend_ema: Tensor,
    pub seasonal_freq: Tensor,
    /// Multi-kernel trend; the input handed to the experts.
    pub trend_freq_input: Tensor,
    pub spectrum: Spectrum,
}

pub fn decompose(x: &Tensor, ema_cfg: EmaConfig, k_freq: usize, kernels: &[usize]) -> Result<DecompResult> {
    let (seasonal_ema, trend_ema) = ema_decompose(x, ema_cfg);
    Ok(DecompResult {
        seasonal_ema,
        trend_ema,
        seasonal_freq: freq_seasonal(x, k_freq)?,
        trend_freq_input: multi_kernel_trend(x, kernels)?,
        spectrum: dft(x),
    })
}
