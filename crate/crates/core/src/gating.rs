//! Noisy top-k routing, the sparse dispatcher/combiner pair and the
//! coefficient-of-variation balance loss.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ndgrad::{NdError, Tape, Tensor, Var};
use crate::nn::{Init, ParamId, ParamStore, Session};
use crate::{Error, Result};

/// Offset in the denominator of every coefficient of variation.
pub const COV_EPS: f64 = 1e-10;

/// Logit assigned to unselected experts before the masked softmax.
const MASKED: f64 = -1e30;

/// How the load term of the balance loss is differentiated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LoadEstimate {
    /// Hard selection counts in the forward pass, gradient of the soft
    /// estimate `k * sum_b softmax(logits)_b` in the backward pass.
    #[default]
    StraightThrough,
    /// The soft estimate in both passes; smooth, used by gradient checks.
    Soft,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    /// `[B, E]`; exactly `k` nonzero entries per row.
    pub gates: Tensor,
    /// Selected experts per sample, strongest first.
    pub topk_indices: Vec<Vec<usize>>,
    /// Hard selection counts per expert.
    pub load: Vec<f64>,
    /// `[B, E]` logits before noise.
    pub raw_logits: Tensor,
}

impl GateDecision {
    pub fn batch(&self) -> usize {
        self.topk_indices.len()
    }

    pub fn experts(&self) -> usize {
        self.load.len()
    }

    /// Per-expert gate mass summed over the batch.
    pub fn gate_sums(&self) -> Vec<f64> {
        let e = self.experts();
        let mut s = vec![0.0; e];
        for row in self.gates.data().chunks(e) {
            s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        s
    }
}

/// Indices of the `k` largest entries, descending; ties go to the lower index.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Top-k selection and masked softmax over already-noised logits.
pub fn topk_gate_from_logits(logits: &Tensor, raw_logits: &Tensor, k: usize) -> Result<GateDecision> {
    let (b, e) = matrix_dims(logits)?;
    check_k(k, e)?;
    let mut gates = vec![0.0; b * e];
    let mut indices = Vec::with_capacity(b);
    let mut load = vec![0.0; e];
    for (r, row) in logits.data().chunks(e).enumerate() {
        let sel = topk_indices(row, k);
        let max = row[sel[0]];
        let z: f64 = sel.iter().map(|&j| (row[j] - max).exp()).sum();
        for &j in &sel {
            gates[r * e + j] = (row[j] - max).exp() / z;
            load[j] += 1.0;
        }
        indices.push(sel);
    }
    Ok(GateDecision { gates: Tensor::new([b, e], gates)?, topk_indices: indices, load, raw_logits: raw_logits.clone() })
}

fn matrix_dims(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [b, e] => Ok((b, e)),
        _ => Err(Error::contract(format!("gate logits must be [B, E], got {:?}", t.shape()))),
    }
}

fn check_k(k: usize, experts: usize) -> Result<()> {
    if k == 0 || k > experts {
        return Err(Error::config(format!("gate k must lie in [1, {experts}], got {k}")));
    }
    Ok(())
}

/// Population coefficient of variation `std(v) / (mean(v) + eps)`.
pub fn cov(v: &[f64]) -> f64 {
    let (mean, std) = crate::ndgrad::mean_std(v);
    std / (mean + COV_EPS)
}

/// `COV(gate sums) + COV(load)` on hard counts.
pub fn balance_loss(d: &GateDecision) -> f64 {
    cov(&d.gate_sums()) + cov(&d.load)
}

/// Tape handles produced by [`NoisyTopKGate::forward`].
#[derive(Clone, Debug)]
pub struct GateOutput {
    pub decision: GateDecision,
    /// `[B, E]` differentiable gates (zeros off-support).
    pub gates: Var,
    /// `[E]` load as seen by the balance loss.
    pub load: Var,
}

impl GateOutput {
    /// Differentiable `COV(sum_b gates) + COV(load)`.
    pub fn balance_loss(&self, tape: &mut Tape) -> Result<Var, NdError> {
        let g_sum = tape.sum_axis(self.gates, 0, false)?;
        let a = tape.cov(g_sum, COV_EPS);
        let b = tape.cov(self.load, COV_EPS);
        tape.add(a, b)
    }
}

/// Gate projection `F -> E` with a learned, input-dependent noise scale.
#[derive(Clone, Debug)]
pub struct NoisyTopKGate {
    pub w_gate: ParamId,
    pub w_noise: ParamId,
    pub experts: usize,
    pub k: usize,
    pub load_estimate: LoadEstimate,
}

impl NoisyTopKGate {
    pub fn new(
        store: &mut ParamStore,
        features: usize,
        experts: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        check_k(k, experts)?;
        Ok(Self {
            w_gate: store.init("gate.w_gate", &[features, experts], Init::Uniform(0.01), rng),
            w_noise: store.init("gate.w_noise", &[features, experts], Init::Zeros, rng),
            experts,
            k,
            load_estimate: LoadEstimate::default(),
        })
    }

    /// `features: [B, F]`. Noise is drawn only when `noise_rng` is given
    /// (training mode).
    pub fn forward(&self, sess: &mut Session, features: Var, noise_rng: Option<&mut ChaCha8Rng>) -> Result<GateOutput> {
        let wg = sess.param(self.w_gate);
        let raw = sess.tape.matmul(features, wg)?;
        let logits = match noise_rng {
            Some(rng) => {
                let wn = sess.param(self.w_noise);
                let pre = sess.tape.matmul(features, wn)?;
                let scale = sess.tape.softplus(pre);
                let shape = sess.tape.shape(raw).to_vec();
                let n: usize = shape.iter().product();
                let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
                let eps = sess.constant(Tensor::new(shape, eps)?);
                let noise = sess.tape.mul(eps, scale)?;
                sess.tape.add(raw, noise)?
            }
            None => raw,
        };
        let decision = {
            let lv = sess.tape.value(logits).clone();
            let rv = sess.tape.value(raw).clone();
            topk_gate_from_logits(&lv, &rv, self.k)?
        };
        let mask = sess.constant(selection_mask(&decision));
        let masked = sess.tape.add(logits, mask)?;
        let gates = sess.tape.softmax(masked, 1)?;

        let probs = sess.tape.softmax(logits, 1)?;
        let soft = sess.tape.sum_axis(probs, 0, false)?;
        let soft = sess.tape.scale(soft, self.k as f64);
        let load = match self.load_estimate {
            LoadEstimate::Soft => soft,
            LoadEstimate::StraightThrough => {
                let sv = sess.tape.value(soft).clone();
                let offset = Tensor::vector(decision.load.iter().zip(sv.data()).map(|(h, s)| h - s).collect());
                let offset = sess.constant(offset);
                sess.tape.add(soft, offset)?
            }
        };
        Ok(GateOutput { decision, gates, load })
    }

    /// Gradient-free evaluation on plain features.
    pub fn evaluate(&self, store: &ParamStore, features: &Tensor, noise_rng: Option<&mut ChaCha8Rng>) -> Result<GateDecision> {
        let mut sess = Session::new(store, false);
        let f = sess.constant(features.clone());
        Ok(self.forward(&mut sess, f, noise_rng)?.decision)
    }
}

/// `0` on selected experts, [`MASKED`] elsewhere.
fn selection_mask(d: &GateDecision) -> Tensor {
    let e = d.experts();
    let mut mask = Tensor::full([d.batch(), e], MASKED);
    for (r, sel) in d.topk_indices.iter().enumerate() {
        for &j in sel {
            mask.data_mut()[r * e + j] = 0.0;
        }
    }
    mask
}

/// Per-expert row lists derived from a [`GateDecision`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DispatchPlan {
    pub batch: usize,
    /// Ascending batch rows routed to each expert.
    pub rows: Vec<Vec<usize>>,
}

impl DispatchPlan {
    pub fn new(d: &GateDecision) -> Self {
        let mut rows = vec![Vec::new(); d.experts()];
        for (b, sel) in d.topk_indices.iter().enumerate() {
            for &e in sel {
                rows[e].push(b);
            }
        }
        Self { batch: d.batch(), rows }
    }

    /// Gathers each expert's sub-batch along axis 0; experts with no rows get `None`.
    pub fn dispatch(&self, tape: &mut Tape, x: Var) -> Result<Vec<Option<Var>>> {
        let b = tape.shape(x).first().copied().unwrap_or(0);
        if b != self.batch {
            return Err(Error::contract(format!("dispatch plan built for batch {}, got {b}", self.batch)));
        }
        self.rows
            .iter()
            .map(|r| if r.is_empty() { Ok(None) } else { Ok(Some(tape.index_select(x, 0, r)?)) })
            .collect()
    }

    /// `out[b] = sum_{e in topk(b)} gates[b, e] * outputs[e][row of b]`.
    pub fn combine(&self, tape: &mut Tape, outputs: &[Option<Var>], gates: Var) -> Result<Var> {
        if outputs.len() != self.rows.len() {
            return Err(Error::contract(format!("{} expert outputs for {} experts", outputs.len(), self.rows.len())));
        }
        let mut acc: Option<Var> = None;
        for (e, (rows, out)) in self.rows.iter().zip(outputs).enumerate() {
            if rows.is_empty() {
                continue;
            }
            let out = out.ok_or_else(|| Error::contract(format!("expert {e} has routed rows but no output")))?;
            let shape = tape.shape(out).to_vec();
            if shape.first() != Some(&rows.len()) {
                return Err(Error::contract(format!(
                    "expert {e} returned {:?} for {} routed rows",
                    shape,
                    rows.len()
                )));
            }
            let g = tape.index_select(gates, 0, rows)?;
            let g = tape.narrow(g, 1, e, 1)?;
            let mut gshape = vec![1; shape.len()];
            gshape[0] = rows.len();
            let g = tape.reshape(g, &gshape)?;
            let weighted = tape.mul(out, g)?;
            let placed = tape.index_add(weighted, 0, rows, self.batch)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, placed)?,
                None => placed,
            });
        }
        acc.ok_or_else(|| Error::contract("no expert received any rows"))
    }
}

/// Plain-tensor dispatch, for inspection and tests.
pub fn dispatch(x: &Tensor, d: &GateDecision) -> Result<Vec<Option<Tensor>>> {
    let plan = DispatchPlan::new(d);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let parts = plan.dispatch(&mut tape, xv)?;
    Ok(parts.into_iter().map(|p| p.map(|v| tape.value(v).clone())).collect())
}

/// Plain-tensor combine, for inspection and tests.
pub fn combine(outputs: &[Option<Tensor>], d: &GateDecision) -> Result<Tensor> {
    let plan = DispatchPlan::new(d);
    let mut tape = Tape::new();
    let outs: Vec<Option<Var>> = outputs.iter().map(|o| o.as_ref().map(|t| tape.constant(t.clone()))).collect();
    let g = tape.constant(d.gates.clone());
    let y = plan.combine(&mut tape, &outs, g)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decide(logits: Vec<f64>, e: usize, k: usize) -> GateDecision {
        let t = Tensor::new([logits.len() / e, e], logits).unwrap();
        topk_gate_from_logits(&t, &t, k).unwrap()
    }

    #[test]
    fn pair_softmax_example() {
        let d = decide(vec![2.0, 1.0, 0.0, -1.0], 4, 2);
        let g = d.gates.data();
        assert!((g[0] - 0.731058578630074).abs() < 1e-12);
        assert!((g[1] - 0.268941421369995).abs() < 1e-12);
        assert_eq!(&g[2..], &[0.0, 0.0]);
        assert_eq!(d.load, vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn equal_logits_are_uniform() {
        let d = decide(vec![0.7; 4], 4, 4);
        assert!(d.gates.data().iter().all(|g| (g - 0.25).abs() < 1e-15));
    }

    #[test]
    fn top1_is_one_hot_with_low_index_ties() {
        let d = decide(vec![1.0, 3.0, 3.0, 0.0], 4, 1);
        assert_eq!(d.gates.data(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(d.topk_indices, vec![vec![1]]);
    }

    #[test]
    fn k_out_of_range() {
        let t = Tensor::zeros([1, 4]);
        assert!(matches!(topk_gate_from_logits(&t, &t, 5), Err(Error::Config(_))));
        assert!(matches!(topk_gate_from_logits(&t, &t, 0), Err(Error::Config(_))));
    }

    #[test]
    fn cov_examples() {
        assert_eq!(cov(&[1.0, 1.0, 1.0]), 0.0);
        assert!((cov(&[0.0, 2.0]) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dispatch_bookkeeping() {
        // rows 0 and 1 to expert 1, row 2 to expert 3
        let d = decide(vec![0.0, 5.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0], 4, 1);
        let plan = DispatchPlan::new(&d);
        assert_eq!(plan.rows, vec![vec![], vec![0, 1], vec![], vec![2]]);
        let x = Tensor::from_fn([3, 2], |i| (i[0] * 10 + i[1]) as f64);
        let parts = dispatch(&x, &d).unwrap();
        assert!(parts[0].is_none() && parts[2].is_none());
        assert_eq!(parts[1].as_ref().unwrap().data(), &[0.0, 1.0, 10.0, 11.0]);
        assert_eq!(parts[3].as_ref().unwrap().data(), &[20.0, 21.0]);
        let back = combine(&parts, &d).unwrap();
        assert_eq!(back, x);
        assert!(dispatch(&Tensor::zeros([2, 2]), &d).is_err());
        assert!(combine(&[None, None, None, parts[3].clone()], &d).is_err());
    }
}
