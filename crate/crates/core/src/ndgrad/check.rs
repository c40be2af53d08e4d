use super::{NdError, Tape, Tensor, Var};

/// Central-difference step used by gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative errors, so gradients that are zero up to
/// rounding compare by absolute difference instead.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input index, element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape's gradient of a scalar function against central
/// differences over every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<GradCheckReport, NdError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NdError>,
{
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    check_gradients_at(inputs, &all, f)
}

/// Like [`check_gradients`], restricted to the listed `(input, element)` pairs.
pub fn check_gradients_at<F>(
    inputs: &[Tensor],
    entries: &[(usize, usize)],
    f: F,
) -> Result<GradCheckReport, NdError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NdError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64, NdError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for &(i, j) in entries {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + FD_STEP;
        let up = eval(&work)?;
        work[i].data_mut()[j] = orig - FD_STEP;
        let down = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let analytic = grads[i].data()[j];
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            if err >= report.max_rel_err {
                report.worst = Some((i, j, analytic, numeric));
            }
        }
    }
    Ok(report)
}
