use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing autodiff against central finite differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over all coordinates of `|g_fd - g_ad| / max(|g_fd|, |g_ad|, 1e-8)`.
    pub max_rel_error: f64,
    /// `(input, coordinate)` where the maximum occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], track: bool) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.detached().with_requires_grad(track)))
        .collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::Shape(format!("grad_check function returned dims {:?}", value.dims())));
    }
    if !value.data()[0].is_finite() {
        return Err(Error::NonFinite("grad_check function output".into()));
    }
    Ok((tape, vars, out))
}

/// Checks reverse-mode gradients of a scalar function against central
/// finite differences with step `eps` (must lie in `[1e-5, 1e-2]`).
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::Parameter(format!("eps {eps} outside [1e-5, 1e-2]")));
    }
    let (mut tape, vars, out) = evaluate(&f, inputs, true)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), coordinates: 0 };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let base = input.data()[j];
            probe[i].data_mut()[j] = base + eps;
            let (tp, _, op) = evaluate(&f, &probe, false)?;
            let plus = tp.value(op).data()[0];
            probe[i].data_mut()[j] = base - eps;
            let (tm, _, om) = evaluate(&f, &probe, false)?;
            let minus = tm.value(om).data()[0];
            probe[i].data_mut()[j] = base;

            let fd = (plus - minus) / (2.0 * eps);
            let ad = analytic[i][j];
            let denom = fd.abs().max(ad.abs()).max(1e-8);
            let rel = (fd - ad).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}
