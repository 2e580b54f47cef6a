//! Finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Coordinates sampled per parameter tensor; tensors at or below this size are checked exhaustively.
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { coords_per_tensor: 24, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// (tensor index, coordinate) of the worst error.
    pub worst: Option<(usize, usize)>,
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.scalar_value(out);
    if !v.is_finite() {
        return Err(AutodiffError::NumericInstability(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Compares tape gradients of `f` against central differences.
///
/// The error per coordinate is `|analytic - numeric| / max(1, |analytic|, |numeric|)`;
/// the report carries the maximum over all checked coordinates.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(AutodiffError::Contract(format!("eps {eps} outside [1e-7, 1e-3]")));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.var(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.scalar_value(loss).is_finite() {
        return Err(AutodiffError::NumericInstability("non-finite loss".into()));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().zip(params).map(|(&v, p)| grads.get_or_zeros(v, p.shape())).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: 0, worst: None };
    let mut work: Vec<Tensor> = params.to_vec();

    for (ti, p) in params.iter().enumerate() {
        let coords: Vec<usize> = if p.len() <= opts.coords_per_tensor {
            (0..p.len()).collect()
        } else {
            (0..opts.coords_per_tensor).map(|_| rng.random_range(0..p.len())).collect()
        };
        for c in coords {
            let orig = p.data()[c];
            work[ti].data_mut()[c] = orig + eps;
            let plus = eval(&f, &work)?;
            work[ti].data_mut()[c] = orig - eps;
            let minus = eval(&f, &work)?;
            work[ti].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti].data()[c];
            if !a.is_finite() {
                return Err(AutodiffError::NumericInstability(format!("gradient {a} at tensor {ti}[{c}]")));
            }
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((ti, c));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let report = grad_check(
            |t, p| t.mul(p[0], p[0]).map(|y| t.sum(y)),
            &[Tensor::vector(vec![3.0])],
            1e-5,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let report = grad_check(
            |t, _p| Ok(t.constant(Tensor::scalar(4.0))),
            &[Tensor::vector(vec![1.0, 2.0])],
            1e-5,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert_eq!(report.coords_checked, 2);
    }

    #[test]
    fn rejects_eps_out_of_range() {
        let r = grad_check(|t, p| Ok(t.sum(p[0])), &[Tensor::scalar(1.0)], 1e-2, GradCheckOptions::default());
        assert!(matches!(r, Err(AutodiffError::Contract(_))));
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let r = grad_check(
            |t, p| {
                let s = t.sum(p[0]);
                Ok(t.log(s))
            },
            &[Tensor::vector(vec![-1.0])],
            1e-5,
            GradCheckOptions::default(),
        );
        assert!(matches!(r, Err(AutodiffError::NumericInstability(_))));
    }
}
