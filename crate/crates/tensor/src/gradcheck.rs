//! Central-difference gradient oracle.
//!
//! The objective is rebuilt from scratch on a fresh tape for every
//! perturbation, so the check exercises exactly the forward code path the
//! analytic gradient came from.
//!
//! Relative errors use the denominator `max(|a|, |n|, floor)`, where
//! `floor = resolution / tol` and `resolution` bounds the rounding error of
//! the difference quotient. Gradients smaller than the floor are therefore
//! compared in absolute terms against the resolution.

use std::fmt::Display;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Result, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum tolerated relative error per coordinate.
    pub tol: f64,
    /// Tensors larger than this are checked on a random coordinate sample.
    pub max_coords: usize,
    pub seed: u64,
    /// Combine steps `h` and `h/2` to cancel the second-order truncation term.
    pub richardson: bool,
}

impl GradCheckConfig {
    /// Settings for objectives evaluated in 64-bit precision.
    pub fn float64() -> Self {
        GradCheckConfig {
            h: 1e-3,
            tol: 1e-5,
            max_coords: 64,
            seed: 0,
            richardson: true,
        }
    }

    /// Settings for objectives evaluated in 32-bit precision.
    pub fn float32() -> Self {
        GradCheckConfig {
            h: 1e-2,
            tol: 1e-3,
            max_coords: 64,
            seed: 0,
            richardson: true,
        }
    }
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self::float64()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error and its (analytic, numeric) pair.
    pub worst: Option<(usize, f64, f64)>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Bound on the rounding error of the difference quotient for an objective
/// of magnitude `value` evaluated in `T`.
pub fn resolution<T: Scalar>(value: f64, cfg: &GradCheckConfig) -> f64 {
    let eps = T::epsilon().as_f64();
    // central difference: 2 eps |f| / 2h; Richardson weights sum to 4/3 * 2 + 1/3
    let gain = if cfg.richardson { 3.0 } else { 1.0 };
    ACCUMULATION * gain * eps * value.abs().max(1.0) / cfg.h
}

/// Allowance, in units of eps |f|, for roundoff accumulated by the forward pass.
const ACCUMULATION: f64 = 64.0;

fn record<T, F, E>(f: &F, params: &[Tensor<T>], tape: &mut Tape<T>) -> Result<(Vec<Var>, Var)>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var, E>,
    E: Display,
{
    let vars = params.iter().map(|p| tape.param(p)).collect::<Result<Vec<_>>>()?;
    let loss = f(tape, &vars).map_err(|e| TensorError::Objective(e.to_string()))?;
    Ok((vars, loss))
}

fn evaluate<T, F, E>(f: &F, params: &[Tensor<T>]) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var, E>,
    E: Display,
{
    let mut tape = Tape::new();
    let (_, loss) = record(f, params, &mut tape)?;
    let v = tape.value(loss);
    if !v.is_scalar() {
        return Err(TensorError::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item().as_f64())
}

/// Gradients of `f` with respect to every tensor in `params` via
/// [`Tape::backward`].
pub fn analytic_gradients<T, F, E>(f: &F, params: &[Tensor<T>]) -> Result<Vec<Vec<T>>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var, E>,
    E: Display,
{
    let mut tape = Tape::new();
    let (vars, loss) = record(f, params, &mut tape)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.leaf_grad(v)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); p.numel()])
        })
        .collect())
}

/// Compares `analytic` against central differences of `f`.
pub fn check_gradients<T, F, E>(
    f: &F,
    params: &[Tensor<T>],
    analytic: &[Vec<T>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var, E>,
    E: Display,
{
    let first = evaluate(f, params)?;
    let second = evaluate(f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let floor = resolution::<T>(first, cfg) / cfg.tol;
    let mut report = GradCheckReport {
        tol: cfg.tol,
        floor,
        params: Vec::with_capacity(params.len()),
    };
    for (pi, grad) in analytic.iter().enumerate() {
        let n = params[pi].numel();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(pi as u64));
            let mut c = sample(&mut rng, n, cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = ParamCheck {
            index: pi,
            coords_checked: coords.len(),
            max_rel_error: 0.0,
            worst: None,
            passed: true,
        };
        for &c in &coords {
            let mut quotient = |h: f64| -> Result<f64> {
                let orig = work[pi].data()[c];
                work[pi].data_mut()[c] = T::of(orig.as_f64() + h);
                let plus = evaluate(f, &work);
                work[pi].data_mut()[c] = T::of(orig.as_f64() - h);
                let minus = evaluate(f, &work);
                work[pi].data_mut()[c] = orig;
                Ok((plus? - minus?) / (2.0 * h))
            };
            let numeric = if cfg.richardson {
                let coarse = quotient(cfg.h)?;
                let fine = quotient(cfg.h / 2.0)?;
                (4.0 * fine - coarse) / 3.0
            } else {
                quotient(cfg.h)?
            };
            let a = grad[c].as_f64();
            let err = relative_error(a, numeric, floor);
            if err > check.max_rel_error || check.worst.is_none() {
                check.max_rel_error = check.max_rel_error.max(err);
                check.worst = Some((c, a, numeric));
            }
        }
        check.passed = check.max_rel_error < cfg.tol;
        report.params.push(check);
    }
    Ok(report)
}

/// Backward-pass gradients of `f` checked against central differences.
pub fn finite_diff_check<T, F, E>(f: F, params: &[Tensor<T>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var, E>,
    E: Display,
{
    let analytic = analytic_gradients(&f, params)?;
    check_gradients(&f, params, &analytic, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_of_squares(tape: &mut Tape<f64>, vars: &[Var]) -> Result<Var> {
        let mut total = None;
        for &v in vars {
            let sq = tape.mul(v, v)?;
            let s = tape.sum(sq)?;
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
        }
        Ok(total.unwrap())
    }

    fn params(seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vec![Tensor::randn([3, 4], 1.0, &mut rng), Tensor::randn([200], 1.0, &mut rng)]
    }

    #[test]
    fn sum_of_squares_passes_tightly() {
        let cfg = GradCheckConfig {
            h: 1e-3,
            tol: 1e-7,
            ..GradCheckConfig::float64()
        };
        let report = finite_diff_check(sum_of_squares, &params(1), &cfg).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.params[0].coords_checked, 12);
        assert_eq!(report.params[1].coords_checked, 64);
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let p = params(2);
        let mut analytic = analytic_gradients(&sum_of_squares, &p).unwrap();
        analytic.iter_mut().flatten().for_each(|g| *g *= 2.0);
        let report = check_gradients(&sum_of_squares, &p, &analytic, &GradCheckConfig::float64()).unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_error() > 0.4);
    }

    #[test]
    fn nondeterministic_objective_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let f = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
            calls.set(calls.get() + 1.0);
            let s = tape.sum(vars[0])?;
            tape.add_scalar(s, calls.get())
        };
        let err = finite_diff_check(f, &params(3)[..1], &GradCheckConfig::float64()).unwrap_err();
        assert!(matches!(err, TensorError::NonDeterministic { .. }));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-8), 0.0);
        assert!((relative_error(1.0, 1.1, 1e-8) - 0.1 / 1.1).abs() < 1e-12);
        assert!((relative_error(1e-10, 0.0, 1e-4) - 1e-6).abs() < 1e-18);
    }
}
