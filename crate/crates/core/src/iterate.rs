//! Shared E/S iteration loop, optionally with squared extrapolation.
//!
//! An accelerated cycle takes two plain updates `x1 = M(x0)`, `x2 = M(x1)`,
//! extrapolates `x' = x0 - 2a r + a² v` with `r = x1 - x0`,
//! `v = x2 - 2 x1 + x0`, `a = -|r|/|v|`, and keeps `M(x')` only when its
//! observed log-likelihood is at least that of `x2`. The step length is capped
//! by a bound that grows while full steps succeed and shrinks on failure;
//! a rejected step is retried halfway towards `a = -1` before falling back
//! to `x2`. The stopping rule is the L² change of a plain update, so fixed
//! points are those of the plain loop.

use crate::ate::EsConfig;
use crate::error::{Error, Result};
use crate::scalar::{l2_norm, Scalar};

/// Parameter vectors the loop can extrapolate.
pub(crate) trait EsParams<T>: Clone {
    /// Flat coordinates; hazard masses enter on the log scale.
    fn pack(&self) -> Vec<T>;
    /// Inverse of [`EsParams::pack`] using `self` for anything not packed.
    fn unpack(&self, v: &[T]) -> Self;
    fn distance(&self, other: &Self) -> T;
}

pub(crate) struct EsRun<P, T, S> {
    pub theta: P,
    /// E-step output at `theta`.
    pub stats: S,
    pub trace: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
    pub change: T,
}

/// Packs hazard masses as logs; zero masses stay zero on unpacking.
pub(crate) fn pack_masses<T: Scalar>(out: &mut Vec<T>, masses: &[T]) {
    out.extend(masses.iter().map(|&m| if m > T::zero() { m.ln() } else { T::neg_infinity() }));
}

pub(crate) fn unpack_masses<T: Scalar>(v: &[T]) -> Vec<T> {
    v.iter().map(|&x| if x == T::neg_infinity() || x.is_nan() { T::zero() } else { x.exp() }).collect()
}

/// Step length `a <= -1`, or `None` when the cycle is too short to extrapolate.
fn step_length<T: Scalar>(x0: &[T], x1: &[T], x2: &[T]) -> Option<T> {
    let finite = |a: T| if a.is_finite() { a } else { T::zero() };
    let nr = l2_norm(&x1.iter().zip(x0).map(|(&a, &b)| finite(a - b)).collect::<Vec<_>>());
    let nv = l2_norm(&x2.iter().zip(x1).zip(x0).map(|((&c, &b), &a)| finite(c - b - b + a)).collect::<Vec<_>>());
    if !(nv > T::zero()) {
        return None;
    }
    let a = -(nr / nv);
    (a < -T::one()).then_some(a)
}

fn extrapolate<T: Scalar>(x0: &[T], x1: &[T], x2: &[T], a: T) -> Vec<T> {
    let two = T::c(2.0);
    x0.iter()
        .zip(x1)
        .zip(x2)
        .map(|((&p, &q), &r)| {
            let (ri, vi) = (q - p, r - q - q + p);
            if ri.is_finite() && vi.is_finite() {
                p - two * a * ri + a * a * vi
            } else {
                p
            }
        })
        .collect()
}

const STEP_GROWTH: f64 = 4.0;
const BACKTRACKS: usize = 2;

pub(crate) fn run_es<T, P, S>(
    start: P,
    config: &EsConfig,
    label: &str,
    mut e_step: impl FnMut(&P) -> Result<(S, T)>,
    mut s_step: impl FnMut(&S, &P) -> Result<P>,
) -> Result<EsRun<P, T, S>>
where
    T: Scalar,
    P: EsParams<T>,
{
    if !(config.tol > 0.0) {
        return Err(Error::Config("tolerance must be positive".into()));
    }
    let tol = T::c(config.tol);
    let mut theta = start;
    let (mut stats, ll) = e_step(&theta)?;
    let mut trace = vec![ll];
    let mut iterations = 0;
    let mut change = T::infinity();
    let mut converged = false;
    let mut step_max = T::one();
    let wrap = |iteration: usize| move |e: Error| Error::SStep { iteration, source: Box::new(e) };
    while iterations < config.max_iter {
        iterations += 1;
        let x1 = s_step(&stats, &theta).map_err(wrap(iterations))?;
        change = x1.distance(&theta);
        let (s1, ll1) = e_step(&x1)?;
        trace.push(ll1);
        log::info!("{label} iteration {iterations}: change {:.3e}, loglik {:.8}", change.f64(), ll1.f64());
        if change < tol {
            theta = x1;
            stats = s1;
            converged = true;
            break;
        }
        if !config.accelerate || iterations >= config.max_iter {
            theta = x1;
            stats = s1;
            continue;
        }
        iterations += 1;
        let x2 = s_step(&s1, &x1).map_err(wrap(iterations))?;
        let (s2, ll2) = e_step(&x2)?;
        let mut next = (x2, s2, ll2);
        if let Some(mut a) = step_length(&theta.pack(), &x1.pack(), &next.0.pack()) {
            a = a.max(-step_max);
            let (p0, p1, p2) = (theta.pack(), x1.pack(), next.0.pack());
            for _ in 0..=BACKTRACKS {
                if iterations >= config.max_iter {
                    break;
                }
                let xp = theta.unpack(&extrapolate(&p0, &p1, &p2, a));
                // any failure at the extrapolated point counts as a rejection
                let trial = e_step(&xp)
                    .and_then(|(sp, _)| s_step(&sp, &xp))
                    .and_then(|x3| e_step(&x3).map(|(s3, ll3)| (x3, s3, ll3)));
                match trial {
                    Ok((x3, s3, ll3)) if ll3.is_finite() && ll3 >= next.2 => {
                        iterations += 1;
                        if a <= -step_max {
                            step_max = step_max * T::c(STEP_GROWTH);
                        }
                        next = (x3, s3, ll3);
                        break;
                    }
                    _ => {
                        step_max = (step_max / T::c(STEP_GROWTH)).max(T::one());
                        a = (a - T::one()) * T::c(0.5);
                    }
                }
            }
        }
        log::info!("{label} iteration {iterations}: extrapolated, loglik {:.8}", next.2.f64());
        trace.push(next.2);
        theta = next.0;
        stats = next.1;
    }
    if !converged {
        log::warn!("{label} ES stopped after {iterations} iterations without convergence (change {:.3e})", change.f64());
    }
    Ok(EsRun { theta, stats, trace, iterations, converged, change })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extrapolation_solves_linear_contraction() {
        // x -> 0.5 x + 1 has fixed point 2; one squared step lands on it
        let m = |x: f64| 0.5 * x + 1.0;
        let x0 = [0.0];
        let x1 = [m(x0[0])];
        let x2 = [m(x1[0])];
        let a = step_length(&x0, &x1, &x2).unwrap();
        assert_eq!(a, -2.0);
        let v = extrapolate(&x0, &x1, &x2, a);
        assert!((v[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_steps_are_not_extrapolated() {
        assert!(step_length(&[0.0], &[1.0], &[0.0]).is_none());
        assert!(step_length(&[1.0], &[1.0], &[1.0]).is_none());
    }

    #[test]
    fn zero_masses_roundtrip() {
        let mut v = Vec::new();
        pack_masses(&mut v, &[0.0, 0.25]);
        assert_eq!(unpack_masses(&v), vec![0.0, 0.25]);
    }
}
