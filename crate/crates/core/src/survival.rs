//! Nonparametric survival core: discrete baseline hazard on the observed
//! event-time grid, proportional-hazards evaluation, the left-truncated
//! product-limit estimator, ghost-copy moments and the weighted Cox M-step.
//!
//! Density convention at grid points: `f(t_k) = λ_k e^η exp(-Λ(t_k) e^η)`
//! where `Λ(t_k)` includes `λ_k`.

use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::linalg::SquareMatrix;
use crate::scalar::Scalar;
use std::fmt::Write as _;

/// Point masses of the baseline hazard at the distinct event times.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardGrid<T> {
    pub times: Vec<T>,
    pub masses: Vec<T>,
}

impl<T: Scalar> HazardGrid<T> {
    pub fn new(times: Vec<T>, masses: Vec<T>) -> Result<Self> {
        let g = Self { times, masses };
        g.validate()?;
        Ok(g)
    }

    /// Grid on the given times with zero masses.
    pub fn on_times(times: Vec<T>) -> Self {
        let k = times.len();
        Self { times, masses: vec![T::zero(); k] }
    }

    /// Distinct SAB/stillbirth times of the cohort, increasing.
    pub fn event_times(cohort: &Cohort<T>) -> Vec<T> {
        let mut t: Vec<T> = cohort.records().iter().filter(|r| r.is_event()).map(|r| r.end_time).collect();
        t.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
        t.dedup();
        t
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.masses.len() {
            return Err(Error::Config("grid times and masses differ in length".into()));
        }
        if self.times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("grid times must be strictly increasing".into()));
        }
        for (k, &m) in self.masses.iter().enumerate() {
            if !(m >= T::zero()) || !m.is_finite() {
                return Err(Error::NegativeMass { index: k, value: m.f64() });
            }
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.times.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of grid points `t_k <= t`.
    #[inline]
    pub fn count_le(&self, t: T) -> usize {
        self.times.partition_point(|&s| s <= t)
    }

    /// Number of grid points `t_k < t`.
    #[inline]
    pub fn count_lt(&self, t: T) -> usize {
        self.times.partition_point(|&s| s < t)
    }

    /// Index of `t` on the grid, if it is a grid point.
    pub fn index_of(&self, t: T) -> Option<usize> {
        let k = self.count_lt(t);
        (k < self.len() && self.times[k] == t).then_some(k)
    }

    /// `Λ(t) = Σ_{t_k <= t} λ_k`
    pub fn cumulative(&self, t: T) -> T {
        self.masses[..self.count_le(t)].iter().copied().sum()
    }

    /// Prefix sums: element `m` is the sum of the first `m` masses.
    pub fn cumulative_prefix(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.len() + 1);
        let mut acc = T::zero();
        out.push(acc);
        for &m in &self.masses {
            acc += m;
            out.push(acc);
        }
        out
    }

    /// Unchecked `exp(-Λ(t) e^η)`.
    #[inline]
    pub fn survival(&self, linpred: T, t: T) -> T {
        (-self.cumulative(t) * linpred.exp()).exp()
    }

    /// Unchecked `f(t_k)`.
    #[inline]
    pub fn density(&self, linpred: T, k: usize) -> T {
        let r = linpred.exp();
        let cum: T = self.masses[..=k].iter().copied().sum();
        self.masses[k] * r * (-cum * r).exp()
    }

    /// Per-grid densities `f(t_k)` for one linear predictor.
    pub fn densities(&self, linpred: T) -> Vec<T> {
        let r = linpred.exp();
        let mut cum = T::zero();
        self.masses
            .iter()
            .map(|&m| {
                cum += m;
                m * r * (-cum * r).exp()
            })
            .collect()
    }

    /// Grid with every time shifted by `delta`.
    pub fn shifted(&self, delta: T) -> Self {
        Self { times: self.times.iter().map(|&t| t + delta).collect(), masses: self.masses.clone() }
    }
}

/// `exp{-Λ(t) e^linpred}`, right-continuous in `t`.
pub fn survival_function<T: Scalar>(grid: &HazardGrid<T>, linpred: T, t: T) -> Result<T> {
    grid.validate()?;
    Ok(grid.survival(linpred, t))
}

/// Density mass `f(t_k)` at grid index `k` (0-based).
pub fn event_mass<T: Scalar>(grid: &HazardGrid<T>, linpred: T, k: usize) -> Result<T> {
    grid.validate()?;
    if k >= grid.len() {
        return Err(Error::IndexOutOfRange { index: k, len: grid.len() });
    }
    Ok(grid.density(linpred, k))
}

/// Posterior moments of the truncated-out copies of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct GhostMoments<T> {
    /// Expected number of ghost copies.
    pub expected_count: T,
    /// Distribution of a ghost time over grid points `t_k < Q`, indexed from
    /// the first grid point. Empty when no grid point precedes `Q`.
    pub time_distribution: Vec<T>,
    /// Probability that one draw survives past enrollment; the geometric
    /// success probability.
    pub enrollment_prob: T,
}

/// `1 - Σ_{t_k < q} f(t_k)`: success probability of the geometric count of
/// ghost copies, consistent with the grid density convention.
pub fn enrollment_prob<T: Scalar>(grid: &HazardGrid<T>, linpred: T, q: T) -> T {
    let m = grid.count_lt(q);
    let trunc: T = grid.densities(linpred)[..m].iter().copied().sum();
    T::one() - trunc
}

pub fn ghost_moments<T: Scalar>(grid: &HazardGrid<T>, linpred: T, q: T) -> Result<GhostMoments<T>> {
    grid.validate()?;
    if !(q >= T::zero()) {
        return Err(Error::Config("enrollment time must be nonnegative".into()));
    }
    let m = grid.count_lt(q);
    let f = grid.densities(linpred);
    let trunc: T = f[..m].iter().copied().sum();
    let p = T::one() - trunc;
    if !(p > T::zero()) {
        return Err(Error::CertainTruncation);
    }
    if trunc <= T::zero() {
        return Ok(GhostMoments { expected_count: T::zero(), time_distribution: Vec::new(), enrollment_prob: p });
    }
    Ok(GhostMoments {
        expected_count: trunc / p,
        time_distribution: f[..m].iter().map(|&x| x / trunc).collect(),
        enrollment_prob: p,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmPoint<T> {
    pub time: T,
    pub estimate: T,
    pub at_risk: usize,
    pub events: usize,
}

/// Product-limit step function; value 1 before the first point.
#[derive(Debug, Clone, PartialEq)]
pub struct KmCurve<T> {
    pub points: Vec<KmPoint<T>>,
    /// Set when an event time had an empty risk set; that step is skipped.
    pub empty_risk_set: bool,
}

impl<T: Scalar> KmCurve<T> {
    pub fn value_at(&self, t: T) -> T {
        let k = self.points.partition_point(|p| p.time <= t);
        if k == 0 {
            T::one()
        } else {
            self.points[k - 1].estimate
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,estimate,at_risk,events\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{:.10},{},{}", p.time, p.estimate.f64(), p.at_risk, p.events);
        }
        out
    }
}

/// Product-limit estimator with risk set `{i : entry_i < t <= exit_i}`.
pub fn product_limit<T: Scalar>(entries: &[T], exits: &[T], events: &[bool]) -> KmCurve<T> {
    let mut times: Vec<T> = exits.iter().zip(events).filter(|(_, &e)| e).map(|(&x, _)| x).collect();
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    times.dedup();
    let mut s = T::one();
    let mut empty = false;
    let mut points = Vec::with_capacity(times.len());
    for &t in &times {
        let mut at_risk = 0;
        let mut d = 0;
        for i in 0..exits.len() {
            if entries[i] < t && t <= exits[i] {
                at_risk += 1;
                if events[i] && exits[i] == t {
                    d += 1;
                }
            }
        }
        if at_risk == 0 {
            empty = true;
            continue;
        }
        s *= T::one() - T::from_usize_lossy(d) / T::from_usize_lossy(at_risk);
        points.push(KmPoint { time: t, estimate: s, at_risk, events: d });
    }
    KmCurve { points, empty_risk_set: empty }
}

/// Left-truncated Kaplan–Meier estimate of time to SAB/stillbirth.
pub fn km_left_truncated<T: Scalar>(cohort: &Cohort<T>) -> KmCurve<T> {
    let q: Vec<T> = cohort.records().iter().map(|r| r.enroll_time).collect();
    let x: Vec<T> = cohort.records().iter().map(|r| r.end_time).collect();
    let e: Vec<bool> = cohort.records().iter().map(|r| r.is_event()).collect();
    product_limit(&q, &x, &e)
}

/// Expected sufficient statistics of a weighted Cox likelihood with a
/// discrete baseline hazard, aggregated over covariate patterns.
///
/// The objective is
/// `Σ_c Σ_k E[c][k] (log λ_k + z_c·β) − Σ_c e^{z_c·β} Σ_k λ_k R[c][k]`
/// where `R[c][k]` is the weight of contributions whose exposure window
/// reaches grid point `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoxProblem<T> {
    pub names: Vec<String>,
    pub patterns: Vec<Vec<T>>,
    pub events: Vec<Vec<T>>,
    pub at_risk: Vec<Vec<T>>,
}

/// Accumulates event and at-risk weights; at-risk weights are stored as
/// tails and summed backwards in [`CoxProblemBuilder::build`].
#[derive(Debug, Clone)]
pub struct CoxProblemBuilder<T> {
    names: Vec<String>,
    patterns: Vec<Vec<T>>,
    events: Vec<Vec<T>>,
    tails: Vec<Vec<T>>,
}

impl<T: Scalar> CoxProblemBuilder<T> {
    pub fn new(names: Vec<String>, patterns: Vec<Vec<T>>, n_grid: usize) -> Self {
        let c = patterns.len();
        Self { names, patterns, events: vec![vec![T::zero(); n_grid]; c], tails: vec![vec![T::zero(); n_grid]; c] }
    }

    /// Event (observed or ghost) at grid index `k`.
    #[inline]
    pub fn add_event(&mut self, pattern: usize, k: usize, w: T) {
        self.events[pattern][k] += w;
        self.tails[pattern][k] += w;
    }

    /// Survival contribution `-Λ(X) e^η` where `count_le` grid points are
    /// at or before `X`.
    #[inline]
    pub fn add_censored(&mut self, pattern: usize, count_le: usize, w: T) {
        if count_le > 0 {
            self.tails[pattern][count_le - 1] += w;
        }
    }

    pub fn build(self) -> CoxProblem<T> {
        let at_risk = self
            .tails
            .into_iter()
            .map(|tail| {
                let mut acc = T::zero();
                let mut r: Vec<T> = tail
                    .into_iter()
                    .rev()
                    .map(|x| {
                        acc += x;
                        acc
                    })
                    .collect();
                r.reverse();
                r
            })
            .collect();
        CoxProblem { names: self.names, patterns: self.patterns, events: self.events, at_risk }
    }
}

/// Box for the regression coefficients of the hazard model. Estimates that
/// run off to infinity (e.g. a hazard ratio no data can bound) stop here.
pub const COEF_BOUND: f64 = 25.0;

#[derive(Debug, Clone, Copy)]
pub struct MStepConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for MStepConfig {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 200 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoxSolution<T> {
    pub beta: Vec<T>,
    pub masses: Vec<T>,
    pub iterations: usize,
    /// Norm of the profile score over the estimated coordinates.
    pub score_norm: T,
    /// Coordinates held fixed because their covariate is constant over the
    /// patterns carrying weight.
    pub unidentified: Vec<bool>,
}

impl<T: Scalar> CoxProblem<T> {
    #[inline]
    pub fn n_grid(&self) -> usize {
        self.events.first().map_or(0, Vec::len)
    }

    #[inline]
    pub fn n_beta(&self) -> usize {
        self.names.len()
    }

    fn linpreds(&self, beta: &[T]) -> Vec<T> {
        self.patterns.iter().map(|z| z.iter().zip(beta).fold(T::zero(), |a, (&x, &b)| a + x * b)).collect()
    }

    pub fn total_events(&self) -> Vec<T> {
        (0..self.n_grid()).map(|k| self.events.iter().map(|e| e[k]).sum()).collect()
    }

    /// Closed-form λ maximizing the objective at fixed β.
    pub fn breslow_masses(&self, beta: &[T]) -> Vec<T> {
        let r: Vec<T> = self.linpreds(beta).into_iter().map(T::exp).collect();
        (0..self.n_grid())
            .map(|k| {
                let e: T = self.events.iter().map(|ev| ev[k]).sum();
                if e <= T::zero() {
                    return T::zero();
                }
                let d: T = self.at_risk.iter().zip(&r).map(|(rk, &rc)| rc * rk[k]).sum();
                e / d
            })
            .collect()
    }

    /// Objective value at `(β, λ)`; terms with zero event weight contribute
    /// nothing regardless of `λ_k`.
    pub fn loglik(&self, beta: &[T], masses: &[T]) -> T {
        let eta = self.linpreds(beta);
        let mut ll = T::zero();
        for (c, &e) in eta.iter().enumerate() {
            let r = e.exp();
            for k in 0..self.n_grid() {
                let ev = self.events[c][k];
                if ev > T::zero() {
                    ll += ev * (masses[k].ln() + e);
                }
                ll -= r * masses[k] * self.at_risk[c][k];
            }
        }
        ll
    }

    /// Profile objective (λ at its closed form).
    pub fn profile_loglik(&self, beta: &[T]) -> T {
        self.loglik(beta, &self.breslow_masses(beta))
    }

    fn profile_derivatives(&self, beta: &[T], free: &[usize]) -> (Vec<T>, SquareMatrix<T>) {
        let eta = self.linpreds(beta);
        let r: Vec<T> = eta.iter().map(|e| e.exp()).collect();
        let q = free.len();
        let mut grad = vec![T::zero(); q];
        let mut hess = SquareMatrix::zeros(q);
        let mut zbar = vec![T::zero(); q];
        let mut zz = SquareMatrix::zeros(q);
        for k in 0..self.n_grid() {
            let ek: T = self.events.iter().map(|e| e[k]).sum();
            if ek <= T::zero() {
                continue;
            }
            let mut d = T::zero();
            zbar.iter_mut().for_each(|x| *x = T::zero());
            zz.fill_zero();
            for c in 0..self.patterns.len() {
                let ev = self.events[c][k];
                let z = &self.patterns[c];
                if ev > T::zero() {
                    for (a, &ja) in free.iter().enumerate() {
                        grad[a] += ev * z[ja];
                    }
                }
                let rw = r[c] * self.at_risk[c][k];
                if rw > T::zero() {
                    d += rw;
                    for (a, &ja) in free.iter().enumerate() {
                        zbar[a] += rw * z[ja];
                        for (b, &jb) in free.iter().enumerate().take(a + 1) {
                            zz.add(a, b, rw * z[ja] * z[jb]);
                        }
                    }
                }
            }
            if d <= T::zero() {
                continue;
            }
            for a in 0..q {
                zbar[a] /= d;
                grad[a] -= ek * zbar[a];
            }
            for a in 0..q {
                for b in 0..=a {
                    let v = ek * (zz.get(a, b) / d - zbar[a] * zbar[b]);
                    hess.add(a, b, v);
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                hess.set(b, a, hess.get(a, b));
            }
        }
        (grad, hess)
    }

    /// Coordinates whose covariate is constant across every pattern that
    /// carries event or at-risk weight.
    pub fn unidentified(&self) -> Vec<bool> {
        let active: Vec<usize> = (0..self.patterns.len())
            .filter(|&c| self.at_risk[c].first().is_some_and(|&r| r > T::zero()))
            .collect();
        (0..self.n_beta())
            .map(|j| {
                let mut vals = active.iter().map(|&c| self.patterns[c][j]);
                match vals.next() {
                    None => true,
                    Some(v0) => vals.all(|v| v == v0),
                }
            })
            .collect()
    }
}

/// Maximizes the weighted Cox objective. `fixed[j] = Some(v)` freezes
/// coordinate `j` at `v`; the rest start from `init` and are updated by
/// Newton steps on the profile objective, with `λ` in closed form.
pub fn weighted_cox_mstep<T: Scalar>(
    problem: &CoxProblem<T>,
    init: &[T],
    fixed: &[Option<T>],
    config: MStepConfig,
) -> Result<CoxSolution<T>> {
    let p = problem.n_beta();
    if problem.total_events().iter().all(|&e| e <= T::zero()) {
        return Err(Error::NoEvents);
    }
    let unidentified = problem.unidentified();
    let mut beta: Vec<T> = (0..p).map(|j| fixed[j].unwrap_or(init[j])).collect();
    let free: Vec<usize> = (0..p).filter(|&j| fixed[j].is_none() && !unidentified[j]).collect();
    let bound = T::c(COEF_BOUND);
    for &j in &free {
        beta[j] = beta[j].max(-bound).min(bound);
    }
    let mut iterations = 0;
    let mut score_norm = T::zero();
    if !free.is_empty() {
        let mut obj = problem.profile_loglik(&beta);
        let mut converged = false;
        while iterations < config.max_iter {
            iterations += 1;
            // coordinates on the bound whose score points outward stay there
            let (g_all, _) = problem.profile_derivatives(&beta, &free);
            let active: Vec<usize> = free
                .iter()
                .zip(&g_all)
                .filter(|&(&j, &g)| !(beta[j].abs() >= bound && g * beta[j] > T::zero()))
                .map(|(&j, _)| j)
                .collect();
            if active.is_empty() {
                converged = true;
                break;
            }
            let (grad, hess) = problem.profile_derivatives(&beta, &active);
            score_norm = crate::scalar::l2_norm(&grad);
            let chol = hess.cholesky().ok_or_else(|| Error::SingularHessian {
                parameter: problem.names[active[hess.first_bad_pivot()]].clone(),
            })?;
            let step = chol.solve(&grad);
            let step_norm = crate::scalar::l2_norm(&step);
            if score_norm < T::c(1e-10) || step_norm < T::c(config.tol) * T::c(1e-3) {
                converged = true;
                break;
            }
            let mut scale = T::one();
            let moved = loop {
                let mut trial = beta.clone();
                for (a, &j) in active.iter().enumerate() {
                    trial[j] = (trial[j] + scale * step[a]).max(-bound).min(bound);
                }
                let t_obj = problem.profile_loglik(&trial);
                if t_obj >= obj - T::c(1e-12) * obj.abs().max(T::one()) || scale < T::c(1e-10) {
                    let moved = crate::scalar::l2_norm(&active.iter().map(|&j| trial[j] - beta[j]).collect::<Vec<_>>());
                    beta = trial;
                    obj = t_obj;
                    break moved;
                }
                scale = scale * T::c(0.5);
            };
            if moved < T::c(config.tol) {
                let (g, _) = problem.profile_derivatives(&beta, &active);
                score_norm = crate::scalar::l2_norm(&g);
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::MStepNotConverged { iterations, beta: beta.iter().map(|b| b.f64()).collect() });
        }
    }
    let masses = problem.breslow_masses(&beta);
    Ok(CoxSolution { beta, masses, iterations, score_norm, unidentified })
}
