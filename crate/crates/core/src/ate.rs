//! Selection-model ES fitting of the average treatment effect.
//!
//! Outcome model `logit P(Y(d)=1) = α₀ + α_D d`, SAB/stillbirth hazard
//! `λ(t) exp(β_D d + β_Y y)` with a discrete baseline on the event grid.
//! Left truncation is handled by ghost copies that share the subject's `Y`.

use crate::bootstrap::{run_bootstrap, BootConfig, BootSummary};
use crate::cohort::{Cohort, SubjectRecord};
use crate::error::{Error, Result};
use crate::propensity::{estimate_weights, fit_logistic_irls, Design, IrlsConfig, PropensityModel, WeightVector};
use crate::scalar::{l2_norm, log1pexp, Scalar};
use crate::survival::{weighted_cox_mstep, CoxProblem, CoxProblemBuilder, HazardGrid, MStepConfig};
use std::sync::Arc;
use crate::iterate::{pack_masses, run_es, unpack_masses, EsParams};

pub const PARAM_NAMES: [&str; 4] = ["alpha0", "alphaD", "betaD", "betaY"];

#[derive(Debug, Clone, PartialEq)]
pub struct AteTheta<T> {
    pub alpha0: T,
    pub alpha_d: T,
    pub beta_d: T,
    pub beta_y: T,
    pub grid: HazardGrid<T>,
}

impl<T: Scalar> AteTheta<T> {
    #[inline]
    pub fn pi(&self, exposed: bool) -> T {
        crate::scalar::expit(self.alpha0 + if exposed { self.alpha_d } else { T::zero() })
    }

    #[inline]
    pub fn linpred(&self, exposed: bool, defect: bool) -> T {
        let mut e = T::zero();
        if exposed {
            e += self.beta_d;
        }
        if defect {
            e += self.beta_y;
        }
        e
    }

    /// `(α₀, α_D, β_D, β_Y)`
    pub fn finite(&self) -> [T; 4] {
        [self.alpha0, self.alpha_d, self.beta_d, self.beta_y]
    }

    pub fn with_finite(&self, p: [T; 4]) -> Self {
        Self { alpha0: p[0], alpha_d: p[1], beta_d: p[2], beta_y: p[3], grid: self.grid.clone() }
    }

    /// L² distance over the finite parameters and the hazard masses.
    pub fn distance(&self, other: &Self) -> T {
        let mut d: Vec<T> = self.finite().iter().zip(other.finite()).map(|(&a, b)| a - b).collect();
        d.extend(self.grid.masses.iter().zip(&other.grid.masses).map(|(&a, &b)| a - b));
        l2_norm(&d)
    }

    /// Moves the baseline onto another time grid. Masses are taken from
    /// matching times; unmatched times get the mean mass.
    pub fn regrid(&self, times: &[T]) -> Self {
        let mean = if self.grid.is_empty() {
            T::zero()
        } else {
            self.grid.masses.iter().copied().sum::<T>() / T::from_usize_lossy(self.grid.len())
        };
        let masses = times.iter().map(|&t| self.grid.index_of(t).map_or(mean, |k| self.grid.masses[k])).collect();
        Self { grid: HazardGrid { times: times.to_vec(), masses }, ..self.clone() }
    }
}

impl<T: Scalar> EsParams<T> for AteTheta<T> {
    fn pack(&self) -> Vec<T> {
        let mut v = self.finite().to_vec();
        pack_masses(&mut v, &self.grid.masses);
        v
    }

    fn unpack(&self, v: &[T]) -> Self {
        let mut t = self.with_finite([v[0], v[1], v[2], v[3]]);
        t.grid.masses = unpack_masses(&v[4..]);
        t
    }

    fn distance(&self, other: &Self) -> T {
        AteTheta::distance(self, other)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EsConfig {
    /// Threshold on the L² change of the full parameter vector.
    pub tol: f64,
    pub max_iter: usize,
    pub mstep: MStepConfig,
    /// Holds `β_Y` at this value throughout (sensitivity sweeps).
    pub fixed_beta_y: Option<f64>,
    /// Squared extrapolation between plain updates (see [`crate::iterate`]).
    pub accelerate: bool,
}

impl Default for EsConfig {
    fn default() -> Self {
        Self { tol: 1e-5, max_iter: 2000, mstep: MStepConfig::default(), fixed_beta_y: None, accelerate: true }
    }
}

/// Grid positions of one subject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct GridIndex {
    pub event_k: Option<usize>,
    /// grid points `<= X`
    pub x_le: usize,
    /// grid points `< Q`
    pub q_lt: usize,
}

impl GridIndex {
    pub(crate) fn of<T: Scalar>(r: &SubjectRecord<T>, grid: &HazardGrid<T>) -> Result<Self> {
        let event_k = if r.is_event() {
            Some(grid.index_of(r.end_time).ok_or_else(|| {
                Error::validation(None, format!("event time {} of `{}` is not on the hazard grid", r.end_time, r.id))
            })?)
        } else {
            None
        };
        Ok(Self { event_k, x_le: grid.count_le(r.end_time), q_lt: grid.count_lt(r.enroll_time) })
    }
}

/// Per-pattern quantities shared by all subjects at one parameter value.
struct Tables<T> {
    cum: Vec<T>,
    log_mass: Vec<T>,
    /// `[d][y]` densities on the grid
    dens: [[Vec<T>; 2]; 2],
    /// `[d][y]` prefix sums of `dens` (length K + 1)
    trunc: [[Vec<T>; 2]; 2],
    /// `[d][y]` log of `1 - trunc`
    log_enroll: [[Vec<T>; 2]; 2],
    eta: [[T; 2]; 2],
    rate: [[T; 2]; 2],
    log_pi: [[T; 2]; 2],
}

fn prefix<T: Scalar>(v: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(v.len() + 1);
    let mut acc = T::zero();
    out.push(acc);
    for &x in v {
        acc += x;
        out.push(acc);
    }
    out
}

impl<T: Scalar> Tables<T> {
    fn new(theta: &AteTheta<T>) -> Self {
        let cum = theta.grid.cumulative_prefix();
        let mk = |d: usize, y: usize| theta.linpred(d == 1, y == 1);
        let eta = [[mk(0, 0), mk(0, 1)], [mk(1, 0), mk(1, 1)]];
        let dens = eta.map(|row| row.map(|e| theta.grid.densities(e)));
        let trunc = [[prefix(&dens[0][0]), prefix(&dens[0][1])], [prefix(&dens[1][0]), prefix(&dens[1][1])]];
        let lin = [theta.alpha0, theta.alpha0 + theta.alpha_d];
        let log_pi = lin.map(|x| [-log1pexp(x), -log1pexp(-x)]);
        let log_enroll = trunc.each_ref().map(|row| row.each_ref().map(|t| t.iter().map(|&f| (T::one() - f).ln()).collect()));
        Self {
            cum,
            log_mass: theta.grid.masses.iter().map(|m| m.ln()).collect(),
            dens,
            trunc,
            log_enroll,
            eta,
            rate: eta.map(|row| row.map(|e| e.exp())),
            log_pi,
        }
    }

    /// `1 - F(Q⁻)` for pattern `(d, y)`.
    #[inline]
    fn enroll_prob(&self, d: usize, y: usize, ix: &GridIndex) -> T {
        T::one() - self.trunc[d][y][ix.q_lt]
    }

    /// `log{π^y(1-π)^{1-y} [λe^η]^Δ S(X) / (1 - F(Q⁻))}`
    fn log_term(&self, d: usize, y: usize, ix: &GridIndex) -> T {
        let r = self.rate[d][y];
        let log_l = match ix.event_k {
            Some(k) => self.log_mass[k] + self.eta[d][y] - self.cum[k + 1] * r,
            None => -self.cum[ix.x_le] * r,
        };
        self.log_pi[d][y] + log_l - self.log_enroll[d][y][ix.q_lt]
    }
}

#[inline]
fn log_sum_exp<T: Scalar>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Allowed outcome values: the observed one, or both.
fn y_support(y: Option<bool>) -> (bool, bool) {
    match y {
        Some(true) => (false, true),
        Some(false) => (true, false),
        None => (true, true),
    }
}

/// Subject log-likelihood and posterior `P(Y = 1 | observed)`.
fn subject_terms<T: Scalar>(tab: &Tables<T>, d: usize, y: Option<bool>, ix: &GridIndex) -> (T, T) {
    let (a0, a1) = y_support(y);
    let t0 = if a0 { tab.log_term(d, 0, ix) } else { T::neg_infinity() };
    let t1 = if a1 { tab.log_term(d, 1, ix) } else { T::neg_infinity() };
    let lse = log_sum_exp(t0, t1);
    let post = match y {
        Some(v) => {
            if v {
                T::one()
            } else {
                T::zero()
            }
        }
        None => (t1 - lse).exp(),
    };
    (lse, post)
}

/// `P(Y = 1 | observed data)` for a subject whose defect status is missing.
pub fn posterior_missing_defect<T: Scalar>(record: &SubjectRecord<T>, theta: &AteTheta<T>) -> Result<T> {
    theta.grid.validate()?;
    let ix = GridIndex::of(record, &theta.grid)?;
    let tab = Tables::new(theta);
    Ok(subject_terms(&tab, usize::from(record.exposed), None, &ix).1)
}

/// Weighted observed-data log-likelihood, marginal over missing `Y` and the
/// truncated-out copies.
pub fn observed_loglik<T: Scalar>(cohort: &Cohort<T>, weights: &WeightVector<T>, theta: &AteTheta<T>) -> Result<T> {
    check_weights(cohort, weights)?;
    theta.grid.validate()?;
    let tab = Tables::new(theta);
    let mut ll = T::zero();
    for (r, &w) in cohort.records().iter().zip(weights.as_slice()) {
        let ix = GridIndex::of(r, &theta.grid)?;
        ll += w * subject_terms(&tab, usize::from(r.exposed), r.defect.observed(), &ix).0;
    }
    Ok(ll)
}

pub(crate) fn check_weights<T: Scalar>(cohort: &Cohort<T>, weights: &WeightVector<T>) -> Result<()> {
    if weights.len() != cohort.len() {
        return Err(Error::Config(format!("{} weights for {} subjects", weights.len(), cohort.len())));
    }
    if let Some(i) = weights.as_slice().iter().position(|w| !(*w >= T::zero()) || !w.is_finite()) {
        return Err(Error::validation(Some(i + 1), "IP weight must be finite and nonnegative"));
    }
    Ok(())
}

/// Expected sufficient weights from one E-step.
///
/// The per-grid-point weights are stored factored:
/// `w_f(i,k,y) = w_s(i,y)·Δ_i·1(X_i = t_k) + 1(t_k < Q_i)·b_{i,y}·f_k(η_{d_i,y})`
/// with ghost multiplier `b_{i,y} = w_i P(Y_i=y|·) / (1 - F_i(Q_i⁻|y))`.
#[derive(Debug, Clone)]
pub struct EStepWeights<T> {
    pub w_pi1: Vec<T>,
    pub w_pi0: Vec<T>,
    pub w_s1: Vec<T>,
    pub w_s0: Vec<T>,
    ghost: [Vec<T>; 2],
    dens: [[Vec<T>; 2]; 2],
    exposed: Arc<[bool]>,
    index: Arc<[GridIndex]>,
    n_grid: usize,
}

impl<T: Scalar> EStepWeights<T> {
    pub fn len(&self) -> usize {
        self.w_pi1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w_pi1.is_empty()
    }

    pub fn n_grid(&self) -> usize {
        self.n_grid
    }

    #[inline]
    pub fn w_s(&self, i: usize, y: bool) -> T {
        if y {
            self.w_s1[i]
        } else {
            self.w_s0[i]
        }
    }

    /// Expected weight on `log λ_k + η` for subject `i` with `Y = y`.
    pub fn w_f(&self, i: usize, k: usize, y: bool) -> T {
        let ix = &self.index[i];
        let mut v = T::zero();
        if ix.event_k == Some(k) {
            v += self.w_s(i, y);
        }
        if k < ix.q_lt {
            let yi = usize::from(y);
            v += self.ghost[yi][i] * self.dens[usize::from(self.exposed[i])][yi][k];
        }
        v
    }

    /// Expected number of ghost copies of subject `i` times its weight
    /// share, `w_i P(Y=y) E[A_i | Y=y]`.
    pub fn ghost_total(&self, i: usize, y: bool) -> T {
        let ix = &self.index[i];
        let yi = usize::from(y);
        let f: T = self.dens[usize::from(self.exposed[i])][yi][..ix.q_lt].iter().copied().sum();
        self.ghost[yi][i] * f
    }

    /// Sufficient statistics of the Cox objective; patterns are the four
    /// `(d, y)` combinations with covariates `(d, y)`.
    pub fn cox_problem(&self) -> CoxProblem<T> {
        let k_len = self.n_grid;
        let patterns = vec![vec![T::zero(), T::zero()], vec![T::zero(), T::one()], vec![T::one(), T::zero()], vec![
            T::one(),
            T::one(),
        ]];
        let mut b = CoxProblemBuilder::new(vec!["exposed".into(), "defect".into()], patterns, k_len);
        let mut ghost_acc = [[vec![T::zero(); k_len + 1], vec![T::zero(); k_len + 1]], [
            vec![T::zero(); k_len + 1],
            vec![T::zero(); k_len + 1],
        ]];
        for i in 0..self.len() {
            let d = usize::from(self.exposed[i]);
            let ix = &self.index[i];
            for y in 0..2 {
                let c = 2 * d + y;
                let ws = self.w_s(i, y == 1);
                if ws > T::zero() {
                    match ix.event_k {
                        Some(k) => b.add_event(c, k, ws),
                        None => b.add_censored(c, ix.x_le, ws),
                    }
                }
                ghost_acc[d][y][ix.q_lt] += self.ghost[y][i];
            }
        }
        for d in 0..2 {
            for y in 0..2 {
                // G[k] = Σ_{i: q_lt_i > k} b_i
                let mut g = T::zero();
                for k in (0..k_len).rev() {
                    g += ghost_acc[d][y][k + 1];
                    let w = g * self.dens[d][y][k];
                    if w > T::zero() {
                        b.add_event(2 * d + y, k, w);
                    }
                }
            }
        }
        b.build()
    }
}

struct Prepared<T> {
    w: Vec<T>,
    exposed: Arc<[bool]>,
    y: Vec<Option<bool>>,
    index: Arc<[GridIndex]>,
}

fn prepare<T: Scalar>(cohort: &Cohort<T>, weights: &WeightVector<T>, grid: &HazardGrid<T>) -> Result<Prepared<T>> {
    check_weights(cohort, weights)?;
    let index: Arc<[GridIndex]> =
        cohort.records().iter().map(|r| GridIndex::of(r, grid)).collect::<Result<Vec<_>>>()?.into();
    Ok(Prepared {
        w: weights.0.clone(),
        exposed: cohort.records().iter().map(|r| r.exposed).collect(),
        y: cohort.records().iter().map(|r| r.defect.observed()).collect(),
        index,
    })
}

/// E-step at `theta`; also returns the observed log-likelihood at `theta`.
fn e_step_prepared<T: Scalar>(p: &Prepared<T>, theta: &AteTheta<T>) -> Result<(EStepWeights<T>, T)> {
    let tab = Tables::new(theta);
    let n = p.w.len();
    let mut es = EStepWeights {
        w_pi1: Vec::with_capacity(n),
        w_pi0: Vec::with_capacity(n),
        w_s1: Vec::with_capacity(n),
        w_s0: Vec::with_capacity(n),
        ghost: [Vec::with_capacity(n), Vec::with_capacity(n)],
        dens: tab.dens.clone(),
        exposed: p.exposed.clone(),
        index: p.index.clone(),
        n_grid: theta.grid.len(),
    };
    let mut ll = T::zero();
    for i in 0..n {
        let d = usize::from(p.exposed[i]);
        let ix = &p.index[i];
        let (lse, post) = subject_terms(&tab, d, p.y[i], ix);
        if !lse.is_finite() {
            return Err(Error::validation(Some(i + 1), "subject has zero likelihood at the current parameters"));
        }
        ll += p.w[i] * lse;
        let w1 = p.w[i] * post;
        let w0 = p.w[i] - w1;
        es.w_pi1.push(w1);
        es.w_pi0.push(w0);
        es.w_s1.push(w1);
        es.w_s0.push(w0);
        for (y, wy) in [(0, w0), (1, w1)] {
            let pe = tab.enroll_prob(d, y, ix);
            if !(pe > T::zero()) {
                return Err(Error::CertainTruncation);
            }
            es.ghost[y].push(if ix.q_lt == 0 { T::zero() } else { wy / pe });
        }
    }
    Ok((es, ll))
}

/// E-step weights for `cohort` at `theta`.
pub fn e_step<T: Scalar>(cohort: &Cohort<T>, weights: &WeightVector<T>, theta: &AteTheta<T>) -> Result<EStepWeights<T>> {
    theta.grid.validate()?;
    let p = prepare(cohort, weights, &theta.grid)?;
    Ok(e_step_prepared(&p, theta)?.0)
}

/// Initialization weights: missing `Y` set to 0 and truncation ignored.
fn initial_weights<T: Scalar>(p: &Prepared<T>, n_grid: usize) -> EStepWeights<T> {
    let n = p.w.len();
    let w1: Vec<T> = (0..n).map(|i| if p.y[i] == Some(true) { p.w[i] } else { T::zero() }).collect();
    let w0: Vec<T> = (0..n).map(|i| p.w[i] - w1[i]).collect();
    let empty = || [vec![T::zero(); n_grid], vec![T::zero(); n_grid]];
    EStepWeights {
        w_pi1: w1.clone(),
        w_pi0: w0.clone(),
        w_s1: w1,
        w_s0: w0,
        ghost: [vec![T::zero(); n], vec![T::zero(); n]],
        dens: [empty(), empty()],
        exposed: p.exposed.clone(),
        index: p.index.clone(),
        n_grid,
    }
}

/// Weighted logistic fit of `Y` on `(1, d)` from the `w_pi` weights.
fn fit_outcome<T: Scalar>(es: &EStepWeights<T>) -> Result<(T, T)> {
    let mut cells = [[T::zero(); 2]; 2];
    for i in 0..es.len() {
        let d = usize::from(es.exposed[i]);
        cells[d][0] += es.w_pi0[i];
        cells[d][1] += es.w_pi1[i];
    }
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut w = Vec::new();
    for d in 0..2 {
        for y in 0..2 {
            rows.push(vec![T::one(), T::from_usize_lossy(d)]);
            labels.push(y == 1);
            w.push(cells[d][y]);
        }
    }
    let design = Design::new(vec!["(Intercept)".into(), "exposed".into()], &rows);
    let fit = fit_logistic_irls(&design, &labels, Some(&w), None, IrlsConfig::default())?;
    Ok((fit.coefficients[0], fit.coefficients[1]))
}

/// S-step: refits the outcome logistic and the Cox model on `es`.
pub fn s_step<T: Scalar>(
    es: &EStepWeights<T>,
    grid_times: &[T],
    current: &AteTheta<T>,
    config: &EsConfig,
) -> Result<AteTheta<T>> {
    let (alpha0, alpha_d) = fit_outcome(es)?;
    if grid_times.is_empty() {
        return Ok(AteTheta { alpha0, alpha_d, ..current.clone() });
    }
    let problem = es.cox_problem();
    let fixed = [None, config.fixed_beta_y.map(T::c)];
    let sol = weighted_cox_mstep(&problem, &[current.beta_d, current.beta_y], &fixed, config.mstep)?;
    Ok(AteTheta {
        alpha0,
        alpha_d,
        beta_d: sol.beta[0],
        beta_y: sol.beta[1],
        grid: HazardGrid { times: grid_times.to_vec(), masses: sol.masses },
    })
}

/// Cox part only, from given E-step weights; returns `(β, λ)`.
pub fn weighted_cox_mstep_ate<T: Scalar>(
    grid_times: &[T],
    es: &EStepWeights<T>,
    config: MStepConfig,
) -> Result<(Vec<T>, HazardGrid<T>)> {
    if es.n_grid() != grid_times.len() {
        return Err(Error::Config("E-step weights do not match the grid".into()));
    }
    let sol = weighted_cox_mstep(&es.cox_problem(), &[T::zero(), T::zero()], &[None, None], config)?;
    Ok((sol.beta, HazardGrid { times: grid_times.to_vec(), masses: sol.masses }))
}

#[derive(Debug, Clone)]
pub struct AteFit<T> {
    pub theta: AteTheta<T>,
    pub iterations: usize,
    /// Observed log-likelihood at the start value and after every iteration.
    pub loglik_trace: Vec<T>,
    pub converged: bool,
    pub last_change: T,
    /// `(subject index, P(Y=1 | observed))` for subjects with missing `Y`.
    pub posterior_missing: Vec<(usize, T)>,
}

/// Runs ES from the standard initialization.
pub fn fit_ate<T: Scalar>(cohort: &Cohort<T>, weights: &WeightVector<T>, config: &EsConfig) -> Result<AteFit<T>> {
    fit_ate_from(cohort, weights, config, None)
}

/// Runs ES from `start` (moved onto this cohort's grid) or, when `None`,
/// from the standard initialization.
pub fn fit_ate_from<T: Scalar>(
    cohort: &Cohort<T>,
    weights: &WeightVector<T>,
    config: &EsConfig,
    start: Option<&AteTheta<T>>,
) -> Result<AteFit<T>> {
    if !(config.tol > 0.0) {
        return Err(Error::Config("tolerance must be positive".into()));
    }
    cohort.require_both_arms()?;
    let times = HazardGrid::event_times(cohort);
    if times.is_empty() {
        log::warn!("no SAB/stillbirth events; hazard coefficients stay at their start values");
    }
    let grid0 = HazardGrid::on_times(times.clone());
    let p = prepare(cohort, weights, &grid0)?;
    let theta = match start {
        Some(s) => {
            let mut t = s.regrid(&times);
            if let Some(b) = config.fixed_beta_y {
                t.beta_y = T::c(b);
            }
            t
        }
        None => {
            let start = AteTheta { alpha0: T::zero(), alpha_d: T::zero(), beta_d: T::zero(), beta_y: T::zero(), grid: grid0 };
            let start = AteTheta { beta_y: config.fixed_beta_y.map_or(T::zero(), T::c), ..start };
            s_step(&initial_weights(&p, times.len()), &times, &start, config)
                .map_err(|e| Error::SStep { iteration: 0, source: Box::new(e) })?
        }
    };
    let run = run_es(
        theta,
        config,
        "ate",
        |th: &AteTheta<T>| e_step_prepared(&p, th),
        |es: &EStepWeights<T>, th: &AteTheta<T>| s_step(es, &times, th, config),
    )?;
    let (theta, es) = (run.theta, run.stats);
    let posterior_missing = (0..p.w.len())
        .filter(|&i| p.y[i].is_none())
        .map(|i| {
            let post = if p.w[i] > T::zero() {
                es.w_pi1[i] / p.w[i]
            } else {
                let tab = Tables::new(&theta);
                subject_terms(&tab, usize::from(p.exposed[i]), None, &p.index[i]).1
            };
            (i, post)
        })
        .collect();
    Ok(AteFit {
        theta,
        iterations: run.iterations,
        loglik_trace: run.trace,
        converged: run.converged,
        last_change: run.change,
        posterior_missing,
    })
}

/// Bootstrap of the ATE fit: each replicate resamples subjects, refits the
/// propensity model and weights, and reruns ES from `warm` when given.
pub fn bootstrap_ate<T: Scalar>(
    cohort: &Cohort<T>,
    model: &dyn PropensityModel<T>,
    es: &EsConfig,
    boot: &BootConfig,
    seed: u64,
    warm: Option<&AteTheta<T>>,
) -> Result<BootSummary> {
    let names = PARAM_NAMES.iter().map(|s| s.to_string()).collect();
    run_bootstrap(cohort.len(), boot, seed, names, |idx| {
        let rep = cohort.resample(idx);
        let (w, _) = estimate_weights(&rep, model)?;
        let fit = fit_ate_from(&rep, &w, es, warm)?;
        if !fit.converged {
            return Err(Error::Config("replicate did not converge".into()));
        }
        Ok(fit.theta.finite().iter().map(|v| v.f64()).collect())
    })
}

/// Bootstrap SEs and percentile intervals for `(α₀, α_D, β_D, β_Y)`.
pub fn bootstrap_ci<T: Scalar>(
    cohort: &Cohort<T>,
    model: &dyn PropensityModel<T>,
    es: &EsConfig,
    boot: &BootConfig,
    seed: u64,
) -> Result<BootSummary> {
    bootstrap_ate(cohort, model, es, boot, seed, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{CovariateSchema, Defect, EndReason};

    fn rec(id: &str, exposed: bool, defect: Defect, q: f64, x: f64, reason: EndReason) -> SubjectRecord<f64> {
        SubjectRecord { id: id.into(), exposed, defect, enroll_time: q, end_time: x, end_reason: reason, covariates: vec![] }
    }

    fn theta(a0: f64, ad: f64, bd: f64, by: f64, times: &[f64], masses: &[f64]) -> AteTheta<f64> {
        AteTheta {
            alpha0: a0,
            alpha_d: ad,
            beta_d: bd,
            beta_y: by,
            grid: HazardGrid::new(times.to_vec(), masses.to_vec()).unwrap(),
        }
    }

    #[test]
    fn posterior_equals_prior_without_terathanasia() {
        let th = theta(-1.0, 0.7, -0.3, 0.0, &[6.0, 9.0], &[0.05, 0.1]);
        let r = rec("a", true, Defect::Missing, 4.0, 9.0, EndReason::SabStillbirth);
        let p = posterior_missing_defect(&r, &th).unwrap();
        assert!((p - crate::scalar::expit(-0.3)).abs() < 1e-14);
    }

    #[test]
    fn posterior_limit_large_beta_y() {
        let th = theta(0.0, 0.0, 0.0, 12.0, &[6.0, 9.0], &[1e-6, 1e-6]);
        let r = rec("a", false, Defect::Missing, 0.0, 6.0, EndReason::SabStillbirth);
        assert!(posterior_missing_defect(&r, &th).unwrap() > 0.99);
    }

    #[test]
    fn posterior_two_term_ratio() {
        let th = theta(-2.0, 1.0, -0.5, 0.8, &[5.0, 7.0, 10.0], &[0.02, 0.05, 0.03]);
        let r = rec("a", true, Defect::Missing, 6.0, 10.0, EndReason::SabStillbirth);
        // direct evaluation of π f(X|1)/(1-F(Q⁻|1)) over the two-term sum
        let pi = crate::scalar::expit(-1.0f64);
        let part = |eta: f64| {
            let r = eta.exp();
            let f = |lam: f64, cum: f64| lam * r * (-cum * r).exp();
            let fx = f(0.03, 0.10);
            let trunc = f(0.02, 0.02);
            fx / (1.0 - trunc)
        };
        let num = pi * part(-0.5 + 0.8);
        let den = num + (1.0 - pi) * part(-0.5);
        assert!((posterior_missing_defect(&r, &th).unwrap() - num / den).abs() < 1e-14);
    }

    #[test]
    fn single_subject_loglik_by_hand() {
        let th = theta(-1.0, 0.5, 0.2, 0.4, &[8.0], &[0.3]);
        let c = Cohort::new(vec![rec("a", true, Defect::No, 0.0, 8.0, EndReason::SabStillbirth)], CovariateSchema::default())
            .unwrap();
        let w = WeightVector(vec![2.0]);
        let eta: f64 = 0.2;
        let expected = 2.0 * ((1.0 - crate::scalar::expit(-0.5f64)).ln() + (0.3f64).ln() + eta - 0.3 * eta.exp());
        assert!((observed_loglik(&c, &w, &th).unwrap() - expected).abs() < 1e-13);
    }

    #[test]
    fn observed_subjects_get_indicator_weights() {
        let th = theta(-1.0, 0.5, 0.2, 0.4, &[8.0, 12.0], &[0.1, 0.2]);
        let c = Cohort::new(
            vec![
                rec("a", true, Defect::Yes, 3.0, 40.0, EndReason::Livebirth),
                rec("b", false, Defect::No, 9.0, 12.0, EndReason::SabStillbirth),
                rec("c", false, Defect::Missing, 10.0, 12.0, EndReason::SabStillbirth),
            ],
            CovariateSchema::default(),
        )
        .unwrap();
        let w = WeightVector(vec![1.5, 0.7, 1.1]);
        let es = e_step(&c, &w, &th).unwrap();
        assert_eq!(es.w_pi1[0], 1.5);
        assert_eq!(es.w_pi0[0], 0.0);
        assert_eq!(es.w_pi1[1], 0.0);
        for i in 0..3 {
            assert!((es.w_pi1[i] + es.w_pi0[i] - w.get(i)).abs() < 1e-15);
        }
        // subject b: ghost weight at t_1=8 < Q=9 is w f_1/(1-F)
        let f1 = 0.1 * (-0.1f64).exp();
        assert!((es.w_f(1, 0, false) - 0.7 * f1 / (1.0 - f1)).abs() < 1e-15);
        assert_eq!(es.w_f(1, 0, true), 0.0);
        assert!((es.w_f(1, 1, false) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn no_truncation_means_no_ghosts() {
        let th = theta(-1.0, 0.5, 0.2, 0.4, &[8.0, 12.0], &[0.1, 0.2]);
        let c = Cohort::new(
            vec![
                rec("a", true, Defect::Missing, 0.0, 8.0, EndReason::SabStillbirth),
                rec("b", false, Defect::No, 0.0, 30.0, EndReason::Ltfu),
            ],
            CovariateSchema::default(),
        )
        .unwrap();
        let es = e_step(&c, &WeightVector::ones(2), &th).unwrap();
        for y in [false, true] {
            assert_eq!(es.w_f(0, 0, y), es.w_s(0, y));
            assert_eq!(es.w_f(0, 1, y), 0.0);
            assert_eq!(es.w_f(1, 0, y), 0.0);
            assert_eq!(es.ghost_total(0, y), 0.0);
        }
    }

    #[test]
    fn regrid_keeps_matching_masses() {
        let th = theta(0.0, 0.0, 0.0, 0.0, &[1.0, 2.0, 3.0], &[0.1, 0.2, 0.6]);
        let g = th.regrid(&[2.0, 2.5]);
        assert_eq!(g.grid.masses, vec![0.2, 0.3]);
    }
}
