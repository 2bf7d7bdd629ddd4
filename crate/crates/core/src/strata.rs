//! Principal stratification on SAB/stillbirth under monotonicity.
//!
//! Strata `SS` (survives either arm), `NS` (loses the pregnancy only when
//! unexposed) and `NN` (loses it in either arm). Cured combinations never
//! experience the event; susceptible ones follow a PH model. Ghost copies
//! of a truncated subject draw their own `(g, y)`.

use crate::ate::{check_weights, EsConfig, GridIndex};
use crate::bootstrap::{run_bootstrap, BootConfig, BootSummary};
use crate::cohort::{classify_observed_group, Cohort, MObs, ObservedGroup, SubjectRecord};
use crate::error::{Error, Result};
use crate::propensity::{estimate_weights, fit_logistic_irls, Design, IrlsConfig, PropensityModel, WeightVector};
use crate::scalar::{expit, l2_norm, log1pexp, logit, Scalar};
use crate::survival::{weighted_cox_mstep, CoxProblem, CoxProblemBuilder, HazardGrid};
use crate::iterate::{pack_masses, run_es, unpack_masses, EsParams};
use serde::Serialize;
use std::fmt;

/// `γ` is kept in `[-GAMMA_BOUND, GAMMA_BOUND]`; a stratum whose weight
/// vanishes sits on the bound instead of drifting to `-∞`.
pub const GAMMA_BOUND: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Stratum {
    SS,
    NS,
    NN,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::SS, Stratum::NS, Stratum::NN];

    pub fn label(self) -> &'static str {
        match self {
            Stratum::SS => "SS",
            Stratum::NS => "NS",
            Stratum::NN => "NN",
        }
    }

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether the pregnancy can end in SAB/stillbirth under exposure `d`.
    #[inline]
    pub fn susceptible(self, exposed: bool) -> bool {
        match self {
            Stratum::SS => false,
            Stratum::NS => !exposed,
            Stratum::NN => true,
        }
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub fn consistent_strata(group: ObservedGroup) -> &'static [Stratum] {
    use Stratum::*;
    match (group.exposed, group.m_obs) {
        (false, MObs::Zero) => &[SS],
        (false, MObs::One) => &[NS, NN],
        (true, MObs::Zero) => &[SS, NS],
        (true, MObs::One) => &[NN],
        (_, MObs::Unknown) => &[SS, NS, NN],
    }
}

/// Softmax over `(0, γ_NS, γ_NN)`.
pub fn strata_probs<T: Scalar>(gamma_ns: T, gamma_nn: T) -> [T; 3] {
    let m = T::zero().max(gamma_ns).max(gamma_nn);
    let e = [(-m).exp(), (gamma_ns - m).exp(), (gamma_nn - m).exp()];
    let s = e[0] + e[1] + e[2];
    [e[0] / s, e[1] / s, e[2] / s]
}

fn log_strata_probs<T: Scalar>(gamma_ns: T, gamma_nn: T) -> [T; 3] {
    let m = T::zero().max(gamma_ns).max(gamma_nn);
    let lse = m + ((-m).exp() + (gamma_ns - m).exp() + (gamma_nn - m).exp()).ln();
    [-lse, gamma_ns - lse, gamma_nn - lse]
}

#[inline]
fn log_add_exp<T: Scalar>(a: T, b: T) -> T {
    let m = a.max(b);
    if m == T::neg_infinity() {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Causal log odds ratio of exposure on SAB/stillbirth under monotonicity:
/// `P(M(1)=1) = P(NN)`, `P(M(0)=1) = P(NS) + P(NN)`.
pub fn log_or_m_estimate<T: Scalar>(gamma_ns: T, gamma_nn: T) -> T {
    gamma_nn - log_add_exp(gamma_ns, gamma_nn) - log1pexp(gamma_ns)
}

/// Gradient of [`log_or_m_estimate`] in `(γ_NS, γ_NN)`.
pub fn log_or_m_gradient<T: Scalar>(gamma_ns: T, gamma_nn: T) -> [T; 2] {
    let share_ns = expit(gamma_ns - gamma_nn);
    [-share_ns - expit(gamma_ns), T::one() - expit(gamma_nn - gamma_ns)]
}

/// Estimate and delta-method SE given the covariance of `(γ_NS, γ_NN)`.
pub fn log_or_m<T: Scalar>(gamma_ns: T, gamma_nn: T, cov: [[T; 2]; 2]) -> (T, T) {
    let g = log_or_m_gradient(gamma_ns, gamma_nn);
    let var = g[0] * g[0] * cov[0][0] + T::c(2.0) * g[0] * g[1] * cov[0][1] + g[1] * g[1] * cov[1][1];
    (log_or_m_estimate(gamma_ns, gamma_nn), var.max(T::zero()).sqrt())
}

/// Names of the finite-dimensional parameters, in [`PeTheta::finite`] order.
pub const FINITE_NAMES: [&str; 11] =
    ["gammaNS", "gammaNN", "a0SS", "aDSS", "a0NS", "aDNS", "a0NN", "aDNN", "b0NS", "bDNN", "betaY"];

#[derive(Debug, Clone, PartialEq)]
pub struct PeTheta<T> {
    pub gamma_ns: T,
    pub gamma_nn: T,
    /// `[g][0] = α_{0,g}`, `[g][1] = α_{D,g}`, in [`Stratum::ALL`] order.
    pub alpha: [[T; 2]; 3],
    pub beta0_ns: T,
    pub beta_d_nn: T,
    pub beta_y: T,
    pub grid: HazardGrid<T>,
}

impl<T: Scalar> PeTheta<T> {
    pub fn strata_probs(&self) -> [T; 3] {
        strata_probs(self.gamma_ns, self.gamma_nn)
    }

    #[inline]
    pub fn pi(&self, g: Stratum, exposed: bool) -> T {
        let a = self.alpha[g.index()];
        expit(a[0] + if exposed { a[1] } else { T::zero() })
    }

    /// `β_{0,NS}(1-d)1(NS) + β_{D,NN} d 1(NN) + β_Y y`
    #[inline]
    pub fn linpred(&self, g: Stratum, exposed: bool, defect: bool) -> T {
        let mut e = if defect { self.beta_y } else { T::zero() };
        match (g, exposed) {
            (Stratum::NS, false) => e += self.beta0_ns,
            (Stratum::NN, true) => e += self.beta_d_nn,
            _ => {}
        }
        e
    }

    pub fn finite(&self) -> [T; 11] {
        let a = &self.alpha;
        [
            self.gamma_ns,
            self.gamma_nn,
            a[0][0],
            a[0][1],
            a[1][0],
            a[1][1],
            a[2][0],
            a[2][1],
            self.beta0_ns,
            self.beta_d_nn,
            self.beta_y,
        ]
    }

    pub fn with_finite(&self, p: &[T]) -> Self {
        Self {
            gamma_ns: p[0],
            gamma_nn: p[1],
            alpha: [[p[2], p[3]], [p[4], p[5]], [p[6], p[7]]],
            beta0_ns: p[8],
            beta_d_nn: p[9],
            beta_y: p[10],
            grid: self.grid.clone(),
        }
    }

    pub fn distance(&self, other: &Self) -> T {
        let mut d: Vec<T> = self.finite().iter().zip(other.finite()).map(|(&a, b)| a - b).collect();
        d.extend(self.grid.masses.iter().zip(&other.grid.masses).map(|(&a, &b)| a - b));
        l2_norm(&d)
    }

    pub fn regrid(&self, times: &[T]) -> Self {
        let mean = if self.grid.is_empty() {
            T::zero()
        } else {
            self.grid.masses.iter().copied().sum::<T>() / T::from_usize_lossy(self.grid.len())
        };
        let masses = times.iter().map(|&t| self.grid.index_of(t).map_or(mean, |k| self.grid.masses[k])).collect();
        Self { grid: HazardGrid { times: times.to_vec(), masses }, ..self.clone() }
    }

    pub fn log_or_m(&self) -> T {
        log_or_m_estimate(self.gamma_ns, self.gamma_nn)
    }
}

impl<T: Scalar> EsParams<T> for PeTheta<T> {
    fn pack(&self) -> Vec<T> {
        let mut v = self.finite().to_vec();
        pack_masses(&mut v, &self.grid.masses);
        v
    }

    fn unpack(&self, v: &[T]) -> Self {
        let mut t = self.with_finite(&v[..11]);
        t.grid.masses = unpack_masses(&v[11..]);
        t
    }

    fn distance(&self, other: &Self) -> T {
        PeTheta::distance(self, other)
    }
}

pub fn pe_outcome_prob<T: Scalar>(g: Stratum, exposed: bool, theta: &PeTheta<T>) -> T {
    theta.pi(g, exposed)
}

pub fn pe_survival<T: Scalar>(t: T, exposed: bool, defect: bool, g: Stratum, theta: &PeTheta<T>) -> Result<T> {
    if !g.susceptible(exposed) {
        return Err(Error::CuredCombination { stratum: g.label().into(), exposed });
    }
    theta.grid.validate()?;
    Ok(theta.grid.survival(theta.linpred(g, exposed, defect), t))
}

/// Outcome-model parameters held at fixed values. The `SS` pair is always
/// estimated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct OffsetSpec {
    pub a0_ns: Option<f64>,
    pub ad_ns: Option<f64>,
    pub a0_nn: Option<f64>,
    pub ad_nn: Option<f64>,
}

impl OffsetSpec {
    pub const NAMES: [&'static str; 4] = ["a0NS", "aDNS", "a0NN", "aDNN"];

    /// Offset for `α_{j,g}` (`j = 0` intercept, `1` exposure).
    pub fn get(&self, g: Stratum, j: usize) -> Option<f64> {
        match (g, j) {
            (Stratum::NS, 0) => self.a0_ns,
            (Stratum::NS, 1) => self.ad_ns,
            (Stratum::NN, 0) => self.a0_nn,
            (Stratum::NN, 1) => self.ad_nn,
            _ => None,
        }
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let slot = match name {
            "a0NS" => &mut self.a0_ns,
            "aDNS" => &mut self.ad_ns,
            "a0NN" => &mut self.a0_nn,
            "aDNN" => &mut self.ad_nn,
            _ => return Err(Error::Config(format!("unknown offset parameter `{name}`"))),
        };
        *slot = Some(value);
        Ok(())
    }

    /// Parses `"a0NS=-1,a0NN=-1,aDNN=0"`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut out = Self::default();
        for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| Error::Config(format!("offset `{part}` lacks `=`")))?;
            let v: f64 = v.trim().parse().map_err(|_| Error::Config(format!("offset `{part}` is not a number")))?;
            if !v.is_finite() {
                return Err(Error::Config(format!("offset `{part}` is not finite")));
            }
            out.set(k.trim(), v)?;
        }
        Ok(out)
    }

    /// Index into [`FINITE_NAMES`] is free.
    pub fn is_free(&self, finite_index: usize) -> bool {
        match finite_index {
            4 => self.a0_ns.is_none(),
            5 => self.ad_ns.is_none(),
            6 => self.a0_nn.is_none(),
            7 => self.ad_nn.is_none(),
            _ => true,
        }
    }

    fn apply<T: Scalar>(&self, theta: &mut PeTheta<T>) {
        for g in [Stratum::NS, Stratum::NN] {
            for j in 0..2 {
                if let Some(v) = self.get(g, j) {
                    theta.alpha[g.index()][j] = T::c(v);
                }
            }
        }
    }
}

impl fmt::Display for OffsetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let vals = [self.a0_ns, self.ad_ns, self.a0_nn, self.ad_nn];
        let parts: Vec<String> =
            Self::NAMES.iter().zip(vals).filter_map(|(n, v)| v.map(|v| format!("{n}={v}"))).collect();
        f.write_str(&parts.join(","))
    }
}

/// Susceptible `(g, d)` combinations, indexed 0..3.
#[inline]
fn sus_index(g: Stratum, exposed: bool) -> Option<usize> {
    match (g, exposed) {
        (Stratum::NS, false) => Some(0),
        (Stratum::NN, false) => Some(1),
        (Stratum::NN, true) => Some(2),
        _ => None,
    }
}

const SUS: [(Stratum, bool); 3] = [(Stratum::NS, false), (Stratum::NN, false), (Stratum::NN, true)];

struct Tables<T> {
    cum: Vec<T>,
    log_p: [T; 3],
    p: [T; 3],
    /// `[g][d][y]`
    log_pi: [[[T; 2]; 2]; 3],
    /// `[sus][y]`
    eta: [[T; 2]; 3],
    dens: [[Vec<T>; 2]; 3],
    trunc: [[Vec<T>; 2]; 3],
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
    fn new(theta: &PeTheta<T>) -> Self {
        let eta = SUS.map(|(g, d)| [theta.linpred(g, d, false), theta.linpred(g, d, true)]);
        let dens = eta.map(|row| row.map(|e| theta.grid.densities(e)));
        let trunc = [0, 1, 2].map(|c| [prefix(&dens[c][0]), prefix(&dens[c][1])]);
        let log_pi = Stratum::ALL.map(|g| {
            [false, true].map(|d| {
                let x = theta.alpha[g.index()][0] + if d { theta.alpha[g.index()][1] } else { T::zero() };
                [-log1pexp(x), -log1pexp(-x)]
            })
        });
        Self {
            cum: theta.grid.cumulative_prefix(),
            log_p: log_strata_probs(theta.gamma_ns, theta.gamma_nn),
            p: theta.strata_probs(),
            log_pi,
            eta,
            dens,
            trunc,
        }
    }

    /// `Σ_{(g,y) susceptible} P(g) P(y|g,d) F(Q⁻|g,y,d)`
    fn trunc_mass(&self, d: usize, q_lt: usize) -> T {
        let mut f = T::zero();
        for (c, &(g, gd)) in SUS.iter().enumerate() {
            if usize::from(gd) != d {
                continue;
            }
            for y in 0..2 {
                f += self.p[g.index()] * self.log_pi[g.index()][d][y].exp() * self.trunc[c][y][q_lt];
            }
        }
        f
    }
}

#[derive(Debug, Clone)]
struct Subject {
    d: usize,
    group: ObservedGroup,
    y: Option<bool>,
    ix: GridIndex,
}

impl Subject {
    fn of<T: Scalar>(r: &SubjectRecord<T>, grid: &HazardGrid<T>) -> Result<Self> {
        Ok(Self {
            d: usize::from(r.exposed),
            group: classify_observed_group(r),
            y: r.defect.observed(),
            ix: GridIndex::of(r, grid)?,
        })
    }
}

/// Joint log terms over consistent `(g, y)`; entries `(g, y, log term)`.
fn combos<T: Scalar>(tab: &Tables<T>, masses: &[T], s: &Subject) -> ([(Stratum, usize, T); 6], usize) {
    let mut out = [(Stratum::SS, 0, T::neg_infinity()); 6];
    let mut n = 0;
    let ys: &[usize] = match s.y {
        Some(true) => &[1],
        Some(false) => &[0],
        None => &[0, 1],
    };
    for &g in consistent_strata(s.group) {
        for &y in ys {
            let mut t = tab.log_p[g.index()] + tab.log_pi[g.index()][s.d][y];
            if let Some(c) = sus_index(g, s.d == 1) {
                let eta = tab.eta[c][y];
                let r = eta.exp();
                t += match s.ix.event_k {
                    Some(k) => masses[k].ln() + eta - tab.cum[k + 1] * r,
                    None => -tab.cum[s.ix.x_le] * r,
                };
            }
            out[n] = (g, y, t);
            n += 1;
        }
    }
    (out, n)
}

/// Subject log-likelihood and the normalized posterior over its combos.
fn subject_posterior<T: Scalar>(
    tab: &Tables<T>,
    masses: &[T],
    s: &Subject,
) -> Result<(T, [(Stratum, usize, T); 6], usize, T)> {
    let (mut c, n) = combos(tab, masses, s);
    let m = c[..n].iter().map(|x| x.2).fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return Err(Error::validation(None, "subject has zero likelihood at the current parameters"));
    }
    let s_sum: T = c[..n].iter().map(|x| (x.2 - m).exp()).sum();
    let lse = m + s_sum.ln();
    for x in c[..n].iter_mut() {
        x.2 = (x.2 - lse).exp();
    }
    let trunc = tab.trunc_mass(s.d, s.ix.q_lt);
    let enroll = T::one() - trunc;
    if !(enroll > T::zero()) {
        return Err(Error::CertainTruncation);
    }
    Ok((lse - enroll.ln(), c, n, enroll))
}

/// Posterior over consistent `(stratum, defect)` pairs for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior<T> {
    pub entries: Vec<(Stratum, bool, T)>,
}

impl<T: Scalar> LatentPosterior<T> {
    pub fn stratum(&self, g: Stratum) -> T {
        self.entries.iter().filter(|e| e.0 == g).map(|e| e.2).sum()
    }

    pub fn defect(&self) -> T {
        self.entries.iter().filter(|e| e.1).map(|e| e.2).sum()
    }

    pub fn total(&self) -> T {
        self.entries.iter().map(|e| e.2).sum()
    }
}

pub fn latent_posterior<T: Scalar>(record: &SubjectRecord<T>, theta: &PeTheta<T>) -> Result<LatentPosterior<T>> {
    theta.grid.validate()?;
    let s = Subject::of(record, &theta.grid)?;
    let tab = Tables::new(theta);
    let (_, c, n, _) = subject_posterior(&tab, &theta.grid.masses, &s)?;
    Ok(LatentPosterior { entries: c[..n].iter().map(|&(g, y, p)| (g, y == 1, p)).collect() })
}

/// Weighted observed-data log-likelihood of the principal-strata model.
pub fn pe_observed_loglik<T: Scalar>(cohort: &Cohort<T>, weights: &WeightVector<T>, theta: &PeTheta<T>) -> Result<T> {
    check_weights(cohort, weights)?;
    theta.grid.validate()?;
    let tab = Tables::new(theta);
    let mut ll = T::zero();
    for (r, &w) in cohort.records().iter().zip(weights.as_slice()) {
        let s = Subject::of(r, &theta.grid)?;
        ll += w * subject_posterior(&tab, &theta.grid.masses, &s)?.0;
    }
    Ok(ll)
}

/// Expected complete-data counts from one E-step.
struct Stats<T> {
    strata: [T; 3],
    /// `[g][d][y]`
    outcome: [[[T; 2]; 2]; 3],
    cox: CoxProblem<T>,
}

fn cox_builder<T: Scalar>(n_grid: usize) -> CoxProblemBuilder<T> {
    let mut patterns = Vec::with_capacity(6);
    for (g, d) in SUS {
        for y in 0..2 {
            patterns.push(vec![
                if g == Stratum::NS { T::one() } else { T::zero() },
                if g == Stratum::NN && d { T::one() } else { T::zero() },
                T::from_usize_lossy(y),
            ]);
        }
    }
    CoxProblemBuilder::new(vec!["b0NS".into(), "bDNN".into(), "betaY".into()], patterns, n_grid)
}

fn e_step<T: Scalar>(subjects: &[Subject], w: &[T], theta: &PeTheta<T>) -> Result<(Stats<T>, T)> {
    let k_len = theta.grid.len();
    let tab = Tables::new(theta);
    let mut strata = [T::zero(); 3];
    let mut outcome = [[[T::zero(); 2]; 2]; 3];
    let mut cox = cox_builder(k_len);
    let mut ghost_acc = [vec![T::zero(); k_len + 1], vec![T::zero(); k_len + 1]];
    let mut ll = T::zero();
    for (i, s) in subjects.iter().enumerate() {
        let (lsub, c, n, enroll) =
            subject_posterior(&tab, &theta.grid.masses, s).map_err(|e| match e {
                Error::Validation { message, .. } => Error::validation(Some(i + 1), message),
                e => e,
            })?;
        ll += w[i] * lsub;
        for &(g, y, p) in &c[..n] {
            let wp = w[i] * p;
            strata[g.index()] += wp;
            outcome[g.index()][s.d][y] += wp;
            if let Some(ci) = sus_index(g, s.d == 1) {
                if wp > T::zero() {
                    match s.ix.event_k {
                        Some(k) => cox.add_event(2 * ci + y, k, wp),
                        None => cox.add_censored(2 * ci + y, s.ix.x_le, wp),
                    }
                }
            }
        }
        if s.ix.q_lt > 0 {
            ghost_acc[s.d][s.ix.q_lt] += w[i] / enroll;
        }
    }
    for d in 0..2 {
        let mut gk = T::zero();
        for k in (0..k_len).rev() {
            gk += ghost_acc[d][k + 1];
            if gk <= T::zero() {
                continue;
            }
            for (ci, &(g, gd)) in SUS.iter().enumerate() {
                if usize::from(gd) != d {
                    continue;
                }
                for y in 0..2 {
                    let v = gk * tab.p[g.index()] * tab.log_pi[g.index()][d][y].exp() * tab.dens[ci][y][k];
                    if v > T::zero() {
                        strata[g.index()] += v;
                        outcome[g.index()][d][y] += v;
                        cox.add_event(2 * ci + y, k, v);
                    }
                }
            }
        }
    }
    Ok((Stats { strata, outcome, cox: cox.build() }, ll))
}

/// Multinomial log-likelihood of strata counts at `γ`.
fn gamma_objective(n: &[f64; 3], g: [f64; 2]) -> f64 {
    let lp = log_strata_probs(g[0], g[1]);
    n[0] * lp[0] + n[1] * lp[1] + n[2] * lp[2]
}

/// Maximizes the multinomial likelihood over the box `[-B, B]²`.
pub fn gamma_mstep(counts: [f64; 3]) -> [f64; 2] {
    let b = GAMMA_BOUND;
    let clamp = |x: f64| if x.is_nan() { 0.0 } else { x.clamp(-b, b) };
    let total: f64 = counts.iter().sum();
    let mut cands = vec![[clamp((counts[1] / counts[0]).ln()), clamp((counts[2] / counts[0]).ln())]];
    for c in [-b, b] {
        let free = |na: f64| clamp((na * (1.0 + c.exp()) / (total - na)).ln());
        cands.push([free(counts[1]), c]);
        cands.push([c, free(counts[2])]);
        cands.push([c, -b]);
        cands.push([c, b]);
    }
    let mut best = cands[0];
    let mut best_v = gamma_objective(&counts, best);
    for &cand in &cands[1..] {
        let v = gamma_objective(&counts, cand);
        if v > best_v {
            best = cand;
            best_v = v;
        }
    }
    best
}

/// Initialization rule for [`fit_pe_with`].
#[derive(Debug, Clone, PartialEq)]
pub enum PeInit<T> {
    /// Strata probabilities from observed SAB proportions by arm.
    DataInformed,
    /// `γ = (0, 0)`.
    Neutral,
    Warm(PeTheta<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeOptions<T> {
    pub init: PeInit<T>,
    /// Holds `(γ_NS, γ_NN)` fixed.
    pub fixed_gamma: Option<(f64, f64)>,
}

impl<T> Default for PeOptions<T> {
    fn default() -> Self {
        Self { init: PeInit::DataInformed, fixed_gamma: None }
    }
}

#[derive(Debug, Clone)]
pub struct PeFit<T> {
    pub theta: PeTheta<T>,
    pub offsets: OffsetSpec,
    pub iterations: usize,
    pub loglik_trace: Vec<T>,
    pub converged: bool,
    pub last_change: T,
    pub strata_probs: [T; 3],
    pub log_or_m: T,
}

impl<T: Scalar> PeFit<T> {
    /// Indices into [`FINITE_NAMES`] that were estimated.
    pub fn free_indices(&self, fixed_gamma: bool, fixed_beta_y: bool) -> Vec<usize> {
        (0..11)
            .filter(|&j| self.offsets.is_free(j))
            .filter(|&j| !(fixed_gamma && j < 2))
            .filter(|&j| !(fixed_beta_y && j == 10))
            .collect()
    }
}

fn weighted_rate<T: Scalar>(num: T, den: T) -> T {
    let lo = T::c(1e-3);
    (num / den).max(lo).min(T::one() - lo)
}

fn initial_theta<T: Scalar>(
    cohort: &Cohort<T>,
    w: &[T],
    subjects: &[Subject],
    times: &[T],
    offsets: &OffsetSpec,
    neutral: bool,
) -> PeTheta<T> {
    let mut grp = [T::zero(); 6];
    let mut births = [[T::zero(); 2]; 2];
    for (s, &wi) in subjects.iter().zip(w) {
        grp[s.group.index()] += wi;
        if s.group.m_obs == MObs::Zero {
            if let Some(y) = s.y {
                births[s.d][usize::from(y)] += wi;
            }
        }
    }
    let (gamma_ns, gamma_nn) = if neutral {
        (T::zero(), T::zero())
    } else {
        let p_nn = weighted_rate(grp[4], grp[3] + grp[4]);
        let p_any = weighted_rate(grp[1], grp[0] + grp[1]);
        let p_ns = (p_any - p_nn).max(T::c(1e-3));
        let p_ss = (T::one() - p_ns - p_nn).max(T::c(1e-3));
        ((p_ns / p_ss).ln(), (p_nn / p_ss).ln())
    };
    let a0 = logit(weighted_rate(births[0][1], births[0][0] + births[0][1]));
    let a1 = logit(weighted_rate(births[1][1], births[1][0] + births[1][1]));
    let pair = [a0, a1 - a0];
    // truncated Nelson–Aalen over all subjects
    let k_len = times.len();
    let mut ev = vec![T::zero(); k_len];
    let mut risk = vec![T::zero(); k_len + 1];
    for (r, &wi) in cohort.records().iter().zip(w) {
        let lo = times.partition_point(|&t| t <= r.enroll_time);
        let hi = times.partition_point(|&t| t <= r.end_time);
        if lo < hi {
            risk[lo] += wi;
            risk[hi] -= wi;
        }
        if r.is_event() {
            ev[hi - 1] += wi;
        }
    }
    let mut acc = T::zero();
    let masses = (0..k_len)
        .map(|k| {
            acc += risk[k];
            if acc > T::zero() {
                ev[k] / acc
            } else {
                T::zero()
            }
        })
        .collect();
    let mut theta = PeTheta {
        gamma_ns,
        gamma_nn,
        alpha: [pair; 3],
        beta0_ns: T::zero(),
        beta_d_nn: T::zero(),
        beta_y: T::zero(),
        grid: HazardGrid { times: times.to_vec(), masses },
    };
    offsets.apply(&mut theta);
    theta
}

fn fit_stratum_outcome<T: Scalar>(cells: &[[T; 2]; 2], current: [T; 2], fixed: [Option<T>; 2]) -> Result<[T; 2]> {
    let free: Vec<usize> = (0..2).filter(|&j| fixed[j].is_none()).collect();
    if free.is_empty() {
        return Ok(current);
    }
    let names = ["(Intercept)", "exposed"];
    let mut rows = Vec::with_capacity(4);
    let mut labels = Vec::with_capacity(4);
    let mut weights = Vec::with_capacity(4);
    let mut offsets = Vec::with_capacity(4);
    for d in 0..2 {
        let x = [T::one(), T::from_usize_lossy(d)];
        for y in 0..2 {
            rows.push(free.iter().map(|&j| x[j]).collect::<Vec<_>>());
            labels.push(y == 1);
            weights.push(cells[d][y]);
            offsets.push((0..2).filter_map(|j| fixed[j].map(|v| v * x[j])).fold(T::zero(), |a, b| a + b));
        }
    }
    let design = Design::new(free.iter().map(|&j| names[j].to_string()).collect(), &rows);
    let fit = fit_logistic_irls(&design, &labels, Some(&weights), Some(&offsets), IrlsConfig::default())?;
    let mut out = [T::zero(); 2];
    let mut it = fit.coefficients.into_iter();
    for j in 0..2 {
        out[j] = fixed[j].unwrap_or_else(|| it.next().expect("one coefficient per free column"));
    }
    Ok(out)
}

fn s_step<T: Scalar>(
    st: &Stats<T>,
    theta: &PeTheta<T>,
    offsets: &OffsetSpec,
    config: &EsConfig,
    options: &PeOptions<T>,
) -> Result<PeTheta<T>> {
    let mut next = theta.clone();
    match options.fixed_gamma {
        Some((a, b)) => {
            next.gamma_ns = T::c(a);
            next.gamma_nn = T::c(b);
        }
        None => {
            let g = gamma_mstep(st.strata.map(|x| x.f64()));
            next.gamma_ns = T::c(g[0]);
            next.gamma_nn = T::c(g[1]);
        }
    }
    for g in Stratum::ALL {
        let fixed = [offsets.get(g, 0).map(T::c), offsets.get(g, 1).map(T::c)];
        next.alpha[g.index()] = fit_stratum_outcome(&st.outcome[g.index()], theta.alpha[g.index()], fixed)?;
    }
    if !theta.grid.is_empty() {
        let fixed = [None, None, config.fixed_beta_y.map(T::c)];
        let sol =
            weighted_cox_mstep(&st.cox, &[theta.beta0_ns, theta.beta_d_nn, theta.beta_y], &fixed, config.mstep)?;
        next.beta0_ns = sol.beta[0];
        next.beta_d_nn = sol.beta[1];
        next.beta_y = sol.beta[2];
        next.grid.masses = sol.masses;
    }
    Ok(next)
}

/// Values of `β_{0,NS}` tried from the standard initialization.
const MIRROR_STARTS: [f64; 3] = [0.0, 1.0, -1.0];

pub fn fit_pe<T: Scalar>(
    cohort: &Cohort<T>,
    weights: &WeightVector<T>,
    offsets: &OffsetSpec,
    config: &EsConfig,
) -> Result<PeFit<T>> {
    fit_pe_with(cohort, weights, offsets, config, &PeOptions::default())
}

/// A warm start runs once; the standard initializations run from every
/// value in `MIRROR_STARTS` and keep the converged fit with the highest
/// observed log-likelihood.
pub fn fit_pe_with<T: Scalar>(
    cohort: &Cohort<T>,
    weights: &WeightVector<T>,
    offsets: &OffsetSpec,
    config: &EsConfig,
    options: &PeOptions<T>,
) -> Result<PeFit<T>> {
    if !(config.tol > 0.0) {
        return Err(Error::Config("tolerance must be positive".into()));
    }
    cohort.require_both_arms()?;
    check_weights(cohort, weights)?;
    let times = HazardGrid::event_times(cohort);
    let grid0 = HazardGrid::on_times(times.clone());
    let subjects = cohort.records().iter().map(|r| Subject::of(r, &grid0)).collect::<Result<Vec<_>>>()?;
    let w = weights.as_slice();
    let starts = match &options.init {
        PeInit::Warm(t) => vec![t.regrid(&times)],
        PeInit::DataInformed | PeInit::Neutral => {
            let neutral = matches!(options.init, PeInit::Neutral);
            let base = initial_theta(cohort, w, &subjects, &times, offsets, neutral);
            // the unexposed susceptibles mix NS and NN hazards, so β_{0,NS}
            // has a mirrored local mode; start on both sides of it
            MIRROR_STARTS.iter().map(|&b| PeTheta { beta0_ns: T::c(b), ..base.clone() }).collect()
        }
    };
    let mut best: Option<PeFit<T>> = None;
    for mut theta in starts {
        offsets.apply(&mut theta);
        if let Some(b) = config.fixed_beta_y {
            theta.beta_y = T::c(b);
        }
        if let Some((a, b)) = options.fixed_gamma {
            theta.gamma_ns = T::c(a);
            theta.gamma_nn = T::c(b);
        }
        let run = run_es(
            theta,
            config,
            "pe",
            |th: &PeTheta<T>| e_step(&subjects, w, th),
            |st: &Stats<T>, th: &PeTheta<T>| s_step(st, th, offsets, config, options),
        )?;
        let ll = *run.trace.last().expect("trace starts with the initial loglik");
        let replace = match &best {
            None => true,
            Some(b) => {
                let bl = *b.loglik_trace.last().expect("nonempty");
                (run.converged && !b.converged) || (run.converged == b.converged && ll > bl)
            }
        };
        if replace {
            let theta = run.theta;
            best = Some(PeFit {
                strata_probs: theta.strata_probs(),
                log_or_m: theta.log_or_m(),
                theta,
                offsets: *offsets,
                iterations: run.iterations,
                loglik_trace: run.trace,
                converged: run.converged,
                last_change: run.change,
            });
        }
    }
    Ok(best.expect("at least one start"))
}

/// Per-subject posterior membership and defect probability.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipRow<T> {
    pub index: usize,
    pub group: ObservedGroup,
    pub probs: [T; 3],
    pub defect: T,
}

pub fn membership<T: Scalar>(cohort: &Cohort<T>, theta: &PeTheta<T>) -> Result<Vec<MembershipRow<T>>> {
    theta.grid.validate()?;
    let tab = Tables::new(theta);
    cohort
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let s = Subject::of(r, &theta.grid)?;
            let (_, c, n, _) = subject_posterior(&tab, &theta.grid.masses, &s)?;
            let mut probs = [T::zero(); 3];
            let mut defect = T::zero();
            for &(g, y, p) in &c[..n] {
                probs[g.index()] += p;
                if y == 1 {
                    defect += p;
                }
            }
            Ok(MembershipRow { index: i, group: s.group, probs, defect })
        })
        .collect()
}

/// Bootstrap of the PE fit over all finite parameters (fixed ones have zero
/// spread).
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_pe<T: Scalar>(
    cohort: &Cohort<T>,
    model: &dyn PropensityModel<T>,
    offsets: &OffsetSpec,
    es: &EsConfig,
    options: &PeOptions<T>,
    boot: &BootConfig,
    seed: u64,
) -> Result<BootSummary> {
    let names = FINITE_NAMES.iter().map(|s| s.to_string()).collect();
    run_bootstrap(cohort.len(), boot, seed, names, |idx| {
        let rep = cohort.resample(idx);
        let (w, _) = estimate_weights(&rep, model)?;
        let fit = fit_pe_with(&rep, &w, offsets, es, options)?;
        if !fit.converged {
            return Err(Error::Config("replicate did not converge".into()));
        }
        Ok(fit.theta.finite().iter().map(|v| v.f64()).collect())
    })
}
