//! Generative model for cohorts with confounded exposure, selective loss of
//! defect-affected pregnancies, left truncation and censoring.
//!
//! Potential defects `Y(0), Y(1)` follow the marginal structural logistic
//! model exactly; covariates are drawn after them (asthma depends on `Y(0)`),
//! and exposure depends on covariates only, so exposure is ignorable given
//! the covariates while the crude comparison is confounded.

use crate::cohort::{Cohort, CovariateSchema, CovariateValue, Defect, EndReason, SubjectRecord};
use crate::error::{Error, Result};
use crate::fixture::REFERENCE_SCHEMA;
use crate::strata::{log_or_m_estimate, strata_probs, Stratum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

/// Weeks after which an event counts as a stillbirth; defect status of
/// earlier losses is subject to missingness.
const SAB_WEEKS: f64 = 20.0;

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropensityParams {
    pub intercept: f64,
    pub asthma: f64,
    /// Per standard deviation of height.
    pub height: f64,
    pub referral_ii: f64,
    pub referral_iii: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateParams {
    pub asthma_intercept: f64,
    /// Log odds ratio of asthma for `Y(0) = 1`.
    pub asthma_defect: f64,
    pub height_mean: f64,
    pub height_sd: f64,
    pub referral_probs: [f64; 3],
}

/// Piecewise-constant hazard on `[starts[0], end)`, zero elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiecewiseHazard {
    pub starts: Vec<f64>,
    pub rates: Vec<f64>,
    pub end: f64,
}

impl PiecewiseHazard {
    fn bounds(&self, j: usize) -> (f64, f64) {
        (self.starts[j], self.starts.get(j + 1).copied().unwrap_or(self.end))
    }

    pub fn cumulative(&self, t: f64) -> f64 {
        (0..self.rates.len())
            .map(|j| {
                let (a, b) = self.bounds(j);
                self.rates[j] * (t.min(b) - a).max(0.0)
            })
            .sum()
    }

    /// Smallest `t` with cumulative hazard `h`; infinite past the support.
    pub fn inverse(&self, mut h: f64) -> f64 {
        for j in 0..self.rates.len() {
            let (a, b) = self.bounds(j);
            let piece = self.rates[j] * (b - a);
            if h <= piece && self.rates[j] > 0.0 {
                return a + h / self.rates[j];
            }
            h -= piece;
        }
        f64::INFINITY
    }

    fn validate(&self) -> Result<()> {
        let ok = !self.starts.is_empty()
            && self.starts.len() == self.rates.len()
            && self.starts.windows(2).all(|w| w[0] < w[1])
            && *self.starts.last().unwrap() < self.end
            && self.rates.iter().all(|r| r.is_finite() && *r >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("hazard needs increasing starts below `end` and one nonnegative rate per piece".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnrollmentParams {
    pub lo: f64,
    pub hi: f64,
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeliveryParams {
    pub mean: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Principal-strata structure. Strata have probabilities
/// `softmax(0, gamma_ns, gamma_nn)`; `alpha[g] = (α0, αD)` in the order
/// SS, NS, NN; susceptible event times must fall inside the hazard support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeParams {
    pub gamma_ns: f64,
    pub gamma_nn: f64,
    pub alpha: [[f64; 2]; 3],
    pub beta0_ns: f64,
    pub beta_d_nn: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpParams {
    pub propensity: PropensityParams,
    pub covariates: CovariateParams,
    pub alpha0: f64,
    pub alpha_d: f64,
    pub beta_d: f64,
    pub beta_y: f64,
    pub hazard: PiecewiseHazard,
    pub enrollment: EnrollmentParams,
    pub delivery: DeliveryParams,
    /// Weekly hazard of loss to follow-up after enrollment.
    pub ltfu_rate: f64,
    /// Probability of a termination, indexed by defect.
    pub tab_prob: [f64; 2],
    /// Probability that the defect status of a loss before week 20 is missing.
    pub sab_missing_rate: f64,
    /// Present in principal-strata mode.
    pub pe: Option<PeParams>,
}

impl Default for DgpParams {
    /// Calibrated so that a cohort of 494 roughly matches the reference
    /// cohort's arm sizes and outcome counts.
    fn default() -> Self {
        Self {
            propensity: PropensityParams {
                intercept: -0.9,
                asthma: -0.48,
                height: -0.2,
                referral_ii: 2.24,
                referral_iii: 1.9,
            },
            covariates: CovariateParams {
                asthma_intercept: -1.75,
                asthma_defect: 1.0,
                height_mean: 166.0,
                height_sd: 7.0,
                referral_probs: [0.18, 0.51, 0.31],
            },
            alpha0: -3.336,
            alpha_d: 1.093,
            beta_d: -0.801,
            beta_y: 0.485,
            hazard: PiecewiseHazard {
                starts: vec![2.0, 6.0, 12.0, 20.0],
                rates: vec![0.0033, 0.009, 0.005, 0.00015],
                end: 45.0,
            },
            enrollment: EnrollmentParams { lo: 2.0, hi: 16.0, a: 2.0, b: 3.0 },
            delivery: DeliveryParams { mean: 39.0, sd: 1.5, lo: 34.0, hi: 42.5 },
            ltfu_rate: 0.00015,
            tab_prob: [0.0, 0.1],
            sab_missing_rate: 0.95,
            pe: None,
        }
    }
}

impl DgpParams {
    /// Principal-strata configuration used by the recovery checks. No loss
    /// before week 6, where almost nobody is enrolled yet; NS and NN differ
    /// in size and in hazard so the unexposed mixture is well separated.
    pub fn reference_pe() -> Self {
        Self {
            hazard: PiecewiseHazard {
                starts: vec![2.0, 6.0, 12.0, 20.0],
                rates: vec![0.0, 0.12, 0.1, 0.8],
                end: 34.0,
            },
            beta_y: 0.5,
            pe: Some(PeParams {
                gamma_ns: -0.8,
                gamma_nn: -2.0,
                alpha: [[-3.3, 1.1], [-1.0, 0.5], [-1.5, 0.0]],
                beta0_ns: 1.5,
                beta_d_nn: -0.5,
            }),
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |x: f64| (0.0..=1.0).contains(&x);
        let c = &self.covariates;
        if !(self.tab_prob.iter().all(|&p| prob(p)) && prob(self.sab_missing_rate)) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if c.referral_probs.iter().any(|&p| !prob(p)) || (c.referral_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("referral probabilities must sum to 1".into()));
        }
        if !(c.height_sd > 0.0 && self.ltfu_rate >= 0.0) {
            return Err(Error::Config("height sd must be positive and ltfu rate nonnegative".into()));
        }
        self.hazard.validate()?;
        let e = &self.enrollment;
        if !(e.lo < e.hi && e.a > 0.0 && e.b > 0.0) {
            return Err(Error::Config("enrollment needs lo < hi and positive shapes".into()));
        }
        let d = &self.delivery;
        if !(d.sd > 0.0 && d.lo <= d.hi && d.lo >= SAB_WEEKS) {
            return Err(Error::Config("delivery window must start at or after week 20".into()));
        }
        if e.hi >= SAB_WEEKS.min(d.lo) {
            return Err(Error::Config("truncation support must end before the censoring horizon".into()));
        }
        if self.pe.is_some() && self.hazard.end > d.lo {
            return Err(Error::Config("susceptible event times must precede the earliest delivery".into()));
        }
        Ok(())
    }

    fn pi(&self, g: Option<Stratum>, d: bool) -> f64 {
        let (a0, ad) = match (g, &self.pe) {
            (Some(g), Some(pe)) => (pe.alpha[g.index()][0], pe.alpha[g.index()][1]),
            _ => (self.alpha0, self.alpha_d),
        };
        expit(a0 + if d { ad } else { 0.0 })
    }

    /// Log hazard ratio, or `None` when the combination never has the event.
    fn eta(&self, g: Option<Stratum>, d: bool, y: bool) -> Option<f64> {
        let by = if y { self.beta_y } else { 0.0 };
        match (g, &self.pe) {
            (Some(g), Some(pe)) => match (g, d) {
                (Stratum::SS, _) | (Stratum::NS, true) => None,
                (Stratum::NS, false) => Some(pe.beta0_ns + by),
                (Stratum::NN, false) => Some(by),
                (Stratum::NN, true) => Some(pe.beta_d_nn + by),
            },
            _ => Some(if d { self.beta_d } else { 0.0 } + by),
        }
    }
}

fn draw_stratum(pe: &PeParams, rng: &mut ChaCha8Rng) -> Stratum {
    let p = strata_probs(pe.gamma_ns, pe.gamma_nn);
    let u: f64 = rng.random();
    if u < p[0] {
        Stratum::SS
    } else if u < p[0] + p[1] {
        Stratum::NS
    } else {
        Stratum::NN
    }
}

/// Event time for log hazard ratio `eta`; in strata mode it is drawn
/// conditionally on falling inside the hazard support.
fn draw_event(params: &DgpParams, eta: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let r = eta.exp();
    for _ in 0..10_000 {
        let e: f64 = Exp1.sample(rng);
        let t = params.hazard.inverse(e / r);
        if t.is_finite() || params.pe.is_none() {
            return Ok(t);
        }
    }
    Err(Error::Simulation("susceptible subjects almost never have the event inside the hazard support".into()))
}

fn draw_subject(params: &DgpParams, rng: &mut ChaCha8Rng) -> Result<Option<SubjectRecord<f64>>> {
    let c = &params.covariates;
    let stratum = params.pe.as_ref().map(|pe| draw_stratum(pe, rng));
    // one uniform per subject couples Y(0) and Y(1) monotonically
    let u: f64 = rng.random();
    let y = [u < params.pi(stratum, false), u < params.pi(stratum, true)];
    let asthma = rng.random::<f64>() < expit(c.asthma_intercept + if y[0] { c.asthma_defect } else { 0.0 });
    let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
    let height = ((c.height_mean + c.height_sd * z) * 10.0).round() / 10.0;
    let v: f64 = rng.random();
    let referral = if v < c.referral_probs[0] {
        0
    } else if v < c.referral_probs[0] + c.referral_probs[1] {
        1
    } else {
        2
    };
    let p = &params.propensity;
    let lin = p.intercept
        + if asthma { p.asthma } else { 0.0 }
        + p.height * (height - c.height_mean) / c.height_sd
        + [0.0, p.referral_ii, p.referral_iii][referral];
    let d = rng.random::<f64>() < expit(lin);
    let yd = y[usize::from(d)];

    let e = &params.enrollment;
    let q = round4(e.lo + (e.hi - e.lo) * Beta::new(e.a, e.b).expect("checked shapes").sample(rng));
    let t = match params.eta(stratum, d, yd) {
        Some(eta) => round4(draw_event(params, eta, rng)?),
        None => f64::INFINITY,
    };
    if t <= q {
        return Ok(None);
    }
    let dl = &params.delivery;
    let delivery = round4(Normal::new(dl.mean, dl.sd).expect("checked sd").sample(rng).clamp(dl.lo, dl.hi));
    let tab = if rng.random::<f64>() < params.tab_prob[usize::from(yd)] {
        round4(rng.random_range(q..SAB_WEEKS))
    } else {
        f64::INFINITY
    };
    let ltfu = if params.ltfu_rate > 0.0 {
        round4(q + Distribution::<f64>::sample(&Exp1, rng) / params.ltfu_rate)
    } else {
        f64::INFINITY
    };
    let (end, reason) = [
        (t, EndReason::SabStillbirth),
        (delivery, EndReason::Livebirth),
        (tab, EndReason::Tab),
        (ltfu, EndReason::Ltfu),
    ]
    .into_iter()
    .min_by(|a, b| a.0.total_cmp(&b.0))
    .expect("nonempty");
    let end = end.max(q + 1e-4);
    let missing = match reason {
        EndReason::SabStillbirth => end < SAB_WEEKS && rng.random::<f64>() < params.sab_missing_rate,
        EndReason::Ltfu => true,
        _ => false,
    };
    let defect = match (missing, yd) {
        (true, _) => Defect::Missing,
        (false, true) => Defect::Yes,
        (false, false) => Defect::No,
    };
    Ok(Some(SubjectRecord {
            id: String::new(),
            exposed: d,
            defect,
            enroll_time: q,
            end_time: end,
            end_reason: reason,
            covariates: vec![
                CovariateValue::Binary(asthma),
                CovariateValue::Real(height),
                CovariateValue::Level(referral),
            ],
    }))
}

/// Draws `n` enrolled subjects, discarding pregnancies that end before
/// enrollment.
pub fn simulate_cohort(params: &DgpParams, n: usize, seed: u64) -> Result<Cohort<f64>> {
    if n == 0 {
        return Err(Error::Config("cohort size must be at least 1".into()));
    }
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while records.len() < n {
        attempts += 1;
        if let Some(r) = draw_subject(params, &mut rng)? {
            records.push(r);
        }
        if attempts >= 10_000 && (records.len() as f64) < 0.01 * attempts as f64 {
            return Err(Error::Simulation(format!(
                "acceptance rate {}/{attempts} is below 1%; truncation removes almost every pregnancy",
                records.len()
            )));
        }
    }
    let width = n.to_string().len();
    for (k, r) in records.iter_mut().enumerate() {
        r.id = format!("s{:0width$}", k + 1);
    }
    Cohort::new(records, CovariateSchema::parse(REFERENCE_SCHEMA)?)
}

/// True values of the estimands of a configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleTruth {
    /// Causal log odds ratio of exposure on the defect (ATE mode).
    pub log_or_y: f64,
    /// Causal log odds ratio of exposure on pregnancy loss.
    pub log_or_m: f64,
    /// Monte Carlo standard error of `log_or_m`; zero when exact.
    pub log_or_m_se: f64,
}

pub const ORACLE_DRAWS: usize = 10_000_000;

pub fn oracle_truth(params: &DgpParams) -> Result<OracleTruth> {
    oracle_truth_with(params, ORACLE_DRAWS, 0)
}

/// In strata mode `log_or_m` is exact. Otherwise each arm's loss probability
/// `P(T(d) < delivery)` is estimated from `draws` untruncated pregnancies.
pub fn oracle_truth_with(params: &DgpParams, draws: usize, seed: u64) -> Result<OracleTruth> {
    params.validate()?;
    if let Some(pe) = &params.pe {
        return Ok(OracleTruth {
            log_or_y: pe.alpha[Stratum::SS.index()][1],
            log_or_m: log_or_m_estimate(pe.gamma_ns, pe.gamma_nn),
            log_or_m_se: 0.0,
        });
    }
    if draws < 2 {
        return Err(Error::Config("need at least two draws".into()));
    }
    let dl = &params.delivery;
    let normal = Normal::new(dl.mean, dl.sd).expect("checked sd");
    let mut p = [0.0; 2];
    for (d, slot) in p.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::bootstrap::mix_seed(seed, d as u64));
        let exposed = d == 1;
        let mut hits = 0usize;
        for _ in 0..draws {
            let y = rng.random::<f64>() < params.pi(None, exposed);
            let eta = params.eta(None, exposed, y).expect("ATE mode always has a hazard");
            let e: f64 = Exp1.sample(&mut rng);
            let t = params.hazard.inverse(e / eta.exp());
            if t < normal.sample(&mut rng).clamp(dl.lo, dl.hi) {
                hits += 1;
            }
        }
        *slot = hits as f64 / draws as f64;
    }
    if p.iter().any(|&x| x <= 0.0 || x >= 1.0) {
        return Err(Error::Simulation("loss probability is degenerate in the Monte Carlo draws".into()));
    }
    let logit = |x: f64| (x / (1.0 - x)).ln();
    let se = p.iter().map(|&x| 1.0 / (draws as f64 * x * (1.0 - x))).sum::<f64>().sqrt();
    Ok(OracleTruth { log_or_y: params.alpha_d, log_or_m: logit(p[1]) - logit(p[0]), log_or_m_se: se })
}
