//! Propensity model, stabilized inverse-probability weights and covariate
//! balance diagnostics.

use crate::cohort::{Cohort, CovariateKind, CovariateValue};
use crate::error::{Error, Result};
use crate::linalg::SquareMatrix;
use crate::scalar::{expit, log1pexp, Scalar};
use std::fmt::Write as _;

/// Dense design matrix with named columns, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Design<T> {
    pub names: Vec<String>,
    data: Vec<T>,
}

impl<T: Scalar> Design<T> {
    pub fn new(names: Vec<String>, rows: &[Vec<T>]) -> Self {
        let p = names.len();
        let mut data = Vec::with_capacity(rows.len() * p);
        for r in rows {
            assert_eq!(r.len(), p, "row width must match column names");
            data.extend_from_slice(r);
        }
        Self { names, data }
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.names.len()
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        if self.names.is_empty() {
            0
        } else {
            self.data.len() / self.names.len()
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        let p = self.ncols();
        &self.data[i * p..(i + 1) * p]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.nrows()).map(|i| self.row(i)[j]).collect()
    }

    /// Multiplies column `j` by `factor`.
    pub fn scale_column(&mut self, j: usize, factor: T) {
        let p = self.ncols();
        for i in 0..self.nrows() {
            self.data[i * p + j] *= factor;
        }
    }
}

/// Intercept plus the named covariates (all when `covariates` is `None`).
/// Categorical covariates are one-hot encoded against their first level.
pub fn design_matrix<T: Scalar>(cohort: &Cohort<T>, covariates: Option<&[String]>) -> Result<Design<T>> {
    let schema = cohort.schema();
    let selected: Vec<usize> = match covariates {
        None => (0..schema.len()).collect(),
        Some(names) => names
            .iter()
            .map(|n| schema.position(n).ok_or_else(|| Error::Config(format!("unknown covariate `{n}`"))))
            .collect::<Result<_>>()?,
    };
    let mut names = vec!["intercept".to_string()];
    for &j in &selected {
        let spec = &schema.columns[j];
        match &spec.kind {
            CovariateKind::Real | CovariateKind::Binary => names.push(spec.name.clone()),
            CovariateKind::Categorical(levels) => {
                names.extend(levels.iter().skip(1).map(|l| format!("{}={}", spec.name, l)))
            }
        }
    }
    let p = names.len();
    let mut data = Vec::with_capacity(cohort.len() * p);
    for r in cohort.records() {
        data.push(T::one());
        for &j in &selected {
            match (&schema.columns[j].kind, r.covariates[j]) {
                (CovariateKind::Categorical(levels), CovariateValue::Level(l)) => {
                    for k in 1..levels.len() {
                        data.push(if k == l { T::one() } else { T::zero() });
                    }
                }
                (_, CovariateValue::Real(x)) => data.push(x),
                (_, CovariateValue::Binary(b)) => data.push(if b { T::one() } else { T::zero() }),
                (_, CovariateValue::Level(l)) => data.push(T::from_usize_lossy(l)),
            }
        }
    }
    Ok(Design { names, data })
}

#[derive(Debug, Clone, Copy)]
pub struct IrlsConfig {
    /// Relative coefficient change that declares convergence.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IrlsConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 100 }
    }
}

#[derive(Debug, Clone)]
pub struct LogisticFit<T> {
    pub names: Vec<String>,
    pub coefficients: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
    pub loglik: T,
    /// Observed information `Xᵀ W X` at the optimum.
    pub information: SquareMatrix<T>,
}

impl<T: Scalar> LogisticFit<T> {
    /// Model-based standard errors (inverse information).
    pub fn standard_errors(&self) -> Option<Vec<T>> {
        let inv = self.information.cholesky()?.inverse();
        Some((0..inv.dim()).map(|j| inv.get(j, j).sqrt()).collect())
    }
}

/// Linear predictor magnitude beyond which a fitted probability is treated
/// as numerically 0 or 1.
const SEPARATION_ETA: f64 = 30.0;

/// Weighted Bernoulli maximum likelihood by Newton/IRLS with step halving.
///
/// `offsets` enter the linear predictor with a fixed coefficient of one.
pub fn fit_logistic_irls<T: Scalar>(
    design: &Design<T>,
    labels: &[bool],
    case_weights: Option<&[T]>,
    offsets: Option<&[T]>,
    config: IrlsConfig,
) -> Result<LogisticFit<T>> {
    let n = design.nrows();
    let p = design.ncols();
    assert_eq!(labels.len(), n);
    let weight = |i: usize| case_weights.map_or(T::one(), |w| w[i]);
    let offset = |i: usize| offsets.map_or(T::zero(), |o| o[i]);

    let (mut w1, mut w0) = (T::zero(), T::zero());
    for i in 0..n {
        if labels[i] {
            w1 += weight(i);
        } else {
            w0 += weight(i);
        }
    }
    if p > 0 && (w1 <= T::zero() || w0 <= T::zero()) {
        return Err(Error::Separation { covariate: design.names[0].clone() });
    }

    let loglik = |beta: &[T]| -> T {
        let mut ll = T::zero();
        for i in 0..n {
            let w = weight(i);
            if w == T::zero() {
                continue;
            }
            let eta = dot(design.row(i), beta) + offset(i);
            let y = if labels[i] { T::one() } else { T::zero() };
            ll += w * (y * eta - log1pexp(eta));
        }
        ll
    };

    let mut beta = vec![T::zero(); p];
    let mut ll = loglik(&beta);
    let mut converged = p == 0;
    let mut iterations = 0;
    let mut info = SquareMatrix::zeros(p);
    while !converged && iterations < config.max_iter {
        iterations += 1;
        let mut grad = vec![T::zero(); p];
        info = SquareMatrix::zeros(p);
        for i in 0..n {
            let w = weight(i);
            if w == T::zero() {
                continue;
            }
            let x = design.row(i);
            let mu = expit(dot(x, &beta) + offset(i));
            let y = if labels[i] { T::one() } else { T::zero() };
            let r = w * (y - mu);
            let v = w * mu * (T::one() - mu);
            for a in 0..p {
                grad[a] += r * x[a];
                for b in 0..=a {
                    info.add(a, b, v * x[a] * x[b]);
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                info.set(b, a, info.get(a, b));
            }
        }
        let chol = match info.cholesky() {
            Some(c) => c,
            None if iterations == 1 => {
                return Err(Error::RankDeficient { column: design.names[info.first_bad_pivot()].clone() })
            }
            None => return Err(separation_error(design, &beta)),
        };
        let step = chol.solve(&grad);
        let mut scale = T::one();
        let mut trial: Vec<T>;
        let mut trial_ll;
        loop {
            trial = beta.iter().zip(&step).map(|(&b, &s)| b + scale * s).collect();
            trial_ll = loglik(&trial);
            if trial_ll >= ll - T::c(1e-12) * ll.abs().max(T::one()) || scale < T::c(1e-8) {
                break;
            }
            scale = scale * T::c(0.5);
        }
        let change = crate::scalar::l2_norm(&beta.iter().zip(&trial).map(|(a, b)| *a - *b).collect::<Vec<_>>());
        let size = crate::scalar::l2_norm(&trial).max(T::one());
        beta = trial;
        ll = trial_ll;
        if change / size < T::c(config.tol) {
            converged = true;
        }
    }
    // recompute information at the final iterate
    let mut final_info = SquareMatrix::zeros(p);
    let mut max_eta = T::zero();
    for i in 0..n {
        let w = weight(i);
        if w == T::zero() {
            continue;
        }
        let x = design.row(i);
        let eta = dot(x, &beta) + offset(i);
        max_eta = max_eta.max(eta.abs());
        let mu = expit(eta);
        let v = w * mu * (T::one() - mu);
        for a in 0..p {
            for b in 0..p {
                final_info.add(a, b, v * x[a] * x[b]);
            }
        }
    }
    if max_eta > T::c(SEPARATION_ETA) || (!converged && final_info.cholesky().is_none()) {
        return Err(separation_error(design, &beta));
    }
    let _ = info;
    Ok(LogisticFit { names: design.names.clone(), coefficients: beta, iterations, converged, loglik: ll, information: final_info })
}

fn separation_error<T: Scalar>(design: &Design<T>, beta: &[T]) -> Error {
    // blame the non-intercept coefficient with the largest scaled magnitude
    let mut best = (0usize, T::neg_infinity());
    for j in 0..design.ncols() {
        let col = design.column(j);
        let mean = col.iter().copied().sum::<T>() / T::from_usize_lossy(col.len().max(1));
        let sd = (col.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / T::from_usize_lossy(col.len().max(1))).sqrt();
        let s = if sd > T::zero() { sd } else { T::one() };
        let score = (beta[j] * s).abs();
        if score > best.1 && (j > 0 || design.ncols() == 1) {
            best = (j, score);
        }
    }
    Error::Separation { covariate: design.names[best.0].clone() }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

#[derive(Debug, Clone)]
pub struct PropensityFit<T> {
    pub names: Vec<String>,
    pub coefficients: Vec<T>,
    /// Estimated P(D = 1 | V), clipped to [ε, 1 − ε].
    pub fitted_scores: Vec<T>,
    pub converged: bool,
    pub iterations: usize,
    pub clipped_count: usize,
}

/// Anything that produces propensity scores for a cohort.
pub trait PropensityModel<T: Scalar>: Send + Sync {
    fn fit(&self, cohort: &Cohort<T>) -> Result<PropensityFit<T>>;
}

/// Main-effects logistic propensity model.
#[derive(Debug, Clone)]
pub struct LogisticPropensity {
    /// Covariates entering the model; all schema columns when `None`.
    pub covariates: Option<Vec<String>>,
    pub clip: f64,
    pub irls: IrlsConfig,
}

impl Default for LogisticPropensity {
    fn default() -> Self {
        Self { covariates: None, clip: 1e-3, irls: IrlsConfig::default() }
    }
}

impl<T: Scalar> PropensityModel<T> for LogisticPropensity {
    fn fit(&self, cohort: &Cohort<T>) -> Result<PropensityFit<T>> {
        cohort.require_both_arms()?;
        let design = design_matrix(cohort, self.covariates.as_deref())?;
        let labels: Vec<bool> = cohort.records().iter().map(|r| r.exposed).collect();
        let fit = fit_logistic_irls(&design, &labels, None, None, self.irls)?;
        let eps = T::c(self.clip);
        let mut clipped_count = 0;
        let fitted_scores = (0..design.nrows())
            .map(|i| {
                let e = expit(dot(design.row(i), &fit.coefficients));
                if e < eps || e > T::one() - eps {
                    clipped_count += 1;
                }
                e.max(eps).min(T::one() - eps)
            })
            .collect();
        Ok(PropensityFit {
            names: fit.names,
            coefficients: fit.coefficients,
            fitted_scores,
            converged: fit.converged,
            iterations: fit.iterations,
            clipped_count,
        })
    }
}

/// Per-subject stabilized IP weights `P(D = d_i) / P(D = d_i | V_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector<T>(pub Vec<T>);

impl<T: Scalar> WeightVector<T> {
    pub fn ones(n: usize) -> Self {
        Self(vec![T::one(); n])
    }

    #[inline]
    pub fn get(&self, i: usize) -> T {
        self.0[i]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn max(&self) -> T {
        self.0.iter().copied().fold(T::zero(), T::max)
    }
}

pub fn stabilized_weights<T: Scalar>(cohort: &Cohort<T>, fit: &PropensityFit<T>) -> Result<WeightVector<T>> {
    let n = cohort.len();
    let p1 = T::from_usize_lossy(cohort.n_exposed()) / T::from_usize_lossy(n.max(1));
    cohort
        .records()
        .iter()
        .zip(&fit.fitted_scores)
        .enumerate()
        .map(|(i, (r, &e))| {
            if !(e > T::zero() && e < T::one()) {
                return Err(Error::ScoreOutOfRange { index: i, value: e.f64() });
            }
            Ok(if r.exposed { p1 / e } else { (T::one() - p1) / (T::one() - e) })
        })
        .collect::<Result<Vec<_>>>()
        .map(WeightVector)
}

/// Fits `model` and returns the stabilized weights with the fit.
pub fn estimate_weights<T: Scalar>(
    cohort: &Cohort<T>,
    model: &dyn PropensityModel<T>,
) -> Result<(WeightVector<T>, PropensityFit<T>)> {
    let fit = model.fit(cohort)?;
    let w = stabilized_weights(cohort, &fit)?;
    Ok((w, fit))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceRow {
    pub covariate: String,
    /// `None` when the pooled variance is zero.
    pub smd_unweighted: Option<f64>,
    pub smd_weighted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceReport {
    pub rows: Vec<BalanceRow>,
    pub clipped_count: usize,
}

impl BalanceReport {
    pub fn with_clipped(mut self, clipped_count: usize) -> Self {
        self.clipped_count = clipped_count;
        self
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("covariate,smd_unweighted,smd_weighted,clipped_count\n");
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.covariate,
                fmt(r.smd_unweighted),
                fmt(r.smd_weighted),
                self.clipped_count
            );
        }
        out
    }
}

/// Standardized mean differences (exposed minus unexposed) for every design
/// column except the intercept. Both columns use the unweighted pooled SD as
/// denominator.
pub fn balance_table<T: Scalar>(cohort: &Cohort<T>, weights: &WeightVector<T>) -> Result<BalanceReport> {
    let design = design_matrix(cohort, None)?;
    let exposed: Vec<bool> = cohort.records().iter().map(|r| r.exposed).collect();
    let ones = vec![1.0; cohort.len()];
    let w: Vec<f64> = weights.0.iter().map(|x| x.f64()).collect();
    let mut rows = Vec::new();
    for j in 1..design.ncols() {
        let x: Vec<f64> = design.column(j).iter().map(|v| v.f64()).collect();
        let (m1, v1) = arm_moments(&x, &exposed, &ones, true);
        let (m0, v0) = arm_moments(&x, &exposed, &ones, false);
        let pooled = ((v1 + v0) / 2.0).sqrt();
        let (wm1, _) = arm_moments(&x, &exposed, &w, true);
        let (wm0, _) = arm_moments(&x, &exposed, &w, false);
        let usable = pooled > 1e-12 && pooled.is_finite();
        rows.push(BalanceRow {
            covariate: design.names[j].clone(),
            smd_unweighted: usable.then(|| (m1 - m0) / pooled),
            smd_weighted: usable.then(|| (wm1 - wm0) / pooled),
        });
    }
    Ok(BalanceReport { rows, clipped_count: 0 })
}

fn arm_moments(x: &[f64], exposed: &[bool], w: &[f64], arm: bool) -> (f64, f64) {
    let (mut sw, mut sx) = (0.0, 0.0);
    for i in 0..x.len() {
        if exposed[i] == arm {
            sw += w[i];
            sx += w[i] * x[i];
        }
    }
    if sw <= 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let m = sx / sw;
    let mut sv = 0.0;
    for i in 0..x.len() {
        if exposed[i] == arm {
            sv += w[i] * (x[i] - m) * (x[i] - m);
        }
    }
    (m, sv / sw)
}
