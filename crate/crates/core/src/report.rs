//! Plot- and table-ready output: coefficient tables, posterior and
//! membership CSVs, and run manifests.
//!
//! Everything here renders to `String` with a fixed field order; floats are
//! printed in shortest round-trip form, so identical inputs give identical
//! bytes.

use crate::ate::{AteFit, PARAM_NAMES};
use crate::bootstrap::BootSummary;
use crate::cohort::Cohort;
use crate::error::Result;
use crate::scalar::{wald_p_value, Scalar, Z_975};
use crate::strata::{log_or_m, MembershipRow, PeFit, Stratum, FINITE_NAMES};
use serde::Serialize;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

/// One coefficient row: estimate (SE), exp(estimate), 95% CI of the odds or
/// hazard ratio, and the Wald p-value on the log scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefRow {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub exp_estimate: f64,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub p_value: Option<f64>,
    /// Held at an assumed value rather than estimated.
    pub fixed: bool,
}

pub fn wald_row(name: &str, estimate: f64, se: Option<f64>) -> CoefRow {
    let se = se.filter(|s| s.is_finite() && *s >= 0.0);
    CoefRow {
        name: name.to_string(),
        estimate,
        se,
        exp_estimate: estimate.exp(),
        ci_lower: se.map(|s| (estimate - Z_975 * s).exp()),
        ci_upper: se.map(|s| (estimate + Z_975 * s).exp()),
        p_value: se.map(|s| wald_p_value(estimate, s)).filter(|p| p.is_finite()),
        fixed: false,
    }
}

fn fixed_row(name: &str, value: f64) -> CoefRow {
    CoefRow { fixed: true, ..wald_row(name, value, None) }
}

/// Bootstrap bookkeeping echoed into reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootInfo {
    pub replicates: usize,
    pub dropped: usize,
    pub seed: u64,
    pub percentile_lower: Vec<f64>,
    pub percentile_upper: Vec<f64>,
}

impl BootInfo {
    pub fn of(summary: &BootSummary, seed: u64) -> Self {
        Self {
            replicates: summary.total,
            dropped: summary.dropped,
            seed,
            percentile_lower: summary.lower.clone(),
            percentile_upper: summary.upper.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitStatus {
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    pub last_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HazardTable {
    pub times: Vec<f64>,
    pub masses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AteReport {
    pub n: usize,
    pub fixed_beta_y: Option<f64>,
    pub status: FitStatus,
    /// α₀, α_D, β_D, β_Y in that order.
    pub coefficients: Vec<CoefRow>,
    pub bootstrap: Option<BootInfo>,
    pub baseline_hazard: HazardTable,
}

fn status<T: Scalar>(converged: bool, iterations: usize, trace: &[T], change: T) -> FitStatus {
    FitStatus {
        converged,
        iterations,
        loglik: trace.last().map_or(f64::NAN, |v| v.f64()),
        last_change: change.f64(),
    }
}

pub fn ate_report<T: Scalar>(
    fit: &AteFit<T>,
    n: usize,
    fixed_beta_y: Option<f64>,
    boot: Option<(&BootSummary, u64)>,
) -> AteReport {
    let est = fit.theta.finite();
    let coefficients = PARAM_NAMES
        .iter()
        .enumerate()
        .map(|(j, name)| {
            if j == 3 && fixed_beta_y.is_some() {
                return fixed_row(name, est[j].f64());
            }
            wald_row(name, est[j].f64(), boot.map(|(b, _)| b.sd[j]))
        })
        .collect();
    AteReport {
        n,
        fixed_beta_y,
        status: status(fit.converged, fit.iterations, &fit.loglik_trace, fit.last_change),
        coefficients,
        bootstrap: boot.map(|(b, s)| BootInfo::of(b, s)),
        baseline_hazard: HazardTable {
            times: fit.theta.grid.times.iter().map(|v| v.f64()).collect(),
            masses: fit.theta.grid.masses.iter().map(|v| v.f64()).collect(),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrataProbs {
    #[serde(rename = "SS")]
    pub ss: f64,
    #[serde(rename = "NS")]
    pub ns: f64,
    #[serde(rename = "NN")]
    pub nn: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeReport {
    pub n: usize,
    /// Offset string as given on the command line, e.g. `a0NS=-1,a0NN=-1`.
    pub offsets: String,
    pub fixed_beta_y: Option<f64>,
    pub status: FitStatus,
    /// All eleven finite parameters; offsets are flagged `fixed`.
    pub coefficients: Vec<CoefRow>,
    pub strata_probs: StrataProbs,
    /// Causal log OR of exposure on SAB/stillbirth, delta-method SE.
    pub log_or_m: CoefRow,
    pub bootstrap: Option<BootInfo>,
    pub baseline_hazard: HazardTable,
}

pub fn pe_report<T: Scalar>(
    fit: &PeFit<T>,
    n: usize,
    fixed_beta_y: Option<f64>,
    boot: Option<(&BootSummary, u64)>,
) -> PeReport {
    let est = fit.theta.finite();
    let coefficients = FINITE_NAMES
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let frozen = !fit.offsets.is_free(j) || (j == 10 && fixed_beta_y.is_some());
            if frozen {
                fixed_row(name, est[j].f64())
            } else {
                wald_row(name, est[j].f64(), boot.map(|(b, _)| b.sd[j]))
            }
        })
        .collect();
    let (gns, gnn) = (est[0].f64(), est[1].f64());
    let lor_se = boot.map(|(b, _)| {
        let cov = [[b.covariance(0, 0), b.covariance(0, 1)], [b.covariance(1, 0), b.covariance(1, 1)]];
        log_or_m(gns, gnn, cov).1
    });
    let p = fit.strata_probs.map(|v| v.f64());
    PeReport {
        n,
        offsets: fit.offsets.to_string(),
        fixed_beta_y,
        status: status(fit.converged, fit.iterations, &fit.loglik_trace, fit.last_change),
        coefficients,
        strata_probs: StrataProbs {
            ss: p[Stratum::SS.index()],
            ns: p[Stratum::NS.index()],
            nn: p[Stratum::NN.index()],
        },
        log_or_m: wald_row("logORM", fit.log_or_m.f64(), lor_se),
        bootstrap: boot.map(|(b, s)| BootInfo::of(b, s)),
        baseline_hazard: HazardTable {
            times: fit.theta.grid.times.iter().map(|v| v.f64()).collect(),
            masses: fit.theta.grid.masses.iter().map(|v| v.f64()).collect(),
        },
    }
}

pub fn to_json<S: Serialize>(value: &S) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub const POSTERIOR_COLUMNS: [&str; 5] = ["id", "event_time", "posterior", "exposed", "end_reason"];

/// Posterior `P(Y=1 | observed)` for every subject with a missing defect.
pub fn posterior_csv<T: Scalar>(cohort: &Cohort<T>, fit: &AteFit<T>) -> String {
    let mut out = POSTERIOR_COLUMNS.join(",");
    out.push('\n');
    for &(i, p) in &fit.posterior_missing {
        let r = &cohort.records()[i];
        let _ = writeln!(out, "{},{},{},{},{}", r.id, r.end_time.f64(), p.f64(), u8::from(r.exposed), r.end_reason.token());
    }
    out
}

pub const MEMBERSHIP_COLUMNS: [&str; 6] = ["id", "group", "p_ss", "p_ns", "p_nn", "p_defect"];

/// Posterior strata membership and `P(Y=1 | O)` per subject.
pub fn membership_csv<T: Scalar>(cohort: &Cohort<T>, rows: &[MembershipRow<T>]) -> String {
    let mut out = MEMBERSHIP_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let p = r.probs.map(|v| v.f64());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            cohort.records()[r.index].id,
            r.group.label(),
            p[Stratum::SS.index()],
            p[Stratum::NS.index()],
            p[Stratum::NN.index()],
            r.defect.f64()
        );
    }
    out
}

/// Run manifest. Wall time lives in a separate timing file so that the
/// manifest itself is reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
    pub timing_file: String,
    pub exit_code: i32,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            outputs: Vec::new(),
            timing_file: String::new(),
            exit_code: 0,
        }
    }
}

/// Writes `contents` to `path`, refusing to replace an existing file unless
/// `force` is set.
pub fn write_artifact(path: &Path, contents: &str, force: bool) -> Result<()> {
    let mut opts = OpenOptions::new();
    opts.write(true);
    if force {
        opts.create(true).truncate(true);
    } else {
        opts.create_new(true);
    }
    let mut f = opts.open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::AlreadyExists {
            std::io::Error::new(e.kind(), format!("{} exists; pass --force to overwrite", path.display()))
        } else {
            std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
        }
    })?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub wall_seconds: f64,
    /// Worker threads requested; not part of the manifest since results do
    /// not depend on it.
    pub jobs: Option<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wald_row_reproduces_reported_layout() {
        // α_D 1.093 (0.489): OR 2.983, CI (1.144, 7.779), p 0.025
        let r = wald_row("alphaD", 1.093, Some(0.489));
        assert!((r.exp_estimate - 2.983).abs() < 5e-4);
        assert!((r.ci_lower.unwrap() - 1.144).abs() < 5e-4);
        assert!((r.ci_upper.unwrap() - 7.779).abs() < 5e-4);
        assert!((r.p_value.unwrap() - 0.025).abs() < 5e-4);
        // the table was computed from unrounded inputs
        for (est, se, lo, hi) in [(0.485, 1.935, 0.036, 72.067), (-3.336, 0.443, 0.014, 0.084), (-0.801, 0.498, 0.169, 1.191)]
        {
            let r = wald_row("x", est, Some(se));
            assert!((r.ci_lower.unwrap() - lo).abs() < 1e-3, "{est}");
            assert!((r.ci_upper.unwrap() / hi - 1.0).abs() < 0.02, "{est}");
        }
    }

    #[test]
    fn missing_se_leaves_inference_empty() {
        let r = wald_row("x", 0.5, None);
        assert_eq!((r.se, r.ci_lower, r.p_value), (None, None, None));
        assert!(wald_row("x", 0.5, Some(f64::NAN)).se.is_none());
        // zero spread: degenerate interval, no p-value
        let r = wald_row("x", 0.5, Some(0.0));
        assert_eq!(r.ci_lower, r.ci_upper);
        assert!(r.p_value.is_none());
    }

    #[test]
    fn artifacts_need_force_to_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_artifact(&p, "one", false).unwrap();
        let e = write_artifact(&p, "two", false).unwrap_err();
        assert!(e.to_string().contains("--force"), "{e}");
        write_artifact(&p, "two", true).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "two");
    }
}
