//! Sensitivity analyses: the β_Y sweep of the ATE model and the offset
//! grid of the principal-strata model.
//!
//! Cells along the last axis form a line that is fitted in order, each cell
//! starting from its converged predecessor as well as from the standard
//! initialization; the higher log-likelihood wins. Lines run in parallel
//! and every cell bootstraps with its own seed, so results do not depend on
//! the worker count.

use crate::ate::{bootstrap_ate, fit_ate_from, AteFit, EsConfig};
use crate::bootstrap::{mix_seed, with_pool, BootConfig, BootSummary};
use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::propensity::{PropensityModel, WeightVector};
use crate::report::{membership_csv, posterior_csv, wald_row, write_artifact, CoefRow, POSTERIOR_COLUMNS, MEMBERSHIP_COLUMNS};
use crate::scalar::Scalar;
use crate::strata::{bootstrap_pe, fit_pe_with, membership, OffsetSpec, PeFit, PeInit, PeOptions, FINITE_NAMES};
use rayon::prelude::*;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Default offset axes of the principal-strata grid (5 × 5 × 9 cells).
pub const DEFAULT_PE_AXES: &str = "a0NS=-2:0:0.5,a0NN=-2:0:0.5,aDNN=-2:2:0.5";
/// Alternate set with the NS exposure coefficient offset instead.
pub const ALTERNATE_PE_AXES: &str = "aDNS=-2:2:0.5,a0NN=-2:0:0.5,aDNN=-2:2:0.5";
pub const DEFAULT_BETA_Y_AXIS: &str = "betaY=0:5:0.5";

/// A named range `lo, lo + step, …, hi`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Axis {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Axis {
    pub fn new(name: &str, lo: f64, hi: f64, step: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && step.is_finite()) {
            return Err(Error::Config(format!("axis `{name}` has non-finite bounds")));
        }
        if !(step > 0.0) {
            return Err(Error::Config(format!("axis `{name}` needs a positive step")));
        }
        if hi < lo {
            return Err(Error::Config(format!("axis `{name}` has hi < lo")));
        }
        Ok(Self { name: name.to_string(), lo, hi, step })
    }

    /// Parses `"name=lo:hi:step"`.
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = || Error::Config(format!("axis `{spec}` is not of the form name=lo:hi:step"));
        let (name, range) = spec.split_once('=').ok_or_else(bad)?;
        let parts: Vec<f64> =
            range.split(':').map(|p| p.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        match parts[..] {
            [lo, hi, step] => Self::new(name.trim(), lo, hi, step),
            _ => Err(bad()),
        }
    }

    /// Comma-separated list of axes.
    pub fn parse_list(spec: &str) -> Result<Vec<Self>> {
        spec.split(',').map(str::trim).filter(|s| !s.is_empty()).map(Self::parse).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        let count = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1;
        // snap to a fine lattice so that 0.1 steps print as 0.3, not 0.30000000000000004
        (0..count).map(|i| ((self.lo + i as f64 * self.step) * 1e9).round() / 1e9 + 0.0).collect()
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}={}:{}:{}", self.name, self.lo, self.hi, self.step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    AteBetaY,
    PeOffsets,
}

/// One grid cell. `metrics` follows [`SensitivityGrid::metric_names`];
/// unavailable values are NaN and export as empty fields.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub coords: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub error: Option<String>,
    pub metrics: Vec<f64>,
    /// Rows of the per-subject table, without the cell prefix.
    pub detail: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityGrid {
    pub kind: GridKind,
    pub axes: Vec<Axis>,
    pub metric_names: Vec<String>,
    pub cells: Vec<GridCell>,
    /// Name and columns of the per-subject table (`posterior`, `membership`).
    pub detail_name: String,
    pub detail_columns: Vec<String>,
}

impl SensitivityGrid {
    pub fn metric(&self, cell: usize, name: &str) -> Option<f64> {
        let j = self.metric_names.iter().position(|m| m == name)?;
        Some(self.cells[cell].metrics[j])
    }

    pub fn column(&self, name: &str) -> Vec<f64> {
        (0..self.cells.len()).map(|c| self.metric(c, name).unwrap_or(f64::NAN)).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SweepConfig {
    pub es: EsConfig,
    /// `replicates == 0` skips the bootstrap; SEs and p-values are then NaN.
    pub boot: BootConfig,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { es: EsConfig::default(), boot: BootConfig { replicates: 200, ..Default::default() }, seed: 1 }
    }
}

/// Cartesian product, last axis fastest.
fn cartesian(axes: &[Axis]) -> Vec<Vec<f64>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        let vals = axis.values();
        acc.into_iter()
            .flat_map(|prefix| {
                vals.iter().map(move |&v| {
                    let mut c = prefix.clone();
                    c.push(v);
                    c
                })
            })
            .collect()
    })
}

fn push_row(metrics: &mut Vec<f64>, row: &CoefRow) {
    let nan = f64::NAN;
    metrics.extend([
        row.estimate,
        row.se.unwrap_or(nan),
        row.ci_lower.unwrap_or(nan),
        row.ci_upper.unwrap_or(nan),
        row.p_value.unwrap_or(nan),
    ]);
}

fn row_names(name: &str) -> [String; 5] {
    ["", "_se", "_ci_lower", "_ci_upper", "_p"].map(|s| format!("{name}{s}"))
}

fn table_body(csv: String) -> Vec<String> {
    csv.lines().skip(1).map(str::to_string).collect()
}

fn boot_sd(boot: &Option<BootSummary>, j: usize) -> Option<f64> {
    boot.as_ref().map(|b| b.sd[j])
}

fn failed_cell(coords: Vec<f64>, n_metrics: usize, e: &Error) -> GridCell {
    GridCell {
        coords,
        converged: false,
        iterations: 0,
        error: Some(e.to_string()),
        metrics: vec![f64::NAN; n_metrics],
        detail: Vec::new(),
    }
}

/// Keeps the better of a warm-started and a standard fit; converged beats
/// non-converged, then the higher log-likelihood, then the warm start.
fn better<F>(warm: Option<Result<F>>, cold: Result<F>, key: impl Fn(&F) -> (bool, f64)) -> Result<F> {
    match (warm, cold) {
        (None, c) => c,
        (Some(Err(_)), c) => c,
        (Some(Ok(w)), Err(_)) => Ok(w),
        (Some(Ok(w)), Ok(c)) => {
            let (kw, kc) = (key(&w), key(&c));
            if (kc.0 && !kw.0) || (kc.0 == kw.0 && kc.1 > kw.1) {
                Ok(c)
            } else {
                Ok(w)
            }
        }
    }
}

const ATE_ROWS: [&str; 3] = ["alpha0", "alphaD", "betaD"];

fn ate_metric_names() -> Vec<String> {
    let mut names: Vec<String> = ATE_ROWS.iter().flat_map(|r| row_names(r)).collect();
    names.extend(["loglik".to_string(), "boot_dropped".to_string()]);
    names
}

/// Refits the ATE model with β_Y frozen at each value of `axis`.
pub fn ate_beta_y_sweep<T: Scalar>(
    cohort: &Cohort<T>,
    weights: &WeightVector<T>,
    model: &dyn PropensityModel<T>,
    axis: &Axis,
    config: &SweepConfig,
) -> Result<SensitivityGrid> {
    if axis.name != "betaY" {
        return Err(Error::Config(format!("the ATE sweep varies betaY, not `{}`", axis.name)));
    }
    let names = ate_metric_names();
    let key = |f: &AteFit<T>| (f.converged, f.loglik_trace.last().map_or(f64::NEG_INFINITY, |v| v.f64()));
    let cells = with_pool(config.boot.jobs, || {
        let mut cells = Vec::new();
        let mut prev: Option<AteFit<T>> = None;
        for (c, value) in axis.values().into_iter().enumerate() {
            let es = EsConfig { fixed_beta_y: Some(value), ..config.es };
            let warm = prev.as_ref().map(|p| fit_ate_from(cohort, weights, &es, Some(&p.theta)));
            let fit = match better(warm, fit_ate_from(cohort, weights, &es, None), key) {
                Ok(f) => f,
                Err(e) => {
                    log::warn!("betaY={value}: {e}");
                    cells.push(failed_cell(vec![value], names.len(), &e));
                    continue;
                }
            };
            let boot = (config.boot.replicates > 0)
                .then(|| bootstrap_ate(cohort, model, &es, &config.boot, mix_seed(config.seed, c as u64), Some(&fit.theta)))
                .transpose();
            let (boot, boot_error) = match boot {
                Ok(b) => (b, None),
                Err(e) => (None, Some(e.to_string())),
            };
            let est = fit.theta.finite();
            let mut metrics = Vec::with_capacity(names.len());
            for (j, name) in ATE_ROWS.iter().enumerate() {
                push_row(&mut metrics, &wald_row(name, est[j].f64(), boot_sd(&boot, j)));
            }
            metrics.push(key(&fit).1);
            metrics.push(boot.as_ref().map_or(f64::NAN, |b| b.dropped as f64));
            cells.push(GridCell {
                coords: vec![value],
                converged: fit.converged,
                iterations: fit.iterations,
                error: boot_error,
                metrics,
                detail: table_body(posterior_csv(cohort, &fit)),
            });
            if fit.converged {
                prev = Some(fit);
            }
        }
        cells
    })?;
    Ok(SensitivityGrid {
        kind: GridKind::AteBetaY,
        axes: vec![axis.clone()],
        metric_names: names,
        cells,
        detail_name: "posterior".into(),
        detail_columns: POSTERIOR_COLUMNS.iter().map(|s| s.to_string()).collect(),
    })
}

/// Smallest β_Y at which the α_D Wald p-value reaches `level`, scanning
/// the sweep in order; `None` if α_D stays significant or the first cell is
/// already not significant.
pub fn significance_threshold(grid: &SensitivityGrid, level: f64) -> Option<f64> {
    let p = grid.column("alphaD_p");
    if p.first().is_none_or(|&p0| !(p0 < level)) {
        return None;
    }
    grid.cells.iter().zip(&p).find(|(_, &pv)| !(pv < level)).map(|(c, _)| c.coords[0])
}

fn pe_metric_names() -> Vec<String> {
    let mut names: Vec<String> = FINITE_NAMES.iter().map(|s| s.to_string()).collect();
    names.extend(row_names("aDSS").into_iter().skip(1));
    names.extend(["p_SS", "p_NS", "p_NN"].map(String::from));
    names.extend(row_names("logORM"));
    names.extend(["loglik".to_string(), "boot_dropped".to_string()]);
    names
}

fn pe_cell_metrics<T: Scalar>(fit: &PeFit<T>, boot: &Option<BootSummary>) -> Vec<f64> {
    let est = fit.theta.finite().map(|v| v.f64());
    let mut m: Vec<f64> = est.to_vec();
    let ad = wald_row("aDSS", est[3], boot_sd(boot, 3));
    m.extend([
        ad.se.unwrap_or(f64::NAN),
        ad.ci_lower.unwrap_or(f64::NAN),
        ad.ci_upper.unwrap_or(f64::NAN),
        ad.p_value.unwrap_or(f64::NAN),
    ]);
    m.extend(fit.strata_probs.map(|v| v.f64()));
    let lor_se = boot.as_ref().map(|b| {
        let cov = [[b.covariance(0, 0), b.covariance(0, 1)], [b.covariance(1, 0), b.covariance(1, 1)]];
        crate::strata::log_or_m(est[0], est[1], cov).1
    });
    push_row(&mut m, &wald_row("logORM", fit.log_or_m.f64(), lor_se));
    m.push(fit.loglik_trace.last().map_or(f64::NAN, |v| v.f64()));
    m.push(boot.as_ref().map_or(f64::NAN, |b| b.dropped as f64));
    m
}

/// Fits the principal-strata model over the offset grid spanned by `axes`;
/// offsets in `base` not on an axis stay fixed throughout.
pub fn pe_offset_grid<T: Scalar>(
    cohort: &Cohort<T>,
    weights: &WeightVector<T>,
    model: &dyn PropensityModel<T>,
    axes: &[Axis],
    base: &OffsetSpec,
    config: &SweepConfig,
) -> Result<SensitivityGrid> {
    if axes.is_empty() {
        return Err(Error::Config("the offset grid needs at least one axis".into()));
    }
    for (i, a) in axes.iter().enumerate() {
        if !OffsetSpec::NAMES.contains(&a.name.as_str()) {
            return Err(Error::Config(format!("unknown offset axis `{}` (expected one of {:?})", a.name, OffsetSpec::NAMES)));
        }
        if axes[..i].iter().any(|b| b.name == a.name) {
            return Err(Error::Config(format!("offset axis `{}` given twice", a.name)));
        }
    }
    let names = pe_metric_names();
    let coords = cartesian(axes);
    let line_len = axes.last().map_or(1, |a| a.values().len());
    let lines: Vec<&[Vec<f64>]> = coords.chunks(line_len).collect();
    let key = |f: &PeFit<T>| (f.converged, f.loglik_trace.last().map_or(f64::NEG_INFINITY, |v| v.f64()));
    let cells: Vec<GridCell> = with_pool(config.boot.jobs, || {
        lines
            .par_iter()
            .enumerate()
            .map(|(l, line)| {
                let mut out = Vec::with_capacity(line.len());
                let mut prev: Option<PeFit<T>> = None;
                for (k, point) in line.iter().enumerate() {
                    let cell_index = l * line_len + k;
                    let mut offsets = *base;
                    for (a, &v) in axes.iter().zip(point) {
                        offsets.set(&a.name, v)?;
                    }
                    let warm = prev.as_ref().map(|p| {
                        let opts = PeOptions { init: PeInit::Warm(p.theta.clone()), fixed_gamma: None };
                        fit_pe_with(cohort, weights, &offsets, &config.es, &opts)
                    });
                    let cold = fit_pe_with(cohort, weights, &offsets, &config.es, &PeOptions::default());
                    let fit = match better(warm, cold, key) {
                        Ok(f) => f,
                        Err(e) => {
                            log::warn!("offsets {offsets}: {e}");
                            out.push(failed_cell(point.clone(), names.len(), &e));
                            continue;
                        }
                    };
                    let boot = if config.boot.replicates > 0 {
                        let opts = PeOptions { init: PeInit::Warm(fit.theta.clone()), fixed_gamma: None };
                        let seed = mix_seed(config.seed, cell_index as u64);
                        bootstrap_pe(cohort, model, &offsets, &config.es, &opts, &config.boot, seed).map(Some)
                    } else {
                        Ok(None)
                    };
                    let (boot, boot_error) = match boot {
                        Ok(b) => (b, None),
                        Err(e) => (None, Some(e.to_string())),
                    };
                    let detail = match membership(cohort, &fit.theta) {
                        Ok(rows) => table_body(membership_csv(cohort, &rows)),
                        Err(e) => {
                            log::warn!("offsets {offsets}: membership: {e}");
                            Vec::new()
                        }
                    };
                    out.push(GridCell {
                        coords: point.clone(),
                        converged: fit.converged,
                        iterations: fit.iterations,
                        error: boot_error,
                        metrics: pe_cell_metrics(&fit, &boot),
                        detail,
                    });
                    if fit.converged {
                        prev = Some(fit);
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<Vec<GridCell>>>>()
    })??
    .into_iter()
    .flatten()
    .collect();
    Ok(SensitivityGrid {
        kind: GridKind::PeOffsets,
        axes: axes.to_vec(),
        metric_names: names,
        cells,
        detail_name: "membership".into(),
        detail_columns: MEMBERSHIP_COLUMNS.iter().map(|s| s.to_string()).collect(),
    })
}

fn field(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

/// Quotes a CSV field when needed.
fn text(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Serialize)]
struct AxisEcho<'a> {
    name: &'a str,
    lo: f64,
    hi: f64,
    step: f64,
    values: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct GridManifest<'a> {
    kind: GridKind,
    axes: Vec<AxisEcho<'a>>,
    cells: usize,
    converged: usize,
    columns: Vec<String>,
    detail_file: String,
    detail_columns: Vec<String>,
}

/// Rendered files of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFiles {
    pub grid_csv: String,
    pub manifest_json: String,
    pub detail_csv: String,
}

pub fn grid_columns(grid: &SensitivityGrid) -> Vec<String> {
    let mut cols = vec!["cell".to_string()];
    cols.extend(grid.axes.iter().map(|a| a.name.clone()));
    cols.extend(["converged".to_string(), "iterations".to_string()]);
    cols.extend(grid.metric_names.iter().cloned());
    cols.push("error".into());
    cols
}

pub fn render_grid(grid: &SensitivityGrid, stem: &str) -> Result<GridFiles> {
    let columns = grid_columns(grid);
    let mut csv = columns.join(",");
    csv.push('\n');
    let mut detail = vec!["cell".to_string()];
    detail.extend(grid.axes.iter().map(|a| a.name.clone()));
    detail.extend(grid.detail_columns.iter().cloned());
    let mut detail_csv = detail.join(",");
    detail_csv.push('\n');
    for (i, cell) in grid.cells.iter().enumerate() {
        let coords: Vec<String> = cell.coords.iter().map(|&v| field(v)).collect();
        let _ = write!(csv, "{i},{},{},{}", coords.join(","), u8::from(cell.converged), cell.iterations);
        for &m in &cell.metrics {
            csv.push(',');
            csv.push_str(&field(m));
        }
        csv.push(',');
        csv.push_str(&text(cell.error.as_deref().unwrap_or("")));
        csv.push('\n');
        for row in &cell.detail {
            let _ = writeln!(detail_csv, "{i},{},{row}", coords.join(","));
        }
    }
    let manifest = GridManifest {
        kind: grid.kind,
        axes: grid
            .axes
            .iter()
            .map(|a| AxisEcho { name: &a.name, lo: a.lo, hi: a.hi, step: a.step, values: a.values() })
            .collect(),
        cells: grid.cells.len(),
        converged: grid.cells.iter().filter(|c| c.converged).count(),
        columns,
        detail_file: format!("{stem}_{}.csv", grid.detail_name),
        detail_columns: detail,
    };
    Ok(GridFiles { grid_csv: csv, manifest_json: crate::report::to_json(&manifest)?, detail_csv })
}

/// Writes `<stem>_grid.csv`, `<stem>_grid.json` and the per-subject table
/// into `dir`; existing files are replaced only with `force`.
pub fn export_grid(grid: &SensitivityGrid, dir: &Path, stem: &str, force: bool) -> Result<Vec<PathBuf>> {
    let files = render_grid(grid, stem)?;
    let out = [
        (format!("{stem}_grid.csv"), files.grid_csv),
        (format!("{stem}_grid.json"), files.manifest_json),
        (format!("{stem}_{}.csv", grid.detail_name), files.detail_csv),
    ];
    let mut paths = Vec::new();
    for (name, contents) in out {
        let path = dir.join(name);
        write_artifact(&path, &contents, force)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing_and_values() {
        let a = Axis::parse("aDNN=-2:2:0.5").unwrap();
        assert_eq!(a.values(), vec![-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(Axis::parse("x=0:0.3:0.1").unwrap().values(), vec![0.0, 0.1, 0.2, 0.3]);
        assert_eq!(Axis::parse("x=0:1:0.4").unwrap().values(), vec![0.0, 0.4, 0.8]);
        assert_eq!(a.to_string(), "aDNN=-2:2:0.5");
        for bad in ["x", "x=1:2", "x=0:1:0", "x=2:1:0.5", "x=a:1:1", "x=0:1:-1"] {
            assert!(Axis::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn default_pe_axes_have_225_cells() {
        let axes = Axis::parse_list(DEFAULT_PE_AXES).unwrap();
        let cells = cartesian(&axes);
        assert_eq!(cells.len(), 225);
        assert_eq!(cells[0], vec![-2.0, -2.0, -2.0]);
        assert_eq!(cells[1], vec![-2.0, -2.0, -1.5]);
        assert_eq!(cells[224], vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn zero_is_not_negative_zero() {
        let v = Axis::parse("x=-1:0:0.5").unwrap().values();
        assert_eq!(format!("{}", v[2]), "0");
    }

    #[test]
    fn empty_grid_exports_header_only() {
        let grid = SensitivityGrid {
            kind: GridKind::PeOffsets,
            axes: Axis::parse_list("a0NS=-1:0:1").unwrap(),
            metric_names: pe_metric_names(),
            cells: Vec::new(),
            detail_name: "membership".into(),
            detail_columns: MEMBERSHIP_COLUMNS.iter().map(|s| s.to_string()).collect(),
        };
        let f = render_grid(&grid, "x").unwrap();
        assert_eq!(f.grid_csv.lines().count(), 1);
        assert!(f.grid_csv.starts_with("cell,a0NS,converged,iterations,gammaNS,"));
        assert_eq!(f.detail_csv.lines().count(), 1);
    }

    #[test]
    fn better_prefers_converged_then_loglik() {
        let k = |x: &(bool, f64)| *x;
        assert_eq!(better(Some(Ok((true, -5.0))), Ok((true, -4.0)), k).unwrap(), (true, -4.0));
        assert_eq!(better(Some(Ok((true, -5.0))), Ok((false, -4.0)), k).unwrap(), (true, -5.0));
        assert_eq!(better(Some(Ok((true, -4.0))), Ok((true, -4.0)), k).unwrap(), (true, -4.0));
        assert_eq!(better(None, Ok((false, 1.0)), k).unwrap(), (false, 1.0));
    }

    #[test]
    fn error_text_is_quoted() {
        assert_eq!(text("a, b"), "\"a, b\"");
        assert_eq!(text("plain"), "plain");
    }
}
