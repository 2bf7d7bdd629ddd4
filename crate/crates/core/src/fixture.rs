//! Bundled 494-subject reference cohort.
//!
//! Outcome and defect counts by arm are fixed exactly; times and covariates
//! are drawn from a seeded generator. Covariate marginals are matched
//! exactly for counts and to the first decimal for height moments. Within
//! an arm they are spread evenly over the outcome cells, except that a set
//! number of defect cases come from referral type I; this association with
//! the outcome makes weighting move the odds ratio the way the adjusted
//! analysis of the source data did.

use crate::cohort::{
    parse_cohort, Cohort, CovariateSchema, CovariateValue, Defect, EndReason, SubjectRecord,
};
use crate::error::Result;
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};

pub const REFERENCE_SCHEMA: &str = "asthma:binary,height:real,referral:categorical(I|II|III)";

/// The shipped CSV; identical to [`generate_reference_csv`].
pub const REFERENCE_CSV: &str = include_str!("../data/reference_cohort.csv");

const SEED: u64 = 20_240_611;

/// `(end reason, defect, count)` per arm.
const EXPOSED_OUTCOMES: [(EndReason, Defect, usize); 6] = [
    (EndReason::Livebirth, Defect::Yes, 30),
    (EndReason::Livebirth, Defect::No, 287),
    (EndReason::SabStillbirth, Defect::Missing, 13),
    (EndReason::SabStillbirth, Defect::No, 1),
    (EndReason::Tab, Defect::Yes, 3),
    (EndReason::Ltfu, Defect::Missing, 2),
];

const UNEXPOSED_OUTCOMES: [(EndReason, Defect, usize); 5] = [
    (EndReason::Livebirth, Defect::Yes, 5),
    (EndReason::Livebirth, Defect::No, 139),
    (EndReason::SabStillbirth, Defect::Yes, 1),
    (EndReason::SabStillbirth, Defect::Missing, 12),
    (EndReason::Tab, Defect::Yes, 1),
];

struct ArmCovariates {
    asthma: usize,
    height_mean: f64,
    height_sd: f64,
    referral: [usize; 3],
    /// Defect cases (any end reason) with referral type I.
    referral_i_defects: usize,
}

const EXPOSED_COV: ArmCovariates = ArmCovariates { asthma: 45, height_mean: 165.0, height_sd: 6.98, referral: [26, 199, 111], referral_i_defects: 8 };
const UNEXPOSED_COV: ArmCovariates =
    ArmCovariates { asthma: 32, height_mean: 167.0, height_sd: 7.01, referral: [65, 52, 41], referral_i_defects: 4 };

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

fn enrollment(rng: &mut ChaCha8Rng) -> f64 {
    let b = Beta::new(2.0, 3.0).expect("valid beta");
    round1(2.0 + 14.0 * b.sample(rng))
}

/// End time strictly after `q`.
fn end_time(reason: EndReason, stillbirth: bool, q: f64, rng: &mut ChaCha8Rng) -> f64 {
    let x = match reason {
        EndReason::SabStillbirth if stillbirth => rng.random_range(22.0f64..36.0),
        EndReason::SabStillbirth => {
            let b = Beta::new(1.2, 3.0).expect("valid beta");
            q + (19.8 - q) * b.sample(rng)
        }
        EndReason::Livebirth => Normal::new(39.0f64, 1.5).expect("valid normal").sample(rng).clamp(34.0, 42.5),
        EndReason::Tab => q + (19.8 - q) * rng.random::<f64>(),
        EndReason::Ltfu => q + (40.0 - q) * rng.random::<f64>(),
    };
    round1(x).max(round1(q + 0.1))
}

/// Outcome cell per rank so that every cell is spread evenly over the ranks.
fn interleave(counts: &[usize]) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    let mut taken = vec![0usize; counts.len()];
    (0..n)
        .map(|k| {
            let deficit = |c: usize| (k + 1) as f64 * counts[c] as f64 / n as f64 - taken[c] as f64;
            let c = (0..counts.len())
                .filter(|&c| taken[c] < counts[c])
                .max_by(|&a, &b| deficit(a).total_cmp(&deficit(b)).then(b.cmp(&a)))
                .expect("cells remain");
            taken[c] += 1;
            c
        })
        .collect()
}

fn arm_records(
    exposed: bool,
    outcomes: &[(EndReason, Defect, usize)],
    cov: &ArmCovariates,
    rng: &mut ChaCha8Rng,
) -> Vec<SubjectRecord<f64>> {
    let n: usize = outcomes.iter().map(|o| o.2).sum();
    let mut asthma: Vec<bool> = (0..n).map(|i| i < cov.asthma).collect();
    asthma.shuffle(rng);
    let mut referral: Vec<usize> = (0..3).flat_map(|l| std::iter::repeat_n(l, cov.referral[l])).collect();
    referral.shuffle(rng);
    let z: Vec<f64> = (0..n).map(|_| Normal::new(0.0, 1.0).expect("valid normal").sample(rng)).collect();
    let m = z.iter().sum::<f64>() / n as f64;
    let s = (z.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt();
    let mut profiles: Vec<(usize, bool, f64)> =
        (0..n).map(|i| (referral[i], asthma[i], round1(cov.height_mean + cov.height_sd * (z[i] - m) / s))).collect();
    profiles.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.total_cmp(&b.2)));
    // defect cases take `referral_i_defects` type-I profiles and the rest
    // from the other levels; every pool is sampled systematically
    let (type_i, other): (Vec<_>, Vec<_>) = profiles.into_iter().partition(|p| p.0 == 0);
    let is_case: Vec<bool> = outcomes.iter().map(|o| o.1 == Defect::Yes).collect();
    let cases: usize = outcomes.iter().filter(|o| o.1 == Defect::Yes).map(|o| o.2).sum();
    let split = |pool: Vec<(usize, bool, f64)>, k: usize| {
        let (mut take, mut keep) = (Vec::new(), Vec::new());
        let m = pool.len();
        for (p, c) in pool.into_iter().zip(interleave(&[k, m - k])) {
            if c == 0 { take.push(p) } else { keep.push(p) }
        }
        (take, keep)
    };
    let (mut case_pool, mut rest_pool) = split(type_i, cov.referral_i_defects);
    let (b_take, b_keep) = split(other, cases - cov.referral_i_defects);
    case_pool.extend(b_take);
    rest_pool.extend(b_keep);
    let mut by_cell: Vec<Vec<(usize, bool, f64)>> = vec![Vec::new(); outcomes.len()];
    for (want_case, pool) in [(true, case_pool), (false, rest_pool)] {
        let cells: Vec<usize> = (0..outcomes.len()).filter(|&c| is_case[c] == want_case).collect();
        let counts: Vec<usize> = cells.iter().map(|&c| outcomes[c].2).collect();
        for (p, j) in pool.into_iter().zip(interleave(&counts)) {
            by_cell[cells[j]].push(p);
        }
    }
    let mut out = Vec::with_capacity(n);
    for (&(reason, defect, _), cell) in outcomes.iter().zip(by_cell) {
        // the single exposed SAB/stillbirth with an observed outcome is the stillbirth
        let stillbirth = exposed && reason == EndReason::SabStillbirth && defect == Defect::No;
        for (referral, asthma, height) in cell {
            let q = enrollment(rng);
            let x = end_time(reason, stillbirth, q, rng);
            out.push(SubjectRecord {
                id: String::new(),
                exposed,
                defect,
                enroll_time: q,
                end_time: x,
                end_reason: reason,
                covariates: vec![
                    CovariateValue::Binary(asthma),
                    CovariateValue::Real(height),
                    CovariateValue::Level(referral),
                ],
            });
        }
    }
    out
}

/// Regenerates the reference cohort CSV from its seed.
pub fn generate_reference_csv() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut records = arm_records(true, &EXPOSED_OUTCOMES, &EXPOSED_COV, &mut rng);
    records.extend(arm_records(false, &UNEXPOSED_OUTCOMES, &UNEXPOSED_COV, &mut rng));
    records.shuffle(&mut rng);
    for (k, r) in records.iter_mut().enumerate() {
        r.id = format!("p{:03}", k + 1);
    }
    let schema = CovariateSchema::parse(REFERENCE_SCHEMA).expect("static schema");
    Cohort::new(records, schema).expect("generated records are valid").to_csv()
}

/// The bundled reference cohort.
pub fn reference_cohort<T: Scalar>() -> Result<Cohort<T>> {
    parse_cohort(REFERENCE_CSV, &CovariateSchema::parse(REFERENCE_SCHEMA)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_file_matches_generator() {
        assert_eq!(generate_reference_csv(), REFERENCE_CSV);
    }

    /// `cargo test -p causal-es regenerate_reference_csv -- --ignored`
    #[test]
    #[ignore]
    fn regenerate_reference_csv() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/reference_cohort.csv");
        std::fs::write(path, generate_reference_csv()).unwrap();
    }

    #[test]
    fn interleave_spreads_cells() {
        let seq = interleave(&[6, 3, 1]);
        assert_eq!(seq.len(), 10);
        assert_eq!(seq.iter().filter(|&&c| c == 1).count(), 3);
        assert_eq!(seq.iter().filter(|&&c| c == 2).count(), 1);
        assert_eq!(seq[0], 0);
    }

    #[test]
    fn referral_i_defect_cases() {
        let c = reference_cohort::<f64>().unwrap();
        let count = |exposed: bool| {
            c.records()
                .iter()
                .filter(|r| r.exposed == exposed && r.defect == Defect::Yes)
                .filter(|r| r.covariates[2] == CovariateValue::Level(0))
                .count()
        };
        assert_eq!(count(true), EXPOSED_COV.referral_i_defects);
        assert_eq!(count(false), UNEXPOSED_COV.referral_i_defects);
    }

    #[test]
    fn arm_sizes() {
        let c = reference_cohort::<f64>().unwrap();
        assert_eq!(c.len(), 494);
        assert_eq!(c.n_exposed(), 336);
    }
}
