//! Accuracy of the power method against the factor-sum baseline on random
//! sums of Kronecker products of SPD matrices.

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use kronprior::kronalg::{factor_sum_baseline, power_method_sum_kron, KronFactored, KronSum, PowerConfig};

use crate::config::{ExperimentConfig, KronBenchSpec};
use crate::error::Result;
use crate::experiments::{fmt, mean, rng, std_dev, to_csv};

pub const HEADER: [&str; 12] = [
    "family",
    "size",
    "scale",
    "gamma",
    "terms",
    "instance",
    "power_error",
    "baseline_error",
    "iter1",
    "iter2",
    "converged_error",
    "iterations",
];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    /// `pair` for `s L ⊗ R + γ I`, `terms` for the many-term sweep.
    pub family: &'static str,
    pub size: usize,
    pub scale: f64,
    pub gamma: f64,
    pub terms: usize,
    pub instance: usize,
    pub power_error: f64,
    pub baseline_error: f64,
    /// Relative residual after the first and second iterations.
    pub iter1: f64,
    pub iter2: f64,
    pub converged_error: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSummary {
    pub power_mean: f64,
    pub power_std: f64,
    pub baseline_mean: f64,
    pub baseline_std: f64,
    /// Instances where the power method lost to the baseline.
    pub power_worse: usize,
    pub max_iter2_gap: f64,
}

/// `s (G Gᵀ + 1e-8 I)` with standard-normal `G`.
pub fn random_spd(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut *rng));
    let mut a = &g * g.transpose() + DMatrix::identity(n, n) * 1e-8;
    a = (&a + a.transpose()) * (0.5 * scale);
    a
}

fn bench_power(spec: &KronBenchSpec, seed: u64) -> PowerConfig {
    PowerConfig {
        seed,
        record_trajectory: true,
        ..spec.power
    }
}

fn run_instance(
    family: &'static str,
    sum: &KronSum,
    meta: (usize, f64, f64, usize, usize),
    power: &PowerConfig,
) -> BenchRow {
    let out = power_method_sum_kron(sum, power);
    let base = factor_sum_baseline(sum);
    let t = &out.trajectory;
    let last = t.last().copied().unwrap_or(f64::NAN);
    BenchRow {
        family,
        size: meta.0,
        scale: meta.1,
        gamma: meta.2,
        terms: meta.3,
        instance: meta.4,
        power_error: sum.relative_residual(&out.factors),
        baseline_error: sum.relative_residual(&base),
        iter1: t.first().copied().unwrap_or(last),
        iter2: t.get(1).copied().unwrap_or(last),
        converged_error: last,
        iterations: out.iterations,
    }
}

/// Two-term family `s L ⊗ R + γ I ⊗ I` over sizes, scales and damping.
pub fn pair_family(spec: &KronBenchSpec, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    let mut cell = 0u64;
    for &size in &spec.sizes {
        for &scale in &spec.scales {
            for &gamma in &spec.gammas {
                let mut r = rng(seed, 100 + cell);
                cell += 1;
                for inst in 0..spec.instances {
                    let l = random_spd(size, scale, &mut r);
                    let rt = random_spd(size, scale, &mut r);
                    let sum = KronSum::new(vec![
                        KronFactored::new(l, rt)?,
                        KronFactored::scaled_identity(size, size, gamma),
                    ])?;
                    let power = bench_power(spec, seed.wrapping_mul(1_000_003).wrapping_add(cell * 1000 + inst as u64));
                    rows.push(run_instance("pair", &sum, (size, scale, gamma, 2, inst), &power));
                }
            }
        }
    }
    Ok(rows)
}

/// Many-term family with `M = N = 5`; the first term is `γ I ⊗ I`.
pub fn term_family(spec: &KronBenchSpec, seed: u64) -> Result<Vec<BenchRow>> {
    const SIZE: usize = 5;
    let mut rows = Vec::new();
    let mut cell = 0u64;
    for &k in &spec.term_counts {
        for &gamma in &spec.gammas {
            let mut r = rng(seed, 10_000 + cell);
            cell += 1;
            for inst in 0..spec.instances {
                let mut terms = vec![KronFactored::scaled_identity(SIZE, SIZE, gamma)];
                for _ in 1..k.max(1) {
                    terms.push(KronFactored::new(random_spd(SIZE, 1.0, &mut r), random_spd(SIZE, 1.0, &mut r))?);
                }
                let sum = KronSum::new(terms)?;
                let power = bench_power(spec, seed.wrapping_mul(7_000_003).wrapping_add(cell * 1000 + inst as u64));
                rows.push(run_instance("terms", &sum, (SIZE, 1.0, gamma, k, inst), &power));
            }
        }
    }
    Ok(rows)
}

pub fn summarize(rows: &[BenchRow]) -> BenchSummary {
    let p: Vec<f64> = rows.iter().map(|r| r.power_error).collect();
    let b: Vec<f64> = rows.iter().map(|r| r.baseline_error).collect();
    BenchSummary {
        power_mean: mean(&p),
        power_std: std_dev(&p),
        baseline_mean: mean(&b),
        baseline_std: std_dev(&b),
        power_worse: rows.iter().filter(|r| r.power_error > r.baseline_error).count(),
        max_iter2_gap: rows
            .iter()
            .map(|r| (r.iter2 - r.converged_error).abs())
            .fold(0.0, f64::max),
    }
}

pub fn run(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = pair_family(&cfg.kron_bench, seed)?;
    rows.extend(term_family(&cfg.kron_bench, seed)?);
    Ok(rows)
}

pub fn rows_to_csv(rows: &[BenchRow]) -> Result<String> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.family.to_string(),
                r.size.to_string(),
                fmt(r.scale),
                fmt(r.gamma),
                r.terms.to_string(),
                r.instance.to_string(),
                fmt(r.power_error),
                fmt(r.baseline_error),
                fmt(r.iter1),
                fmt(r.iter2),
                fmt(r.converged_error),
                r.iterations.to_string(),
            ]
        })
        .collect();
    to_csv(&HEADER, &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> KronBenchSpec {
        KronBenchSpec {
            sizes: vec![2, 4],
            scales: vec![1e-2, 1.0],
            gammas: vec![1e-3, 1.0],
            instances: 2,
            term_counts: vec![2, 4],
            ..KronBenchSpec::default()
        }
    }

    #[test]
    fn power_method_beats_baseline_on_small_grid() {
        let rows = pair_family(&small(), 0).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 2 * 2);
        let s = summarize(&rows);
        assert_eq!(s.power_worse, 0);
        assert!(s.power_mean < s.baseline_mean);
    }

    #[test]
    fn term_family_starts_with_identity() {
        let rows = term_family(&small(), 1).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 2);
        assert!(rows.iter().all(|r| r.iter1 >= r.converged_error - 1e-12));
    }

    #[test]
    fn csv_is_deterministic() {
        let a = rows_to_csv(&pair_family(&small(), 3).unwrap()).unwrap();
        let b = rows_to_csv(&pair_family(&small(), 3).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with("family,size,scale,gamma,terms,instance,"));
    }
}
