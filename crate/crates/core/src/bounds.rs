//! Regions `D1`–`D4`, the envelope kernels `H̄`, `H̲`, and the empirical
//! two-sided sandwich `C⁻¹H̲ ≤ H ≤ C H̄`.
//!
//! Ratios are formed in logarithms: the scan reaches queries where `H`,
//! `H̄` and `H̲` all lie far below the smallest double.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{h_scaled, poisson_kernel_translated, HForm, ReducedKernelQuery};
use crate::quadrature::QuadratureSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    D1,
    D2,
    D3,
    D4,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::D1, Region::D2, Region::D3, Region::D4];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::D1 => "D1",
            Region::D2 => "D2",
            Region::D3 => "D3",
            Region::D4 => "D4",
        }
    }
}

pub fn classify(q: &ReducedKernelQuery) -> Region {
    let n2 = 2.0 * (q.dim as f64 + 2.0);
    if q.reflected_distance_sq() < n2 * q.t {
        if q.t < 2.0 * n2 {
            Region::D1
        } else {
            Region::D2
        }
    } else if q.z_height() < 1.0 {
        Region::D3
    } else {
        Region::D4
    }
}

/// `ln Γ_N(x − y*, s)`.
fn ln_reflected_gauss(q: &ReducedKernelQuery, s: f64) -> f64 {
    -0.5 * q.dim as f64 * (4.0 * PI * s).ln() - q.reflected_distance_sq() / (4.0 * s)
}

fn ln_envelope(q: &ReducedKernelQuery, s: f64) -> f64 {
    match classify(q) {
        Region::D1 => poisson_kernel_translated(q).ln(),
        Region::D2 | Region::D4 => ln_reflected_gauss(q, s),
        Region::D3 => q.z_height().ln() + ln_reflected_gauss(q, s),
    }
}

pub fn ln_envelope_upper(q: &ReducedKernelQuery) -> f64 {
    ln_envelope(q, q.t)
}

/// Same as the upper envelope with `t/2` inside the Gaussian off `D1`.
pub fn ln_envelope_lower(q: &ReducedKernelQuery) -> f64 {
    ln_envelope(q, 0.5 * q.t)
}

pub fn envelope_upper(q: &ReducedKernelQuery) -> f64 {
    ln_envelope_upper(q).exp()
}

pub fn envelope_lower(q: &ReducedKernelQuery) -> f64 {
    ln_envelope_lower(q).exp()
}

/// Random queries: `t` log-uniform on `t_range`, `ρ, a, b` log-uniform on
/// `span_range`, with a quarter of the draws forced onto each of
/// `a = 0`, `b = 0` and `a = b = 0`. For `N ≥ 2`, `ρ = 0` with probability
/// `1/8`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySampler {
    pub dim: usize,
    pub t_range: (f64, f64),
    pub span_range: (f64, f64),
}

impl QuerySampler {
    pub fn standard(dim: usize) -> Self {
        Self {
            dim,
            t_range: (1e-3, 1e4),
            span_range: (1e-3, 1e2),
        }
    }

    fn log_uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
        (rng.gen_range(lo.ln()..hi.ln())).exp()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> ReducedKernelQuery {
        let t = Self::log_uniform(rng, self.t_range);
        let mut a = Self::log_uniform(rng, self.span_range);
        let mut b = Self::log_uniform(rng, self.span_range);
        match rng.gen_range(0..4u8) {
            0 => a = 0.0,
            1 => b = 0.0,
            2 => {
                a = 0.0;
                b = 0.0;
            }
            _ => {}
        }
        let rho = if self.dim == 1 || rng.gen_range(0..8u8) == 0 {
            0.0
        } else {
            Self::log_uniform(rng, self.span_range)
        };
        ReducedKernelQuery {
            dim: self.dim,
            rho,
            a,
            b,
            t,
        }
    }

    pub fn draw(&self, n: usize, seed: u64) -> Vec<ReducedKernelQuery> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }
}

/// `ln H − ln H̄` and `ln H − ln H̲` at one query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichSample {
    pub query: ReducedKernelQuery,
    pub region: Region,
    pub ln_upper_ratio: f64,
    pub ln_lower_ratio: f64,
}

pub fn sandwich_sample(q: &ReducedKernelQuery, spec: &QuadratureSpec) -> Result<Option<SandwichSample>> {
    let h = h_scaled(q, HForm::preferred(q), spec)?;
    if !h.converged || !(h.mantissa > 0.0) {
        return Ok(None);
    }
    let ln_h = h.ln();
    Ok(Some(SandwichSample {
        query: *q,
        region: classify(q),
        ln_upper_ratio: ln_h - ln_envelope_upper(q),
        ln_lower_ratio: ln_h - ln_envelope_lower(q),
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionExtremes {
    pub region: Region,
    pub samples: usize,
    pub max_upper_ratio: f64,
    pub min_lower_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub dim: usize,
    pub samples: usize,
    pub skipped: usize,
    /// `max H/H̄`.
    pub max_upper_ratio: f64,
    /// `min H/H̲`.
    pub min_lower_ratio: f64,
    pub worst_query_upper: ReducedKernelQuery,
    pub worst_query_lower: ReducedKernelQuery,
    pub regions: Vec<RegionExtremes>,
}

/// Spec used by scans: relative accuracy only, generous budget.
pub fn scan_spec() -> QuadratureSpec {
    QuadratureSpec {
        max_subdivisions: 400,
        ..QuadratureSpec::relative(1e-9)
    }
}

pub fn sandwich_scan(sampler: &QuerySampler, n: usize, seed: u64, spec: &QuadratureSpec) -> Result<SandwichReport> {
    if n == 0 {
        return Err(Error::Domain("sandwich scan needs at least one sample".into()));
    }
    sandwich_over(sampler.dim, &sampler.draw(n, seed), spec)
}

/// Deterministic probes on and near the region interfaces, where the
/// extremal ratios sit: `t` on a log grid over `[1e-3, 1e4]`, squared
/// distance `|x−y*|²` at fixed multiples of `2(N+2)t` (just inside and on
/// the interface among them), split between height and tangential offset.
pub fn interface_probes(dim: usize) -> Vec<ReducedKernelQuery> {
    let k = 2.0 * (dim as f64 + 2.0);
    let mut ts: Vec<f64> = (0..=56).map(|i| 10f64.powf(-3.0 + i as f64 / 8.0)).collect();
    ts.extend([2.0 * k * (1.0 - 1e-12), 2.0 * k, 1.0, 1.0 - 1e-9]);
    let fractions = [0.0, 0.25, 0.5, 0.9, 1.0 - 1e-9, 1.0, 1.5, 4.0, 16.0];
    let splits: &[f64] = if dim == 1 { &[1.0] } else { &[1.0, 0.5, 0.0] };
    let mut out = Vec::new();
    for &t in &ts {
        for &f in &fractions {
            let d2 = f * k * t;
            for &w in splits {
                let h = (w * d2).sqrt();
                let rho = ((1.0 - w) * d2).sqrt();
                for (a, b) in [(0.0, h), (0.5 * h, 0.5 * h)] {
                    out.push(ReducedKernelQuery { dim, rho, a, b, t });
                }
            }
        }
    }
    out
}

/// The scan that defines [`SANDWICH_BASELINES`]: `BASELINE_SAMPLES` draws of
/// [`QuerySampler::standard`] with `BASELINE_SEED`, plus [`interface_probes`].
pub fn baseline_scan(dim: usize, spec: &QuadratureSpec) -> Result<SandwichReport> {
    let mut queries = QuerySampler::standard(dim).draw(BASELINE_SAMPLES, BASELINE_SEED);
    queries.extend(interface_probes(dim));
    sandwich_over(dim, &queries, spec)
}

fn sandwich_over(dim: usize, queries: &[ReducedKernelQuery], spec: &QuadratureSpec) -> Result<SandwichReport> {
    let n = queries.len();
    let results: Vec<Option<SandwichSample>> = queries
        .par_iter()
        .map(|q| sandwich_sample(q, spec))
        .collect::<Result<_>>()?;
    let kept: Vec<SandwichSample> = results.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(Error::Domain("no sample converged".into()));
    }
    let upper = kept
        .iter()
        .max_by(|x, y| x.ln_upper_ratio.total_cmp(&y.ln_upper_ratio))
        .expect("non-empty");
    let lower = kept
        .iter()
        .min_by(|x, y| x.ln_lower_ratio.total_cmp(&y.ln_lower_ratio))
        .expect("non-empty");
    let regions = Region::ALL
        .iter()
        .filter_map(|&r| {
            let in_r: Vec<&SandwichSample> = kept.iter().filter(|s| s.region == r).collect();
            if in_r.is_empty() {
                return None;
            }
            Some(RegionExtremes {
                region: r,
                samples: in_r.len(),
                max_upper_ratio: in_r
                    .iter()
                    .map(|s| s.ln_upper_ratio)
                    .fold(f64::NEG_INFINITY, f64::max)
                    .exp(),
                min_lower_ratio: in_r
                    .iter()
                    .map(|s| s.ln_lower_ratio)
                    .fold(f64::INFINITY, f64::min)
                    .exp(),
            })
        })
        .collect();
    Ok(SandwichReport {
        dim,
        samples: kept.len(),
        skipped: n - kept.len(),
        max_upper_ratio: upper.ln_upper_ratio.exp(),
        min_lower_ratio: lower.ln_lower_ratio.exp(),
        worst_query_upper: upper.query,
        worst_query_lower: lower.query,
        regions,
    })
}

/// Extremal ratios of [`baseline_scan`] with [`scan_spec`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichBaseline {
    pub dim: usize,
    pub max_upper_ratio: f64,
    pub min_lower_ratio: f64,
}

pub const BASELINE_SEED: u64 = 20_240_601;
pub const BASELINE_SAMPLES: usize = 10_000;

pub const SANDWICH_BASELINES: [SandwichBaseline; 3] = [
    SandwichBaseline {
        dim: 1,
        max_upper_ratio: 1.9999000149962511,
        min_lower_ratio: 0.026275287323673978,
    },
    SandwichBaseline {
        dim: 2,
        max_upper_ratio: 2.4244171883025607,
        min_lower_ratio: 0.037535120747412935,
    },
    SandwichBaseline {
        dim: 3,
        max_upper_ratio: 2.9369842051766524,
        min_lower_ratio: 0.0450633649954013,
    },
];

pub fn baseline(dim: usize) -> Option<SandwichBaseline> {
    SANDWICH_BASELINES.iter().copied().find(|b| b.dim == dim)
}

impl SandwichBaseline {
    /// `C = slack ×` the baseline extremes: `H ≤ C H̄` and `H ≥ H̲ / C`.
    pub fn admits(&self, s: &SandwichSample, slack: f64) -> bool {
        let c_up = slack * self.max_upper_ratio;
        let c_lo = slack / self.min_lower_ratio;
        s.ln_upper_ratio <= c_up.ln() && s.ln_lower_ratio >= -c_lo.ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{gauss_kernel, h_value};
    use proptest::prelude::*;

    fn q(dim: usize, rho: f64, a: f64, b: f64, t: f64) -> ReducedKernelQuery {
        ReducedKernelQuery::new(dim, rho, a, b, t).unwrap()
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify(&q(1, 0.0, 0.0, 0.0, 1.0)), Region::D1);
        // |x−y*|² = 0 < 2(N+2)t and t ≥ 4(N+2)
        assert_eq!(classify(&q(1, 0.0, 0.0, 0.0, 20.0)), Region::D2);
        // tie |x−y*|² = 2(N+2)t goes to the non-strict branch
        let tie = ReducedKernelQuery {
            dim: 1,
            rho: 0.0,
            a: 3.0,
            b: 0.0,
            t: 1.5,
        };
        assert_eq!(tie.reflected_distance_sq(), 6.0 * 1.5);
        assert_eq!(classify(&tie), Region::D4);
        let tie3 = ReducedKernelQuery {
            dim: 2,
            rho: 1.0,
            a: 0.0,
            b: 0.0,
            t: 0.125,
        };
        assert_eq!(tie3.reflected_distance_sq(), 8.0 * 0.125);
        assert_eq!(classify(&tie3), Region::D3);
    }

    #[test]
    fn envelope_examples() {
        let d1 = q(1, 0.0, 0.0, 0.0, 1.0);
        assert_eq!(envelope_upper(&d1), 1.0);
        assert_eq!(envelope_lower(&d1), 1.0);
        let d2 = q(2, 1.0, 2.0, 1.0, 30.0);
        assert_eq!(classify(&d2), Region::D2);
        let g = gauss_kernel(2, 10f64.sqrt(), 30.0).unwrap();
        assert!((envelope_upper(&d2) / g - 1.0).abs() < 1e-13);
        // D3 with a=b=0, t=0.5, ρ² = 2(N+2)t
        for n in 2..=3usize {
            let t = 0.5;
            let rho = (2.0 * (n as f64 + 2.0) * t).sqrt();
            let d3 = ReducedKernelQuery {
                dim: n,
                rho,
                a: 0.0,
                b: 0.0,
                t,
            };
            assert_eq!(classify(&d3), Region::D3);
            let want = 0.5 * gauss_kernel(n, rho, 0.5).unwrap();
            assert!((envelope_upper(&d3) / want - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn partition_and_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..=3usize {
            let s = QuerySampler::standard(n);
            let mut seen = [false; 4];
            for _ in 0..100_000 {
                let qq = s.sample(&mut rng);
                let r = classify(&qq);
                seen[r.index()] = true;
                let lhs = ln_envelope_lower(&qq);
                let rhs = 0.5 * n as f64 * 2f64.ln() + ln_envelope_upper(&qq);
                assert!(lhs <= rhs + 1e-12 * rhs.abs().max(1.0));
                if r == Region::D2 {
                    let expect = 0.5 * n as f64 * 2f64.ln() - qq.reflected_distance_sq() / (4.0 * qq.t);
                    assert!((lhs - ln_envelope_upper(&qq) - expect).abs() < 1e-9 * expect.abs().max(1.0));
                }
            }
            assert!(seen.iter().all(|&s| s), "n={n} regions {seen:?}");
        }
    }

    #[test]
    fn h_is_continuous_across_interfaces() {
        let spec = QuadratureSpec::relative(1e-12);
        for n in 1..=3usize {
            let k = 2.0 * (n as f64 + 2.0);
            // D1 | D3: |x−y*|² = k t with t small
            let t = 0.02;
            let a = (k * t).sqrt();
            let lo = h_value(&q(n, 0.0, a - 0.5e-8, 0.0, t), &spec).unwrap().value;
            let hi = h_value(&q(n, 0.0, a + 0.5e-8, 0.0, t), &spec).unwrap().value;
            assert_ne!(
                classify(&q(n, 0.0, a - 0.5e-8, 0.0, t)),
                classify(&q(n, 0.0, a + 0.5e-8, 0.0, t))
            );
            assert!(((hi - lo) / lo).abs() < 1e-6);
            // D1 | D2: t = 2k
            let t = 2.0 * k;
            let lo = h_value(&q(n, 0.0, 0.5, 0.0, t - 0.5e-8), &spec).unwrap().value;
            let hi = h_value(&q(n, 0.0, 0.5, 0.0, t + 0.5e-8), &spec).unwrap().value;
            assert!(((hi - lo) / lo).abs() < 1e-6);
            // D3 | D4: a + b + t = 1
            let t = 0.01;
            let a = 1.0 - t;
            let lo = h_value(&q(n, 0.0, a - 0.5e-8, 0.0, t), &spec).unwrap().value;
            let hi = h_value(&q(n, 0.0, a + 0.5e-8, 0.0, t), &spec).unwrap().value;
            assert!(((hi - lo) / lo).abs() < 1e-6);
        }
    }

    #[test]
    fn scan_is_deterministic_and_finite() {
        let s = QuerySampler::standard(1);
        let r1 = sandwich_scan(&s, 200, 1, &scan_spec()).unwrap();
        let r2 = sandwich_scan(&s, 200, 1, &scan_spec()).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.max_upper_ratio.is_finite() && r1.min_lower_ratio > 0.0);
        assert_eq!(r1.skipped, 0);
    }

    /// The extremes sit on region corners: the largest distance and time
    /// in `D1` for the lower ratio, the smallest time in `D2` for the upper.
    #[test]
    fn baseline_slack_covers_region_corners() {
        for n in 1..=3usize {
            let b = baseline(n).unwrap();
            let k = 2.0 * (n as f64 + 2.0);
            let t = 2.0 * k * (1.0 - 1e-12);
            let d1 = ReducedKernelQuery {
                dim: n,
                rho: 0.0,
                a: 0.0,
                b: (k * t).sqrt() * (1.0 - 1e-12),
                t,
            };
            assert_eq!(classify(&d1), Region::D1);
            let s = sandwich_sample(&d1, &scan_spec()).unwrap().unwrap();
            assert!(b.admits(&s, 1.1), "n={n} corner lower {}", s.ln_lower_ratio.exp());
            if n > 1 {
                let d1r = ReducedKernelQuery {
                    dim: n,
                    rho: (k * t).sqrt() * (1.0 - 1e-12),
                    a: 0.0,
                    b: 0.0,
                    t,
                };
                let s = sandwich_sample(&d1r, &scan_spec()).unwrap().unwrap();
                assert!(
                    b.admits(&s, 1.1),
                    "n={n} tangential corner lower {}",
                    s.ln_lower_ratio.exp()
                );
            }
            let d2 = ReducedKernelQuery {
                dim: n,
                rho: 0.0,
                a: 0.0,
                b: 0.0,
                t: 2.0 * k,
            };
            assert_eq!(classify(&d2), Region::D2);
            let s = sandwich_sample(&d2, &scan_spec()).unwrap().unwrap();
            assert!(b.admits(&s, 1.1), "n={n} corner upper {}", s.ln_upper_ratio.exp());
        }
    }

    #[test]
    fn single_point_within_scanned_constants() {
        let b = baseline(1).unwrap();
        let s = sandwich_sample(&q(1, 0.0, 0.0, 0.0, 100.0), &scan_spec())
            .unwrap()
            .unwrap();
        assert!(b.admits(&s, 1.0));
    }

    /// Regenerates [`SANDWICH_BASELINES`]; run with `--ignored --nocapture`.
    #[test]
    #[ignore]
    fn regenerate_sandwich_baseline() {
        for n in 1..=3usize {
            let r = baseline_scan(n, &scan_spec()).unwrap();
            println!("{}", serde_json::to_string_pretty(&r).unwrap());
        }
    }

    proptest! {
        #[test]
        fn exactly_one_region(n in 1usize..=3, rho in 0.0f64..50.0, a in 0.0f64..50.0, b in 0.0f64..50.0, t in 1e-3f64..1e3) {
            let rho = if n == 1 { 0.0 } else { rho };
            let qq = q(n, rho, a, b, t);
            let k = 2.0 * (n as f64 + 2.0);
            let inside = qq.reflected_distance_sq() < k * t;
            let hits = [
                inside && t < 2.0 * k,
                inside && t >= 2.0 * k,
                !inside && a + b + t < 1.0,
                !inside && a + b + t >= 1.0,
            ];
            prop_assert_eq!(hits.iter().filter(|&&h| h).count(), 1);
            prop_assert!(hits[classify(&qq).index()]);
        }
    }
}
