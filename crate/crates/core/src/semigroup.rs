//! The solution operator `𝖦(t)` on paired interior/boundary data and the
//! executable decay, contractivity, lower-bound, composition and
//! operator-norm suites.
//!
//! Grid-based operations work on the half-line (`N = 1`): nodes
//! `x_j = jh`, `j = 0..=L/h`, with endpoint-corrected trapezoid weights, and
//! the boundary `{0}` carrying one value under counting measure. Since
//! `G(x_i, x_j, t) = Γ_1((i−j)h) + [H − Γ_1]((i+j)h)`, an operator is two
//! tables of length at most `2L/h + 1`, a Toeplitz part and a Hankel part.
//! The boundary source `G(x, 0, t) = H(x, t)` is the Hankel row at `j = 0`.
//!
//! Operator norms for `N ≥ 2` use the grid-free kernel device: the norm of
//! `G(·, y, t)` for `y` near the boundary, integrated radially in `x'`.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{fundamental_solution, gauss_kernel, h_value, HalfSpacePoint, ReducedKernelQuery};
use crate::quadrature::{erfc, integrate_with_breaks, QuadratureSpec};

/// Exponent beyond which table entries are dropped (`e^{-60} ≈ 1e-26`).
const TABLE_CUTOFF: f64 = 60.0;

/// Truncation tails above this fraction of `‖φ‖_{L¹}` raise the warning.
pub const TAIL_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    /// `L`: heights in `[0, L]`, tangential coordinates in `[−L, L]^{N−1}`.
    pub truncation: f64,
    /// `h`.
    pub spacing: f64,
    /// Data radial in `x'` (only meaningful for `N ≥ 2`).
    pub tangential_reduction: bool,
}

#[allow(clippy::len_without_is_empty)]
impl GridSpec {
    pub fn new(dim: usize, truncation: f64, spacing: f64) -> Result<Self> {
        let g = GridSpec {
            dim,
            truncation,
            spacing,
            tangential_reduction: dim >= 2,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.dim) {
            return Err(Error::InvalidGrid(format!("dim must be 1, 2 or 3, got {}", self.dim)));
        }
        let (l, h) = (self.truncation, self.spacing);
        if !(l.is_finite() && h.is_finite() && h > 0.0 && h < l) {
            return Err(Error::InvalidGrid(format!("need 0 < h < L, got h={h}, L={l}")));
        }
        let m = l / h;
        if (m - m.round()).abs() > 1e-9 * m {
            return Err(Error::InvalidGrid(format!("L/h must be an integer, got {m}")));
        }
        if m.round() < 6.0 {
            return Err(Error::InvalidGrid(format!("need at least 6 cells, got {}", m.round())));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        (self.truncation / self.spacing).round() as usize
    }

    /// Number of height nodes, `L/h + 1`.
    pub fn len(&self) -> usize {
        self.cells() + 1
    }

    pub fn height(&self, j: usize) -> f64 {
        j as f64 * self.spacing
    }

    pub fn heights(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.height(j)).collect()
    }

    /// Trapezoid weights with third-order end corrections
    /// `h·[3/8, 7/6, 23/24, 1, …, 1, 23/24, 7/6, 3/8]`.
    pub fn weights(&self) -> Vec<f64> {
        let n = self.len();
        let h = self.spacing;
        let mut w = vec![h; n];
        for (k, c) in [3.0 / 8.0, 7.0 / 6.0, 23.0 / 24.0].into_iter().enumerate() {
            w[k] = c * h;
            w[n - 1 - k] = c * h;
        }
        w
    }

    pub fn refined(&self) -> Result<Self> {
        GridSpec::new(self.dim, self.truncation, 0.5 * self.spacing)
    }

    pub fn zeros(&self) -> PairedField {
        PairedField::new(vec![0.0; self.len()], vec![0.0])
    }

    /// Samples `f` at the height nodes, with boundary value `boundary`.
    pub fn sample<F: Fn(f64) -> f64>(&self, f: F, boundary: f64) -> PairedField {
        PairedField::new(self.heights().into_iter().map(f).collect(), vec![boundary])
    }

    fn require_half_line(&self) -> Result<()> {
        self.validate()?;
        if self.dim != 1 {
            return Err(Error::Unsupported(format!(
                "grid operators are implemented for N = 1; use the kernel device for N = {}",
                self.dim
            )));
        }
        Ok(())
    }
}

/// Smallest integer `L` such that `Γ_N(L − support, t_max) < 1e−12`.
pub fn truncation_for(dim: usize, support: f64, t_max: f64) -> f64 {
    let ln_target = (1e-12f64).ln();
    let ln_pref = -0.5 * dim as f64 * (4.0 * PI * t_max).ln();
    let d2 = 4.0 * t_max * (ln_pref - ln_target).max(0.0);
    (support + d2.sqrt()).ceil()
}

/// `(φ^i, φ^b)`: interior values at the height nodes and boundary values
/// (one value for `N = 1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedField {
    pub interior: Vec<f64>,
    pub boundary: Vec<f64>,
}

pub(crate) fn check_exponent(r: f64) -> Result<()> {
    if r >= 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("Lebesgue exponent must be >= 1, got {r}")))
    }
}

fn lp_sum(values: &[f64], weights: Option<&[f64]>, r: f64) -> f64 {
    if r.is_infinite() {
        return values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    }
    let s: f64 = match weights {
        Some(w) => values.iter().zip(w).map(|(v, w)| w * v.abs().powf(r)).sum(),
        None => values.iter().map(|v| v.abs().powf(r)).sum(),
    };
    s.powf(1.0 / r)
}

impl PairedField {
    pub fn new(interior: Vec<f64>, boundary: Vec<f64>) -> Self {
        PairedField { interior, boundary }
    }

    pub fn check(&self, grid: &GridSpec) -> Result<()> {
        if self.interior.len() != grid.len() || self.boundary.len() != 1 {
            return Err(Error::InvalidGrid(format!(
                "field has {} interior and {} boundary values, grid expects {} and 1",
                self.interior.len(),
                self.boundary.len(),
                grid.len()
            )));
        }
        if let Some(index) = self.interior.iter().chain(&self.boundary).position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteField { index });
        }
        Ok(())
    }

    pub fn interior_norm(&self, grid: &GridSpec, r: f64) -> f64 {
        lp_sum(&self.interior, Some(&grid.weights()), r)
    }

    pub fn boundary_norm(&self, r: f64) -> f64 {
        lp_sum(&self.boundary, None, r)
    }

    /// `‖φ^i‖_{L^r(Ω)} + ‖φ^b‖_{L^r(∂Ω)}`.
    pub fn norm(&self, grid: &GridSpec, r: f64) -> f64 {
        self.interior_norm(grid, r) + self.boundary_norm(r)
    }

    /// `∫_Ω φ^i + ∫_{∂Ω} φ^b`.
    pub fn mass(&self, grid: &GridSpec) -> f64 {
        self.interior_mass(grid) + self.boundary.iter().sum::<f64>()
    }

    pub fn interior_mass(&self, grid: &GridSpec) -> f64 {
        self.interior.iter().zip(grid.weights()).map(|(v, w)| v * w).sum()
    }

    /// Largest absolute value over both components.
    pub fn sup(&self) -> f64 {
        self.interior
            .iter()
            .chain(&self.boundary)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_nonnegative(&self) -> bool {
        self.interior.iter().chain(&self.boundary).all(|v| *v >= 0.0)
    }

    pub fn scaled(&self, c: f64) -> PairedField {
        PairedField::new(
            self.interior.iter().map(|v| c * v).collect(),
            self.boundary.iter().map(|v| c * v).collect(),
        )
    }

    /// `self + c·other`.
    pub fn axpy(&self, c: f64, other: &PairedField) -> PairedField {
        PairedField::new(
            self.interior
                .iter()
                .zip(&other.interior)
                .map(|(a, b)| a + c * b)
                .collect(),
            self.boundary
                .iter()
                .zip(&other.boundary)
                .map(|(a, b)| a + c * b)
                .collect(),
        )
    }

    /// Largest absolute pointwise difference over both components.
    pub fn max_difference(&self, other: &PairedField) -> f64 {
        self.interior
            .iter()
            .zip(&other.interior)
            .chain(self.boundary.iter().zip(&other.boundary))
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// A sum of up to three smooth compactly supported bumps in `[0, support]`
/// with heights in `[−1, 1]` (or `[0, 1]` when `nonnegative`), plus a
/// boundary value that is zero half the time.
pub fn random_compact_field<R: Rng>(grid: &GridSpec, support: f64, nonnegative: bool, rng: &mut R) -> PairedField {
    let lo = if nonnegative { 0.0 } else { -1.0 };
    let bumps: Vec<(f64, f64, f64)> = (0..rng.gen_range(1..=3))
        .map(|_| {
            let width = rng.gen_range(0.2..0.5 * support);
            let centre = rng.gen_range(0.0..support - width);
            (centre, width, rng.gen_range(lo..1.0))
        })
        .collect();
    let g = if rng.gen_bool(0.5) { rng.gen_range(lo..1.0) } else { 0.0 };
    grid.sample(
        |x| {
            bumps
                .iter()
                .map(|&(c, w, a)| {
                    let s = (x - c) / w;
                    if s.abs() < 1.0 {
                        a * (1.0 - s * s).powi(3)
                    } else {
                        0.0
                    }
                })
                .sum()
        },
        g,
    )
}

/// `𝖦(t)` on a half-line grid: Toeplitz and Hankel kernel tables.
#[derive(Clone, Debug)]
pub struct SemigroupOperator {
    pub t: f64,
    pub grid: GridSpec,
    weights: Vec<f64>,
    /// `Γ_1(kh, t)`, zero past the table end.
    toeplitz: Vec<f64>,
    /// `H(kh, t) − Γ_1(kh, t)`, zero past the table end.
    hankel: Vec<f64>,
    /// Largest quadrature error estimate over the `H` table.
    pub kernel_error: f64,
    pub converged: bool,
}

/// The result of [`SemigroupOperator::apply`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Applied {
    pub field: PairedField,
    /// Bound on the mass carried past `L` by the exact flow.
    pub tail_estimate: f64,
    /// `tail_estimate > TAIL_TOLERANCE · ‖φ‖_{L¹}`: data too wide for `L`.
    pub truncation_warning: bool,
    /// Bound on the pointwise error from the `H` table.
    pub quadrature_error: f64,
    pub converged: bool,
}

impl SemigroupOperator {
    pub fn new(t: f64, grid: &GridSpec, spec: &QuadratureSpec) -> Result<Self> {
        grid.require_half_line()?;
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Domain(format!("t must be finite and > 0, got {t}")));
        }
        let h = grid.spacing;
        let reach = ((4.0 * t * TABLE_CUTOFF).sqrt() / h).ceil() as usize + 1;
        let toeplitz: Vec<f64> = (0..=reach.min(grid.cells()))
            .map(|k| gauss_kernel(1, k as f64 * h, t))
            .collect::<Result<_>>()?;
        let hankel_len = (reach + 1).min(2 * grid.cells() + 1);
        let h_table: Vec<_> = (0..hankel_len)
            .into_par_iter()
            .map(|k| {
                h_value(
                    &ReducedKernelQuery {
                        dim: 1,
                        rho: 0.0,
                        a: k as f64 * h,
                        b: 0.0,
                        t,
                    },
                    spec,
                )
            })
            .collect::<Result<_>>()?;
        let hankel = h_table
            .iter()
            .enumerate()
            .map(|(k, v)| v.value - gauss_kernel(1, k as f64 * h, t).unwrap_or(0.0))
            .collect();
        Ok(SemigroupOperator {
            t,
            grid: *grid,
            weights: grid.weights(),
            toeplitz,
            hankel,
            kernel_error: h_table.iter().fold(0.0f64, |m, v| m.max(v.quadrature_error)),
            converged: h_table.iter().all(|v| v.converged),
        })
    }

    /// `G(x_i, x_j, t)`.
    pub fn kernel(&self, i: usize, j: usize) -> f64 {
        let d = i.abs_diff(j);
        self.toeplitz.get(d).copied().unwrap_or(0.0) + self.hankel.get(i + j).copied().unwrap_or(0.0)
    }

    /// Whether the Gaussian width `√(2t)` spans at least two cells.
    pub fn resolved(&self) -> bool {
        (2.0 * self.t).sqrt() >= 2.0 * self.grid.spacing
    }

    pub fn apply(&self, phi: &PairedField) -> Result<Applied> {
        phi.check(&self.grid)?;
        let n = self.grid.len();
        let mut c: Vec<f64> = phi.interior.iter().zip(&self.weights).map(|(f, w)| f * w).collect();
        c[0] += phi.boundary[0];
        let tb = self.toeplitz.len();
        let kb = self.hankel.len();
        let interior: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let lo = i.saturating_sub(tb - 1);
                let hi = (i + tb).min(n);
                let mut s = 0.0;
                for (j, cj) in c.iter().enumerate().take(hi).skip(lo) {
                    s += cj * self.toeplitz[i.abs_diff(j)];
                }
                if i < kb {
                    for (j, cj) in c.iter().enumerate().take((kb - i).min(n)) {
                        s += cj * self.hankel[i + j];
                    }
                }
                s
            })
            .collect();
        let l = self.grid.truncation;
        let scale = 2.0 * self.t.sqrt();
        let tail_estimate: f64 = c
            .iter()
            .enumerate()
            .map(|(j, cj)| cj.abs() * erfc((l - self.grid.height(j)) / scale))
            .sum();
        let l1: f64 = c.iter().map(|v| v.abs()).sum();
        let boundary = vec![interior[0]];
        Ok(Applied {
            field: PairedField::new(interior, boundary),
            tail_estimate,
            truncation_warning: tail_estimate > TAIL_TOLERANCE * l1,
            quadrature_error: self.kernel_error * l1,
            converged: self.converged,
        })
    }
}

/// `𝖦(t)φ` on the grid.
pub fn apply(t: f64, phi: &PairedField, grid: &GridSpec, spec: &QuadratureSpec) -> Result<Applied> {
    SemigroupOperator::new(t, grid, spec)?.apply(phi)
}

/// `G(x, y, t)` on the axis: `N`-dimensional kernel with `x' = y'`.
fn axis_kernel(dim: usize, rho: f64, a: f64, b: f64, t: f64, spec: &QuadratureSpec) -> Result<f64> {
    Ok(fundamental_solution(&ReducedKernelQuery { dim, rho, a, b, t }, spec)?.value)
}

/// Both sides of the Chapman–Kolmogorov identity at one pair of points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    /// `G(x, y, t+s)`.
    pub lhs: f64,
    /// Grid quadrature of `∫ G(x,z,t) G(z,y,s) dz` plus the boundary term.
    pub rhs: f64,
    pub defect: f64,
    /// Kernel quadrature error propagated through the sum, plus the
    /// Gaussian tail past `L`.
    pub error_bound: f64,
}

pub fn compose_check(
    t: f64,
    s: f64,
    y: &HalfSpacePoint,
    x: &HalfSpacePoint,
    grid: &GridSpec,
    spec: &QuadratureSpec,
) -> Result<Composition> {
    grid.require_half_line()?;
    if !(t > 0.0 && s > 0.0) {
        return Err(Error::Domain(format!("t and s must be > 0, got t={t}, s={s}")));
    }
    if x.dim() != 1 || y.dim() != 1 {
        return Err(Error::Domain("compose_check points must be one-dimensional".into()));
    }
    let (xh, yh) = (x.height, y.height);
    let lhs = fundamental_solution(
        &ReducedKernelQuery {
            dim: 1,
            rho: 0.0,
            a: xh,
            b: yh,
            t: t + s,
        },
        spec,
    )?;
    let w = grid.weights();
    let terms: Vec<(f64, f64)> = grid
        .heights()
        .into_par_iter()
        .map(|z| {
            let g1 = fundamental_solution(
                &ReducedKernelQuery {
                    dim: 1,
                    rho: 0.0,
                    a: xh,
                    b: z,
                    t,
                },
                spec,
            )?;
            let g2 = fundamental_solution(
                &ReducedKernelQuery {
                    dim: 1,
                    rho: 0.0,
                    a: z,
                    b: yh,
                    t: s,
                },
                spec,
            )?;
            Ok((
                g1.value * g2.value,
                g1.quadrature_error * g2.value.abs() + g2.quadrature_error * g1.value.abs(),
            ))
        })
        .collect::<Result<_>>()?;
    let mut rhs = terms[0].0;
    let mut err = terms[0].1;
    for ((v, e), wj) in terms.iter().zip(&w) {
        rhs += wj * v;
        err += wj * e;
    }
    let l = grid.truncation;
    let tail = erfc((l - xh.max(yh)) / (2.0 * (t + s).sqrt()));
    Ok(Composition {
        lhs: lhs.value,
        rhs,
        defect: (lhs.value - rhs).abs(),
        error_bound: err + lhs.quadrature_error + tail,
    })
}

/// `κ = 1/q − 1/r`.
fn exponent_gap(q: f64, r: f64) -> f64 {
    1.0 / q - 1.0 / r
}

/// `t^{−Nκ/2} + t^{−(N−1)κ}`.
pub fn decay_envelope(dim: usize, q: f64, r: f64, t: f64) -> f64 {
    let k = exponent_gap(q, r);
    t.powf(-0.5 * dim as f64 * k) + t.powf(-(dim as f64 - 1.0) * k)
}

/// Committed `C₁` for `‖𝖦(t)φ‖_r ≤ C₁(t^{−Nκ/2} + t^{−(N−1)κ})‖φ‖_q`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayBaseline {
    pub dim: usize,
    pub q: f64,
    pub r: f64,
    pub constant: f64,
}

/// For `q = 1` the operator norm is `sup_y ‖G(·, y, t)‖_r`; these are the
/// suprema of that norm over the envelope from [`decay_constant_scan`].
/// For `q = r` the envelope is `2` and the constants follow from
/// `‖𝖦(t)‖ ≤ 1` (`q ∈ {1, 2}`, the latter for the product norm) and the
/// maximum principle (`q = ∞`).
pub const DECAY_BASELINES: [DecayBaseline; 5] = [
    DecayBaseline {
        dim: 1,
        q: 1.0,
        r: 2.0,
        constant: 0.4177387541054577,
    },
    DecayBaseline {
        dim: 1,
        q: 1.0,
        r: f64::INFINITY,
        constant: 0.4345163270986486,
    },
    DecayBaseline {
        dim: 1,
        q: 1.0,
        r: 1.0,
        constant: 0.5,
    },
    DecayBaseline {
        dim: 1,
        q: 2.0,
        r: 2.0,
        constant: std::f64::consts::FRAC_1_SQRT_2,
    },
    DecayBaseline {
        dim: 1,
        q: f64::INFINITY,
        r: f64::INFINITY,
        constant: 1.0,
    },
];

/// Factor by which committed `C₁` values are relaxed in checks.
pub const DECAY_SLACK: f64 = 1.1;

pub fn decay_baseline(dim: usize, q: f64, r: f64) -> Option<DecayBaseline> {
    DECAY_BASELINES
        .iter()
        .copied()
        .find(|b| b.dim == dim && b.q == q && b.r == r)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub t: f64,
    pub norm: f64,
    /// `(t^{−Nκ/2} + t^{−(N−1)κ})‖φ‖_q`.
    pub envelope: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayTable {
    pub q: f64,
    pub r: f64,
    pub rows: Vec<DecayRow>,
    pub max_ratio: f64,
    pub baseline: Option<f64>,
    /// `max_ratio ≤ baseline·DECAY_SLACK`; `None` without a baseline.
    pub passed: Option<bool>,
}

pub fn decay_suite(
    phi: &PairedField,
    q: f64,
    r: f64,
    times: &[f64],
    grid: &GridSpec,
    spec: &QuadratureSpec,
) -> Result<DecayTable> {
    check_exponent(q)?;
    check_exponent(r)?;
    if r < q {
        return Err(Error::Domain(format!("need r >= q, got q={q}, r={r}")));
    }
    phi.check(grid)?;
    let norm_q = phi.norm(grid, q);
    let rows: Vec<DecayRow> = times
        .iter()
        .map(|&t| {
            let out = apply(t, phi, grid, spec)?;
            let norm = out.field.norm(grid, r);
            let envelope = decay_envelope(grid.dim, q, r, t) * norm_q;
            Ok(DecayRow {
                t,
                norm,
                envelope,
                ratio: if envelope > 0.0 { norm / envelope } else { 0.0 },
            })
        })
        .collect::<Result<_>>()?;
    let max_ratio = rows.iter().fold(0.0f64, |m, r| m.max(r.ratio));
    let baseline = decay_baseline(grid.dim, q, r).map(|b| b.constant);
    Ok(DecayTable {
        q,
        r,
        rows,
        max_ratio,
        baseline,
        passed: baseline.map(|c| max_ratio <= c * DECAY_SLACK),
    })
}

/// `‖𝖦(t)φ‖_q / ‖φ‖_q` for one field and time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractivityRow {
    pub q: f64,
    pub t: f64,
    pub input_norm: f64,
    pub output_norm: f64,
    pub ratio: f64,
}

pub fn contractivity_rows(
    phi: &PairedField,
    qs: &[f64],
    times: &[f64],
    grid: &GridSpec,
    spec: &QuadratureSpec,
) -> Result<Vec<ContractivityRow>> {
    let mut rows = Vec::new();
    for &t in times {
        let out = apply(t, phi, grid, spec)?;
        for &q in qs {
            check_exponent(q)?;
            let input_norm = phi.norm(grid, q);
            let output_norm = out.field.norm(grid, q);
            rows.push(ContractivityRow {
                q,
                t,
                input_norm,
                output_norm,
                ratio: output_norm / input_norm,
            });
        }
    }
    Ok(rows)
}

/// Committed `C₂` per dimension in `G(x,y,t) ≥ C₂ Γ_N(x−y*, t/2)`, `t ≥ 1`,
/// from [`lower_gaussian_scan`] with seed [`LOWER_GAUSSIAN_SEED`].
pub const LOWER_GAUSSIAN_BASELINES: [f64; 3] = [0.9804898440606661, 0.4262959154949569, 0.4132329490989139];
pub const LOWER_GAUSSIAN_SEED: u64 = 7_340_033;
/// Factor by which the committed `C₂` is relaxed in checks.
pub const LOWER_GAUSSIAN_SLACK: f64 = 1.1;

/// Smallest `G / Γ_N(x−y*, t/2)` over `n` seeded queries with
/// `t ∈ [1, 1e4]` and offsets up to `10√t`, plus a lattice of offsets up
/// to `6√t` at a few fixed times including `t = 1`.
pub fn lower_gaussian_scan(
    dim: usize,
    n: usize,
    seed: u64,
    spec: &QuadratureSpec,
) -> Result<(f64, ReducedKernelQuery)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries: Vec<ReducedKernelQuery> = (0..n)
        .map(|_| {
            let t = 10f64.powf(rng.gen_range(0.0..4.0));
            let mut off = || {
                if rng.gen_bool(0.25) {
                    0.0
                } else {
                    t.sqrt() * 10f64.powf(rng.gen_range(-3.0..1.0))
                }
            };
            let (a, b, rho) = (off(), off(), off());
            ReducedKernelQuery {
                dim,
                rho: if dim == 1 { 0.0 } else { rho },
                a,
                b,
                t,
            }
        })
        .collect();
    let rhos: Vec<f64> = if dim == 1 {
        vec![0.0]
    } else {
        (0..=24).map(|k| 0.25 * k as f64).collect()
    };
    for t in [1.0f64, 2.0, 10.0, 100.0, 1e4] {
        for a in [0.0f64, 0.1, 0.5] {
            for k in 0..=100 {
                for &rho in &rhos {
                    queries.push(ReducedKernelQuery {
                        dim,
                        rho: rho * t.sqrt(),
                        a: a * t.sqrt(),
                        b: 0.05 * k as f64 * t.sqrt(),
                        t,
                    });
                }
            }
        }
    }
    let ratios: Vec<f64> = queries
        .par_iter()
        .map(|q| {
            let g = fundamental_solution(q, spec)?.value;
            let d2 = q.reflected_distance_sq();
            let gauss = gauss_kernel(dim, d2.sqrt(), 0.5 * q.t)?;
            Ok(g / gauss)
        })
        .collect::<Result<_>>()?;
    let (i, r) = ratios
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .expect("at least one query");
    Ok((*r, queries[i]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowerGaussianRow {
    pub x: f64,
    /// `[𝖦(t)φ](x)`.
    pub lhs: f64,
    /// `∫_Ω Γ_N(x−y*, t/2) φ^i dy + ∫_{∂Ω} Γ_N(x−y, t/2) φ^b dσ`.
    pub gaussian: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowerGaussianReport {
    pub t: f64,
    pub constant: f64,
    pub rows: Vec<LowerGaussianRow>,
    /// `min lhs / gaussian` over rows with a positive Gaussian side.
    pub min_ratio: f64,
    /// `lhs ≥ constant · gaussian / LOWER_GAUSSIAN_SLACK` at every point.
    pub passed: bool,
}

pub fn lower_gaussian_check(
    phi: &PairedField,
    t: f64,
    points: &[HalfSpacePoint],
    grid: &GridSpec,
    spec: &QuadratureSpec,
) -> Result<LowerGaussianReport> {
    grid.require_half_line()?;
    phi.check(grid)?;
    if !(t >= 1.0) {
        return Err(Error::Domain(format!("lower Gaussian bound holds for t >= 1, got {t}")));
    }
    if !phi.is_nonnegative() {
        return Err(Error::Domain("lower Gaussian check needs nonnegative data".into()));
    }
    let constant = LOWER_GAUSSIAN_BASELINES[0];
    let w = grid.weights();
    let ys = grid.heights();
    let g = phi.boundary[0];
    let rows: Vec<LowerGaussianRow> = points
        .iter()
        .map(|p| {
            if p.dim() != 1 {
                return Err(Error::Domain("points must be one-dimensional".into()));
            }
            let x = p.height;
            let mut lhs = 0.0;
            let mut gaussian = 0.0;
            for ((y, wj), f) in ys.iter().zip(&w).zip(&phi.interior) {
                if *f != 0.0 {
                    lhs += wj * f * axis_kernel(1, 0.0, x, *y, t, spec)?;
                    gaussian += wj * f * gauss_kernel(1, x + y, 0.5 * t)?;
                }
            }
            if g != 0.0 {
                lhs += g * axis_kernel(1, 0.0, x, 0.0, t, spec)?;
                gaussian += g * gauss_kernel(1, x, 0.5 * t)?;
            }
            Ok(LowerGaussianRow { x, lhs, gaussian })
        })
        .collect::<Result<_>>()?;
    let min_ratio = rows
        .iter()
        .filter(|r| r.gaussian > 0.0)
        .map(|r| r.lhs / r.gaussian)
        .fold(f64::INFINITY, f64::min);
    let passed = rows
        .iter()
        .all(|r| r.lhs >= constant * r.gaussian / LOWER_GAUSSIAN_SLACK);
    Ok(LowerGaussianReport {
        t,
        constant,
        rows,
        min_ratio,
        passed,
    })
}

/// Surface measure of the unit sphere in `R^{N−1}` (`2` for `N = 2`).
fn tangential_sphere(dim: usize) -> f64 {
    match dim {
        2 => 2.0,
        3 => 2.0 * PI,
        _ => unreachable!("tangential integration needs N in 2..=3"),
    }
}

/// `max_{a ≥ 0} f(a)` for a unimodal-on-the-bracket function: a coarse
/// scan on `[0, hi]` followed by golden-section refinement.
fn maximize_height<F: FnMut(f64) -> Result<f64>>(mut f: F, hi: f64) -> Result<f64> {
    const SCAN: usize = 48;
    let xs: Vec<f64> = (0..=SCAN).map(|k| hi * k as f64 / SCAN as f64).collect();
    let mut vals = Vec::with_capacity(xs.len());
    for &x in &xs {
        vals.push(f(x)?);
    }
    let (k, _) = vals
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty scan");
    let (mut lo, mut up) = (xs[k.saturating_sub(1)], xs[(k + 1).min(SCAN)]);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = up - g * (up - lo);
    let mut d = lo + g * (up - lo);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    for _ in 0..60 {
        if fc > fd {
            up = d;
            d = c;
            fd = fc;
            c = up - g * (up - lo);
            fc = f(c)?;
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (up - lo);
            fd = f(d)?;
        }
        if up - lo < 1e-10 * hi {
            break;
        }
    }
    Ok(vals[k].max(fc).max(fd))
}

/// `‖G(·, y, t)‖_{L^r(Ω)} + ‖G(·, y, t)‖_{L^r(∂Ω)}` for `y` at height `b`,
/// integrating radially about `y'` when `N ≥ 2`.
pub fn kernel_norm(dim: usize, b: f64, t: f64, r: f64, spec: &QuadratureSpec) -> Result<f64> {
    check_exponent(r)?;
    if !(1..=3).contains(&dim) {
        return Err(Error::Domain(format!("dim must be 1, 2 or 3, got {dim}")));
    }
    let sq = t.sqrt();
    if r.is_infinite() {
        let interior = maximize_height(|a| axis_kernel(dim, 0.0, a, b, t, spec), b + 12.0 * sq)?;
        let boundary = axis_kernel(dim, 0.0, 0.0, b, t, spec)?;
        return Ok(interior + boundary);
    }
    let reach = (160.0 / r).sqrt() * sq;
    let mut a_breaks = vec![0.0];
    if b > 0.0 {
        a_breaks.push(b);
    }
    a_breaks.push(b + reach);
    let powered = |v: f64| v.max(0.0).powf(r);
    let mut first_error = None;
    let mut radial = |a: f64| -> f64 {
        if dim == 1 {
            return match axis_kernel(1, 0.0, a, b, t, spec) {
                Ok(v) => powered(v),
                Err(e) => {
                    first_error.get_or_insert(e);
                    0.0
                }
            };
        }
        let inner = integrate_with_breaks(
            |rho| match axis_kernel(dim, rho, a, b, t, spec) {
                Ok(v) => powered(v) * rho.powi(dim as i32 - 2),
                Err(_) => f64::NAN,
            },
            &[0.0, reach],
            spec,
        );
        match inner {
            Ok(v) => tangential_sphere(dim) * v.value,
            Err(e) => {
                first_error.get_or_insert(e);
                0.0
            }
        }
    };
    let interior = integrate_with_breaks(&mut radial, &a_breaks, spec)?.value;
    let boundary = radial(0.0);
    if let Some(e) = first_error {
        return Err(e);
    }
    Ok(interior.powf(1.0 / r) + boundary.powf(1.0 / r))
}

/// Predicted log-log slopes of `‖𝖦(t)‖_{q→r}`: `−(N−1)(1/q−1/r)` for small
/// `t` and `−(N/2)(1/q−1/r)` for large `t`.
pub fn operator_norm_rates(dim: usize, q: f64, r: f64) -> (f64, f64) {
    let gap = 1.0 / q - 1.0 / r;
    let n = dim as f64;
    (-(n - 1.0) * gap, -0.5 * n * gap)
}

/// Log-log slopes of the operator-norm estimate on `t ≤ 1` and `t > 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorNormFit {
    pub small_t_slope: f64,
    pub large_t_slope: f64,
    /// RMS residual of the two fits in `ln`.
    pub fit_residual: f64,
    pub t_range_small: (f64, f64),
    pub t_range_large: (f64, f64),
    /// `(t, estimate of ‖𝖦(t)‖_{q→r})`.
    pub samples: Vec<(f64, f64)>,
}

/// Source heights of the near-delta probes.
pub const PROBE_HEIGHTS: [f64; 4] = [0.0, 0.25, 0.5, 0.75];
/// Preparation times `s/t` of the smoothed probes `G(·, y, s)`.
pub const PROBE_TIME_RATIOS: [f64; 6] = [1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0];

/// Lower estimate of `‖𝖦(t)‖_{q→r}`: the largest
/// `‖G(·,y,t+s)‖_r / ‖G(·,y,s)‖_q` over [`PROBE_HEIGHTS`] and
/// `s = t·`[`PROBE_TIME_RATIOS`]; for `q = 1` the unsmoothed delta (`s = 0`, unit norm)
/// is included.
pub fn operator_norm_estimate(dim: usize, q: f64, r: f64, t: f64, spec: &QuadratureSpec) -> Result<f64> {
    check_exponent(q)?;
    check_exponent(r)?;
    let mut cases: Vec<(f64, f64)> = Vec::new();
    for &y in &PROBE_HEIGHTS {
        if q == 1.0 {
            cases.push((y, 0.0));
        }
        for &k in &PROBE_TIME_RATIOS {
            cases.push((y, k * t));
        }
    }
    let ratios: Vec<f64> = cases
        .par_iter()
        .map(|&(y, s)| {
            let top = kernel_norm(dim, y, t + s, r, spec)?;
            let bottom = if s == 0.0 {
                1.0
            } else {
                kernel_norm(dim, y, s, q, spec)?
            };
            Ok(top / bottom)
        })
        .collect::<Result<_>>()?;
    Ok(ratios.into_iter().fold(0.0, f64::max))
}

fn fit_line(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let ss: f64 = points.iter().map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2)).sum();
    (slope, ss)
}

pub fn operator_norm_fit(dim: usize, q: f64, r: f64, times: &[f64], spec: &QuadratureSpec) -> Result<OperatorNormFit> {
    if r < q {
        return Err(Error::Domain(format!("need q <= r, got q={q}, r={r}")));
    }
    let small: Vec<f64> = times.iter().copied().filter(|&t| t > 0.0 && t <= 1.0).collect();
    let large: Vec<f64> = times.iter().copied().filter(|&t| t > 1.0).collect();
    for (name, set) in [("t <= 1", &small), ("t > 1", &large)] {
        if set.len() < 4 {
            return Err(Error::IllConditionedFit(format!(
                "{} usable times in regime {name}, need at least 4",
                set.len()
            )));
        }
    }
    let samples: Vec<(f64, f64)> = times
        .iter()
        .filter(|&&t| t > 0.0)
        .map(|&t| Ok((t, operator_norm_estimate(dim, q, r, t, spec)?)))
        .collect::<Result<_>>()?;
    let logs = |keep: &dyn Fn(f64) -> bool| -> Vec<(f64, f64)> {
        samples
            .iter()
            .filter(|p| keep(p.0))
            .map(|p| (p.0.ln(), p.1.ln()))
            .collect()
    };
    let (s_small, ss_small) = fit_line(&logs(&|t| t <= 1.0));
    let (s_large, ss_large) = fit_line(&logs(&|t| t > 1.0));
    let range = |v: &[f64]| {
        (
            v.iter().copied().fold(f64::INFINITY, f64::min),
            v.iter().copied().fold(0.0, f64::max),
        )
    };
    let residual = ((ss_small + ss_large) / samples.len() as f64).sqrt();
    if !(s_small.is_finite() && s_large.is_finite()) {
        return Err(Error::IllConditionedFit("non-finite slope".into()));
    }
    Ok(OperatorNormFit {
        small_t_slope: s_small,
        large_t_slope: s_large,
        fit_residual: residual,
        t_range_small: range(&small),
        t_range_large: range(&large),
        samples,
    })
}

/// Largest `‖G(·,y,t)‖_r / (t^{−Nκ/2} + t^{−(N−1)κ})` over source heights
/// `{0} ∪ [1e−3, 1e2]` and `t ∈ [1e−3, 1e4]` (geometric grids).
pub fn decay_constant_scan(dim: usize, r: f64, spec: &QuadratureSpec) -> Result<f64> {
    let heights: Vec<f64> = std::iter::once(0.0)
        .chain((0..=20).map(|k| 10f64.powf(-3.0 + 0.25 * k as f64)))
        .collect();
    let times: Vec<f64> = (0..=28).map(|k| 10f64.powf(-3.0 + 0.25 * k as f64)).collect();
    let cases: Vec<(f64, f64)> = heights
        .iter()
        .flat_map(|&y| times.iter().map(move |&t| (y, t)))
        .collect();
    let ratios: Vec<f64> = cases
        .par_iter()
        .map(|&(y, t)| Ok(kernel_norm(dim, y, t, r, spec)? / decay_envelope(dim, 1.0, r, t)))
        .collect::<Result<_>>()?;
    Ok(ratios.into_iter().fold(0.0, f64::max))
}
