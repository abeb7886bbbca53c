//! The semilinear problem `∂_t u = Δu + u^p` with the dynamical boundary
//! condition, in mild (Duhamel) form, on the half-line grid.
//!
//! Steps are exponential Euler, `u⁺ = 𝖦(Δt)(u + Δt·(u^p, 0))`: the source
//! acts on the interior only. Blow-up is signalled by a sup-norm threshold
//! and corroborated by the annulus-eigenfunction certificate: with
//! `Z_n = ∫_{E_n} u ψ_n`, `Z_n^{p−1} > 2μn^{−2}` forces finite-time blow-up.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::QuadratureSpec;
use crate::semigroup::{truncation_for, GridSpec, PairedField, SemigroupOperator};

/// The step size is at most `REACTION_CAP / ‖u‖_∞^{p−1}`.
pub const REACTION_CAP: f64 = 0.1;

/// Relative rise of `(1+t)^{N/2}‖u‖_∞` over the last tenth of the run
/// that marks a run as still growing.
pub const GROWTH_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemilinearConfig {
    pub p: f64,
    /// Base step.
    pub dt: f64,
    pub t_max: f64,
    pub blowup_threshold: f64,
    pub grid: GridSpec,
    pub spec: QuadratureSpec,
    /// Steps grow to `dt_growth · t` once that exceeds `dt`; `0` keeps `dt`.
    pub dt_growth: f64,
    /// Annulus indices watched by the certificate.
    pub certificate_ns: Vec<u32>,
}

impl SemilinearConfig {
    /// Defaults: `dt = 0.05`, growth `0.05`, threshold `1e6`, every `n`
    /// with `E_n` inside the grid.
    pub fn new(p: f64, t_max: f64, grid: GridSpec) -> Self {
        let n_max = (grid.truncation / 5.0).floor() as u32;
        SemilinearConfig {
            p,
            dt: 0.05,
            t_max,
            blowup_threshold: 1e6,
            grid,
            spec: QuadratureSpec::default(),
            dt_growth: 0.05,
            certificate_ns: (1..=n_max).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.spec.validate()?;
        if !(self.p > 1.0 && self.p.is_finite()) {
            return Err(Error::Domain(format!("p must be > 1, got {}", self.p)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Domain(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(Error::Domain(format!("t_max must be > 0, got {}", self.t_max)));
        }
        if !(self.dt_growth >= 0.0) {
            return Err(Error::Domain(format!("dt_growth must be >= 0, got {}", self.dt_growth)));
        }
        Ok(())
    }

    /// Smallest step for which the heat kernel spans a grid cell.
    pub fn min_step(&self) -> f64 {
        0.5 * self.grid.spacing * self.grid.spacing
    }
}

/// `u ↦ (max(u, 0)^p, 0)` on the interior.
fn source(u: &PairedField, p: f64) -> PairedField {
    PairedField::new(u.interior.iter().map(|v| v.max(0.0).powf(p)).collect(), vec![0.0])
}

fn exp_euler(op: &SemigroupOperator, u: &PairedField, p: f64, dt: f64, nonlinear: bool) -> Result<PairedField> {
    let frozen = if nonlinear {
        u.axpy(dt, &source(u, p))
    } else {
        u.clone()
    };
    Ok(op.apply(&frozen)?.field)
}

/// One exponential-Euler step of size `cfg.dt`.
pub fn step(u: &PairedField, cfg: &SemilinearConfig) -> Result<PairedField> {
    cfg.validate()?;
    u.check(&cfg.grid)?;
    if !u.is_nonnegative() {
        return Err(Error::Domain("step needs nonnegative data".into()));
    }
    let op = SemigroupOperator::new(cfg.dt, &cfg.grid, &cfg.spec)?;
    exp_euler(&op, u, cfg.p, cfg.dt, true)
}

/// `μ` and the normalized first Dirichlet eigenfunction of `E = {1 < |x| < 2}`,
/// rescaled to `E_n = 3n e_N + nE`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnulusEigenpair {
    pub dim: usize,
    pub n: u32,
    pub mu: f64,
    /// `n^{−2} μ`.
    pub mu_scaled: f64,
    /// Radii in `[1, 2]` where the unit-annulus profile is tabulated.
    pub radii: Vec<f64>,
    /// `ψ(r)` with `‖ψ‖_{L¹(E)} = 1`.
    pub profile: Vec<f64>,
}

impl AnnulusEigenpair {
    /// `ψ_n` at distance `r` from the centre `3n e_N`:
    /// `n^{−N} ψ(r/n)`, zero off the annulus.
    pub fn psi_n(&self, r: f64) -> f64 {
        let n = self.n as f64;
        let s = r / n;
        if !(s > 1.0 && s < 2.0) {
            return 0.0;
        }
        let k = self.radii.len() - 1;
        let pos = (s - 1.0) * k as f64;
        let i = (pos.floor() as usize).min(k - 1);
        let f = pos - i as f64;
        n.powi(-(self.dim as i32)) * (self.profile[i] * (1.0 - f) + self.profile[i + 1] * f)
    }
}

const PROFILE_POINTS: usize = 2000;

fn radial_rhs(dim: usize, mu: f64, r: f64, y: [f64; 2]) -> [f64; 2] {
    [y[1], -(dim as f64 - 1.0) / r * y[1] - mu * y[0]]
}

/// RK4 on `ψ'' + (N−1)/r ψ' + μψ = 0`, `ψ(1) = 0`, `ψ'(1) = 1`.
fn shoot(dim: usize, mu: f64, steps: usize) -> Vec<f64> {
    let h = 1.0 / steps as f64;
    let mut y = [0.0, 1.0];
    let mut out = Vec::with_capacity(steps + 1);
    out.push(0.0);
    for k in 0..steps {
        let r = 1.0 + k as f64 * h;
        let k1 = radial_rhs(dim, mu, r, y);
        let k2 = radial_rhs(dim, mu, r + 0.5 * h, [y[0] + 0.5 * h * k1[0], y[1] + 0.5 * h * k1[1]]);
        let k3 = radial_rhs(dim, mu, r + 0.5 * h, [y[0] + 0.5 * h * k2[0], y[1] + 0.5 * h * k2[1]]);
        let k4 = radial_rhs(dim, mu, r + h, [y[0] + h * k3[0], y[1] + h * k3[1]]);
        for i in 0..2 {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out.push(y[0]);
    }
    out
}

/// First Dirichlet eigenvalue of the radial problem on `1 < r < 2`.
fn shoot_first_eigenvalue(dim: usize) -> Result<f64> {
    let steps = 4 * PROFILE_POINTS;
    let end = |mu: f64| *shoot(dim, mu, steps).last().expect("non-empty");
    let (mut lo, mut hi) = (0.0, 1.0);
    while end(hi) > 0.0 {
        lo = hi;
        hi += 1.0;
        if hi > 100.0 {
            return Err(Error::Shooting(format!(
                "no sign change of ψ(2; μ) for μ in [0, 100] (dim {dim}), last ψ(2) = {:e}",
                end(hi)
            )));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if end(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 * hi {
            return Ok(0.5 * (lo + hi));
        }
    }
    Err(Error::Shooting(format!(
        "bisection stalled in [{lo}, {hi}] (dim {dim})"
    )))
}

fn sphere_area(dim: usize) -> f64 {
    match dim {
        1 => 1.0,
        2 => 2.0 * std::f64::consts::PI,
        3 => 4.0 * std::f64::consts::PI,
        _ => unreachable!("dimension checked by caller"),
    }
}

pub fn annulus_eigenpair(n: u32, dim: usize) -> Result<AnnulusEigenpair> {
    if !(1..=3).contains(&dim) {
        return Err(Error::Domain(format!("dim must be 1, 2 or 3, got {dim}")));
    }
    if n == 0 {
        return Err(Error::Domain("annulus index n must be >= 1".into()));
    }
    let pi = std::f64::consts::PI;
    let radii: Vec<f64> = (0..=PROFILE_POINTS)
        .map(|k| 1.0 + k as f64 / PROFILE_POINTS as f64)
        .collect();
    let (mu, raw) = if dim == 1 {
        (
            pi * pi,
            radii.iter().map(|r| (pi * (r - 1.0)).sin()).collect::<Vec<_>>(),
        )
    } else {
        let mu = shoot_first_eigenvalue(dim)?;
        let fine = shoot(dim, mu, 4 * PROFILE_POINTS);
        (mu, fine.iter().step_by(4).map(|v| v.max(0.0)).collect())
    };
    let h = 1.0 / PROFILE_POINTS as f64;
    let weight = |k: usize| if k == 0 || k == PROFILE_POINTS { 0.5 * h } else { h };
    let mass: f64 = sphere_area(dim)
        * raw
            .iter()
            .zip(&radii)
            .enumerate()
            .map(|(k, (v, r))| weight(k) * v * r.powi(dim as i32 - 1))
            .sum::<f64>();
    let nf = n as f64;
    Ok(AnnulusEigenpair {
        dim,
        n,
        mu,
        mu_scaled: mu / (nf * nf),
        radii,
        profile: raw.iter().map(|v| v / mass).collect(),
    })
}

/// `ψ_n` at the grid nodes of the half-line: on `E_n = (4n, 5n)`, normalized
/// so its grid quadrature is exactly `1`.
fn psi_weights(n: u32, grid: &GridSpec) -> Result<Vec<(usize, f64)>> {
    if grid.dim != 1 {
        return Err(Error::Unsupported(
            "the certificate functional is implemented for N = 1".into(),
        ));
    }
    let nf = n as f64;
    if 5.0 * nf > grid.truncation {
        return Err(Error::Domain(format!(
            "E_{n} = ({}, {}) leaves the grid; increase L to at least {}",
            4.0 * nf,
            5.0 * nf,
            5.0 * nf
        )));
    }
    let h = grid.spacing;
    let w = grid.weights();
    let pi = std::f64::consts::PI;
    let lo = (4.0 * nf / h).ceil() as usize;
    let hi = ((5.0 * nf / h).floor() as usize).min(grid.cells());
    let raw: Vec<(usize, f64)> = (lo..=hi)
        .map(|j| (j, w[j] * (pi * (grid.height(j) - 4.0 * nf) / nf).sin().max(0.0)))
        .filter(|(_, v)| *v > 0.0)
        .collect();
    let total: f64 = raw.iter().map(|(_, v)| v).sum();
    Ok(raw.into_iter().map(|(j, v)| (j, v / total)).collect())
}

/// `Z_n = ∫_{E_n} u ψ_n` by grid quadrature.
pub fn z_functional(u: &PairedField, n: u32, grid: &GridSpec) -> Result<f64> {
    u.check(grid)?;
    Ok(psi_weights(n, grid)?.iter().map(|(j, w)| w * u.interior[*j]).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlowupCertificate {
    pub n: u32,
    pub mu: f64,
    /// `Z_n` when the certificate fired.
    #[serde(rename = "Z0")]
    pub z0: f64,
    /// `(2μn^{−2})^{1/(p−1)}`: `Z_n` must exceed this.
    pub threshold: f64,
    pub fired_at: f64,
}

/// Precomputed `ψ_n` weights for the certificate indices.
struct Certifier {
    mu: f64,
    p: f64,
    weights: Vec<(u32, Vec<(usize, f64)>)>,
}

impl Certifier {
    fn new(cfg: &SemilinearConfig) -> Result<Self> {
        let weights = cfg
            .certificate_ns
            .iter()
            .map(|&n| Ok((n, psi_weights(n, &cfg.grid)?)))
            .collect::<Result<_>>()?;
        Ok(Certifier {
            mu: std::f64::consts::PI * std::f64::consts::PI,
            p: cfg.p,
            weights,
        })
    }

    fn threshold(&self, n: u32) -> f64 {
        (2.0 * self.mu / (n as f64 * n as f64)).powf(1.0 / (self.p - 1.0))
    }

    fn z(&self, u: &PairedField, n: u32) -> f64 {
        self.weights
            .iter()
            .find(|(m, _)| *m == n)
            .map(|(_, w)| w.iter().map(|(j, c)| c * u.interior[*j]).sum())
            .unwrap_or(0.0)
    }

    fn check(&self, u: &PairedField, t: f64) -> Option<BlowupCertificate> {
        self.weights.iter().find_map(|(n, w)| {
            let z: f64 = w.iter().map(|(j, c)| c * u.interior[*j]).sum();
            let threshold = self.threshold(*n);
            (z > threshold).then_some(BlowupCertificate {
                n: *n,
                mu: self.mu,
                z0: z,
                threshold,
                fired_at: t,
            })
        })
    }
}

/// The smallest `n` in `cfg.certificate_ns` with `Z_n^{p−1} > 2μn^{−2}`.
pub fn certificate_check(u: &PairedField, t: f64, cfg: &SemilinearConfig) -> Result<Option<BlowupCertificate>> {
    u.check(&cfg.grid)?;
    Ok(Certifier::new(cfg)?.check(u, t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    GlobalToTmax,
    BlowupDetected,
    CertificateFired,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionTrace {
    pub times: Vec<f64>,
    pub sup_norms: Vec<f64>,
    pub l1_norms: Vec<f64>,
    /// `(1+t)^{N/2}‖u(t)‖_∞`.
    pub weighted_sup: Vec<f64>,
    /// Running `sup_s (1+s)^{N/2}‖u(s)‖_∞ + sup_s ‖u(s)‖_{L¹}`.
    pub x_norm: Vec<f64>,
    pub certificates: Vec<BlowupCertificate>,
    /// `Z_n` for the fired index at every step after firing.
    pub certificate_z: Vec<(f64, f64)>,
    pub outcome: Outcome,
    /// The run reached `t_max` with `(1+t)^{N/2}‖u‖_∞` still rising.
    pub still_growing: bool,
    #[serde(skip)]
    pub final_state: Option<PairedField>,
}

impl EvolutionTrace {
    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trace has the initial time")
    }

    pub fn blowup_time(&self) -> Option<f64> {
        (self.outcome == Outcome::BlowupDetected).then(|| self.final_time())
    }
}

/// Runs [`evolve`] keeping the per-step operators; `nonlinear = false` gives
/// the linear flow `𝖦(t)φ` on the same time grid.
struct Evolver<'a> {
    cfg: &'a SemilinearConfig,
    cache: HashMap<u64, SemigroupOperator>,
}

impl<'a> Evolver<'a> {
    fn operator(&mut self, dt: f64) -> Result<&SemigroupOperator> {
        let key = dt.to_bits();
        if !self.cache.contains_key(&key) {
            let op = SemigroupOperator::new(dt, &self.cfg.grid, &self.cfg.spec)?;
            self.cache.insert(key, op);
        }
        Ok(&self.cache[&key])
    }

    /// Schedule `min(max(dt, g·t), cap/‖u‖^{p−1})`, rounded down to
    /// `dt·2^{k/4}`, floored at the resolvable step, clipped to `t_max`.
    fn next_dt(&self, t: f64, sup: f64, nonlinear: bool) -> f64 {
        let c = self.cfg;
        let mut dt = c.dt.max(c.dt_growth * t);
        if nonlinear && sup > 0.0 {
            dt = dt.min(REACTION_CAP / sup.powf(c.p - 1.0));
        }
        let k = (4.0 * (dt / c.dt).log2()).floor();
        dt = c.dt * (k / 4.0).exp2();
        dt = dt.max(c.min_step());
        let remaining = c.t_max - t;
        if dt >= remaining * (1.0 - 1e-12) {
            remaining
        } else {
            dt
        }
    }

    fn run<F: FnMut(f64, &PairedField)>(
        &mut self,
        phi: &PairedField,
        nonlinear: bool,
        mut observe: F,
    ) -> Result<EvolutionTrace> {
        let cfg = self.cfg;
        let grid = &cfg.grid;
        let half_n = 0.5 * grid.dim as f64;
        let certifier = Certifier::new(cfg)?;
        let mut u = phi.clone();
        let mut t = 0.0f64;
        let mut trace = EvolutionTrace {
            times: Vec::new(),
            sup_norms: Vec::new(),
            l1_norms: Vec::new(),
            weighted_sup: Vec::new(),
            x_norm: Vec::new(),
            certificates: Vec::new(),
            certificate_z: Vec::new(),
            outcome: Outcome::GlobalToTmax,
            still_growing: false,
            final_state: None,
        };
        let (mut best_w, mut best_l1) = (0.0f64, 0.0f64);
        loop {
            let sup = u.sup();
            let l1 = u.norm(grid, 1.0);
            let w = (1.0 + t).powf(half_n) * sup;
            best_w = best_w.max(w);
            best_l1 = best_l1.max(l1);
            trace.times.push(t);
            trace.sup_norms.push(sup);
            trace.l1_norms.push(l1);
            trace.weighted_sup.push(w);
            trace.x_norm.push(best_w + best_l1);
            observe(t, &u);
            if nonlinear {
                if let Some(first) = trace.certificates.first() {
                    trace.certificate_z.push((t, certifier.z(&u, first.n)));
                } else if let Some(c) = certifier.check(&u, t) {
                    trace.certificates.push(c);
                    trace.certificate_z.push((t, c.z0));
                }
            }
            if sup > cfg.blowup_threshold {
                trace.outcome = Outcome::BlowupDetected;
                break;
            }
            if t >= cfg.t_max {
                trace.outcome = if trace.certificates.is_empty() {
                    Outcome::GlobalToTmax
                } else {
                    Outcome::CertificateFired
                };
                trace.still_growing = still_growing(&trace);
                break;
            }
            let dt = self.next_dt(t, sup, nonlinear);
            let op = self.operator(dt)?;
            let next = exp_euler(op, &u, cfg.p, dt, nonlinear)?;
            if let Some(index) = next.interior.iter().chain(&next.boundary).position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteField { index });
            }
            u = next;
            t = if dt == cfg.t_max - t { cfg.t_max } else { t + dt };
        }
        trace.final_state = Some(u);
        Ok(trace)
    }
}

fn still_growing(trace: &EvolutionTrace) -> bool {
    let t_end = trace.final_time();
    let w_end = *trace.weighted_sup.last().expect("non-empty");
    let k = trace
        .times
        .iter()
        .position(|&t| t >= 0.9 * t_end)
        .expect("final time qualifies");
    w_end > trace.weighted_sup[k] * (1.0 + GROWTH_TOLERANCE)
}

fn check_initial(phi: &PairedField, cfg: &SemilinearConfig) -> Result<()> {
    cfg.validate()?;
    phi.check(&cfg.grid)?;
    if !phi.is_nonnegative() {
        return Err(Error::Domain("initial data must be nonnegative".into()));
    }
    if phi.sup() >= cfg.blowup_threshold {
        return Err(Error::Domain(
            "blow-up threshold must exceed the initial sup-norm".into(),
        ));
    }
    Ok(())
}

pub fn evolve(phi: &PairedField, cfg: &SemilinearConfig) -> Result<EvolutionTrace> {
    evolve_with(phi, cfg, |_, _| {})
}

/// [`evolve`], calling `observe(t, u)` at every recorded time.
pub fn evolve_with<F: FnMut(f64, &PairedField)>(
    phi: &PairedField,
    cfg: &SemilinearConfig,
    observe: F,
) -> Result<EvolutionTrace> {
    check_initial(phi, cfg)?;
    Evolver {
        cfg,
        cache: HashMap::new(),
    }
    .run(phi, true, observe)
}

/// `𝖦(t)φ` on the time grid `evolve` would use for zero nonlinearity.
pub fn linear_flow(phi: &PairedField, cfg: &SemilinearConfig) -> Result<EvolutionTrace> {
    check_initial(phi, cfg)?;
    Evolver {
        cfg,
        cache: HashMap::new(),
    }
    .run(phi, false, |_, _| {})
}

/// `p_F = 1 + 2/N`.
pub fn fujita_exponent(dim: usize) -> f64 {
    1.0 + 2.0 / dim as f64
}

/// Initial data `c·(1 − s²)³₊`, `s = (x − centre)/half_width`, with no
/// boundary part, scaled so `‖φ‖_{L¹×L¹} + ‖φ‖_{L∞×L∞} = δ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BumpProfile {
    pub centre: f64,
    pub half_width: f64,
}

impl BumpProfile {
    pub fn shape(&self, grid: &GridSpec) -> PairedField {
        grid.sample(
            |x| {
                let s = (x - self.centre) / self.half_width;
                if s.abs() < 1.0 {
                    (1.0 - s * s).powi(3)
                } else {
                    0.0
                }
            },
            0.0,
        )
    }

    pub fn with_size(&self, grid: &GridSpec, delta: f64) -> PairedField {
        let f = self.shape(grid);
        let size = f.norm(grid, 1.0) + f.norm(grid, f64::INFINITY);
        f.scaled(delta / size)
    }

    pub fn with_mass(&self, grid: &GridSpec, mass: f64) -> PairedField {
        let f = self.shape(grid);
        let m = f.mass(grid);
        f.scaled(mass / m)
    }

    pub fn support_end(&self) -> f64 {
        self.centre + self.half_width
    }
}

/// Parameters shared by every cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FujitaTemplate {
    pub dim: usize,
    pub t_max: f64,
    /// `t_max` multiplier for `p = p_F`.
    pub critical_budget: f64,
    /// Coarsest spacing of the refinement ladder.
    pub spacing: f64,
    /// Ladder levels `h, h/2, …`.
    pub ladder: usize,
    pub profile: BumpProfile,
    pub blowup_threshold: f64,
    pub dt: f64,
    pub dt_growth: f64,
    pub spec: QuadratureSpec,
    /// `C*` of the ball `‖u‖_X ≤ 4C*δ`.
    pub c_star: f64,
    /// Extra halvings of `δ` that must also pass the ball test.
    pub calibration_halvings: usize,
}

/// `C* = ‖𝖦(·)φ‖_X / δ` for the canonical profile on its base grid, from
/// [`calibrate_c_star`].
pub const C_STAR: f64 = 1.0008141183492492;

impl FujitaTemplate {
    pub fn canonical() -> Self {
        FujitaTemplate {
            dim: 1,
            t_max: 1e3,
            critical_budget: 10.0,
            spacing: 0.2,
            ladder: 3,
            profile: BumpProfile {
                centre: 0.0,
                half_width: 1.0,
            },
            blowup_threshold: 1e6,
            dt: 0.05,
            dt_growth: 0.05,
            spec: QuadratureSpec::default(),
            c_star: C_STAR,
            calibration_halvings: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 1 {
            return Err(Error::Unsupported(format!(
                "the Fujita sweep runs on the half-line, got N = {}",
                self.dim
            )));
        }
        if self.ladder == 0 || !(self.critical_budget >= 1.0) || !(self.c_star > 0.0) {
            return Err(Error::Domain(
                "ladder >= 1, critical_budget >= 1 and c_star > 0 required".into(),
            ));
        }
        Ok(())
    }

    fn cell_t_max(&self, p: f64) -> f64 {
        if is_critical(p, self.dim) {
            self.t_max * self.critical_budget
        } else {
            self.t_max
        }
    }

    /// Grid with the tail-rule truncation for `t_max` and spacing `h/2^level`.
    pub fn grid(&self, t_max: f64, level: usize) -> Result<GridSpec> {
        let l = truncation_for(self.dim, self.profile.support_end(), t_max);
        GridSpec::new(self.dim, l, self.spacing / (1u32 << level) as f64)
    }

    pub fn config(&self, p: f64, t_max: f64, level: usize) -> Result<SemilinearConfig> {
        let grid = self.grid(t_max, level)?;
        Ok(SemilinearConfig {
            dt: self.dt,
            dt_growth: self.dt_growth,
            blowup_threshold: self.blowup_threshold,
            spec: self.spec,
            ..SemilinearConfig::new(p, t_max, grid)
        })
    }
}

fn is_critical(p: f64, dim: usize) -> bool {
    (p - fujita_exponent(dim)).abs() < 1e-12
}

/// `‖𝖦(·)φ‖_X / δ` for the template profile on the base grid up to `t_max`.
pub fn calibrate_c_star(template: &FujitaTemplate) -> Result<f64> {
    template.validate()?;
    let cfg = template.config(2.0, template.t_max, 0)?;
    let phi = template.profile.with_size(&cfg.grid, 1.0);
    let trace = linear_flow(&phi, &cfg)?;
    Ok(*trace.x_norm.last().expect("non-empty"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Blowup,
    Global,
    Inconclusive,
}

fn classify_trace(trace: &EvolutionTrace) -> Classification {
    match trace.outcome {
        Outcome::BlowupDetected | Outcome::CertificateFired => Classification::Blowup,
        Outcome::GlobalToTmax if trace.still_growing => Classification::Inconclusive,
        Outcome::GlobalToTmax => Classification::Global,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderRun {
    pub spacing: f64,
    pub truncation: f64,
    pub classification: Classification,
    pub outcome: Outcome,
    pub t_end: f64,
    pub certificate: Option<BlowupCertificate>,
    /// `‖u‖_X / (C* δ)`.
    pub ball_ratio: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FujitaCell {
    pub p: f64,
    pub delta: f64,
    pub t_max: f64,
    pub critical: bool,
    pub classification: Classification,
    /// Blow-up time on the base grid.
    pub t_event: Option<f64>,
    pub certificate_n: Option<u32>,
    pub ladder: Vec<LadderRun>,
    pub ladder_invariant: bool,
    /// For `p > p_F`: `δ/2^k` for the smallest `k` after which the ball
    /// test passed for `1 + calibration_halvings` consecutive halvings.
    pub calibrated_delta: Option<f64>,
    /// `‖u‖_X ≤ 4C*δ` on the base grid.
    pub ball_test: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DichotomyTable {
    pub dim: usize,
    pub p_fujita: f64,
    pub c_star: f64,
    pub cells: Vec<FujitaCell>,
    /// Every `p ≤ p_F` cell blows up with a fired certificate and every
    /// `p > p_F` cell is global inside the ball, invariantly across the ladder.
    pub pattern_holds: bool,
    /// `(p, δ)` of cells that are inconclusive or not ladder-invariant.
    pub inconclusive: Vec<(f64, f64)>,
}

fn run_cell_level(
    template: &FujitaTemplate,
    p: f64,
    delta: f64,
    t_max: f64,
    level: usize,
    keep_trace: &mut Option<EvolutionTrace>,
) -> Result<LadderRun> {
    let cfg = template.config(p, t_max, level)?;
    let phi = template.profile.with_size(&cfg.grid, delta);
    let trace = evolve(&phi, &cfg)?;
    let run = LadderRun {
        spacing: cfg.grid.spacing,
        truncation: cfg.grid.truncation,
        classification: classify_trace(&trace),
        outcome: trace.outcome,
        t_end: trace.final_time(),
        certificate: trace.certificates.first().copied(),
        ball_ratio: trace.x_norm.last().expect("non-empty") / (template.c_star * delta),
        steps: trace.times.len() - 1,
    };
    if level == 0 {
        *keep_trace = Some(trace);
    }
    Ok(run)
}

/// One cell of the sweep: the ladder at `δ`, plus the δ calibration for
/// `p > p_F`. Returns the base-grid trace alongside.
pub fn fujita_cell(template: &FujitaTemplate, p: f64, delta: f64) -> Result<(FujitaCell, EvolutionTrace)> {
    template.validate()?;
    if !(p > 1.0) || !(delta > 0.0) {
        return Err(Error::Domain(format!("need p > 1 and δ > 0, got p={p}, δ={delta}")));
    }
    let t_max = template.cell_t_max(p);
    let mut base = None;
    let ladder: Vec<LadderRun> = (0..template.ladder)
        .map(|level| run_cell_level(template, p, delta, t_max, level, &mut base))
        .collect::<Result<_>>()?;
    let base = base.expect("level 0 runs first");
    let first = ladder[0].classification;
    let ladder_invariant = ladder.iter().all(|r| r.classification == first);
    let classification = if ladder_invariant {
        first
    } else {
        Classification::Inconclusive
    };
    let ball_test = ladder[0].ball_ratio <= 4.0;
    let supercritical = p > fujita_exponent(template.dim) && !is_critical(p, template.dim);
    let calibrated_delta = if supercritical {
        let mut passes = if ball_test && first == Classification::Global {
            1
        } else {
            0
        };
        let mut start = if passes == 1 { Some(delta) } else { None };
        let mut d = delta;
        let mut found = None;
        for _ in 0..(template.calibration_halvings + 12) {
            if passes > template.calibration_halvings {
                found = start;
                break;
            }
            d *= 0.5;
            let mut unused = None;
            let run = run_cell_level(template, p, d, t_max, 0, &mut unused)?;
            if run.ball_ratio <= 4.0 && run.classification == Classification::Global {
                if passes == 0 {
                    start = Some(d);
                }
                passes += 1;
            } else {
                passes = 0;
                start = None;
            }
        }
        found.or(if passes > template.calibration_halvings {
            start
        } else {
            None
        })
    } else {
        None
    };
    Ok((
        FujitaCell {
            p,
            delta,
            t_max,
            critical: is_critical(p, template.dim),
            classification,
            t_event: base.blowup_time(),
            certificate_n: base.certificates.first().map(|c| c.n),
            ladder,
            ladder_invariant,
            calibrated_delta,
            ball_test,
        },
        base,
    ))
}

/// The dichotomy table over `p_values × delta_values`; base-grid traces are
/// returned in the same order as the cells.
pub fn fujita_sweep(
    p_values: &[f64],
    delta_values: &[f64],
    template: &FujitaTemplate,
) -> Result<(DichotomyTable, Vec<EvolutionTrace>)> {
    template.validate()?;
    if p_values.is_empty() || delta_values.is_empty() {
        return Err(Error::Domain("p and δ lists must be non-empty".into()));
    }
    let pf = fujita_exponent(template.dim);
    let p_lo = p_values.iter().copied().fold(f64::INFINITY, f64::min);
    let p_hi = p_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(p_lo <= pf + 1e-12 && p_hi > pf + 1e-12) {
        return Err(Error::Domain(format!(
            "p values must straddle p_F = {pf}: need some p <= p_F and some p > p_F"
        )));
    }
    let cells: Vec<(f64, f64)> = p_values
        .iter()
        .flat_map(|&p| delta_values.iter().map(move |&d| (p, d)))
        .collect();
    let results: Vec<(FujitaCell, EvolutionTrace)> = cells
        .par_iter()
        .map(|&(p, d)| fujita_cell(template, p, d))
        .collect::<Result<_>>()?;
    let (cells, traces): (Vec<FujitaCell>, Vec<EvolutionTrace>) = results.into_iter().unzip();
    let pattern_holds = cells.iter().all(|c| {
        if c.p <= pf + 1e-12 {
            c.classification == Classification::Blowup && c.certificate_n.is_some()
        } else {
            c.classification == Classification::Global && c.ball_test
        }
    });
    let inconclusive = cells
        .iter()
        .filter(|c| c.classification == Classification::Inconclusive)
        .map(|c| (c.p, c.delta))
        .collect();
    Ok((
        DichotomyTable {
            dim: template.dim,
            p_fujita: pf,
            c_star: template.c_star,
            cells,
            pattern_holds,
            inconclusive,
        },
        traces,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> GridSpec {
        GridSpec::new(1, 30.0, 0.05).unwrap()
    }

    fn profile() -> BumpProfile {
        BumpProfile {
            centre: 4.5,
            half_width: 2.0,
        }
    }

    /// Smallest eigenvalue of `−(r^{N−1}ψ')' = μ r^{N−1} ψ` on `(1, 2)` by
    /// second-order finite differences and Sturm-sequence bisection.
    fn fd_first_eigenvalue(dim: usize, points: usize) -> f64 {
        let h = 1.0 / (points + 1) as f64;
        let m = |r: f64| r.powi(dim as i32 - 1);
        let r = |i: usize| 1.0 + (i + 1) as f64 * h;
        let diag: Vec<f64> = (0..points)
            .map(|i| (m(r(i) + 0.5 * h) + m(r(i) - 0.5 * h)) / (h * h * m(r(i))))
            .collect();
        let off: Vec<f64> = (0..points - 1)
            .map(|i| m(r(i) + 0.5 * h) / (h * h * (m(r(i)) * m(r(i + 1))).sqrt()))
            .collect();
        let below = |x: f64| {
            let mut count = 0;
            let mut d = 1.0f64;
            for i in 0..points {
                let o = if i == 0 { 0.0 } else { off[i - 1] * off[i - 1] };
                d = diag[i] - x - if i == 0 { 0.0 } else { o / d };
                if d == 0.0 {
                    d = 1e-300;
                }
                if d < 0.0 {
                    count += 1;
                }
            }
            count
        };
        let (mut lo, mut hi) = (0.0, 100.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if below(mid) >= 1 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn eigenvalues() {
        let pi2 = std::f64::consts::PI.powi(2);
        let e1 = annulus_eigenpair(1, 1).unwrap();
        assert_eq!(e1.mu, pi2);
        assert!((annulus_eigenpair(2, 1).unwrap().mu_scaled - pi2 / 4.0).abs() < 1e-15);
        let e3 = annulus_eigenpair(1, 3).unwrap();
        assert!((e3.mu - pi2).abs() < 1e-10, "{}", e3.mu);
        let e2 = annulus_eigenpair(1, 2).unwrap();
        let fd = fd_first_eigenvalue(2, 10_000);
        assert!(((e2.mu - fd) / fd).abs() < 1e-6, "{} vs {fd}", e2.mu);
        assert!(annulus_eigenpair(0, 1).is_err() && annulus_eigenpair(1, 4).is_err());
    }

    #[test]
    fn eigenfunction_normalization() {
        for dim in 1..=3 {
            let e = annulus_eigenpair(3, dim).unwrap();
            let n = 3.0;
            let steps = 20_000;
            let h = n / steps as f64;
            let area = sphere_area(dim);
            let mass: f64 = (0..steps)
                .map(|k| {
                    let r = n + (k as f64 + 0.5) * h;
                    area * e.psi_n(r) * r.powi(dim as i32 - 1) * h
                })
                .sum();
            assert!((mass - 1.0).abs() < 1e-6, "dim {dim}: {mass}");
        }
    }

    #[test]
    fn z_of_constants_and_indicators() {
        let g = small_grid();
        let c = g.sample(|_| 2.5, 2.5);
        assert!((z_functional(&c, 3, &g).unwrap() - 2.5).abs() < 1e-14);
        let ind = g.sample(|x| if (8.0..=10.0).contains(&x) { 1.0 } else { 0.0 }, 0.0);
        assert!((z_functional(&ind, 2, &g).unwrap() - 1.0).abs() < 1e-14);
        assert!(z_functional(&c, 7, &g).is_err());
    }

    #[test]
    fn certificate_fires_on_manufactured_field() {
        let g = small_grid();
        let mut cfg = SemilinearConfig::new(2.0, 1.0, g);
        cfg.certificate_ns = vec![1, 2, 4];
        let pi2 = std::f64::consts::PI.powi(2);
        let amp = 1.01 * 2.0 * pi2 / 16.0;
        let u = g.sample(|x| if (16.0..=20.0).contains(&x) { amp } else { 0.0 }, 0.0);
        let c = certificate_check(&u, 0.5, &cfg).unwrap().unwrap();
        assert_eq!(c.n, 4);
        assert_eq!(c.fired_at, 0.5);
        let quiet = u.scaled(0.98);
        assert!(certificate_check(&quiet, 0.5, &cfg).unwrap().is_none());
    }

    #[test]
    fn zero_is_absorbing() {
        let g = small_grid();
        let cfg = SemilinearConfig {
            t_max: 2.0,
            ..SemilinearConfig::new(2.0, 2.0, g)
        };
        assert_eq!(step(&g.zeros(), &cfg).unwrap(), g.zeros());
        let trace = evolve(&g.zeros(), &cfg).unwrap();
        assert!(trace.sup_norms.iter().all(|v| *v == 0.0));
        assert_eq!(trace.outcome, Outcome::GlobalToTmax);
    }

    #[test]
    fn boundary_only_data_steps_like_the_semigroup() {
        let g = small_grid();
        let cfg = SemilinearConfig::new(3.0, 1.0, g);
        let phi = PairedField::new(vec![0.0; g.len()], vec![0.8]);
        let stepped = step(&phi, &cfg).unwrap();
        let linear = crate::semigroup::apply(cfg.dt, &phi, &g, &cfg.spec).unwrap().field;
        assert_eq!(stepped, linear);
    }

    #[test]
    fn negative_data_is_rejected() {
        let g = small_grid();
        let cfg = SemilinearConfig::new(2.0, 1.0, g);
        assert!(step(&g.sample(|x| -x, 0.0), &cfg).is_err());
    }

    #[test]
    fn first_order_in_dt() {
        let g = GridSpec::new(1, 30.0, 0.05).unwrap();
        let phi = profile().with_mass(&g, 1.0);
        let run = |dt: f64| {
            let cfg = SemilinearConfig {
                dt,
                dt_growth: 0.0,
                ..SemilinearConfig::new(2.0, 1.0, g)
            };
            evolve(&phi, &cfg).unwrap().final_state.unwrap()
        };
        let (a, b, c) = (run(0.1), run(0.05), run(0.025));
        let ratio = a.max_difference(&b) / b.max_difference(&c);
        assert!((ratio - 2.0).abs() <= 0.3, "{ratio}");
    }

    #[test]
    fn dominates_linear_flow() {
        let g = GridSpec::new(1, 40.0, 0.05).unwrap();
        let phi = profile().with_mass(&g, 0.5);
        let cfg = SemilinearConfig::new(2.0, 5.0, g);
        let mut states = Vec::new();
        evolve_with(&phi, &cfg, |t, u| states.push((t, u.clone()))).unwrap();
        let lin_cfg = SemilinearConfig {
            spec: cfg.spec,
            ..cfg.clone()
        };
        let mut k = 0;
        let mut ok = true;
        Evolver {
            cfg: &lin_cfg,
            cache: HashMap::new(),
        }
        .run(&phi, false, |t, v| {
            let (s, u) = &states[k];
            assert_eq!(*s, t);
            ok &= u.interior.iter().zip(&v.interior).all(|(a, b)| *a >= b - 1e-12);
            k += 1;
        })
        .ok();
        assert!(ok);
    }

    #[test]
    fn ordered_data_stays_ordered() {
        let g = GridSpec::new(1, 40.0, 0.05).unwrap();
        let small = profile().with_mass(&g, 0.5);
        let large = small.axpy(
            0.3,
            &BumpProfile {
                centre: 2.0,
                half_width: 1.0,
            }
            .with_mass(&g, 1.0),
        );
        let mut cfg = SemilinearConfig::new(2.0, 3.0, g);
        cfg.dt_growth = 0.0;
        let mut lo = Vec::new();
        evolve_with(&small, &cfg, |_, u| lo.push(u.clone())).unwrap();
        let mut k = 0;
        evolve_with(&large, &cfg, |_, u| {
            if k < lo.len() {
                assert!(u.interior.iter().zip(&lo[k].interior).all(|(a, b)| *a >= b - 1e-12));
            }
            k += 1;
        })
        .unwrap();
    }

    #[test]
    fn unit_mass_blows_up_on_every_ladder_level() {
        let template = FujitaTemplate::canonical();
        for level in 0..3 {
            let cfg = template.config(2.0, 1e3, level).unwrap();
            let phi = template.profile.with_mass(&cfg.grid, 1.0);
            let trace = evolve(&phi, &cfg).unwrap();
            assert_eq!(trace.outcome, Outcome::BlowupDetected, "level {level}");
        }
    }

    #[test]
    fn certificate_precedes_blowup_for_mass_inside_the_annulus() {
        let mut template = FujitaTemplate::canonical();
        template.profile = profile();
        for level in 0..3 {
            let cfg = template.config(2.0, 1e3, level).unwrap();
            let phi = template.profile.with_mass(&cfg.grid, 1.0);
            let trace = evolve(&phi, &cfg).unwrap();
            assert_eq!(trace.outcome, Outcome::BlowupDetected, "level {level}");
            let cert = trace.certificates.first().expect("certificate fired");
            assert!(cert.fired_at < trace.final_time());
            let z: Vec<f64> = trace.certificate_z.iter().map(|p| p.1).collect();
            assert!(
                z.windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-3)),
                "Z_n decreased after firing"
            );
        }
    }

    #[test]
    fn nan_is_a_hard_error() {
        let g = small_grid();
        let cfg = SemilinearConfig {
            blowup_threshold: f64::INFINITY,
            t_max: 100.0,
            ..SemilinearConfig::new(2.0, 100.0, g)
        };
        let phi = g.sample(|x| if x > 3.0 && x < 6.0 { 50.0 } else { 0.0 }, 0.0);
        assert!(matches!(evolve(&phi, &cfg), Err(Error::NonFiniteField { .. })));
    }

    #[test]
    fn fujita_exponents() {
        assert_eq!(fujita_exponent(1), 3.0);
        assert_eq!(fujita_exponent(2), 2.0);
    }

    #[test]
    fn sweep_rejects_bad_lists() {
        let t = FujitaTemplate::canonical();
        assert!(fujita_sweep(&[], &[1e-2], &t).is_err());
        assert!(fujita_sweep(&[2.0], &[], &t).is_err());
        assert!(fujita_sweep(&[4.0, 6.0], &[1e-2], &t).is_err());
        assert!(fujita_sweep(&[2.0, 3.0], &[1e-2], &t).is_err());
    }

    #[test]
    fn c_star_reproduces() {
        let c = calibrate_c_star(&FujitaTemplate::canonical()).unwrap();
        assert!((c - C_STAR).abs() <= 1e-12 * C_STAR, "{c}");
        assert!(c >= 1.0);
    }

    #[test]
    #[ignore]
    fn regenerate_c_star() {
        println!("C* = {:.16}", calibrate_c_star(&FujitaTemplate::canonical()).unwrap());
    }
}
