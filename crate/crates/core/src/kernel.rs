//! Closed-form heat and Poisson kernels, the boundary correction `H` and
//! the fundamental solution `G = Γ_N(x−y) − Γ_N(x−y*) + H`.
//!
//! Every kernel depends on a pair `(x, y)` only through the reduced
//! coordinates of [`ReducedKernelQuery`]. `H` is a one-dimensional
//! integral evaluated in two algebraically equivalent forms: the direct
//! form in the delay variable `τ ∈ (0, t)` and the `z`-substituted form in
//! `η ∈ (0, t/|z|²)` with `z = x − y* + t e_N`. Both are integrated with the
//! Gaussian factor `exp(−|x−y*|²/(4t))` pulled out, so values far below the
//! floating-point range are still available in logarithmic form.

use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{erf, integrate_semi_infinite, integrate_with_breaks, QuadratureSpec};

/// Exponents below `-UNDERFLOW` are flushed to exact zero.
pub const UNDERFLOW: f64 = 745.0;

/// A point of the closed half-space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalfSpacePoint {
    /// `x'`; empty when `N = 1`.
    pub tangential: Vec<f64>,
    /// `x_N ≥ 0`.
    pub height: f64,
}

impl HalfSpacePoint {
    pub fn new(tangential: Vec<f64>, height: f64) -> Result<Self> {
        if !(height >= 0.0) || !height.is_finite() {
            return Err(Error::Domain(format!("height must be finite and >= 0, got {height}")));
        }
        if tangential.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("tangential coordinates must be finite".into()));
        }
        Ok(Self { tangential, height })
    }

    pub fn on_axis(dim: usize, height: f64) -> Result<Self> {
        Self::new(vec![0.0; dim.saturating_sub(1)], height)
    }

    pub fn dim(&self) -> usize {
        self.tangential.len() + 1
    }

    pub fn on_boundary(&self) -> bool {
        self.height == 0.0
    }

    /// Coordinates of the mirror image `(x', −x_N)`.
    pub fn reflect(&self) -> (Vec<f64>, f64) {
        (self.tangential.clone(), -self.height)
    }
}

/// `(N, ρ = |x'−y'|, a = x_N, b = y_N, t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedKernelQuery {
    pub dim: usize,
    pub rho: f64,
    pub a: f64,
    pub b: f64,
    pub t: f64,
}

impl ReducedKernelQuery {
    pub fn new(dim: usize, rho: f64, a: f64, b: f64, t: f64) -> Result<Self> {
        let q = Self { dim, rho, a, b, t };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 1 {
            return Err(Error::Domain("dimension must be >= 1".into()));
        }
        if !(self.t > 0.0) || !self.t.is_finite() {
            return Err(Error::Domain(format!("t must be finite and > 0, got {}", self.t)));
        }
        for (name, v) in [("rho", self.rho), ("a", self.a), ("b", self.b)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.dim == 1 && self.rho != 0.0 {
            return Err(Error::Domain("rho must be 0 when dim = 1".into()));
        }
        Ok(())
    }

    /// Reduce a pair of points.
    pub fn from_points(x: &HalfSpacePoint, y: &HalfSpacePoint, t: f64) -> Result<Self> {
        if x.dim() != y.dim() {
            return Err(Error::Domain("points of different dimension".into()));
        }
        let rho2: f64 = x
            .tangential
            .iter()
            .zip(&y.tangential)
            .map(|(p, q)| (p - q) * (p - q))
            .sum();
        Self::new(x.dim(), rho2.sqrt(), x.height, y.height, t)
    }

    pub fn swapped(&self) -> Self {
        Self {
            a: self.b,
            b: self.a,
            ..*self
        }
    }

    pub fn with_t(&self, t: f64) -> Self {
        Self { t, ..*self }
    }

    /// `|x − y*|² = ρ² + (a+b)²`.
    pub fn reflected_distance_sq(&self) -> f64 {
        let h = self.a + self.b;
        self.rho * self.rho + h * h
    }

    /// `z_N = a + b + t`.
    pub fn z_height(&self) -> f64 {
        self.a + self.b + self.t
    }

    /// `|z|² = ρ² + (a+b+t)²`.
    pub fn z_norm_sq(&self) -> f64 {
        let c = self.z_height();
        self.rho * self.rho + c * c
    }
}

/// A kernel value with its quadrature error; closed-form parts carry no error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelValue {
    pub value: f64,
    pub quadrature_error: f64,
    pub converged: bool,
}

impl KernelValue {
    pub fn exact(value: f64) -> Self {
        Self {
            value,
            quadrature_error: 0.0,
            converged: true,
        }
    }
}

/// `H = mantissa · exp(−log_scale)`, with `log_scale = |x−y*|²/(4t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaledValue {
    pub mantissa: f64,
    pub mantissa_error: f64,
    pub log_scale: f64,
    pub converged: bool,
}

impl ScaledValue {
    pub fn ln(&self) -> f64 {
        self.mantissa.ln() - self.log_scale
    }

    /// Apply the underflow policy.
    pub fn to_kernel_value(&self) -> KernelValue {
        if self.log_scale > UNDERFLOW {
            return KernelValue {
                value: 0.0,
                quadrature_error: 0.0,
                converged: self.converged,
            };
        }
        let s = (-self.log_scale).exp();
        KernelValue {
            value: self.mantissa * s,
            quadrature_error: self.mantissa_error * s,
            converged: self.converged,
        }
    }
}

fn check_t(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("t must be finite and > 0, got {t}")))
    }
}

/// `(4πt)^{-d/2}`; `Γ_0 ≡ 1`.
fn heat_prefactor(d: usize, t: f64) -> f64 {
    match d {
        0 => 1.0,
        1 => 1.0 / (4.0 * PI * t).sqrt(),
        2 => 1.0 / (4.0 * PI * t),
        3 => {
            let s = 4.0 * PI * t;
            1.0 / (s * s.sqrt())
        }
        _ => (4.0 * PI * t).powf(-0.5 * d as f64),
    }
}

/// `Γ_d` from the squared distance, without argument checks.
pub(crate) fn gauss_sq(d: usize, r2: f64, t: f64) -> f64 {
    let e = r2 / (4.0 * t);
    if e > UNDERFLOW {
        0.0
    } else {
        heat_prefactor(d, t) * (-e).exp()
    }
}

/// `Γ_d(r, t) = (4πt)^{-d/2} e^{-r²/(4t)}`.
pub fn gauss_kernel(d: usize, r: f64, t: f64) -> Result<f64> {
    check_t(t)?;
    Ok(gauss_sq(d, r * r, t))
}

/// `∂_{x_N}Γ_d` at tangential distance `r_tangential` and height `h`.
pub fn gauss_kernel_dheight(r_tangential: f64, h: f64, t: f64, d: usize) -> Result<f64> {
    check_t(t)?;
    Ok(-(h / (2.0 * t)) * gauss_sq(d, r_tangential * r_tangential + h * h, t))
}

/// `Γ(k/2)` for positive integers `k`.
fn gamma_half(k: usize) -> f64 {
    if k.is_multiple_of(2) {
        (1..k / 2).map(|i| i as f64).product()
    } else {
        let mut g = PI.sqrt();
        let mut x = 0.5;
        while x < 0.5 * k as f64 - 0.25 {
            g *= x;
            x += 1.0;
        }
        g
    }
}

fn poisson_constant_by_quadrature(n: usize) -> f64 {
    // |S^{N-2}| ∫_0^∞ r^{N-2} (1+r²)^{-N/2} dr
    let sphere = 2.0 * PI.powf(0.5 * (n - 1) as f64) / gamma_half(n - 1);
    let spec = QuadratureSpec {
        abs_tol: 1e-14,
        rel_tol: 1e-14,
        max_subdivisions: 400,
        ..QuadratureSpec::default()
    };
    let radial = integrate_semi_infinite(
        |r| r.powi(n as i32 - 2) * (1.0 + r * r).powf(-0.5 * n as f64),
        0.0,
        &spec,
    )
    .expect("normalization integrand is finite")
    .value;
    1.0 / (sphere * radial)
}

/// `c_N` with `∫_{R^{N-1}} p_N(x', x_N) dx' = 1`; `c_1 = 1`.
pub fn poisson_constant(n: usize) -> f64 {
    const MEMO: usize = 64;
    static TABLE: [OnceLock<f64>; MEMO] = [const { OnceLock::new() }; MEMO];
    match n {
        0 | 1 => 1.0,
        2 => 1.0 / PI,
        3 => 1.0 / (2.0 * PI),
        n if n < MEMO => *TABLE[n].get_or_init(|| poisson_constant_by_quadrature(n)),
        n => poisson_constant_by_quadrature(n),
    }
}

/// `P_N(x − y*, t) = c_N (a+b+t) (ρ² + (a+b+t)²)^{-N/2}`; `1` when `N = 1`.
pub fn poisson_kernel_translated(q: &ReducedKernelQuery) -> f64 {
    if q.dim == 1 {
        return 1.0;
    }
    let c = q.z_height();
    poisson_constant(q.dim) * c * q.z_norm_sq().powf(-0.5 * q.dim as f64)
}

/// The two quadrature representations of `H`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HForm {
    Direct,
    ZForm,
}

impl HForm {
    /// The direct form is used unless `t/|z|² ≤ 1` and `a+b+t ≤ 30`.
    pub fn preferred(q: &ReducedKernelQuery) -> Self {
        if q.t <= q.z_norm_sq() && q.z_height() <= 30.0 {
            HForm::ZForm
        } else {
            HForm::Direct
        }
    }
}

/// Break points on `[0, t]` graded geometrically toward `τ = 0`, where the
/// Gaussian layer of width `~ 4t²/(|z|² − t²)` sits.
fn delay_breaks(q: &ReducedKernelQuery) -> Vec<f64> {
    let t = q.t;
    let excess = q.z_norm_sq() - t * t;
    let layer = if excess > 0.0 { 4.0 * t * t / excess } else { t };
    let mut d = (0.25 * layer).min(0.25 * t).min(0.25 * t.sqrt());
    let floor = t * 1e-15;
    if d < floor {
        d = floor;
    }
    let mut breaks = vec![0.0];
    while d < t {
        breaks.push(d);
        d *= 4.0;
    }
    breaks.push(t);
    breaks
}

/// Spec for the mantissa integral so the caller's absolute tolerance
/// applies to the unscaled value.
fn mantissa_spec(spec: &QuadratureSpec, log_scale: f64) -> QuadratureSpec {
    let f = log_scale.min(700.0).exp();
    QuadratureSpec {
        abs_tol: (spec.abs_tol * f).min(f64::MAX),
        ..*spec
    }
}

/// Scaled `H` in either representation.
pub fn h_scaled(q: &ReducedKernelQuery, form: HForm, spec: &QuadratureSpec) -> Result<ScaledValue> {
    q.validate()?;
    let n = q.dim;
    let t = q.t;
    let h0 = q.a + q.b;
    let rho2 = q.rho * q.rho;
    let log_scale = (h0 * h0 + rho2) / (4.0 * t);
    let zsq = q.z_norm_sq();
    let mspec = mantissa_spec(spec, log_scale);
    let breaks = delay_breaks(q);
    let r = match form {
        HForm::Direct => {
            // τ ↦ (h0+τ)/σ · (4πσ)^{-N/2} · exp(−[E(σ) − E(t)]),  σ = t − τ,
            // E(σ) − E(t) = τ/4 · (|z|²/(σ t) − 1)
            let f = |tau: f64| {
                let sigma = t - tau;
                if sigma <= 0.0 {
                    return 0.0;
                }
                let de = 0.25 * tau * (zsq / (sigma * t) - 1.0);
                if de > UNDERFLOW {
                    return 0.0;
                }
                (h0 + tau) / sigma * heat_prefactor(n, sigma) * (-de).exp()
            };
            integrate_with_breaks(f, &breaks, &mspec)?
        }
        HForm::ZForm => {
            let zn = q.z_height();
            let eta_t = t / zsq;
            let pref = heat_prefactor(n, 1.0) * zn * zsq.powf(-0.5 * n as f64);
            let ebreaks: Vec<f64> = breaks.iter().rev().map(|tau| (t - tau) / zsq).collect();
            // η ↦ (1 − |z|²η/z_N) η^{-(N+2)/2} exp(−[1/(4η) + |z|²η/4 − z_N/2] + E(t))
            let f = |eta: f64| {
                if eta <= 0.0 {
                    return 0.0;
                }
                let gap = eta_t - eta;
                let de = 0.25 * gap * (1.0 / (eta * eta_t) - zsq);
                if de > UNDERFLOW {
                    return 0.0;
                }
                let w = 1.0 - zsq * eta / zn;
                w * eta.powf(-0.5 * (n as f64 + 2.0)) * (-de).exp()
            };
            let mut r = integrate_with_breaks(
                f,
                &ebreaks,
                &QuadratureSpec {
                    abs_tol: mspec.abs_tol / pref,
                    ..mspec
                },
            )?;
            r.value *= pref;
            r.error_estimate *= pref;
            r
        }
    };
    Ok(ScaledValue {
        mantissa: r.value,
        mantissa_error: r.error_estimate,
        log_scale,
        converged: r.converged,
    })
}

fn h_in_form(q: &ReducedKernelQuery, form: HForm, spec: &QuadratureSpec) -> Result<KernelValue> {
    q.validate()?;
    let log_scale = q.reflected_distance_sq() / (4.0 * q.t);
    if log_scale > UNDERFLOW {
        return Ok(KernelValue::exact(0.0));
    }
    Ok(h_scaled(q, form, spec)?.to_kernel_value())
}

/// `H` by the direct delay-variable integral.
pub fn h_correction(q: &ReducedKernelQuery, spec: &QuadratureSpec) -> Result<KernelValue> {
    h_in_form(q, HForm::Direct, spec)
}

/// `H` by the `z`-substituted integral.
pub fn h_correction_zform(q: &ReducedKernelQuery, spec: &QuadratureSpec) -> Result<KernelValue> {
    h_in_form(q, HForm::ZForm, spec)
}

/// `H` in the representation chosen by [`HForm::preferred`].
pub fn h_value(q: &ReducedKernelQuery, spec: &QuadratureSpec) -> Result<KernelValue> {
    h_in_form(q, HForm::preferred(q), spec)
}

/// `Γ_N(x−y, t) − Γ_N(x−y*, t) ≥ 0`, vanishing when `a = 0` or `b = 0`.
pub fn gamma_difference(q: &ReducedKernelQuery) -> f64 {
    let d = q.a - q.b;
    let e = (q.rho * q.rho + d * d) / (4.0 * q.t);
    if e > UNDERFLOW {
        return 0.0;
    }
    heat_prefactor(q.dim, q.t) * (-e).exp() * -(-(q.a * q.b) / q.t).exp_m1()
}

/// `G(x, y, t)`.
pub fn fundamental_solution(q: &ReducedKernelQuery, spec: &QuadratureSpec) -> Result<KernelValue> {
    let h = h_value(q, spec)?;
    Ok(KernelValue {
        value: gamma_difference(q) + h.value,
        ..h
    })
}

/// `G(x, y, t)` from full coordinates.
pub fn fundamental_solution_at(
    x: &HalfSpacePoint,
    y: &HalfSpacePoint,
    t: f64,
    spec: &QuadratureSpec,
) -> Result<KernelValue> {
    fundamental_solution(&ReducedKernelQuery::from_points(x, y, t)?, spec)
}

/// Mass of the Γ-difference over `Ω`: `erf(b / (2√t))`.
pub fn interior_dipole_mass(b: f64, t: f64) -> Result<f64> {
    check_t(t)?;
    if !(b >= 0.0) {
        return Err(Error::Domain(format!("b must be >= 0, got {b}")));
    }
    Ok(erf(b / (2.0 * t.sqrt())))
}
