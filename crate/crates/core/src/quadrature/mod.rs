//! One-dimensional integration engines.
//!
//! The adaptive path bisects the interval with the largest embedded
//! Gauss(7)/Kronrod(15) discrepancy until the accumulated estimate meets
//! `max(abs_tol, rel_tol * |value|)` or the subdivision budget runs out.
//! Composite Gauss–Legendre panels of arbitrary order serve as a
//! brute-force reference and as a fixed rule for smooth integrands.

mod erf;

pub use erf::{erf, erfc};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accuracy targets and effort limits for one integration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Bisections allowed beyond the initial partition.
    pub max_subdivisions: usize,
    /// Nodes per panel for composite Gauss–Legendre rules.
    pub panel_order: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            rel_tol: 1e-10,
            max_subdivisions: 200,
            panel_order: 15,
        }
    }
}

impl QuadratureSpec {
    /// A spec driven by relative accuracy only, for integrals whose
    /// magnitude is unknown in advance.
    pub fn relative(rel_tol: f64) -> Self {
        Self {
            abs_tol: f64::MIN_POSITIVE,
            rel_tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0) || !(self.rel_tol > 0.0) {
            return Err(Error::InvalidSpec("tolerances must be positive".into()));
        }
        if self.max_subdivisions < 1 {
            return Err(Error::InvalidSpec("max_subdivisions must be >= 1".into()));
        }
        if self.panel_order < 2 {
            return Err(Error::InvalidSpec("panel_order must be >= 2".into()));
        }
        Ok(())
    }

    fn target(&self, value: f64) -> f64 {
        self.abs_tol.max(self.rel_tol * value.abs())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureResult {
    pub value: f64,
    pub error_estimate: f64,
    pub subdivisions_used: usize,
    pub converged: bool,
}

impl QuadratureResult {
    pub fn zero() -> Self {
        Self {
            value: 0.0,
            error_estimate: 0.0,
            subdivisions_used: 0,
            converged: true,
        }
    }
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
/// Gauss weights for the odd-indexed Kronrod nodes 1, 3, 5 and the centre.
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Clone, Copy, Debug)]
struct Panel {
    lo: f64,
    hi: f64,
    value: f64,
    error: f64,
}

fn checked<F: FnMut(f64) -> f64>(f: &mut F, x: f64) -> Result<f64> {
    let v = f(x);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteIntegrand { at: x, value: v })
    }
}

fn kronrod15<F: FnMut(f64) -> f64>(f: &mut F, lo: f64, hi: f64) -> Result<Panel> {
    let c = 0.5 * (lo + hi);
    let h = 0.5 * (hi - lo);
    let fc = checked(f, c)?;
    let mut k = fc * WGK[7];
    let mut g = fc * WG[3];
    let mut abs = k.abs();
    for j in 0..7 {
        let dx = h * XGK[j];
        let f1 = checked(f, c - dx)?;
        let f2 = checked(f, c + dx)?;
        k += WGK[j] * (f1 + f2);
        abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            g += WG[j / 2] * (f1 + f2);
        }
    }
    let value = k * h;
    let roundoff = 50.0 * f64::EPSILON * abs * h.abs();
    let error = ((k - g) * h).abs().max(roundoff);
    Ok(Panel { lo, hi, value, error })
}

/// Adaptive integration over `[lo, hi]`.
pub fn integrate_finite<F: FnMut(f64) -> f64>(
    f: F,
    lo: f64,
    hi: f64,
    spec: &QuadratureSpec,
) -> Result<QuadratureResult> {
    integrate_with_breaks(f, &[lo, hi], spec)
}

/// Adaptive integration over the partition given by the sorted
/// `breaks`; the initial panels do not count against the budget.
pub fn integrate_with_breaks<F: FnMut(f64) -> f64>(
    mut f: F,
    breaks: &[f64],
    spec: &QuadratureSpec,
) -> Result<QuadratureResult> {
    spec.validate()?;
    if breaks.len() < 2 {
        return Err(Error::Domain("need at least two break points".into()));
    }
    if breaks.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Domain("break points must be sorted and finite".into()));
    }
    let mut panels = Vec::with_capacity(breaks.len() + spec.max_subdivisions);
    for w in breaks.windows(2) {
        if w[1] > w[0] {
            panels.push(kronrod15(&mut f, w[0], w[1])?);
        }
    }
    if panels.is_empty() {
        return Ok(QuadratureResult::zero());
    }
    let mut used = 0;
    loop {
        let value: f64 = panels.iter().map(|p| p.value).sum();
        let error: f64 = panels.iter().map(|p| p.error).sum();
        if error <= spec.target(value) {
            return Ok(QuadratureResult {
                value,
                error_estimate: error,
                subdivisions_used: used,
                converged: true,
            });
        }
        let worst = panels
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.error.total_cmp(&b.1.error))
            .map(|(i, _)| i)
            .expect("non-empty");
        let p = panels[worst];
        let mid = 0.5 * (p.lo + p.hi);
        let splittable = mid > p.lo && mid < p.hi;
        if used >= spec.max_subdivisions || !splittable {
            return Ok(QuadratureResult {
                value,
                error_estimate: error,
                subdivisions_used: used,
                converged: false,
            });
        }
        panels[worst] = kronrod15(&mut f, p.lo, mid)?;
        panels.push(kronrod15(&mut f, mid, p.hi)?);
        used += 1;
    }
}

/// Integration over `(lo, ∞)` through `ξ = lo + (u/(1−u))²`, `u ∈ [0, 1)`.
///
/// The squared map keeps integrands with algebraic tails down to
/// `ξ^{-3/2}` bounded on the unit interval and also smooths an
/// inverse-square-root singularity at `lo`.
pub fn integrate_semi_infinite<F: FnMut(f64) -> f64>(
    mut f: F,
    lo: f64,
    spec: &QuadratureSpec,
) -> Result<QuadratureResult> {
    let g = |u: f64| {
        let w = 1.0 - u;
        let s = u / w;
        let jac = 2.0 * s / (w * w);
        let x = lo + s * s;
        let v = f(x);
        if v == 0.0 || jac == 0.0 {
            0.0
        } else {
            v * jac
        }
    };
    integrate_finite(g, 0.0, 1.0, spec)
}

/// Gauss–Legendre rule on `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Nodes by Newton iteration on `P_n` from Chebyshev starting guesses.
    pub fn new(order: usize) -> Result<Self> {
        if order < 1 {
            return Err(Error::InvalidSpec("Gauss–Legendre order must be >= 1".into()));
        }
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Ok(Self { nodes, weights })
    }

    /// Composite rule with `panels` equal panels on `[lo, hi]`.
    pub fn composite<F: FnMut(f64) -> f64>(&self, mut f: F, lo: f64, hi: f64, panels: usize) -> f64 {
        let width = (hi - lo) / panels as f64;
        let half = 0.5 * width;
        let mut total = 0.0;
        for k in 0..panels {
            let c = lo + (k as f64 + 0.5) * width;
            let mut s = 0.0;
            for (x, w) in self.nodes.iter().zip(&self.weights) {
                s += w * f(c + half * x);
            }
            total += s * half;
        }
        total
    }
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn spec() -> QuadratureSpec {
        QuadratureSpec::default()
    }

    #[test]
    fn constant_integrand() {
        let r = integrate_finite(|_| 1.0, 0.0, 1.0, &spec()).unwrap();
        assert!(r.converged);
        assert!((r.value - 1.0).abs() < 1e-15);
        assert!(r.error_estimate < 1e-13);
    }

    #[test]
    fn gaussian_on_finite_interval() {
        let r = integrate_finite(|x| (-x * x).exp(), 0.0, 10.0, &spec()).unwrap();
        assert!(r.converged);
        assert!((r.value - PI.sqrt() / 2.0).abs() < 1e-10);
    }

    #[test]
    fn semi_infinite_exponential_and_gaussian() {
        let r = integrate_semi_infinite(|x| (-x).exp(), 0.0, &spec()).unwrap();
        assert!(r.converged && (r.value - 1.0).abs() < 1e-10);
        let r = integrate_semi_infinite(|x| (-x * x).exp(), 0.0, &spec()).unwrap();
        assert!(r.converged && (r.value - PI.sqrt() / 2.0).abs() < 1e-10);
    }

    /// Brute-force oracle: composite Gauss–Legendre on `[0, R]` for a
    /// ladder of `R`, Richardson-extrapolated in `R^{-1/2}` (the tail of
    /// `η^{-3/2}` is `2R^{-1/2} + O(R^{-3/2})`).
    #[test]
    fn semi_infinite_algebraic_tail() {
        let f = |eta: f64| {
            if eta <= 0.0 {
                0.0
            } else {
                eta.powf(-1.5) * (-0.25 / eta).exp()
            }
        };
        let gl = GaussLegendre::new(20).unwrap();
        let partial = |r: f64| -> f64 {
            // geometric panels resolve both the layer near 0 and the long tail
            let mut total = gl.composite(f, 0.0, 0.01, 50);
            let mut a = 0.01;
            while a < r {
                let b = (a * 1.25).min(r);
                total += gl.composite(f, a, b, 4);
                a = b;
            }
            total
        };
        let (r1, r2, r3) = (1e6, 4e6, 16e6);
        let (i1, i2, i3) = (partial(r1), partial(r2), partial(r3));
        // eliminate h = R^{-1/2} (ratio 2 per step) then h^3 (ratio 8)
        let a1 = (2.0 * i2 - i1) / 1.0;
        let a2 = (2.0 * i3 - i2) / 1.0;
        let oracle = (8.0 * a2 - a1) / 7.0;
        assert!((oracle - 2.0 * PI.sqrt()).abs() < 1e-9, "oracle {oracle}");

        let r = integrate_semi_infinite(f, 0.0, &spec()).unwrap();
        assert!(r.converged, "{r:?}");
        assert!((r.value - oracle).abs() < 1e-9, "{} vs {}", r.value, oracle);
    }

    #[test]
    fn erf_against_quadrature() {
        let tight = QuadratureSpec {
            abs_tol: 1e-14,
            rel_tol: 1e-14,
            ..spec()
        };
        let c = 2.0 / PI.sqrt();
        for &(x, golden) in &[(1.0, 0.842_700_792_949_714_9), (0.5, 0.520_499_877_813_046_5)] {
            let r = integrate_finite(|s| c * (-s * s).exp(), 0.0, x, &tight).unwrap();
            assert!((r.value - golden).abs() < 1e-15);
            assert!((erf(x) - golden).abs() < 1e-15);
        }
        for &x in &[0.1, 0.84, 1.2, 2.0, 3.0, 4.5, 5.9] {
            let r = integrate_finite(|s| c * (-s * s).exp(), 0.0, x, &tight).unwrap();
            assert!((erf(x) - r.value).abs() < 1e-13, "x={x}");
            let t = integrate_semi_infinite(|s| c * (-s * s).exp(), x, &QuadratureSpec::relative(1e-13)).unwrap();
            assert!(((erfc(x) - t.value) / t.value).abs() < 1e-11, "x={x}");
        }
    }

    #[test]
    fn non_finite_integrand_is_an_error() {
        let r = integrate_finite(|x| if x > 0.5 { f64::NAN } else { 1.0 }, 0.0, 1.0, &spec());
        assert!(matches!(r, Err(Error::NonFiniteIntegrand { .. })));
    }

    #[test]
    fn budget_exhaustion_is_reported_not_raised() {
        let tight = QuadratureSpec {
            max_subdivisions: 2,
            ..spec()
        };
        let r = integrate_finite(|x: f64| (50.0 * x).sin().abs(), 0.0, 10.0, &tight).unwrap();
        assert!(!r.converged);
        assert_eq!(r.subdivisions_used, 2);
    }

    #[test]
    fn spec_validation() {
        let mut s = spec();
        s.abs_tol = 0.0;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.panel_order = 1;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.max_subdivisions = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn legendre_weights_sum_to_two() {
        for n in 1..40 {
            let gl = GaussLegendre::new(n).unwrap();
            let s: f64 = gl.weights.iter().sum();
            assert!((s - 2.0).abs() < 1e-13, "n={n}");
        }
    }

    proptest! {
        #[test]
        fn gauss_legendre_polynomial_exactness(
            k in 2usize..20,
            coeffs in proptest::collection::vec(-1.0f64..1.0, 40),
            lo in -3.0f64..0.0,
            width in 0.1f64..4.0,
        ) {
            let gl = GaussLegendre::new(k).unwrap();
            let deg = 2 * k - 1;
            let c = &coeffs[..=deg];
            let hi = lo + width;
            let p = |x: f64| c.iter().rev().fold(0.0, |a, &ci| a * x + ci);
            let antideriv = |x: f64| {
                c.iter().enumerate().rev().fold(0.0, |a, (i, &ci)| a * x + ci / (i as f64 + 1.0)) * x
            };
            let exact = antideriv(hi) - antideriv(lo);
            let got = gl.composite(p, lo, hi, 1);
            let scale = c.iter().map(|v| v.abs()).sum::<f64>() * (lo.abs().max(hi.abs()) + 1.0).powi(deg as i32) * width;
            prop_assert!((got - exact).abs() <= 1e-13 * scale.max(exact.abs()));
        }

        #[test]
        fn adaptive_is_linear(
            a in proptest::collection::vec(-2.0f64..2.0, 6),
            b in proptest::collection::vec(-2.0f64..2.0, 6),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let pa = |x: f64| a.iter().rev().fold(0.0, |s, &c| s * x + c) * (-x).exp();
            let pb = |x: f64| b.iter().rev().fold(0.0, |s, &c| s * x + c) * (x).cos();
            let s = spec();
            let ra = integrate_finite(pa, 0.0, 3.0, &s).unwrap();
            let rb = integrate_finite(pb, 0.0, 3.0, &s).unwrap();
            let rc = integrate_finite(|x| alpha * pa(x) + beta * pb(x), 0.0, 3.0, &s).unwrap();
            let combined = alpha * ra.value + beta * rb.value;
            let tol = rc.error_estimate + alpha.abs() * ra.error_estimate + beta.abs() * rb.error_estimate + 1e-14;
            prop_assert!((rc.value - combined).abs() <= tol);
        }

        #[test]
        fn erf_complement(x in -6.0f64..6.0) {
            prop_assert!((erf(x) + erfc(x) - 1.0).abs() < 1e-13);
            prop_assert!(erf(x).abs() <= 1.0);
        }
    }
}
