//! Closed-form and quadrature ground truths for Gaussian distributions.

use crate::error::{Error, Result};
use crate::kernels::KernelParams;
use crate::numerics::GaussianSpec;

/// Doubling panels may change a converged value by at most this much.
pub const QUADRATURE_TOL: f64 = 1e-9;
const MIN_PANELS: usize = 4096;
const MAX_PANELS: usize = 1 << 20;
/// Integration half-width in standard deviations.
const TAIL_STDS: f64 = 10.0;

/// Composite Simpson rule on `[lower, upper]` with an even number of panels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSpec {
    pub lower: f64,
    pub upper: f64,
    pub panels: usize,
}

impl QuadratureSpec {
    pub fn new(lower: f64, upper: f64, panels: usize) -> Result<Self> {
        if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
            return Err(Error::InvalidParameter(format!("bad interval [{lower}, {upper}]")));
        }
        if panels < 16 || !panels.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "panel count must be even and >= 16, got {panels}"
            )));
        }
        Ok(Self { lower, upper, panels })
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let h = (self.upper - self.lower) / self.panels as f64;
        let mut odd = 0.0;
        let mut even = 0.0;
        for i in 1..self.panels {
            let v = f(self.lower + i as f64 * h);
            if i % 2 == 1 {
                odd += v;
            } else {
                even += v;
            }
        }
        h / 3.0 * (f(self.lower) + 4.0 * odd + 2.0 * even + f(self.upper))
    }

    fn doubled(&self) -> Self {
        Self {
            panels: self.panels * 2,
            ..*self
        }
    }
}

/// Evaluates `value(spec)` with increasing panel counts until two successive
/// doublings agree within [`QUADRATURE_TOL`].
fn converge<F: Fn(&QuadratureSpec) -> f64>(mut spec: QuadratureSpec, value: F) -> Result<f64> {
    let mut previous = value(&spec);
    let mut change = f64::INFINITY;
    while spec.panels < MAX_PANELS {
        spec = spec.doubled();
        let current = value(&spec);
        change = (current - previous).abs();
        if change <= QUADRATURE_TOL || current == previous {
            return Ok(current);
        }
        previous = current;
    }
    Err(Error::QuadratureNotConverged { change })
}

/// Mutual information `-ln(1 - rho^2) / 2` of a bivariate normal.
pub fn mi_gaussian(rho: f64) -> Result<f64> {
    if !(rho.abs() < 1.0) {
        return Err(Error::InvalidCorrelation(rho));
    }
    Ok(-0.5 * (-rho * rho).ln_1p())
}

/// `KL(p || q)` for univariate normals.
pub fn kl_gaussian_1d(p: &GaussianSpec, q: &GaussianSpec) -> f64 {
    let dm = p.mean - q.mean;
    (q.std / p.std).ln() + (p.variance() + dm * dm) / (2.0 * q.variance()) - 0.5
}

/// `KL(p || q)` by Simpson quadrature of `p (log p - log q)` over
/// `p.mean +/- 10 p.std`.
pub fn kl_gaussian_1d_quadrature(p: &GaussianSpec, q: &GaussianSpec) -> Result<f64> {
    let spec = QuadratureSpec::new(p.mean - TAIL_STDS * p.std, p.mean + TAIL_STDS * p.std, MIN_PANELS)?;
    converge(spec, |s| s.integrate(|x| p.pdf(x) * (p.log_pdf(x) - q.log_pdf(x))))
}

/// Integration window for `E[kappa(a, b)]` with independent normal `a`, `b`.
///
/// The kernel depends only on `d = a - b ~ N(ma - mb, sa^2 + sb^2)`, so the
/// expectation is the one-dimensional integral of that density against the
/// kernel. The window is the density's `mean +/- 10 std` clipped to the
/// kernel's own `+/- 10 sigma` support; `None` if they do not intersect.
fn kernel_window(mean_diff: f64, var_sum: f64, kernel: KernelParams, panels: usize) -> Result<Option<QuadratureSpec>> {
    let sd = var_sum.sqrt();
    let lower = (mean_diff - TAIL_STDS * sd).max(-TAIL_STDS * kernel.sigma());
    let upper = (mean_diff + TAIL_STDS * sd).min(TAIL_STDS * kernel.sigma());
    if !(lower < upper) {
        return Ok(None);
    }
    QuadratureSpec::new(lower, upper, panels).map(Some)
}

/// Population value of the kernel CS estimator for two univariate normals:
/// `-log( E_pq[k]^2 / (E_pp[k] E_qq[k]) )`, each expectation by Simpson
/// quadrature. Returns infinity when the cross expectation is negligible
/// over the whole integration window.
pub fn cs_gaussian_population(p: &GaussianSpec, q: &GaussianSpec, kernel: KernelParams) -> Result<f64> {
    let rate = kernel.rate();
    let windows = [
        (p.mean - q.mean, p.variance() + q.variance()),
        (0.0, 2.0 * p.variance()),
        (0.0, 2.0 * q.variance()),
    ];
    let mut specs = Vec::with_capacity(3);
    for &(md, vs) in &windows {
        match kernel_window(md, vs, kernel, MIN_PANELS)? {
            Some(s) => specs.push(s),
            None => return Ok(f64::INFINITY),
        }
    }
    let mut expectations = [0.0; 3];
    for (slot, (spec, &(md, vs))) in expectations.iter_mut().zip(specs.iter().zip(&windows)) {
        let density = GaussianSpec::new(md, vs.sqrt())?;
        *slot = converge(*spec, |s| s.integrate(|d| density.pdf(d) * (-rate * d * d).exp()))?;
    }
    let [cross, self_p, self_q] = expectations;
    if !(cross > 0.0) {
        return Ok(f64::INFINITY);
    }
    Ok(self_p.ln() + self_q.ln() - 2.0 * cross.ln())
}

/// Closed form of [`cs_gaussian_population`]:
/// `D^2 / S + log(S / sqrt((2 sp^2 + s^2)(2 sq^2 + s^2)))` with
/// `S = sp^2 + sq^2 + s^2` and `D` the mean difference.
pub fn cs_gaussian_closed_form(p: &GaussianSpec, q: &GaussianSpec, kernel: KernelParams) -> f64 {
    let s2 = kernel.sigma() * kernel.sigma();
    let total = p.variance() + q.variance() + s2;
    let dm = p.mean - q.mean;
    dm * dm / total + (total / ((2.0 * p.variance() + s2) * (2.0 * q.variance() + s2)).sqrt()).ln()
}

/// Reference values for the bivariate toy example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyReport {
    /// Mutual information at rho = 0.99.
    pub mi_correlated: f64,
    /// Mutual information at rho = 0.
    pub mi_independent: f64,
    /// KL between N(0, 2^2) and N(2, 1^2): strongly dependent but offset.
    pub kl_offset: f64,
    /// KL between two standard normals.
    pub kl_matched: f64,
}

impl ToyReport {
    pub fn offset_specs() -> (GaussianSpec, GaussianSpec) {
        (
            GaussianSpec { mean: 0.0, std: 2.0 },
            GaussianSpec { mean: 2.0, std: 1.0 },
        )
    }

    pub fn matched_specs() -> (GaussianSpec, GaussianSpec) {
        (
            GaussianSpec { mean: 0.0, std: 1.0 },
            GaussianSpec { mean: 0.0, std: 1.0 },
        )
    }
}

pub fn toy_example_report() -> ToyReport {
    let (op, oq) = ToyReport::offset_specs();
    let (mp, mq) = ToyReport::matched_specs();
    ToyReport {
        mi_correlated: mi_gaussian(0.99).expect("valid correlation"),
        mi_independent: mi_gaussian(0.0).expect("valid correlation"),
        kl_offset: kl_gaussian_1d(&op, &oq),
        kl_matched: kl_gaussian_1d(&mp, &mq),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(mean: f64, std: f64) -> GaussianSpec {
        GaussianSpec::new(mean, std).unwrap()
    }

    #[test]
    fn simpson_is_exact_for_cubics() {
        let s = QuadratureSpec::new(-1.0, 2.0, 16).unwrap();
        let v = s.integrate(|x| x * x * x - 2.0 * x + 1.0);
        assert!((v - (15.0 / 4.0 - 3.0 + 3.0)).abs() < 1e-12);
        assert!(QuadratureSpec::new(1.0, 0.0, 16).is_err());
        assert!(QuadratureSpec::new(0.0, 1.0, 15).is_err());
        assert!(QuadratureSpec::new(0.0, 1.0, 8).is_err());
    }

    #[test]
    fn mutual_information() {
        assert_eq!(mi_gaussian(0.0).unwrap(), 0.0);
        assert!((mi_gaussian(0.99).unwrap() - 1.9585).abs() < 1e-4);
        assert!((mi_gaussian(0.5).unwrap() - 0.143841036).abs() < 1e-8);
        assert!(matches!(mi_gaussian(1.0), Err(Error::InvalidCorrelation(_))));
        assert!(mi_gaussian(-1.5).is_err());
        assert_eq!(mi_gaussian(0.3).unwrap(), mi_gaussian(-0.3).unwrap());
        let mut last = 0.0;
        for i in 1..100 {
            let v = mi_gaussian(i as f64 / 100.0).unwrap();
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_gaussian_1d(&g(0.3, 1.7), &g(0.3, 1.7)), 0.0);
        assert!((kl_gaussian_1d(&g(0.0, 1.0), &g(1.0, 1.0)) - 0.5).abs() < 1e-15);
        let v = kl_gaussian_1d(&g(0.0, 2.0), &g(2.0, 1.0));
        assert!((v - (4.0 - 0.5 - std::f64::consts::LN_2)).abs() < 1e-14);
        assert!((v - 2.80685).abs() < 1e-5);
        let reverse = kl_gaussian_1d(&g(2.0, 1.0), &g(0.0, 2.0));
        assert!((reverse - 0.818147).abs() < 1e-6);
        assert_ne!(v, reverse);
    }

    #[test]
    fn kl_quadrature_agrees() {
        for (p, q) in [
            (g(0.0, 1.0), g(1.0, 1.0)),
            (g(0.0, 2.0), g(2.0, 1.0)),
            (g(2.0, 1.0), g(0.0, 2.0)),
            (g(-1.0, 0.3), g(0.5, 2.5)),
        ] {
            let quad = kl_gaussian_1d_quadrature(&p, &q).unwrap();
            assert!((quad - kl_gaussian_1d(&p, &q)).abs() < 1e-6, "{p:?} {q:?}");
        }
    }

    #[test]
    fn population_cs_examples() {
        let p = g(0.0, 1.0);
        let q = g(2.0, 1.0);
        let k1 = KernelParams::new(1.0).unwrap();
        assert!(cs_gaussian_population(&p, &p, k1).unwrap().abs() < 1e-12);
        let v = cs_gaussian_population(&p, &q, k1).unwrap();
        assert!((v - 4.0 / 3.0).abs() < 1e-9, "{v}");
        let narrow = cs_gaussian_population(&p, &q, KernelParams::new(0.001).unwrap()).unwrap();
        assert!((narrow - 2.0).abs() < 1e-3, "{narrow}");
    }

    #[test]
    fn closed_form_matches_quadrature() {
        for (p, q, s) in [
            (g(0.0, 1.0), g(2.0, 1.0), 1.0),
            (g(0.0, 1.0), g(2.0, 1.0), 0.001),
            (g(-1.0, 0.5), g(1.5, 2.0), 0.7),
            (g(3.0, 1.2), g(3.0, 0.4), 2.5),
        ] {
            let k = KernelParams::new(s).unwrap();
            let quad = cs_gaussian_population(&p, &q, k).unwrap();
            let closed = cs_gaussian_closed_form(&p, &q, k);
            assert!((quad - closed).abs() < 1e-8, "{quad} vs {closed}");
            let swapped = cs_gaussian_population(&q, &p, k).unwrap();
            assert!((quad - swapped).abs() < 1e-9);
        }
    }

    #[test]
    fn population_cs_decreases_with_width() {
        let p = g(0.0, 1.0);
        let q = g(1.5, 0.8);
        let mut last = f64::INFINITY;
        for s in [0.05, 0.2, 0.5, 1.0, 2.0, 4.0] {
            let v = cs_gaussian_population(&p, &q, KernelParams::new(s).unwrap()).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn toy_report_values() {
        let r = toy_example_report();
        assert!((r.mi_correlated - 1.9585).abs() < 1e-4);
        assert_eq!(r.mi_independent, 0.0);
        assert!((r.kl_offset - 2.80685).abs() < 1e-5);
        assert_eq!(r.kl_matched, 0.0);
    }
}
