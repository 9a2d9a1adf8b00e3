//! Ground-truth mutual information in nats.
//!
//! Bivariate normal has the closed form -0.5*ln(1 - rho^2); additive-noise
//! and bimodal-gaussian specs are integrated with nested adaptive Simpson
//! quadrature of the MI integral. Strictly monotone marginal transforms leave
//! MI unchanged (invariance under homeomorphisms), so the transform chain
//! only needs a monotonicity check.

use super::{transform_is_monotone, DistributionSpec, Family};
use crate::error::{Error, Result};
use crate::stats::normal_pdf;

/// Quadrature accuracy target in nats (absolute).
#[derive(Clone, Copy, Debug)]
pub struct QuadAccuracy {
    pub tol: f64,
    pub max_depth: u32,
}

impl Default for QuadAccuracy {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_depth: 45,
        }
    }
}

/// Ground-truth MI of a spec. Errors on non-monotone transforms and on
/// families without a known or integrable MI.
pub fn mi_ground_truth(spec: &DistributionSpec) -> Result<f64> {
    for t in &spec.transforms {
        if !transform_is_monotone(t) {
            return Err(Error::Spec(format!(
                "transform {t:?} is not strictly monotone; MI is not preserved"
            )));
        }
    }
    match spec.family {
        Family::BivariateNormal => {
            let rho = spec.param("rho")?;
            Ok(-0.5 * (1.0 - rho * rho).ln())
        }
        Family::AdditiveNoise | Family::BimodalGaussians => {
            mi_quadrature(spec, QuadAccuracy::default())
        }
        other => Err(Error::Spec(format!(
            "{other:?} has no known ground-truth mutual information"
        ))),
    }
}

/// MI via nested adaptive quadrature of `E[ln p(x,y) / (p(x) p(y))]`.
/// Supports bivariate-normal (the oracle route for the closed form),
/// additive-noise, and bimodal-gaussians.
pub fn mi_quadrature(spec: &DistributionSpec, acc: QuadAccuracy) -> Result<f64> {
    match spec.family {
        Family::BivariateNormal => {
            let rho = spec.param("rho")?;
            if rho == 0.0 {
                return Ok(0.0);
            }
            let joint = move |x: f64, y: f64| bivariate_pdf(x, y, rho);
            quad_mi(
                &joint,
                &normal_pdf,
                &normal_pdf,
                (-8.5, 8.5),
                &|_| (-8.5, 8.5),
                &[],
                acc,
            )
        }
        Family::BimodalGaussians => {
            let c1 = Component::from_spec(spec, 1)?;
            let c2 = Component::from_spec(spec, 2)?;
            let joint = move |x: f64, y: f64| 0.5 * c1.pdf(x, y) + 0.5 * c2.pdf(x, y);
            let px = move |x: f64| {
                0.5 * normal_pdf((x - c1.mx) / c1.sx) / c1.sx
                    + 0.5 * normal_pdf((x - c2.mx) / c2.sx) / c2.sx
            };
            let py = move |y: f64| {
                0.5 * normal_pdf((y - c1.my) / c1.sy) / c1.sy
                    + 0.5 * normal_pdf((y - c2.my) / c2.sy) / c2.sy
            };
            let xb = (
                (c1.mx - 9.0 * c1.sx).min(c2.mx - 9.0 * c2.sx),
                (c1.mx + 9.0 * c1.sx).max(c2.mx + 9.0 * c2.sx),
            );
            let yb = (
                (c1.my - 9.0 * c1.sy).min(c2.my - 9.0 * c2.sy),
                (c1.my + 9.0 * c1.sy).max(c2.my + 9.0 * c2.sy),
            );
            quad_mi(&joint, &px, &py, xb, &move |_| yb, &[], acc)
        }
        Family::AdditiveNoise => {
            // X ~ U(0,1), Y = X + sigma * eps, eps ~ U(-1/2, 1/2).
            let sigma = spec.param("sigma")?;
            let joint = move |x: f64, y: f64| {
                if (0.0..=1.0).contains(&x) && (y - x).abs() <= sigma / 2.0 {
                    1.0 / sigma
                } else {
                    0.0
                }
            };
            let px = |x: f64| if (0.0..=1.0).contains(&x) { 1.0 } else { 0.0 };
            let py = move |y: f64| {
                let overlap = (1.0f64.min(y + sigma / 2.0) - 0.0f64.max(y - sigma / 2.0)).max(0.0);
                overlap / sigma
            };
            // The marginal p_Y has kinks where the noise window crosses 0 or 1.
            let breaks = [sigma / 2.0, 1.0 - sigma / 2.0];
            quad_mi(
                &joint,
                &px,
                &py,
                (0.0, 1.0),
                &move |x| (x - sigma / 2.0, x + sigma / 2.0),
                &breaks,
                acc,
            )
        }
        other => Err(Error::Spec(format!("{other:?} is not quadrature-integrable"))),
    }
}

fn bivariate_pdf(x: f64, y: f64, rho: f64) -> f64 {
    let d = 1.0 - rho * rho;
    let q = (x * x - 2.0 * rho * x * y + y * y) / (2.0 * d);
    (-q).exp() / (2.0 * std::f64::consts::PI * d.sqrt())
}

#[derive(Clone, Copy)]
struct Component {
    mx: f64,
    my: f64,
    sx: f64,
    sy: f64,
    rho: f64,
}

impl Component {
    fn from_spec(spec: &DistributionSpec, idx: usize) -> Result<Self> {
        Ok(Self {
            mx: spec.param(&format!("m{idx}x"))?,
            my: spec.param(&format!("m{idx}y"))?,
            sx: spec.param(&format!("s{idx}x"))?,
            sy: spec.param(&format!("s{idx}y"))?,
            rho: spec.param_or(&format!("r{idx}"), 0.0),
        })
    }

    fn pdf(&self, x: f64, y: f64) -> f64 {
        bivariate_pdf((x - self.mx) / self.sx, (y - self.my) / self.sy, self.rho)
            / (self.sx * self.sy)
    }
}

#[allow(clippy::too_many_arguments)]
fn quad_mi(
    joint: &dyn Fn(f64, f64) -> f64,
    px: &dyn Fn(f64) -> f64,
    py: &dyn Fn(f64) -> f64,
    x_bounds: (f64, f64),
    y_bounds: &dyn Fn(f64) -> (f64, f64),
    y_breaks: &[f64],
    acc: QuadAccuracy,
) -> Result<f64> {
    let width = x_bounds.1 - x_bounds.0;
    let inner_tol = acc.tol / (2.0 * width);
    let outer_tol = acc.tol / 2.0;
    let outer = |x: f64| -> Result<f64> {
        let pxv = px(x);
        if pxv <= 0.0 {
            return Ok(0.0);
        }
        let (ylo, yhi) = y_bounds(x);
        let integrand = |y: f64| -> Result<f64> {
            let p = joint(x, y);
            if p <= 0.0 {
                return Ok(0.0);
            }
            let denom = pxv * py(y);
            if denom <= 0.0 {
                // zero-measure boundary of the support; the integrable log
                // singularity is captured by adaptive refinement next to it
                return Ok(0.0);
            }
            Ok(p * (p / denom).ln())
        };
        // split the inner range at marginal kinks
        let mut cuts: Vec<f64> = vec![ylo];
        for &b in y_breaks {
            if b > ylo && b < yhi {
                cuts.push(b);
            }
        }
        cuts.push(yhi);
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut total = 0.0;
        for w in cuts.windows(2) {
            total += adaptive_simpson(&integrand, w[0], w[1], inner_tol * (w[1] - w[0]) / (yhi - ylo), acc.max_depth)?;
        }
        Ok(total)
    };
    adaptive_simpson(&outer, x_bounds.0, x_bounds.1, outer_tol, acc.max_depth)
}

/// Adaptive Simpson quadrature with Richardson refinement. Errors with the
/// residual estimate when the depth budget is exhausted before convergence.
pub fn adaptive_simpson(
    f: &dyn Fn(f64) -> Result<f64>,
    a: f64,
    b: f64,
    tol: f64,
    max_depth: u32,
) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let m = 0.5 * (a + b);
    let fa = f(a)?;
    let fm = f(m)?;
    let fb = f(b)?;
    let whole = simpson(fa, fm, fb, a, b);
    let scale = whole.abs().max(1e-3);
    simpson_rec(f, a, m, b, fa, fm, fb, whole, tol, max_depth, scale)
}

fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(
    f: &dyn Fn(f64) -> Result<f64>,
    a: f64,
    m: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
    scale: f64,
) -> Result<f64> {
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm)?;
    let frm = f(rm)?;
    let left = simpson(fa, flm, fm, a, m);
    let right = simpson(fm, frm, fb, m, b);
    let delta = left + right - whole;
    // the second disjunct is a floating-point noise floor relative to the
    // top-level integral; refinement below it only chases rounding error
    if delta.abs() <= 15.0 * tol || delta.abs() <= 1e-13 * scale || (b - a) < 1e-13 {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(Error::QuadratureDiverged {
            residual: delta.abs() / 15.0,
        });
    }
    Ok(
        simpson_rec(f, a, lm, m, fa, flm, fm, left, 0.5 * tol, depth - 1, scale)?
            + simpson_rec(f, m, rm, b, fm, frm, fb, right, 0.5 * tol, depth - 1, scale)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metagen::{MarginalTransform, TransformAxis, TransformKind};
    use std::collections::BTreeMap;

    fn binormal(rho: f64) -> DistributionSpec {
        let mut p = BTreeMap::new();
        p.insert("rho".to_string(), rho);
        DistributionSpec::new(Family::BivariateNormal, p)
    }

    fn additive(sigma: f64) -> DistributionSpec {
        let mut p = BTreeMap::new();
        p.insert("sigma".to_string(), sigma);
        DistributionSpec::new(Family::AdditiveNoise, p)
    }

    #[test]
    fn independent_gaussian_has_zero_mi() {
        assert_eq!(mi_ground_truth(&binormal(0.0)).unwrap(), 0.0);
    }

    #[test]
    fn rho_half_matches_analytic_value() {
        let mi = mi_ground_truth(&binormal(0.5)).unwrap();
        assert!((mi - 0.14384103622589045).abs() < 1e-12);
        // cross-check the closed form against the quadrature oracle
        let q = mi_quadrature(&binormal(0.5), QuadAccuracy::default()).unwrap();
        assert!((q - mi).abs() < 1e-4, "quadrature {q} vs analytic {mi}");
    }

    #[test]
    fn transform_chain_does_not_change_mi() {
        let mut spec = binormal(0.7);
        let plain = mi_ground_truth(&spec).unwrap();
        spec.transforms = vec![MarginalTransform::new(
            TransformKind::Halfcube,
            TransformAxis::X,
        )];
        assert_eq!(mi_ground_truth(&spec).unwrap(), plain);
    }

    #[test]
    fn non_monotone_transform_is_rejected() {
        let mut spec = binormal(0.3);
        spec.transforms = vec![MarginalTransform {
            kind: TransformKind::Wigglify,
            axis: TransformAxis::X,
            amp: 2.0,
            freq: 2.0,
        }];
        assert!(mi_ground_truth(&spec).is_err());
    }

    #[test]
    fn additive_noise_matches_hand_derived_entropies() {
        // sigma = 1: Y is triangular with h = 1/2, h(Y|X) = ln 1 = 0 -> MI = 1/2.
        let mi = mi_ground_truth(&additive(1.0)).unwrap();
        assert!((mi - 0.5).abs() < 2e-4, "sigma=1 MI {mi}");
        // sigma = 1/2: trapezoidal h(Y) = 1/4, h(Y|X) = ln(1/2) -> MI = 1/4 + ln 2.
        let mi2 = mi_ground_truth(&additive(0.5)).unwrap();
        let expect = 0.25 + (2.0f64).ln();
        assert!((mi2 - expect).abs() < 2e-4, "sigma=0.5 MI {mi2} vs {expect}");
    }

    #[test]
    fn far_separated_bimodal_approaches_ln2() {
        let mut p = BTreeMap::new();
        for (k, v) in [
            ("m1x", -10.0),
            ("m1y", -10.0),
            ("m2x", 10.0),
            ("m2y", 10.0),
            ("s1x", 1.0),
            ("s1y", 1.0),
            ("s2x", 1.0),
            ("s2y", 1.0),
        ] {
            p.insert(k.to_string(), v);
        }
        let spec = DistributionSpec::new(Family::BimodalGaussians, p);
        let mi = mi_ground_truth(&spec).unwrap();
        assert!((mi - std::f64::consts::LN_2).abs() < 1e-3, "bimodal MI {mi}");
    }

    #[test]
    fn simpson_integrates_polynomial_exactly() {
        let f = |x: f64| Ok(x * x * x - 2.0 * x + 1.0);
        let v = adaptive_simpson(&f, 0.0, 2.0, 1e-12, 30).unwrap();
        assert!((v - 2.0).abs() < 1e-12); // x^4/4 - x^2 + x over [0,2]
    }
}
