//! Distribution sampling, marginal transforms, and standardization.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    DistributionSpec, Family, MarginalTransform, MetaPrior, Task, TransformAxis, TransformKind,
};
use crate::error::{Error, Result};
use crate::ndtensor::NdArray;
use crate::stats::normal_cdf;

/// Heavy-tail clip applied to Cauchy draws before standardization, keeping
/// encoder inputs bounded.
pub const CAUCHY_CLIP: f64 = 50.0;

/// Draws a data-generating law from the meta-prior. For the normality task an
/// unbiased coin first decides null (normal) versus alternative, so the label
/// balance is exactly one half.
pub fn sample_distribution(prior: &MetaPrior, rng: &mut ChaCha12Rng) -> Result<DistributionSpec> {
    prior.validate()?;
    let family_prior = if prior.task == Task::Normality {
        let is_null = rng.gen_bool(0.5);
        let subset: Vec<_> = prior
            .families
            .iter()
            .filter(|f| (f.family == Family::Normal) == is_null)
            .collect();
        weighted_pick(&subset, rng)
    } else {
        let all: Vec<_> = prior.families.iter().collect();
        weighted_pick(&all, rng)
    };
    draw_spec(prior, family_prior, rng)
}

/// Draws parameters, the optional mixing coefficient, and a transform chain
/// for a fixed family under the prior's settings.
pub(crate) fn draw_spec(
    prior: &MetaPrior,
    family_prior: &super::FamilyPrior,
    rng: &mut ChaCha12Rng,
) -> Result<DistributionSpec> {
    // Rejection loop for range combinations that can produce an invalid spec
    // (e.g. triangular mode == right at range edges).
    for _attempt in 0..100 {
        let mut params = std::collections::BTreeMap::new();
        for (name, &(lo, hi)) in &family_prior.ranges {
            let v = if lo == hi { lo } else { rng.gen_range(lo..hi) };
            params.insert(name.clone(), v);
        }
        let mut spec = DistributionSpec::new(family_prior.family, params);
        spec.columns = prior.columns.max(spec.family.native_columns());

        if spec.columns == 2 && spec.family.native_columns() == 1 {
            if let Some((lo, hi)) = prior.mix_alpha_range {
                spec.params.insert("mix_alpha".into(), rng.gen_range(lo..hi));
            }
        }
        if let Some(tp) = &prior.transforms {
            if !tp.kinds.is_empty() && tp.max_chain > 0 && !rng.gen_bool(tp.prob_identity) {
                let len = rng.gen_range(1..=tp.max_chain);
                for _ in 0..len {
                    let kind = tp.kinds[rng.gen_range(0..tp.kinds.len())];
                    let axis = if spec.columns == 2 {
                        match rng.gen_range(0..3) {
                            0 => TransformAxis::X,
                            1 => TransformAxis::Y,
                            _ => TransformAxis::Both,
                        }
                    } else {
                        TransformAxis::X
                    };
                    spec.transforms.push(MarginalTransform::new(kind, axis));
                }
            }
        }
        if spec.validate().is_ok() {
            return Ok(spec);
        }
    }
    Err(Error::Spec(format!(
        "could not draw a valid {:?} spec from the configured ranges",
        family_prior.family
    )))
}

fn weighted_pick<'a>(
    families: &[&'a super::FamilyPrior],
    rng: &mut ChaCha12Rng,
) -> &'a super::FamilyPrior {
    let total: f64 = families.iter().map(|f| f.weight).sum();
    let mut u = rng.gen_range(0.0..total);
    for f in families {
        if u < f.weight {
            return f;
        }
        u -= f.weight;
    }
    families.last().expect("non-empty family list")
}

/// Draws `n` i.i.d. rows and applies the transform chain element-wise.
pub fn sample_dataset(spec: &DistributionSpec, n: usize, rng: &mut ChaCha12Rng) -> Result<NdArray> {
    if n < 2 {
        return Err(Error::Spec(format!("dataset size must be >= 2, got {n}")));
    }
    spec.validate()?;
    let m = spec.columns;
    let mut data = vec![0.0; n * m];
    match (spec.family.native_columns(), m) {
        (1, 1) => {
            for r in 0..n {
                data[r] = sample_scalar(spec, rng)?;
            }
        }
        (1, 2) => {
            let alpha = spec.params.get("mix_alpha").copied();
            for r in 0..n {
                let x = sample_scalar(spec, rng)?;
                let e = sample_scalar(spec, rng)?;
                let y = match alpha {
                    Some(a) => a * x + (1.0 - a * a).sqrt() * e,
                    None => e,
                };
                data[r * 2] = x;
                data[r * 2 + 1] = y;
            }
        }
        (2, 2) => {
            for r in 0..n {
                let (x, y) = sample_pair(spec, rng)?;
                data[r * 2] = x;
                data[r * 2 + 1] = y;
            }
        }
        (native, m) => {
            return Err(Error::Spec(format!(
                "family emits {native} columns, spec requests {m}"
            )))
        }
    }
    for t in &spec.transforms {
        apply_to_axis(&mut data, m, t);
    }
    NdArray::new(vec![n, m], data)
}

fn sample_scalar(spec: &DistributionSpec, rng: &mut ChaCha12Rng) -> Result<f64> {
    let bad = |what: &str| Error::Spec(format!("{:?}: {what}", spec.family));
    Ok(match spec.family {
        Family::Normal => {
            let mean = spec.param("mean")?;
            let sd = match spec.params.get("sd") {
                Some(&sd) => sd,
                None => spec.param("var")?.sqrt(),
            };
            let z: f64 = StandardNormal.sample(rng);
            mean + sd * z
        }
        Family::Uniform => rng.gen_range(spec.param("low")?..spec.param("high")?),
        Family::Beta => rand_distr::Beta::new(spec.param("alpha")?, spec.param("beta")?)
            .map_err(|e| bad(&e.to_string()))?
            .sample(rng),
        Family::Exponential => {
            let scale = spec.param("scale")?;
            scale
                * rand_distr::Exp::new(1.0)
                    .map_err(|e| bad(&e.to_string()))?
                    .sample(rng)
        }
        Family::Gamma => rand_distr::Gamma::new(spec.param("shape")?, spec.param("scale")?)
            .map_err(|e| bad(&e.to_string()))?
            .sample(rng),
        Family::LogNormal => rand_distr::LogNormal::new(spec.param("mu")?, spec.param("sigma")?)
            .map_err(|e| bad(&e.to_string()))?
            .sample(rng),
        Family::Triangular => rand_distr::Triangular::new(
            spec.param("left")?,
            spec.param("right")?,
            spec.param("mode")?,
        )
        .map_err(|e| bad(&e.to_string()))?
        .sample(rng),
        Family::Cauchy => {
            let v: f64 = rand_distr::Cauchy::new(spec.param("loc")?, spec.param("scale")?)
                .map_err(|e| bad(&e.to_string()))?
                .sample(rng);
            v.clamp(-CAUCHY_CLIP, CAUCHY_CLIP)
        }
        Family::StudentT => {
            let t: f64 = rand_distr::StudentT::new(spec.param("df")?)
                .map_err(|e| bad(&e.to_string()))?
                .sample(rng);
            spec.param_or("loc", 0.0) + spec.param_or("scale", 1.0) * t
        }
        _ => return Err(bad("not a univariate family")),
    })
}

fn sample_pair(spec: &DistributionSpec, rng: &mut ChaCha12Rng) -> Result<(f64, f64)> {
    Ok(match spec.family {
        Family::BivariateNormal => {
            let rho = spec.param("rho")?;
            let (mx, my) = (spec.param_or("mean_x", 0.0), spec.param_or("mean_y", 0.0));
            let (sx, sy) = (spec.param_or("sd_x", 1.0), spec.param_or("sd_y", 1.0));
            let z1: f64 = StandardNormal.sample(rng);
            let z2: f64 = StandardNormal.sample(rng);
            (
                mx + sx * z1,
                my + sy * (rho * z1 + (1.0 - rho * rho).sqrt() * z2),
            )
        }
        Family::BimodalGaussians => {
            let first = rng.gen_bool(0.5);
            let (mx, my, sx, sy, r) = if first {
                (
                    spec.param("m1x")?,
                    spec.param("m1y")?,
                    spec.param("s1x")?,
                    spec.param("s1y")?,
                    spec.param_or("r1", 0.0),
                )
            } else {
                (
                    spec.param("m2x")?,
                    spec.param("m2y")?,
                    spec.param("s2x")?,
                    spec.param("s2y")?,
                    spec.param_or("r2", 0.0),
                )
            };
            let z1: f64 = StandardNormal.sample(rng);
            let z2: f64 = StandardNormal.sample(rng);
            (mx + sx * z1, my + sy * (r * z1 + (1.0 - r * r).sqrt() * z2))
        }
        Family::AdditiveNoise => {
            let sigma = spec.param("sigma")?;
            let x: f64 = rng.gen_range(0.0..1.0);
            let e: f64 = rng.gen_range(-0.5..0.5);
            (x, x + sigma * e)
        }
        _ => return Err(Error::Spec(format!("{:?}: not a bivariate family", spec.family))),
    })
}

fn apply_to_axis(data: &mut [f64], m: usize, t: &MarginalTransform) {
    let cols: &[usize] = match (t.axis, m) {
        (TransformAxis::X, _) => &[0],
        (TransformAxis::Y, 2) => &[1],
        (TransformAxis::Both, 2) => &[0, 1],
        // Y/Both collapse to the single column of 1-D data.
        _ => &[0],
    };
    for &c in cols {
        let mut i = c;
        while i < data.len() {
            data[i] = apply_transform(data[i], t);
            i += m;
        }
    }
}

/// Element-wise marginal map. All kinds are strictly increasing:
/// halfcube is sign(x)|x|^(3/2), asinh is ln(x + sqrt(x^2+1)),
/// normal-cdfise is the standard normal CDF, wigglify is x + amp*sin(freq*x).
pub fn apply_transform(x: f64, t: &MarginalTransform) -> f64 {
    match t.kind {
        TransformKind::Base => x,
        TransformKind::Wigglify => x + t.amp * (t.freq * x).sin(),
        TransformKind::Halfcube => x.signum() * x.abs().powf(1.5),
        TransformKind::Asinh => x.asinh(),
        TransformKind::NormalCdfise => normal_cdf(x),
    }
}

/// Analytic monotonicity check; wigglify requires `amp * freq < 1`.
pub fn transform_is_monotone(t: &MarginalTransform) -> bool {
    match t.kind {
        TransformKind::Wigglify => t.amp * t.freq < 1.0,
        _ => true,
    }
}

/// Centers and scales each column by its own empirical mean and population
/// standard deviation (denominator n).
pub fn standardize(data: &mut NdArray) -> Result<()> {
    let shape = data.shape().to_vec();
    let (n, m) = (shape[0], shape[1]);
    for c in 0..m {
        let mut mean = 0.0;
        for r in 0..n {
            mean += data.data()[r * m + c];
        }
        mean /= n as f64;
        let mut var = 0.0;
        for r in 0..n {
            let d = data.data()[r * m + c] - mean;
            var += d * d;
        }
        var /= n as f64;
        if var == 0.0 {
            return Err(Error::ZeroVariance { column: c });
        }
        let sd = var.sqrt();
        for r in 0..n {
            let v = &mut data.data_mut()[r * m + c];
            *v = (*v - mean) / sd;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metagen::Split;
    use crate::rngstream::derive_rng;
    use std::collections::BTreeMap;

    fn bivariate(rho: f64) -> DistributionSpec {
        let mut p = BTreeMap::new();
        p.insert("rho".to_string(), rho);
        DistributionSpec::new(Family::BivariateNormal, p)
    }

    #[test]
    fn standardize_hand_example() {
        // [1,2,3] with population std sqrt(2/3)
        let mut d = NdArray::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        standardize(&mut d).unwrap();
        let e = 1.0 / (2.0f64 / 3.0).sqrt();
        for (v, want) in d.data().iter().zip([-e, 0.0, e]) {
            assert!((v - want).abs() < 1e-12);
        }
        assert!((d.data()[0] + 1.2247448).abs() < 1e-6);
    }

    #[test]
    fn standardize_is_idempotent() {
        let mut rng = derive_rng(3, "std", 0);
        let spec = bivariate(0.4);
        let mut d = sample_dataset(&spec, 64, &mut rng).unwrap();
        standardize(&mut d).unwrap();
        let once = d.clone();
        standardize(&mut d).unwrap();
        for (a, b) in once.data().iter().zip(d.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn standardize_rejects_constant_column() {
        let mut d = NdArray::new(vec![3, 2], vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        match standardize(&mut d) {
            Err(Error::ZeroVariance { column: 1 }) => {}
            other => panic!("expected zero-variance error, got {other:?}"),
        }
    }

    #[test]
    fn transform_fixed_points() {
        let hc = MarginalTransform::new(TransformKind::Halfcube, TransformAxis::X);
        assert_eq!(apply_transform(-4.0, &hc), -8.0);
        let cdf = MarginalTransform::new(TransformKind::NormalCdfise, TransformAxis::X);
        assert!((apply_transform(0.0, &cdf) - 0.5).abs() < 1e-15);
        let asinh = MarginalTransform::new(TransformKind::Asinh, TransformAxis::X);
        assert!((apply_transform(1.0, &asinh) - (1.0 + 2.0f64.sqrt()).ln()).abs() < 1e-12);
        let base = MarginalTransform::new(TransformKind::Base, TransformAxis::X);
        assert_eq!(apply_transform(0.37, &base), 0.37);
    }

    #[test]
    fn wigglify_monotone_on_grid() {
        let t = MarginalTransform::new(TransformKind::Wigglify, TransformAxis::X);
        assert!(transform_is_monotone(&t));
        let mut prev = f64::NEG_INFINITY;
        for i in 0..10_000 {
            let x = -50.0 + 100.0 * (i as f64) / 9_999.0;
            let y = apply_transform(x, &t);
            assert!(y > prev, "wigglify not increasing at {x}");
            prev = y;
        }
        let steep = MarginalTransform {
            amp: 1.0,
            freq: 2.0,
            ..t
        };
        assert!(!transform_is_monotone(&steep));
    }

    #[test]
    fn monotone_transforms_preserve_ranks() {
        let mut rng = derive_rng(5, "ranks", 0);
        let mut spec = bivariate(0.6);
        let plain = sample_dataset(&spec, 200, &mut rng).unwrap();
        spec.transforms = vec![MarginalTransform::new(TransformKind::Asinh, TransformAxis::Both)];
        let mut rng2 = derive_rng(5, "ranks", 0);
        let transformed = sample_dataset(&spec, 200, &mut rng2).unwrap();
        let ranks = |col: Vec<f64>| {
            let mut idx: Vec<usize> = (0..col.len()).collect();
            idx.sort_by(|&a, &b| col[a].partial_cmp(&col[b]).unwrap());
            idx
        };
        for c in 0..2 {
            let a: Vec<f64> = (0..200).map(|r| plain.data()[r * 2 + c]).collect();
            let b: Vec<f64> = (0..200).map(|r| transformed.data()[r * 2 + c]).collect();
            assert_eq!(ranks(a), ranks(b));
        }
    }

    #[test]
    fn high_correlation_is_realized_empirically() {
        let mut rng = derive_rng(6, "rho", 0);
        let d = sample_dataset(&bivariate(0.99), 100_000, &mut rng).unwrap();
        let xs: Vec<f64> = (0..100_000).map(|r| d.data()[r * 2]).collect();
        let ys: Vec<f64> = (0..100_000).map(|r| d.data()[r * 2 + 1]).collect();
        assert!(crate::stats::pearson(&xs, &ys) > 0.98);
    }

    #[test]
    fn fixed_seed_reproduces_spec_sequence() {
        let prior = MetaPrior {
            task: Task::Normality,
            families: vec![
                super::super::FamilyPrior {
                    family: Family::Normal,
                    ranges: [
                        ("mean".to_string(), (-3.0, 3.0)),
                        ("sd".to_string(), (0.1, 3.0)),
                    ]
                    .into(),
                    weight: 1.0,
                },
                super::super::FamilyPrior {
                    family: Family::Exponential,
                    ranges: [("scale".to_string(), (0.5, 2.0))].into(),
                    weight: 1.0,
                },
            ],
            n_range: (5, 50),
            split: Split::Train,
            standardize: true,
            columns: 1,
            transforms: None,
            mix_alpha_range: None,
        };
        let draw = || {
            let mut rng = derive_rng(9, "specseq", 0);
            (0..20)
                .map(|_| sample_distribution(&prior, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }
}
