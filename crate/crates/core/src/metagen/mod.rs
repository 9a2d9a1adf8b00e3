//! Meta-dataset synthesis: sampling data-generating distributions from
//! configurable meta-priors, drawing datasets, computing ground-truth labels,
//! applying MI-preserving transformations, and serialization with
//! in/out-of-meta-distribution split tags.

mod io;
mod labels;
mod mi;
mod sample;

pub use io::{
    generate_meta_dataset, grid_test_set, read_jsonl, write_jsonl, DatapointRecord, DatasetHeader,
    DATASET_MAGIC,
};
pub use labels::functional_label;
pub use mi::{adaptive_simpson, mi_ground_truth, mi_quadrature, QuadAccuracy};
pub use sample::{
    apply_transform, sample_dataset, sample_distribution, standardize, transform_is_monotone,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::NdArray;
use crate::rngstream::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Normal,
    Uniform,
    Beta,
    Exponential,
    Gamma,
    LogNormal,
    Triangular,
    Cauchy,
    StudentT,
    BivariateNormal,
    BimodalGaussians,
    AdditiveNoise,
}

impl Family {
    /// Columns the family natively produces.
    pub fn native_columns(self) -> usize {
        match self {
            Family::BivariateNormal | Family::BimodalGaussians | Family::AdditiveNoise => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    Base,
    Wigglify,
    Halfcube,
    Asinh,
    NormalCdfise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformAxis {
    X,
    Y,
    Both,
}

pub const WIGGLIFY_AMP: f64 = 0.4;
pub const WIGGLIFY_FREQ: f64 = 2.0;

fn default_amp() -> f64 {
    WIGGLIFY_AMP
}
fn default_freq() -> f64 {
    WIGGLIFY_FREQ
}

/// A strictly monotone marginal map applied element-wise to one or both axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalTransform {
    pub kind: TransformKind,
    pub axis: TransformAxis,
    /// Wigglify amplitude; monotonicity requires `amp * freq < 1`.
    #[serde(default = "default_amp")]
    pub amp: f64,
    /// Wigglify frequency.
    #[serde(default = "default_freq")]
    pub freq: f64,
}

impl MarginalTransform {
    pub fn new(kind: TransformKind, axis: TransformAxis) -> Self {
        Self {
            kind,
            axis,
            amp: WIGGLIFY_AMP,
            freq: WIGGLIFY_FREQ,
        }
    }
}

/// A concrete data-generating law: family + parameters + transform chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    pub family: Family,
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub transforms: Vec<MarginalTransform>,
    /// Output dimensionality (1 or 2); 1-D families can emit two i.i.d.
    /// columns, optionally mixed through `mix_alpha`.
    pub columns: usize,
}

impl DistributionSpec {
    pub fn new(family: Family, params: BTreeMap<String, f64>) -> Self {
        let columns = family.native_columns();
        Self {
            family,
            params,
            transforms: Vec::new(),
            columns,
        }
    }

    pub fn param(&self, name: &str) -> Result<f64> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::Spec(format!("{:?} missing parameter `{name}`", self.family)))
    }

    pub fn param_or(&self, name: &str, default: f64) -> f64 {
        self.params.get(name).copied().unwrap_or(default)
    }

    /// Checks family-legal parameter ranges and transform monotonicity.
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str| -> Result<()> {
            if self.param(name)? > 0.0 {
                Ok(())
            } else {
                Err(Error::Spec(format!(
                    "{:?}: `{name}` must be > 0, got {}",
                    self.family,
                    self.param(name)?
                )))
            }
        };
        match self.family {
            Family::Normal => {
                self.param("mean")?;
                if self.params.contains_key("sd") {
                    positive("sd")?;
                } else {
                    positive("var")?;
                }
            }
            Family::Uniform => {
                if self.param("low")? >= self.param("high")? {
                    return Err(Error::Spec("uniform: low must be < high".into()));
                }
            }
            Family::Beta => {
                positive("alpha")?;
                positive("beta")?;
            }
            Family::Exponential => positive("scale")?,
            Family::Gamma => {
                positive("shape")?;
                positive("scale")?;
            }
            Family::LogNormal => {
                self.param("mu")?;
                positive("sigma")?;
            }
            Family::Triangular => {
                let (l, m, r) = (self.param("left")?, self.param("mode")?, self.param("right")?);
                if !(l < m && m < r) {
                    return Err(Error::Spec(format!(
                        "triangular: need left < mode < right, got {l}, {m}, {r}"
                    )));
                }
            }
            Family::Cauchy => {
                self.param("loc")?;
                positive("scale")?;
            }
            Family::StudentT => positive("df")?,
            Family::BivariateNormal => {
                let rho = self.param("rho")?;
                if !(-1.0 < rho && rho < 1.0) {
                    return Err(Error::Spec(format!("bivariate-normal: |rho| must be < 1, got {rho}")));
                }
            }
            Family::BimodalGaussians => {
                for p in ["m1x", "m1y", "m2x", "m2y"] {
                    self.param(p)?;
                }
                for p in ["s1x", "s1y", "s2x", "s2y"] {
                    positive(p)?;
                }
                for p in ["r1", "r2"] {
                    let r = self.param_or(p, 0.0);
                    if !(-1.0 < r && r < 1.0) {
                        return Err(Error::Spec(format!("bimodal: |{p}| must be < 1, got {r}")));
                    }
                }
            }
            Family::AdditiveNoise => {
                let s = self.param("sigma")?;
                if !(s > 0.0 && s <= 1.0) {
                    return Err(Error::Spec(format!("additive-noise: sigma in (0,1], got {s}")));
                }
            }
        }
        if let Some(alpha) = self.params.get("mix_alpha") {
            if !(-1.0..=1.0).contains(alpha) {
                return Err(Error::Spec(format!("mix_alpha must be in [-1,1], got {alpha}")));
            }
        }
        for t in &self.transforms {
            if !transform_is_monotone(t) {
                return Err(Error::Spec(format!("transform {t:?} is not strictly increasing")));
            }
        }
        let native = self.family.native_columns();
        if native == 2 && self.columns != 2 {
            return Err(Error::Spec(format!(
                "{:?} is bivariate; columns must be 2",
                self.family
            )));
        }
        if !(self.columns == 1 || self.columns == 2) {
            return Err(Error::Spec(format!("columns must be 1 or 2, got {}", self.columns)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Normality,
    Median,
    Correlation,
    Winrate,
    Ot1d,
    MutualInfo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Valid,
    TestImd,
    TestOomd,
}

/// One family entry of a meta-prior: uniform parameter ranges plus a weight.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FamilyPrior {
    pub family: Family,
    pub ranges: BTreeMap<String, (f64, f64)>,
    pub weight: f64,
}

/// Optional transform-chain sampling for MI-style tasks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformPrior {
    pub kinds: Vec<TransformKind>,
    pub max_chain: usize,
    /// Probability of drawing an empty chain.
    pub prob_identity: f64,
}

/// The sampling distribution over data-generating laws.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetaPrior {
    pub task: Task,
    pub families: Vec<FamilyPrior>,
    pub n_range: (usize, usize),
    pub split: Split,
    pub standardize: bool,
    pub columns: usize,
    #[serde(default)]
    pub transforms: Option<TransformPrior>,
    /// Range for the optional dependence-mixing coefficient used when a 1-D
    /// family fills two columns.
    #[serde(default)]
    pub mix_alpha_range: Option<(f64, f64)>,
}

impl MetaPrior {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::Config("meta-prior has no families".into()));
        }
        if self.families.iter().any(|f| f.weight <= 0.0) {
            return Err(Error::Config("family weights must be positive".into()));
        }
        if self.n_range.0 < 2 || self.n_range.0 > self.n_range.1 {
            return Err(Error::Config(format!(
                "invalid dataset-size range {:?}; n_min must be >= 2",
                self.n_range
            )));
        }
        if self.task == Task::Normality {
            let has_null = self.families.iter().any(|f| f.family == Family::Normal);
            let has_alt = self.families.iter().any(|f| f.family != Family::Normal);
            if !has_null || !has_alt {
                return Err(Error::Config(
                    "normality prior needs the normal family and at least one alternative".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One dataset with its provenance; `x` is materialized on demand from the
/// recorded seed so generation is exactly reproducible.
#[derive(Clone, Debug)]
pub struct MetaDatapoint {
    pub spec: DistributionSpec,
    pub n: usize,
    pub seed: u64,
    pub label: Vec<f64>,
    pub split: Split,
    pub x: Option<NdArray>,
    pub spec_id: Option<usize>,
    pub replicate: Option<usize>,
}

impl MetaDatapoint {
    /// The dataset values, regenerating from the recorded seed when absent.
    pub fn materialize(&self, standardize_flag: bool) -> Result<NdArray> {
        if let Some(x) = &self.x {
            return Ok(x.clone());
        }
        let mut rng = rng_from_seed(self.seed);
        let mut data = sample_dataset(&self.spec, self.n, &mut rng)?;
        if standardize_flag {
            standardize(&mut data)?;
        }
        Ok(data)
    }
}

/// An in-memory meta-dataset with the prior that generated it.
#[derive(Clone, Debug)]
pub struct MetaDataset {
    pub prior: MetaPrior,
    pub master_seed: u64,
    pub points: Vec<MetaDatapoint>,
}

impl MetaDataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Materializes point `i` under the dataset's standardization flag.
    pub fn dataset(&self, i: usize) -> Result<NdArray> {
        self.points[i].materialize(self.prior.standardize)
    }
}
