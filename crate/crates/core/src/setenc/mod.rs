//! Permutation-invariant dataset encoders and prediction heads.
//!
//! A model is `f(X) = head(pool(blocks(embed(X))))`: a row-wise input
//! projection, a stack of induced-set-attention (or full-attention) blocks,
//! attention pooling with one learned seed, and a task head.

mod blocks;

pub use blocks::{
    embed_rows, encode_with, forward, head_with, isab, mab, norm, pool, BoundModel, HeadOutput,
};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ndtensor::{Mask, NdArray};
use crate::rngstream::derive_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    SetTransformer,
    VanillaTransformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    SetNorm,
    LayerNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Regression,
    Gaussian,
    Classifier,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    /// Learned inducing points per block; used by the set transformer only.
    pub inducing_points: usize,
    pub norm: NormKind,
    pub head: HeadKind,
    pub input_columns: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.kind == EncoderKind::SetTransformer && self.inducing_points < 1 {
            return Err(Error::Config("set transformer needs inducing_points >= 1".into()));
        }
        if self.input_columns < 1 {
            return Err(Error::Config("input_columns must be >= 1".into()));
        }
        Ok(())
    }
}

/// Ordered, named parameter arrays. Order is fixed by construction so that
/// optimizer state and checkpoints align by index.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, NdArray)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn add(&mut self, name: impl Into<String>, array: NdArray) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, array));
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&NdArray> {
        self.position(name).map(|i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn arrays(&self) -> impl Iterator<Item = &NdArray> {
        self.entries.iter().map(|(_, a)| a)
    }

    pub fn arrays_mut(&mut self) -> impl Iterator<Item = &mut NdArray> {
        self.entries.iter_mut().map(|(_, a)| a)
    }

    pub fn entries(&self) -> &[(String, NdArray)] {
        &self.entries
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    pub fn replace(&mut self, name: &str, array: NdArray) -> Result<()> {
        match self.position(name) {
            Some(i) => {
                self.entries[i].1 = array;
                Ok(())
            }
            None => Err(Error::Config(format!("unknown parameter `{name}`"))),
        }
    }
}

/// Encoder + head parameters together with their architecture description.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

impl Model {
    /// Fresh model; weights drawn from the given seed.
    ///
    /// Linear maps use uniform(+-1/sqrt(fan_in)); inducing points and the
    /// pooling seed use N(0,1) * 0.02; norms start at identity.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = derive_rng(seed, "init", 0);
        let mut p = ParamSet::default();
        let d = config.model_dim;
        let m = config.input_columns;

        fn linear(
            p: &mut ParamSet,
            rng: &mut rand_chacha::ChaCha12Rng,
            name: &str,
            fan_in: usize,
            fan_out: usize,
        ) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            p.add(format!("{name}.w"), NdArray::new(vec![fan_in, fan_out], w).unwrap());
            p.add(format!("{name}.b"), NdArray::zeros(&[fan_out]));
        }
        fn norm(p: &mut ParamSet, name: &str, dim: usize) {
            p.add(format!("{name}.g"), NdArray::filled(&[dim], 1.0));
            p.add(format!("{name}.b"), NdArray::zeros(&[dim]));
        }
        fn small_normal(rng: &mut rand_chacha::ChaCha12Rng, count: usize) -> Vec<f64> {
            (0..count)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    0.02 * z
                })
                .collect()
        }
        fn mab_params(
            p: &mut ParamSet,
            rng: &mut rand_chacha::ChaCha12Rng,
            prefix: &str,
            d: usize,
            mlp: usize,
        ) {
            for proj in ["q", "k", "v", "o"] {
                linear(p, rng, &format!("{prefix}.{proj}"), d, d);
            }
            norm(p, &format!("{prefix}.norm1"), d);
            norm(p, &format!("{prefix}.norm2"), d);
            linear(p, rng, &format!("{prefix}.ff0"), d, mlp);
            linear(p, rng, &format!("{prefix}.ff1"), mlp, d);
        }

        linear(&mut p, &mut rng, "embed.l0", m, d);
        linear(&mut p, &mut rng, "embed.l1", d, d);

        for layer in 0..config.layers {
            if config.kind == EncoderKind::SetTransformer {
                let ind = small_normal(&mut rng, config.inducing_points * d);
                p.add(
                    format!("enc{layer}.ind"),
                    NdArray::new(vec![config.inducing_points, d], ind).unwrap(),
                );
                mab_params(&mut p, &mut rng, &format!("enc{layer}.mab0"), d, config.mlp_dim);
                mab_params(&mut p, &mut rng, &format!("enc{layer}.mab1"), d, config.mlp_dim);
            } else {
                mab_params(&mut p, &mut rng, &format!("enc{layer}.mab0"), d, config.mlp_dim);
            }
        }

        let seed_vals = small_normal(&mut rng, d);
        p.add("pool.seed", NdArray::new(vec![1, d], seed_vals).unwrap());
        mab_params(&mut p, &mut rng, "pool.mab", d, config.mlp_dim);

        linear(&mut p, &mut rng, "head.l0", d, config.mlp_dim);
        match config.head {
            HeadKind::Regression | HeadKind::Classifier => {
                linear(&mut p, &mut rng, "head.out", config.mlp_dim, 1);
            }
            HeadKind::Gaussian => {
                linear(&mut p, &mut rng, "head.mean", config.mlp_dim, 1);
                linear(&mut p, &mut rng, "head.var", config.mlp_dim, 1);
            }
        }

        Ok(Self { config, params: p })
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Adds the learnable Neyman-Pearson threshold if absent (classifier only).
    pub fn ensure_np_threshold(&mut self) {
        if self.params.position("np.t").is_none() {
            self.params.add("np.t", NdArray::scalar(0.0));
        }
    }
}

/// A padded batch of variable-size datasets.
///
/// Invariants: masked positions carry value 0, every item has at least one
/// valid row, and `sizes[i] <= max_n`.
#[derive(Clone, Debug)]
pub struct SetBatch {
    /// batch x max_n x m values, zero at padded positions.
    pub values: NdArray,
    /// batch x max_n validity flags.
    pub mask: Mask,
    /// True row count per item.
    pub sizes: Vec<usize>,
}

impl SetBatch {
    /// Packs datasets (each n_i x m) into one padded batch.
    /// `pad_to` overrides the padding width (defaults to max n_i).
    pub fn from_datasets(datasets: &[&NdArray], pad_to: Option<usize>) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let m = datasets[0].shape()[1];
        let max_n = datasets.iter().map(|d| d.shape()[0]).max().unwrap();
        let width = pad_to.unwrap_or(max_n);
        if width < max_n {
            return Err(Error::Config(format!(
                "pad_to {width} smaller than largest set {max_n}"
            )));
        }
        let b = datasets.len();
        let mut values = vec![0.0; b * width * m];
        let mut bits = vec![false; b * width];
        let mut sizes = Vec::with_capacity(b);
        for (i, ds) in datasets.iter().enumerate() {
            if ds.ndim() != 2 || ds.shape()[1] != m {
                return Err(Error::ShapeMismatch {
                    op: "set-batch",
                    lhs: vec![width, m],
                    rhs: ds.shape().to_vec(),
                });
            }
            let n = ds.shape()[0];
            if n == 0 {
                return Err(Error::Config(format!("dataset {i} has no rows")));
            }
            sizes.push(n);
            values[i * width * m..i * width * m + n * m].copy_from_slice(ds.data());
            for r in 0..n {
                bits[i * width + r] = true;
            }
        }
        Ok(Self {
            values: NdArray::new(vec![b, width, m], values)?,
            mask: Mask::new(vec![b, width], bits)?,
            sizes,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn max_n(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn columns(&self) -> usize {
        self.values.shape()[2]
    }
}
