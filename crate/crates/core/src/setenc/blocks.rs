//! Forward passes: row embedding, attention blocks, normalization, pooling,
//! and the task heads.

use super::{EncoderKind, HeadKind, Model, NormKind, SetBatch};
use crate::error::{Error, Result};
use crate::ndtensor::{Graph, Mask, NdArray, TensorId};

/// Parameter leaves bound into one graph, aligned with `model.params` order.
pub struct BoundModel {
    pub ids: Vec<TensorId>,
    positions: std::collections::HashMap<String, usize>,
}

impl BoundModel {
    /// Creates one leaf per parameter. `trainable` leaves collect gradients.
    pub fn bind(g: &mut Graph, model: &Model, trainable: bool) -> Self {
        let mut ids = Vec::with_capacity(model.params.len());
        let mut positions = std::collections::HashMap::new();
        for (i, (name, arr)) in model.params.entries().iter().enumerate() {
            ids.push(g.leaf(arr, trainable));
            positions.insert(name.clone(), i);
        }
        Self { ids, positions }
    }

    fn id(&self, name: &str) -> TensorId {
        self.ids[*self
            .positions
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))]
    }
}

fn linear(g: &mut Graph, x: TensorId, p: &BoundModel, name: &str) -> Result<TensorId> {
    let y = g.matmul(x, p.id(&format!("{name}.w")))?;
    g.add(y, p.id(&format!("{name}.b")))
}

/// Normalization over a [B, N, D] set. SetNorm standardizes jointly over all
/// unmasked positions and features of one item; LayerNorm per position over
/// features. Zero variance is guarded by epsilon 1e-5.
pub fn norm(
    g: &mut Graph,
    x: TensorId,
    mask: Option<&Mask>,
    kind: NormKind,
    p: &BoundModel,
    name: &str,
) -> Result<TensorId> {
    let eps = 1e-5;
    let normalized = match kind {
        NormKind::LayerNorm => {
            let m = g.mean(x, &[2])?;
            let centered = g.sub(x, m)?;
            let sq = g.square(centered);
            let var = g.mean(sq, &[2])?;
            let var_eps = g.add_scalar(var, eps);
            let denom = g.sqrt(var_eps)?;
            g.div(centered, denom)?
        }
        NormKind::SetNorm => {
            let shape = g.shape(x).to_vec();
            let (b, n, d) = (shape[0], shape[1], shape[2]);
            match mask {
                None => {
                    let m = g.mean(x, &[1, 2])?;
                    let centered = g.sub(x, m)?;
                    let sq = g.square(centered);
                    let var = g.mean(sq, &[1, 2])?;
                    let var_eps = g.add_scalar(var, eps);
                    let denom = g.sqrt(var_eps)?;
                    g.div(centered, denom)?
                }
                Some(mask) => {
                    // Statistics over unmasked positions only.
                    let mut maskf = vec![0.0; b * n];
                    let mut counts = vec![0.0; b];
                    for i in 0..b {
                        for r in 0..n {
                            if mask.bits()[i * n + r] {
                                maskf[i * n + r] = 1.0;
                                counts[i] += 1.0;
                            }
                        }
                    }
                    let maskf = g.constant(NdArray::new(vec![b, n, 1], maskf)?);
                    let counts: Vec<f64> = counts.iter().map(|c| c * d as f64).collect();
                    let counts = g.constant(NdArray::new(vec![b, 1, 1], counts)?);
                    let xm = g.mul(x, maskf)?;
                    let s = g.sum(xm, &[1, 2])?;
                    let m = g.div(s, counts)?;
                    let centered = g.sub(x, m)?;
                    let centered_m = g.mul(centered, maskf)?;
                    let sq = g.square(centered_m);
                    let ssq = g.sum(sq, &[1, 2])?;
                    let var = g.div(ssq, counts)?;
                    let var_eps = g.add_scalar(var, eps);
                    let denom = g.sqrt(var_eps)?;
                    g.div(centered, denom)?
                }
            }
        }
    };
    let scaled = g.mul(normalized, p.id(&format!("{name}.g")))?;
    g.add(scaled, p.id(&format!("{name}.b")))
}

/// Multihead attention of queries over keys/values with optional key mask.
fn attention(
    g: &mut Graph,
    q: TensorId,
    kv: TensorId,
    kv_mask: Option<&Mask>,
    heads: usize,
    p: &BoundModel,
    prefix: &str,
) -> Result<TensorId> {
    let qs = g.shape(q).to_vec();
    let (b, nq, d) = (qs[0], qs[1], qs[2]);
    let nk = g.shape(kv)[1];
    let dh = d / heads;

    let split = |g: &mut Graph, t: TensorId, n: usize| -> Result<TensorId> {
        let r = g.reshape(t, &[b, n, heads, dh])?;
        g.permute(r, &[0, 2, 1, 3]) // [B, H, N, Dh]
    };
    let qp = linear(g, q, p, &format!("{prefix}.q"))?;
    let kp = linear(g, kv, p, &format!("{prefix}.k"))?;
    let vp = linear(g, kv, p, &format!("{prefix}.v"))?;
    let qh = split(g, qp, nq)?;
    let kh = split(g, kp, nk)?;
    let vh = split(g, vp, nk)?;

    let kt = g.transpose(kh)?; // [B, H, Dh, Nk]
    let scores = g.matmul(qh, kt)?; // [B, H, Nq, Nk]
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = match kv_mask {
        Some(mask) => {
            let expanded = mask.unsqueeze(&[1, 2]); // [B, 1, 1, Nk]
            g.masked_softmax(scores, &expanded)?
        }
        None => g.softmax(scores, 3)?,
    };
    let ctx = g.matmul(weights, vh)?; // [B, H, Nq, Dh]
    let merged = g.permute(ctx, &[0, 2, 1, 3])?;
    let merged = g.reshape(merged, &[b, nq, d])?;
    linear(g, merged, p, &format!("{prefix}.o"))
}

/// Multihead attention block (pre-normalization):
/// `h = q + attn(norm1(q), norm1(kv)); out = h + ff(norm2(h))`.
/// Output is permutation-equivariant in queries and invariant to
/// permutations of keys/values.
#[allow(clippy::too_many_arguments)]
pub fn mab(
    g: &mut Graph,
    q: TensorId,
    q_mask: Option<&Mask>,
    kv: TensorId,
    kv_mask: Option<&Mask>,
    model: &Model,
    p: &BoundModel,
    prefix: &str,
) -> Result<TensorId> {
    let cfg = &model.config;
    let qn = norm(g, q, q_mask, cfg.norm, p, &format!("{prefix}.norm1"))?;
    let kvn = norm(g, kv, kv_mask, cfg.norm, p, &format!("{prefix}.norm1"))?;
    let att = attention(g, qn, kvn, kv_mask, cfg.heads, p, prefix)?;
    let h = g.add(q, att)?;
    let hn = norm(g, h, q_mask, cfg.norm, p, &format!("{prefix}.norm2"))?;
    let f0 = linear(g, hn, p, &format!("{prefix}.ff0"))?;
    let f0 = g.gelu(f0);
    let f1 = linear(g, f0, p, &format!("{prefix}.ff1"))?;
    g.add(h, f1)
}

/// Induced set attention: `h = mab(I, x); out = mab(x, h)`.
/// Cost is linear in set size for a fixed inducing count.
pub fn isab(
    g: &mut Graph,
    x: TensorId,
    mask: &Mask,
    model: &Model,
    p: &BoundModel,
    layer: usize,
) -> Result<TensorId> {
    let b = g.shape(x)[0];
    let d = model.config.model_dim;
    let i = model.config.inducing_points;
    let ind = p.id(&format!("enc{layer}.ind"));
    let ind = g.reshape(ind, &[1, i, d])?;
    let ind = g.broadcast_to(ind, &[b, i, d])?;
    let h = mab(g, ind, None, x, Some(mask), model, p, &format!("enc{layer}.mab0"))?;
    mab(g, x, Some(mask), h, None, model, p, &format!("enc{layer}.mab1"))
}

/// Row-wise input projection; identical map for every row.
pub fn embed_rows(g: &mut Graph, batch: &SetBatch, model: &Model, p: &BoundModel) -> Result<TensorId> {
    if batch.columns() != model.config.input_columns {
        return Err(Error::Config(format!(
            "batch has {} columns, model expects {}",
            batch.columns(),
            model.config.input_columns
        )));
    }
    let x = g.leaf(&batch.values, false);
    let h = linear(g, x, p, "embed.l0")?;
    let h = g.gelu(h);
    linear(g, h, p, "embed.l1")
}

/// Pooling by multihead attention with one learned seed query; the output is
/// invariant to row permutations.
pub fn pool(
    g: &mut Graph,
    x: TensorId,
    mask: &Mask,
    model: &Model,
    p: &BoundModel,
) -> Result<TensorId> {
    let b = g.shape(x)[0];
    let d = model.config.model_dim;
    let seed = p.id("pool.seed");
    let seed = g.reshape(seed, &[1, 1, d])?;
    let seed = g.broadcast_to(seed, &[b, 1, d])?;
    let out = mab(g, seed, None, x, Some(mask), model, p, "pool.mab")?;
    g.reshape(out, &[b, d])
}

/// Full encoder: embed -> L blocks -> pool, producing [B, model_dim].
pub fn encode_with(
    g: &mut Graph,
    model: &Model,
    p: &BoundModel,
    batch: &SetBatch,
) -> Result<TensorId> {
    let mut h = embed_rows(g, batch, model, p)?;
    for layer in 0..model.config.layers {
        h = match model.config.kind {
            EncoderKind::SetTransformer => isab(g, h, &batch.mask, model, p, layer)?,
            EncoderKind::VanillaTransformer => mab(
                g,
                h,
                Some(&batch.mask),
                h,
                Some(&batch.mask),
                model,
                p,
                &format!("enc{layer}.mab0"),
            )?,
        };
    }
    pool(g, h, &batch.mask, model, p)
}

/// Task-head outputs, one value per batch item.
#[derive(Clone, Copy, Debug)]
pub enum HeadOutput {
    Regression { pred: TensorId },
    /// Variance comes through softplus with a 1e-6 floor, so it is strictly positive.
    Gaussian { mean: TensorId, var: TensorId },
    /// `prob = sigmoid(score)`; the raw score feeds the Neyman-Pearson loss.
    Classifier { prob: TensorId, score: TensorId },
}

/// Prediction head over dataset embeddings [B, D].
pub fn head_with(
    g: &mut Graph,
    model: &Model,
    p: &BoundModel,
    embedding: TensorId,
) -> Result<HeadOutput> {
    let b = g.shape(embedding)[0];
    let h = linear(g, embedding, p, "head.l0")?;
    let h = g.gelu(h);
    let to_vec = |g: &mut Graph, t: TensorId| g.reshape(t, &[b]);
    match model.config.head {
        HeadKind::Regression => {
            let out = linear(g, h, p, "head.out")?;
            Ok(HeadOutput::Regression {
                pred: to_vec(g, out)?,
            })
        }
        HeadKind::Gaussian => {
            let mean = linear(g, h, p, "head.mean")?;
            let raw = linear(g, h, p, "head.var")?;
            let sp = g.softplus(raw);
            let var = g.add_scalar(sp, 1e-6);
            Ok(HeadOutput::Gaussian {
                mean: to_vec(g, mean)?,
                var: to_vec(g, var)?,
            })
        }
        HeadKind::Classifier => {
            let score = linear(g, h, p, "head.out")?;
            let score = to_vec(g, score)?;
            let prob = g.sigmoid(score);
            Ok(HeadOutput::Classifier { prob, score })
        }
    }
}

/// Binds parameters, encodes the batch, and applies the head.
pub fn forward(
    g: &mut Graph,
    model: &Model,
    batch: &SetBatch,
    trainable: bool,
) -> Result<(HeadOutput, BoundModel)> {
    let bound = BoundModel::bind(g, model, trainable);
    let emb = encode_with(g, model, &bound, batch)?;
    let out = head_with(g, model, &bound, emb)?;
    Ok((out, bound))
}
