//! Meta-dataset generation, grid test sets, and JSON-lines serialization.
//!
//! File format "MSTA-DS-1": one header line with schema version, task, prior
//! and prior hash, then one JSON object per datapoint. Per-datapoint seeds
//! are recorded so files regenerate byte-identically.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sample::draw_spec;
use super::{
    functional_label, mi_ground_truth, sample_dataset, sample_distribution, standardize,
    DistributionSpec, Family, MarginalTransform, MetaDatapoint, MetaDataset, MetaPrior, Split,
    Task,
};
use crate::error::{Error, Result};
use crate::ndtensor::{hex_digest, NdArray};
use crate::rngstream::{derive_rng, derive_seed, rng_from_seed};

pub const DATASET_MAGIC: &str = "MSTA-DS-1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema: String,
    pub task: Task,
    pub prior: MetaPrior,
    pub prior_hash: String,
    pub seed: u64,
    pub count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatapointRecord {
    /// Row-major values, n x m.
    pub x: Vec<f64>,
    pub n: usize,
    pub m: usize,
    pub label: Vec<f64>,
    pub family: Family,
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transforms: Vec<MarginalTransform>,
    pub split: Split,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicate: Option<usize>,
}

fn label_for(task: Task, spec: &DistributionSpec, data: &NdArray) -> Result<Vec<f64>> {
    match task {
        Task::Normality => Ok(vec![if spec.family == Family::Normal { 0.0 } else { 1.0 }]),
        Task::MutualInfo => Ok(vec![mi_ground_truth(spec)?]),
        descriptive => functional_label(data, descriptive),
    }
}

fn descriptive(task: Task) -> bool {
    matches!(task, Task::Median | Task::Correlation | Task::Winrate | Task::Ot1d)
}

fn make_datapoint(prior: &MetaPrior, master_seed: u64, index: u64) -> Result<MetaDatapoint> {
    let mut spec_rng = derive_rng(master_seed, "dp-spec", index);
    let spec = sample_distribution(prior, &mut spec_rng)?;
    let n = spec_rng.gen_range(prior.n_range.0..=prior.n_range.1);
    // Retry with fresh data streams on degenerate draws (zero-variance column).
    for attempt in 0..32u64 {
        let data_seed = if attempt == 0 {
            derive_seed(master_seed, "dp-data", index)
        } else {
            derive_seed(master_seed, "dp-data-retry", index * 32 + attempt)
        };
        let mut rng = rng_from_seed(data_seed);
        let mut data = sample_dataset(&spec, n, &mut rng)?;
        if prior.standardize && standardize(&mut data).is_err() {
            continue;
        }
        let label = match label_for(prior.task, &spec, &data) {
            Ok(l) => l,
            Err(Error::Spec(_)) if descriptive(prior.task) => continue,
            Err(e) => return Err(e),
        };
        return Ok(MetaDatapoint {
            spec,
            n,
            seed: data_seed,
            label,
            split: prior.split,
            x: descriptive(prior.task).then_some(data),
            spec_id: None,
            replicate: None,
        });
    }
    Err(Error::DatasetIo {
        index: index as usize,
        detail: "no valid draw after 32 attempts".into(),
    })
}

/// Samples `count` datapoints from the prior. Each datapoint derives an
/// independent RNG stream from (master seed, index), so generation is
/// order-independent and reproducible under any worker count.
pub fn generate_meta_dataset(
    prior: &MetaPrior,
    count: usize,
    master_seed: u64,
) -> Result<MetaDataset> {
    prior.validate()?;
    if count < 1 {
        return Err(Error::Config("count must be >= 1".into()));
    }
    let points: Result<Vec<MetaDatapoint>> = (0..count as u64)
        .into_par_iter()
        .map(|i| make_datapoint(prior, master_seed, i))
        .collect();
    Ok(MetaDataset {
        prior: prior.clone(),
        master_seed,
        points: points?,
    })
}

/// Grid-based test set: for each family, `m_params` distinct parameterizations;
/// for each parameterization and each size in the grid, `k` independent
/// datasets tagged with (spec id, n, replicate id).
pub fn grid_test_set(
    prior: &MetaPrior,
    m_params: usize,
    size_grid: &[usize],
    k: usize,
    master_seed: u64,
) -> Result<MetaDataset> {
    prior.validate()?;
    if k < 2 {
        return Err(Error::Config("k must be >= 2 so variance is estimable".into()));
    }
    if m_params < 1 || size_grid.is_empty() {
        return Err(Error::Config("need at least one parameterization and one size".into()));
    }
    let mut specs: Vec<DistributionSpec> = Vec::with_capacity(prior.families.len() * m_params);
    for (fi, fam) in prior.families.iter().enumerate() {
        for j in 0..m_params {
            let mut rng = derive_rng(master_seed, "grid-spec", (fi * m_params + j) as u64);
            specs.push(draw_spec(prior, fam, &mut rng)?);
        }
    }
    // Labels that derive from the spec are shared across a cell.
    let spec_labels: Vec<Option<Vec<f64>>> = specs
        .par_iter()
        .map(|spec| -> Result<Option<Vec<f64>>> {
            if descriptive(prior.task) {
                Ok(None)
            } else {
                Ok(Some(label_for(prior.task, spec, &NdArray::zeros(&[0, 0]))?))
            }
        })
        .collect::<Result<_>>()?;

    let cells: Vec<(usize, usize, usize)> = (0..specs.len())
        .flat_map(|s| {
            size_grid
                .iter()
                .enumerate()
                .flat_map(move |(si, _)| (0..k).map(move |rep| (s, si, rep)))
        })
        .collect();
    let points: Result<Vec<MetaDatapoint>> = cells
        .par_iter()
        .map(|&(s, si, rep)| {
            let n = size_grid[si];
            let cell_index = (s * size_grid.len() + si) * k + rep;
            for attempt in 0..32u64 {
                let data_seed = if attempt == 0 {
                    derive_seed(master_seed, "grid-data", cell_index as u64)
                } else {
                    derive_seed(master_seed, "grid-data-retry", (cell_index as u64) * 32 + attempt)
                };
                let mut rng = rng_from_seed(data_seed);
                let mut data = sample_dataset(&specs[s], n, &mut rng)?;
                if prior.standardize && standardize(&mut data).is_err() {
                    continue;
                }
                let label = match &spec_labels[s] {
                    Some(l) => l.clone(),
                    None => match functional_label(&data, prior.task) {
                        Ok(l) => l,
                        Err(_) => continue,
                    },
                };
                return Ok(MetaDatapoint {
                    spec: specs[s].clone(),
                    n,
                    seed: data_seed,
                    label,
                    split: prior.split,
                    x: descriptive(prior.task).then_some(data),
                    spec_id: Some(s),
                    replicate: Some(rep),
                });
            }
            Err(Error::DatasetIo {
                index: cell_index,
                detail: "no valid draw after 32 attempts".into(),
            })
        })
        .collect();
    Ok(MetaDataset {
        prior: prior.clone(),
        master_seed,
        points: points?,
    })
}

/// Writes the dataset as MSTA-DS-1 JSON lines, materializing lazily stored
/// datasets in parallel chunks.
pub fn write_jsonl(ds: &MetaDataset, path: &Path) -> Result<()> {
    let header = DatasetHeader {
        schema: DATASET_MAGIC.to_string(),
        task: ds.prior.task,
        prior: ds.prior.clone(),
        prior_hash: hex_digest(serde_json::to_string(&ds.prior)?.as_bytes()),
        seed: ds.master_seed,
        count: ds.points.len(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for chunk in ds.points.chunks(4096) {
        let lines: Result<Vec<String>> = chunk
            .par_iter()
            .map(|p| -> Result<String> {
                let x = p.materialize(ds.prior.standardize)?;
                let rec = DatapointRecord {
                    x: x.data().to_vec(),
                    n: p.n,
                    m: p.spec.columns,
                    label: p.label.clone(),
                    family: p.spec.family,
                    params: p.spec.params.clone(),
                    transforms: p.spec.transforms.clone(),
                    split: p.split,
                    seed: p.seed,
                    spec_id: p.spec_id,
                    replicate: p.replicate,
                };
                Ok(serde_json::to_string(&rec)?)
            })
            .collect();
        for line in lines? {
            w.write_all(line.as_bytes())?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads an MSTA-DS-1 file back into memory with materialized values.
pub fn read_jsonl(path: &Path) -> Result<MetaDataset> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header_line = lines.next().ok_or_else(|| Error::DatasetIo {
        index: 0,
        detail: "empty file".into(),
    })??;
    let header: DatasetHeader = serde_json::from_str(&header_line)?;
    if header.schema != DATASET_MAGIC {
        return Err(Error::DatasetIo {
            index: 0,
            detail: format!("unsupported schema `{}`", header.schema),
        });
    }
    let mut points = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let rec: DatapointRecord = serde_json::from_str(&line).map_err(|e| Error::DatasetIo {
            index: i,
            detail: e.to_string(),
        })?;
        let mut spec = DistributionSpec::new(rec.family, rec.params);
        spec.transforms = rec.transforms;
        spec.columns = rec.m;
        points.push(MetaDatapoint {
            spec,
            n: rec.n,
            seed: rec.seed,
            label: rec.label,
            split: rec.split,
            x: Some(NdArray::new(vec![rec.n, rec.m], rec.x).map_err(|e| Error::DatasetIo {
                index: i,
                detail: e.to_string(),
            })?),
            spec_id: rec.spec_id,
            replicate: rec.replicate,
        });
    }
    Ok(MetaDataset {
        prior: header.prior,
        master_seed: header.seed,
        points,
    })
}
