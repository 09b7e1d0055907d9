//! Descriptor extraction, retrieval metrics, re-ranking, mask diagnostics
//! and report files.

mod masks;
mod metrics;
mod rerank;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::error::{config_err, Error, Result};
use crate::model::{ForwardPass, ModelParams};

pub use masks::{
    binary_iou, mask_iou, predict_masks, resize_nearest, uniform_mask_iou, MaskMaps, DEFAULT_MASK_THRESHOLD,
};
pub use metrics::{cmc_map, squared_distances, DistanceMatrix, RetrievalScores};
pub use rerank::{k_reciprocal_rerank, RerankParams};

/// Images per eval-mode forward pass.
pub(crate) const EVAL_BATCH: usize = 50;

/// Which descriptor is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    /// `f = [f_p, g]`.
    Full,
    /// `g` alone.
    Global,
    /// Concatenated part features `l_i`.
    Part,
    /// Concatenated refined part features `p_i`.
    RefinedPart,
}

impl Branch {
    pub const ALL: [Branch; 4] = [Branch::Full, Branch::Global, Branch::Part, Branch::RefinedPart];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Full => "full",
            Branch::Global => "global",
            Branch::Part => "part",
            Branch::RefinedPart => "refined-part",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global-only" => Ok(Branch::Global),
            _ => Branch::ALL
                .into_iter()
                .find(|b| b.name() == s)
                .ok_or_else(|| config_err!("unknown branch '{s}' (expected full, global, part or refined-part)")),
        }
    }
}

/// One descriptor per sample with aligned labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    /// Row-major `len × dim`.
    pub features: Vec<f32>,
    pub dim: usize,
    pub identities: Vec<usize>,
    pub cameras: Vec<usize>,
    /// Manifest indices.
    pub indices: Vec<usize>,
    /// Identifier of the checkpoint that produced the features.
    pub source: String,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Eval-mode descriptors of the given samples.
pub fn extract_indices(
    params: &ModelParams<f32>,
    dataset: &Dataset,
    indices: &[usize],
    branch: Branch,
    normalize: bool,
) -> Result<EmbeddingSet> {
    let m = &dataset.manifest;
    let c = &params.config;
    if (m.image_height, m.image_width, m.channels) != (c.image_height, c.image_width, c.in_channels) {
        return Err(config_err!(
            "checkpoint expects {}×{}×{} images, dataset has {}×{}×{}",
            c.in_channels,
            c.image_height,
            c.image_width,
            m.channels,
            m.image_height,
            m.image_width
        ));
    }
    if !dataset.schema().same_attributes(&c.schema) {
        return Err(config_err!("checkpoint attributes differ from the dataset's"));
    }
    let mut set = EmbeddingSet {
        features: Vec::new(),
        dim: 0,
        identities: Vec::with_capacity(indices.len()),
        cameras: Vec::with_capacity(indices.len()),
        indices: indices.to_vec(),
        source: String::new(),
    };
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = dataset.batch(chunk)?;
        let mut fp = ForwardPass::eval(params);
        let var = match branch {
            Branch::Global => fp.stage1(&batch.images, false)?.g,
            _ => {
                let out = fp.full(&batch.images)?;
                match branch {
                    Branch::Full => out.f,
                    Branch::Part => fp.graph.concat(&out.parts)?,
                    Branch::RefinedPart => fp.graph.concat(&out.refined)?,
                    Branch::Global => unreachable!(),
                }
            }
        };
        let value = fp.graph.value(var);
        set.dim = value.shape()[1];
        set.features.extend_from_slice(value.data());
        set.identities.extend(batch.identities);
        set.cameras.extend(batch.cameras);
    }
    if normalize && set.dim > 0 {
        for row in set.features.chunks_exact_mut(set.dim) {
            let norm = row.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x = (f64::from(*x) / norm) as f32);
            }
        }
    }
    Ok(set)
}

/// Descriptors of every sample in `split`, in manifest order.
pub fn extract_embeddings(
    params: &ModelParams<f32>,
    dataset: &Dataset,
    split: Split,
    branch: Branch,
    normalize: bool,
) -> Result<EmbeddingSet> {
    extract_indices(params, dataset, &dataset.manifest.indices_of(split), branch, normalize)
}

/// Squared Euclidean query-to-gallery distances.
pub fn distance_matrix(query: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<DistanceMatrix> {
    if query.dim != gallery.dim {
        return Err(config_err!("query features are {}-d, gallery features {}-d", query.dim, gallery.dim));
    }
    squared_distances(&query.features, &gallery.features, query.dim)
}

/// Distances among all queries and gallery entries, queries first.
fn joint_distances(query: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<DistanceMatrix> {
    let mut all = query.features.clone();
    all.extend_from_slice(&gallery.features);
    squared_distances(&all, &all, query.dim)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub branch: Branch,
    pub normalize: bool,
    /// Re-ranking parameters; capped to the gallery size before use.
    pub rerank: Option<RerankParams>,
    pub mask_threshold: f32,
    pub checkpoint: String,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            branch: Branch::Full,
            normalize: true,
            rerank: None,
            mask_threshold: DEFAULT_MASK_THRESHOLD,
            checkpoint: String::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cmc: Vec<f64>,
    pub map: f64,
    /// One value per mask; empty without ground truth.
    pub mask_iou: Vec<f64>,
    pub reranked: bool,
    /// Scores after re-ranking, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rerank: Option<RetrievalScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rerank_params: Option<RerankParams>,
    pub checkpoint: String,
    pub seed: u64,
    pub branch: Branch,
    pub num_queries: usize,
    pub skipped_queries: usize,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> f64 {
        match k {
            0 => 0.0,
            _ => self.cmc.get(k - 1).or(self.cmc.last()).copied().unwrap_or(0.0),
        }
    }
}

/// Scores `params` on the dataset's query and gallery splits.
///
/// Mask IoU is filled in when the dataset carries ground truth for the
/// model's mask grouping and the model has been given attribute outputs.
pub fn evaluate(params: &ModelParams<f32>, dataset: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    let query = extract_embeddings(params, dataset, Split::Query, opts.branch, opts.normalize)?;
    let gallery = extract_embeddings(params, dataset, Split::Gallery, opts.branch, opts.normalize)?;
    if query.is_empty() || gallery.is_empty() {
        return Err(config_err!("dataset needs both query and gallery samples"));
    }
    let dist = distance_matrix(&query, &gallery)?;
    let scores = cmc_map(&dist, &query.identities, &query.cameras, &gallery.identities, &gallery.cameras)?;
    let (rerank, rerank_params) = match opts.rerank {
        None => (None, None),
        Some(p) => {
            let p = p.capped(gallery.len());
            let full = joint_distances(&query, &gallery)?;
            let d = k_reciprocal_rerank(&full, query.len(), p)?;
            let s = cmc_map(&d, &query.identities, &query.cameras, &gallery.identities, &gallery.cameras)?;
            (Some(s), Some(p))
        }
    };
    let mask_iou = if dataset.has_gt_masks() && params.config.schema == *dataset.schema() {
        mask_iou(params, dataset, opts.mask_threshold)?
    } else {
        Vec::new()
    };
    Ok(EvalReport {
        cmc: scores.cmc,
        map: scores.map,
        mask_iou,
        reranked: rerank.is_some(),
        rerank,
        rerank_params,
        checkpoint: opts.checkpoint.clone(),
        seed: opts.seed,
        branch: opts.branch,
        num_queries: scores.num_queries,
        skipped_queries: scores.skipped_queries,
    })
}

fn write_cmc(path: &Path, cmc: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Internal(format!("{}: {e}", path.display())))?;
    let fail = |e: csv::Error| Error::Internal(format!("{}: {e}", path.display()));
    w.write_record(["k", "accuracy"]).map_err(fail)?;
    for (k, acc) in cmc.iter().enumerate() {
        w.write_record([(k + 1).to_string(), acc.to_string()]).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `report.json` and `cmc.csv` (plus `cmc_reranked.csv`) under `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("report.json");
    fs::write(&json, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&json, e))?;
    let cmc = dir.join("cmc.csv");
    write_cmc(&cmc, &report.cmc)?;
    let mut written = vec![json, cmc];
    if let Some(r) = &report.rerank {
        let path = dir.join("cmc_reranked.csv");
        write_cmc(&path, &r.cmc)?;
        written.push(path);
    }
    Ok(written)
}

/// Dumps every learned mask of the given samples, upsampled to image size,
/// as `probe{index}_mask{k}.pgm`.
pub fn dump_masks(params: &ModelParams<f32>, dataset: &Dataset, indices: &[usize], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (maps, h, w) = predict_masks(params, dataset, indices)?;
    let (ih, iw) = (dataset.manifest.image_height, dataset.manifest.image_width);
    let mut written = Vec::new();
    for (&i, sample) in indices.iter().zip(&maps) {
        for (k, map) in sample.iter().enumerate() {
            let pixels: Vec<u8> = resize_nearest(map, h, w, ih, iw)
                .into_iter()
                .map(crate::dataset::quantize)
                .collect();
            let path = dir.join(format!("probe{i:05}_mask{k}.pgm"));
            image::save_buffer_with_format(
                &path,
                &pixels,
                iw as u32,
                ih as u32,
                image::ExtendedColorType::L8,
                image::ImageFormat::Pnm,
            )
            .map_err(|e| Error::Internal(format!("{}: {e}", path.display())))?;
            written.push(path);
        }
    }
    Ok(written)
}
