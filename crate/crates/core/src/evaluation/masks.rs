//! Agreement between learned attention masks and ground-truth zones.

use crate::dataset::{Dataset, Split};
use crate::error::{input_err, Result};
use crate::model::{ForwardPass, ModelParams};

pub const DEFAULT_MASK_THRESHOLD: f32 = 0.5;

/// Nearest-neighbour resampling of an `h × w` map to `out_h × out_w`.
pub fn resize_nearest(map: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = y * h / out_h;
        for x in 0..out_w {
            out.push(map[sy * w + x * w / out_w]);
        }
    }
    out
}

/// IoU of `mask ≥ threshold`, resampled to the ground truth's size, with the
/// binary ground truth. Two empty regions count as a perfect match.
pub fn binary_iou(mask: &[f32], h: usize, w: usize, gt: &[u8], gt_h: usize, gt_w: usize, threshold: f32) -> f64 {
    let pred = resize_nearest(mask, h, w, gt_h, gt_w);
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p >= threshold, g != 0);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Learned masks of a batch as `[sample][mask]` maps plus their size.
pub type MaskMaps = (Vec<Vec<Vec<f32>>>, usize, usize);

/// Runs the detectors in eval mode on the given samples.
pub fn predict_masks(params: &ModelParams<f32>, dataset: &Dataset, indices: &[usize]) -> Result<MaskMaps> {
    let mut out = Vec::with_capacity(indices.len());
    let (mut h, mut w) = (0, 0);
    for chunk in indices.chunks(super::EVAL_BATCH) {
        let batch = dataset.batch(chunk)?;
        let mut fp = ForwardPass::eval(params);
        let s1 = fp.stage1(&batch.images, true)?;
        let maps: Vec<_> = s1.masks.iter().map(|&m| fp.graph.value(m).clone()).collect();
        let shape = maps[0].shape();
        (h, w) = (shape[2], shape[3]);
        for i in 0..chunk.len() {
            out.push(maps.iter().map(|m| m.data()[i * h * w..(i + 1) * h * w].to_vec()).collect());
        }
    }
    Ok((out, h, w))
}

fn check_grouping(params: &ModelParams<f32>, dataset: &Dataset) -> Result<()> {
    if !dataset.has_gt_masks() {
        return Err(input_err!("dataset has no ground-truth masks"));
    }
    if params.config.schema != *dataset.schema() {
        return Err(input_err!(
            "model shares masks differently ({} masks) from the dataset's ground truth ({} zones)",
            params.config.num_masks,
            dataset.schema().num_mask_groups
        ));
    }
    Ok(())
}

fn test_indices(dataset: &Dataset) -> Vec<usize> {
    let mut idx = dataset.manifest.indices_of(Split::Query);
    idx.extend(dataset.manifest.indices_of(Split::Gallery));
    idx.sort_unstable();
    idx
}

/// Mean IoU per mask over the test split (query and gallery).
pub fn mask_iou(params: &ModelParams<f32>, dataset: &Dataset, threshold: f32) -> Result<Vec<f64>> {
    check_grouping(params, dataset)?;
    let idx = test_indices(dataset);
    if idx.is_empty() {
        return Err(input_err!("dataset has no test samples"));
    }
    let (maps, h, w) = predict_masks(params, dataset, &idx)?;
    let (gh, gw) = (dataset.manifest.image_height, dataset.manifest.image_width);
    let k = params.config.num_masks;
    let mut sums = vec![0.0; k];
    for (&i, sample_maps) in idx.iter().zip(&maps) {
        let gt = dataset.sample(i)?.gt_masks.expect("checked above");
        for (m, map) in sample_maps.iter().enumerate() {
            sums[m] += binary_iou(map, h, w, &gt[m * gh * gw..(m + 1) * gh * gw], gh, gw, threshold);
        }
    }
    Ok(sums.into_iter().map(|s| s / idx.len() as f64).collect())
}

/// IoU a mask covering the whole image would score: the mean zone area
/// fraction per mask over the test split.
pub fn uniform_mask_iou(dataset: &Dataset) -> Result<Vec<f64>> {
    if !dataset.has_gt_masks() {
        return Err(input_err!("dataset has no ground-truth masks"));
    }
    let idx = test_indices(dataset);
    let k = dataset.schema().num_mask_groups;
    let area = dataset.manifest.image_height * dataset.manifest.image_width;
    let mut sums = vec![0.0; k];
    for &i in &idx {
        let gt = dataset.sample(i)?.gt_masks.expect("checked above");
        for (m, s) in sums.iter_mut().enumerate() {
            *s += gt[m * area..(m + 1) * area].iter().filter(|&&b| b != 0).count() as f64 / area as f64;
        }
    }
    Ok(sums.into_iter().map(|s| s / idx.len().max(1) as f64).collect())
}
