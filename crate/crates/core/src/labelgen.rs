//! Sparse ground-truth projection (point-to-pixel rasterization with a
//! z-buffer) and the two-stage dense pseudo-label generator: stage 1 encodes
//! sparse labels into point prompts plus low-resolution confidence masks,
//! stage 2 runs a promptable segmenter per prompt, filters candidates by
//! stability, suppresses overlapping boxes, and overlays majority-labeled
//! masks in ascending predicted-IoU order.

use crate::datasets::{LabelImage, RgbImage, Scene, IGNORE_SEMANTIC, INVALID_INSTANCE};
use crate::exec;
use crate::geometry::project_points;
use crate::{Error, Result};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct PLGParams {
    /// Low-resolution mask size (rows, cols).
    pub lr_size: (usize, usize),
    /// High confidence value written into prompt masks.
    pub theta_h: f64,
    /// Low confidence value for same-class pixels without instance identity.
    pub theta_l: f64,
    /// Strict lower bound on candidate stability.
    pub theta_stability: f64,
    /// Box IoU cutoff for non-maximum suppression.
    pub theta_box_nms: f64,
    /// Logit binarization threshold.
    pub tau: f64,
    /// Stability threshold offset.
    pub delta: f64,
}

impl Default for PLGParams {
    fn default() -> Self {
        PLGParams {
            lr_size: (256, 256),
            theta_h: 16.0,
            theta_l: 1.0,
            theta_stability: 0.9,
            theta_box_nms: 0.7,
            tau: 0.0,
            delta: 1.0,
        }
    }
}

impl PLGParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_h > self.theta_l && self.theta_l > 0.0) {
            return Err(Error::Contract("plg: need theta_h > theta_l > 0".into()));
        }
        if !(self.theta_stability > 0.0 && self.theta_stability <= 1.0) {
            return Err(Error::Contract("plg: theta_stability must be in (0,1]".into()));
        }
        if !(self.theta_box_nms > 0.0 && self.theta_box_nms <= 1.0) {
            return Err(Error::Contract("plg: theta_box_nms must be in (0,1]".into()));
        }
        if self.delta <= 0.0 {
            return Err(Error::Contract("plg: delta must be > 0".into()));
        }
        Ok(())
    }
}

/// Stage-1 output: one prompt per labeled low-res pixel (row-major order)
/// and a dense low-res confidence mask per prompt. Mask values are limited
/// to {-theta_h, 0, +theta_l, +theta_h}.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    /// (row, col) coordinates in the low-res grid.
    pub points: Vec<(usize, usize)>,
    /// Per prompt, a row-major H_lr x W_lr mask.
    pub masks: Vec<Vec<f64>>,
    pub lr_size: (usize, usize),
}

/// Low-resolution dense mask hint handed to the segmenter.
#[derive(Debug, Clone, PartialEq)]
pub struct LowResMask {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegCandidate {
    /// Row-major H x W logits at full resolution.
    pub logits: Vec<f64>,
    pub iou_prediction: f64,
}

/// Promptable-segmenter port. An implementation must return exactly three
/// candidates per prompt.
pub trait Segmenter: Sync {
    fn segment(
        &self,
        image: &RgbImage,
        prompt: (usize, usize),
        low_res_mask: &LowResMask,
    ) -> Vec<SegCandidate>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskCandidate {
    /// Row-major H x W membership.
    pub mask: Vec<bool>,
    pub iou_prediction: f64,
    pub stability: f64,
    /// Tight inclusive bounds (row0, col0, row1, col1).
    pub bbox: (usize, usize, usize, usize),
}

// ---------------------------------------------------------------------------
// Sparse ground truth
// ---------------------------------------------------------------------------

/// Rasterizes per-point labels at their projected pixels; the smallest depth
/// wins on conflicts, unlabeled pixels stay ignore.
pub fn ppc_gtg(scene: &Scene) -> Result<LabelImage> {
    let corr = project_points(&scene.cloud, &scene.cam)?;
    let (w, h) = (scene.cam.width, scene.cam.height);
    let mut out = LabelImage::all_ignore(w, h);
    let mut zbuf = vec![f64::INFINITY; w * h];
    for c in corr {
        let i = c.v * w + c.u;
        if c.depth < zbuf[i] {
            zbuf[i] = c.depth;
            out.semantic[i] = scene.point_semantic[c.point_index];
            out.instance[i] = scene.point_instance[c.point_index];
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Stage 1
// ---------------------------------------------------------------------------

/// Nearest-neighbor downsampling at cell centers; ignore maps to ignore.
pub fn downsample_labels(labels: &LabelImage, lr_size: (usize, usize)) -> Result<LabelImage> {
    let (lh, lw) = lr_size;
    if lh > labels.height || lw > labels.width || lh == 0 || lw == 0 {
        return Err(Error::Contract(format!(
            "downsample: lr {}x{} incompatible with {}x{}",
            lh, lw, labels.height, labels.width
        )));
    }
    let mut out = LabelImage::all_ignore(lw, lh);
    for r in 0..lh {
        let sr = ((r as f64 + 0.5) * labels.height as f64 / lh as f64).floor() as usize;
        for c in 0..lw {
            let sc = ((c as f64 + 0.5) * labels.width as f64 / lw as f64).floor() as usize;
            let si = labels.idx(sr, sc);
            let di = r * lw + c;
            out.semantic[di] = labels.semantic[si];
            out.instance[di] = labels.instance[si];
        }
    }
    Ok(out)
}

/// Stage-1 prompt encoding. Confidence values are assigned only at labeled
/// (prompt) pixels; pixels with no label stay neutral zero.
pub fn build_prompts(lr: &LabelImage, params: &PLGParams) -> PromptSet {
    let (lh, lw) = (lr.height, lr.width);
    let mut points = Vec::new();
    for r in 0..lh {
        for c in 0..lw {
            if lr.semantic[lr.idx(r, c)] != IGNORE_SEMANTIC {
                points.push((r, c));
            }
        }
    }
    let mut masks = Vec::with_capacity(points.len());
    for &(pr, pc) in &points {
        let pi = lr.idx(pr, pc);
        let cls = lr.semantic[pi];
        let inst = lr.instance[pi];
        let mut mask = vec![0.0; lh * lw];
        for &(qr, qc) in &points {
            let qi = lr.idx(qr, qc);
            if lr.semantic[qi] != cls {
                mask[qi] = -params.theta_h;
            }
        }
        if inst != INVALID_INSTANCE {
            for &(qr, qc) in &points {
                let qi = lr.idx(qr, qc);
                if lr.instance[qi] == inst {
                    mask[qi] = params.theta_h;
                }
            }
        } else {
            for &(qr, qc) in &points {
                let qi = lr.idx(qr, qc);
                if lr.semantic[qi] == cls {
                    mask[qi] = params.theta_l;
                }
            }
        }
        masks.push(mask);
    }
    PromptSet { points, masks, lr_size: (lh, lw) }
}

// ---------------------------------------------------------------------------
// Stage 2
// ---------------------------------------------------------------------------

/// Area ratio between the strict (> tau+delta) and loose (> tau-delta)
/// thresholded masks; 1.0 when the loose mask is empty.
pub fn stability_score(logits: &[f64], tau: f64, delta: f64) -> f64 {
    debug_assert!(delta > 0.0);
    let high = logits.iter().filter(|&&v| v > tau + delta).count();
    let low = logits.iter().filter(|&&v| v > tau - delta).count();
    if low == 0 {
        1.0
    } else {
        high as f64 / low as f64
    }
}

/// Tight inclusive bounding box (row0, col0, row1, col1) of a row-major mask.
pub fn mask_to_box(mask: &[bool], width: usize) -> Result<(usize, usize, usize, usize)> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let (r, c) = (i / width, i % width);
        bounds = Some(match bounds {
            None => (r, c, r, c),
            Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
        });
    }
    bounds.ok_or_else(|| Error::Contract("mask_to_box: empty mask".into()))
}

/// IoU of two inclusive pixel boxes.
pub fn box_iou(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> f64 {
    let area = |(r0, c0, r1, c1): (usize, usize, usize, usize)| {
        ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64
    };
    let ir0 = a.0.max(b.0);
    let ic0 = a.1.max(b.1);
    let ir1 = a.2.min(b.2);
    let ic1 = a.3.min(b.3);
    if ir1 < ir0 || ic1 < ic0 {
        return 0.0;
    }
    let inter = area((ir0, ic0, ir1, ic1));
    inter / (area(a) + area(b) - inter)
}

/// Greedy suppression by descending predicted IoU (insertion order breaks
/// ties); a candidate is dropped iff its box IoU with a kept box exceeds
/// the threshold.
pub fn box_nms(candidates: Vec<MaskCandidate>, theta_box_nms: f64) -> Vec<MaskCandidate> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .iou_prediction
            .partial_cmp(&candidates[a].iou_prediction)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut kept_boxes: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut kept_idx: Vec<usize> = Vec::new();
    for i in order {
        let b = candidates[i].bbox;
        if kept_boxes.iter().all(|&k| box_iou(b, k) <= theta_box_nms) {
            kept_boxes.push(b);
            kept_idx.push(i);
        }
    }
    // return in original insertion order for deterministic downstream sorting
    kept_idx.sort_unstable();
    let mut kept_set = vec![false; candidates.len()];
    for &i in &kept_idx {
        kept_set[i] = true;
    }
    candidates
        .into_iter()
        .enumerate()
        .filter(|(i, _)| kept_set[*i])
        .map(|(_, c)| c)
        .collect()
}

/// Mode of the ground-truth labels under the mask, semantic and instance
/// separately; ties break to the smallest id, all-ignore coverage yields
/// (ignore, invalid).
pub fn assign_majority_labels(mask: &[bool], gt: &LabelImage) -> (u16, u16) {
    let mut sem_counts: BTreeMap<u16, usize> = BTreeMap::new();
    let mut inst_counts: BTreeMap<u16, usize> = BTreeMap::new();
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        if gt.semantic[i] != IGNORE_SEMANTIC {
            *sem_counts.entry(gt.semantic[i]).or_insert(0) += 1;
        }
        if gt.instance[i] != INVALID_INSTANCE {
            *inst_counts.entry(gt.instance[i]).or_insert(0) += 1;
        }
    }
    let mode = |counts: &BTreeMap<u16, usize>, default: u16| {
        counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&id, _)| id)
            .unwrap_or(default)
    };
    (
        mode(&sem_counts, IGNORE_SEMANTIC),
        mode(&inst_counts, INVALID_INSTANCE),
    )
}

/// Writes labeled masks over an all-ignore canvas in ascending predicted-IoU
/// order (stable under ties), later writes overwriting earlier ones.
pub fn overlay_masks(
    labeled: Vec<(MaskCandidate, u16, u16)>,
    width: usize,
    height: usize,
) -> LabelImage {
    let mut out = LabelImage::all_ignore(width, height);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    order.sort_by(|&a, &b| {
        labeled[a]
            .0
            .iou_prediction
            .partial_cmp(&labeled[b].0.iou_prediction)
            .unwrap()
            .then(a.cmp(&b))
    });
    for i in order {
        let (cand, sem, inst) = &labeled[i];
        for (pix, &m) in cand.mask.iter().enumerate() {
            if m {
                out.semantic[pix] = *sem;
                out.instance[pix] = *inst;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// End-to-end
// ---------------------------------------------------------------------------

pub fn generate_pseudo_labels(
    scene: &Scene,
    sparse: &LabelImage,
    segmenter: &dyn Segmenter,
    params: &PLGParams,
) -> Result<LabelImage> {
    generate_impl(scene, sparse, segmenter, params, true)
}

/// Sequential variant regardless of the `parallel` feature; used by benches.
pub fn generate_pseudo_labels_seq(
    scene: &Scene,
    sparse: &LabelImage,
    segmenter: &dyn Segmenter,
    params: &PLGParams,
) -> Result<LabelImage> {
    generate_impl(scene, sparse, segmenter, params, false)
}

fn generate_impl(
    scene: &Scene,
    sparse: &LabelImage,
    segmenter: &dyn Segmenter,
    params: &PLGParams,
    parallel: bool,
) -> Result<LabelImage> {
    params.validate()?;
    let (w, h) = (scene.image.width, scene.image.height);
    if sparse.width != w || sparse.height != h {
        return Err(Error::Contract("plg: sparse labels must match image size".into()));
    }
    let lr = downsample_labels(sparse, params.lr_size)?;
    let prompts = build_prompts(&lr, params);
    if prompts.points.is_empty() {
        return Ok(LabelImage::all_ignore(w, h));
    }
    let (lh, lw) = prompts.lr_size;

    let jobs: Vec<(usize, (usize, usize))> =
        prompts.points.iter().cloned().enumerate().collect();
    let run = |(pi, (pr, pc)): (usize, (usize, usize))| -> Result<Vec<MaskCandidate>> {
        // prompt mapped to full resolution at the low-res cell center
        let fr = ((pr as f64 + 0.5) * h as f64 / lh as f64).floor() as usize;
        let fc = ((pc as f64 + 0.5) * w as f64 / lw as f64).floor() as usize;
        let low_res_mask = LowResMask { rows: lh, cols: lw, values: prompts.masks[pi].clone() };
        let cands = segmenter.segment(&scene.image, (fr, fc), &low_res_mask);
        if cands.len() != 3 {
            return Err(Error::Contract(format!(
                "segmenter returned {} candidates, expected 3",
                cands.len()
            )));
        }
        let mut out = Vec::new();
        for cand in cands {
            if cand.logits.len() != w * h {
                return Err(Error::Contract("segmenter logits size mismatch".into()));
            }
            let mask: Vec<bool> = cand.logits.iter().map(|&v| v > params.tau).collect();
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let stability = stability_score(&cand.logits, params.tau, params.delta);
            if stability > params.theta_stability {
                let bbox = mask_to_box(&mask, w)?;
                out.push(MaskCandidate {
                    mask,
                    iou_prediction: cand.iou_prediction,
                    stability,
                    bbox,
                });
            }
        }
        Ok(out)
    };

    let per_prompt: Vec<Result<Vec<MaskCandidate>>> = if parallel {
        exec::map_ordered(jobs, run)
    } else {
        exec::map_ordered_seq(jobs, run)
    };
    let mut candidates = Vec::new();
    for r in per_prompt {
        candidates.extend(r?);
    }

    let kept = box_nms(candidates, params.theta_box_nms);
    let labeled: Vec<(MaskCandidate, u16, u16)> = kept
        .into_iter()
        .filter_map(|cand| {
            let (sem, inst) = assign_majority_labels(&cand.mask, sparse);
            // a mask covering no labeled pixel carries no information
            (sem != IGNORE_SEMANTIC).then_some((cand, sem, inst))
        })
        .collect();
    Ok(overlay_masks(labeled, w, h))
}

// ---------------------------------------------------------------------------
// Toy segmenter
// ---------------------------------------------------------------------------

/// Deterministic color-quantization segmenter standing in for a promptable
/// foundation model. Candidate 1 is the 4-connected same-color component of
/// the prompt, candidate 2 its 1-pixel dilation restricted to colors within
/// 2 quantization buckets, candidate 3 the image-wide union of same-color
/// pixels. Logits are +2 inside, -2 outside; predicted IoU scores the mask
/// against the sign pattern of the upsampled low-res hint.
#[derive(Debug, Default)]
pub struct ToySegmenter;

fn bucket(px: [u8; 3]) -> [u8; 3] {
    [px[0] >> 5, px[1] >> 5, px[2] >> 5]
}

impl Segmenter for ToySegmenter {
    fn segment(
        &self,
        image: &RgbImage,
        prompt: (usize, usize),
        low_res_mask: &LowResMask,
    ) -> Vec<SegCandidate> {
        let (w, h) = (image.width, image.height);
        let (pr, pc) = prompt;
        assert!(pr < h && pc < w, "prompt out of bounds");
        let pb = bucket(image.pixel(pr, pc));

        // candidate 1: 4-connected component of the prompt's quantized color
        let mut comp = vec![false; w * h];
        let mut stack = vec![(pr, pc)];
        comp[pr * w + pc] = true;
        while let Some((r, c)) = stack.pop() {
            let visit = |nr: usize, nc: usize, comp: &mut Vec<bool>, stack: &mut Vec<(usize, usize)>| {
                let i = nr * w + nc;
                if !comp[i] && bucket(image.pixel(nr, nc)) == pb {
                    comp[i] = true;
                    stack.push((nr, nc));
                }
            };
            if r > 0 {
                visit(r - 1, c, &mut comp, &mut stack);
            }
            if r + 1 < h {
                visit(r + 1, c, &mut comp, &mut stack);
            }
            if c > 0 {
                visit(r, c - 1, &mut comp, &mut stack);
            }
            if c + 1 < w {
                visit(r, c + 1, &mut comp, &mut stack);
            }
        }

        // candidate 2: dilation by one, limited to near colors
        let near = |px: [u8; 3]| {
            let b = bucket(px);
            (0..3).all(|i| (b[i] as i16 - pb[i] as i16).abs() <= 2)
        };
        let mut dilated = comp.clone();
        for r in 0..h {
            for c in 0..w {
                if comp[r * w + c] {
                    continue;
                }
                let touches = (r > 0 && comp[(r - 1) * w + c])
                    || (r + 1 < h && comp[(r + 1) * w + c])
                    || (c > 0 && comp[r * w + c - 1])
                    || (c + 1 < w && comp[r * w + c + 1]);
                if touches && near(image.pixel(r, c)) {
                    dilated[r * w + c] = true;
                }
            }
        }

        // candidate 3: all pixels sharing the quantized color
        let mut global = vec![false; w * h];
        for r in 0..h {
            for c in 0..w {
                if bucket(image.pixel(r, c)) == pb {
                    global[r * w + c] = true;
                }
            }
        }

        // score masks against the upsampled hint signs
        let score = |mask: &[bool]| {
            let mut pos = 0usize;
            let mut neutral = 0usize;
            let mut total = 0usize;
            for r in 0..h {
                let lr_r = r * low_res_mask.rows / h;
                for c in 0..w {
                    if !mask[r * w + c] {
                        continue;
                    }
                    total += 1;
                    let lr_c = c * low_res_mask.cols / w;
                    let v = low_res_mask.values[lr_r * low_res_mask.cols + lr_c];
                    if v > 0.0 {
                        pos += 1;
                    } else if v == 0.0 {
                        neutral += 1;
                    }
                }
            }
            if total == 0 {
                0.0
            } else {
                (pos as f64 + 0.5 * neutral as f64) / total as f64
            }
        };

        [comp, dilated, global]
            .into_iter()
            .map(|mask| {
                let iou_prediction = score(&mask);
                let logits = mask.iter().map(|&m| if m { 2.0 } else { -2.0 }).collect();
                SegCandidate { logits, iou_prediction }
            })
            .collect()
    }
}
