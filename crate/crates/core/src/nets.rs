//! Patch-branch teacher and point-branch student encoders.
//!
//! The teacher is a stack of frozen linear stages over a patch grid, each
//! wrapped by a trainable low-rank adapter, with per-stage patch decoders.
//! The student voxelizes the cloud at doubling edge lengths, pools, applies
//! a linear+ReLU, and unpools back to points; per-stage heads and a final
//! head over the concatenated stage features produce class probabilities.

use crate::autodiff::{Graph, NodeId};
use crate::datasets::{RgbImage, IGNORE_SEMANTIC};
use crate::geometry::{voxelize, CameraModel, PixelCorrespondence, PointCloud};
use crate::peft::{AdaLoraAdapter, AdaLoraLeaves};
use crate::tensor::Tensor2D;
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::atomic::{AtomicU64, Ordering};

pub const POINT_FEATURES: usize = 4;
pub const PATCH_FEATURES: usize = 5;

fn init_linear(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2D {
    let bound = 1.0 / (rows as f64).sqrt();
    Tensor2D::fill_uniform(rows, cols, -bound, bound, rng)
}

// ---------------------------------------------------------------------------
// Student
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct StudentStage {
    /// in x h stage linear.
    pub w: Tensor2D,
    pub b: Tensor2D,
    /// h x C per-stage classifier.
    pub head_w: Tensor2D,
    pub head_b: Tensor2D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentNet {
    pub stages: Vec<StudentStage>,
    /// (L*h) x C classifier over concatenated stage features.
    pub final_w: Tensor2D,
    pub final_b: Tensor2D,
    pub hidden: usize,
    pub class_count: usize,
    /// Stage l uses edge base_voxel_edge * 2^l.
    pub base_voxel_edge: f64,
}

pub struct StudentLeaves {
    pub stages: Vec<[NodeId; 4]>,
    pub final_w: NodeId,
    pub final_b: NodeId,
}

impl StudentLeaves {
    pub fn ordered(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for s in &self.stages {
            out.extend_from_slice(s);
        }
        out.push(self.final_w);
        out.push(self.final_b);
        out
    }
}

pub struct StudentForward {
    /// Per stage, N x h point features.
    pub features: Vec<NodeId>,
    /// Per stage, N x C probabilities.
    pub stage_probs: Vec<NodeId>,
    /// N x C probabilities from the concatenated-feature head.
    pub final_probs: NodeId,
}

impl StudentNet {
    pub fn new(
        stage_count: usize,
        hidden: usize,
        class_count: usize,
        base_voxel_edge: f64,
        seed: u64,
    ) -> Result<Self> {
        if stage_count == 0 || hidden == 0 || class_count == 0 {
            return Err(Error::Contract("student: stages, hidden, classes must be >= 1".into()));
        }
        if base_voxel_edge <= 0.0 {
            return Err(Error::Contract("student: base voxel edge must be > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(stage_count);
        for l in 0..stage_count {
            let input = if l == 0 { POINT_FEATURES } else { hidden };
            stages.push(StudentStage {
                w: init_linear(&mut rng, input, hidden),
                b: Tensor2D::zeros(1, hidden),
                head_w: init_linear(&mut rng, hidden, class_count),
                head_b: Tensor2D::zeros(1, class_count),
            });
        }
        let final_w = init_linear(&mut rng, stage_count * hidden, class_count);
        Ok(StudentNet {
            stages,
            final_w,
            final_b: Tensor2D::zeros(1, class_count),
            hidden,
            class_count,
            base_voxel_edge,
        })
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn register_leaves(&self, g: &mut Graph) -> StudentLeaves {
        let stages = self
            .stages
            .iter()
            .map(|s| {
                [
                    g.leaf(s.w.clone()),
                    g.leaf(s.b.clone()),
                    g.leaf(s.head_w.clone()),
                    g.leaf(s.head_b.clone()),
                ]
            })
            .collect();
        StudentLeaves {
            stages,
            final_w: g.leaf(self.final_w.clone()),
            final_b: g.leaf(self.final_b.clone()),
        }
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor2D> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.push(&mut s.w);
            out.push(&mut s.b);
            out.push(&mut s.head_w);
            out.push(&mut s.head_b);
        }
        out.push(&mut self.final_w);
        out.push(&mut self.final_b);
        out
    }

    /// Per-scene normalized (x, y, z, intensity) rows: centered on the
    /// centroid and divided by the max point radius.
    pub fn input_features(cloud: &PointCloud) -> Result<Tensor2D> {
        if cloud.is_empty() {
            return Err(Error::Contract("student: empty point cloud".into()));
        }
        let n = cloud.len() as f64;
        let (mut cx, mut cy, mut cz) = (0.0, 0.0, 0.0);
        for p in &cloud.points {
            cx += p.x;
            cy += p.y;
            cz += p.z;
        }
        cx /= n;
        cy /= n;
        cz /= n;
        let mut radius: f64 = 0.0;
        for p in &cloud.points {
            let d = ((p.x - cx).powi(2) + (p.y - cy).powi(2) + (p.z - cz).powi(2)).sqrt();
            radius = radius.max(d);
        }
        let scale = if radius > 0.0 { radius } else { 1.0 };
        let mut data = Vec::with_capacity(cloud.len() * POINT_FEATURES);
        for p in &cloud.points {
            data.push((p.x - cx) / scale);
            data.push((p.y - cy) / scale);
            data.push((p.z - cz) / scale);
            data.push(p.intensity);
        }
        Tensor2D::from_vec(cloud.len(), POINT_FEATURES, data)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        leaves: &StudentLeaves,
        cloud: &PointCloud,
    ) -> Result<StudentForward> {
        let feats0 = g.leaf(Self::input_features(cloud)?);
        let mut features = Vec::with_capacity(self.stage_count());
        let mut stage_probs = Vec::with_capacity(self.stage_count());
        let mut x = feats0;
        for (l, ids) in leaves.stages.iter().enumerate() {
            let edge = self.base_voxel_edge * (1u64 << l) as f64;
            let part = voxelize(cloud, edge)?;
            let pooled = g.group_mean_rows(x, &part.assignment, part.voxel_count)?;
            let lin = g.matmul(pooled, ids[0])?;
            let lin = g.add_bias(lin, ids[1])?;
            let act = g.relu(lin);
            let feat = g.gather_rows(act, &part.assignment)?;
            let logits = g.matmul(feat, ids[2])?;
            let logits = g.add_bias(logits, ids[3])?;
            stage_probs.push(g.softmax_rows(logits));
            features.push(feat);
            x = feat;
        }
        let concat = g.concat_cols(&features)?;
        let logits = g.matmul(concat, leaves.final_w)?;
        let logits = g.add_bias(logits, leaves.final_b)?;
        let final_probs = g.softmax_rows(logits);
        Ok(StudentForward { features, stage_probs, final_probs })
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for s in &self.stages {
            n += s.w.data.len() + s.b.data.len() + s.head_w.data.len() + s.head_b.data.len();
        }
        n + self.final_w.data.len() + self.final_b.data.len()
    }
}

// ---------------------------------------------------------------------------
// Teacher
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PatchDecoder {
    /// in x (h/2) upscaling linear.
    pub up_w: Tensor2D,
    pub up_b: Tensor2D,
    /// (h/2) x C classifier.
    pub head_w: Tensor2D,
    pub head_b: Tensor2D,
}

impl PatchDecoder {
    fn new(rng: &mut ChaCha8Rng, input: usize, half: usize, class_count: usize) -> Self {
        PatchDecoder {
            up_w: init_linear(rng, input, half),
            up_b: Tensor2D::zeros(1, half),
            head_w: init_linear(rng, half, class_count),
            head_b: Tensor2D::zeros(1, class_count),
        }
    }

    fn param_count(&self) -> usize {
        self.up_w.data.len() + self.up_b.data.len() + self.head_w.data.len() + self.head_b.data.len()
    }
}

pub struct TeacherNet {
    /// Patch grid is grid x grid cells.
    pub grid: usize,
    /// Frozen h x 5 patch embedding, applied as x . W^T.
    pub embed_w: Tensor2D,
    /// One adapter-wrapped frozen h x h linear per stage.
    pub stages: Vec<AdaLoraAdapter>,
    pub decoders: Vec<PatchDecoder>,
    /// Decodes the concatenation of all stage features.
    pub final_decoder: PatchDecoder,
    pub hidden: usize,
    pub class_count: usize,
    forward_calls: AtomicU64,
}

pub struct TeacherLeaves {
    pub adapters: Vec<AdaLoraLeaves>,
    pub decoders: Vec<[NodeId; 4]>,
    pub final_decoder: [NodeId; 4],
}

impl TeacherLeaves {
    pub fn ordered(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for a in &self.adapters {
            out.push(a.p);
            out.push(a.lambda);
            out.push(a.q);
        }
        for d in &self.decoders {
            out.extend_from_slice(d);
        }
        out.extend_from_slice(&self.final_decoder);
        out
    }

    pub fn lambda_ids(&self) -> Vec<NodeId> {
        self.adapters.iter().map(|a| a.lambda).collect()
    }
}

pub struct TeacherForward {
    pub leaves: TeacherLeaves,
    /// Per stage, G^2 x h patch features.
    pub stage_features: Vec<NodeId>,
    /// Per stage, G^2 x C decoded patch probabilities.
    pub stage_probs: Vec<NodeId>,
    /// G^2 x C probabilities from the concatenated-feature decoder.
    pub final_probs: NodeId,
    /// Summed orthogonality regularizer over all stage adapters, 1x1.
    pub orth: NodeId,
}

impl TeacherNet {
    pub fn new(
        grid: usize,
        stage_count: usize,
        hidden: usize,
        class_count: usize,
        adapter_rank: usize,
        seed: u64,
    ) -> Result<Self> {
        if grid == 0 || stage_count == 0 || class_count == 0 {
            return Err(Error::Contract("teacher: grid, stages, classes must be >= 1".into()));
        }
        if hidden < 2 || hidden % 2 != 0 {
            return Err(Error::Contract("teacher: hidden must be even and >= 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed_w = init_linear(&mut rng, hidden, PATCH_FEATURES);
        let mut stages = Vec::with_capacity(stage_count);
        for l in 0..stage_count {
            let w0 = init_linear(&mut rng, hidden, hidden);
            stages.push(AdaLoraAdapter::new(w0, adapter_rank, seed ^ (0x5EED << 8) ^ l as u64)?);
        }
        let half = hidden / 2;
        let decoders = (0..stage_count)
            .map(|_| PatchDecoder::new(&mut rng, hidden, half, class_count))
            .collect();
        let final_decoder = PatchDecoder::new(&mut rng, stage_count * hidden, half, class_count);
        Ok(TeacherNet {
            grid,
            embed_w,
            stages,
            decoders,
            final_decoder,
            hidden,
            class_count,
            forward_calls: AtomicU64::new(0),
        })
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn forward_count(&self) -> u64 {
        self.forward_calls.load(Ordering::SeqCst)
    }

    /// G^2 rows of (mean RGB in [0,1], normalized cell center row, col).
    pub fn patch_features(image: &RgbImage, grid: usize) -> Result<Tensor2D> {
        if grid == 0 || image.height % grid != 0 || image.width % grid != 0 {
            return Err(Error::Contract(format!(
                "teacher: image {}x{} not divisible into a {grid}x{grid} grid",
                image.width, image.height
            )));
        }
        let (ch, cw) = (image.height / grid, image.width / grid);
        let mut data = Vec::with_capacity(grid * grid * PATCH_FEATURES);
        for pr in 0..grid {
            for pc in 0..grid {
                let (mut r, mut g, mut b) = (0.0, 0.0, 0.0);
                for dy in 0..ch {
                    for dx in 0..cw {
                        let px = image.pixel(pr * ch + dy, pc * cw + dx);
                        r += px[0] as f64;
                        g += px[1] as f64;
                        b += px[2] as f64;
                    }
                }
                let inv = 1.0 / (255.0 * (ch * cw) as f64);
                data.push(r * inv);
                data.push(g * inv);
                data.push(b * inv);
                data.push((pr as f64 + 0.5) / grid as f64);
                data.push((pc as f64 + 0.5) / grid as f64);
            }
        }
        Tensor2D::from_vec(grid * grid, PATCH_FEATURES, data)
    }

    /// Patch-grid index a pixel (v row, u col) lands in under nearest-cell
    /// assignment.
    pub fn pixel_patch_index(&self, v: usize, u: usize, height: usize, width: usize) -> usize {
        (v * self.grid / height) * self.grid + u * self.grid / width
    }

    fn decode(
        g: &mut Graph,
        ids: &[NodeId; 4],
        x: NodeId,
    ) -> Result<NodeId> {
        let up = g.matmul(x, ids[0])?;
        let up = g.add_bias(up, ids[1])?;
        let logits = g.matmul(up, ids[2])?;
        let logits = g.add_bias(logits, ids[3])?;
        Ok(g.softmax_rows(logits))
    }

    pub fn forward(&self, g: &mut Graph, image: &RgbImage) -> Result<TeacherForward> {
        self.forward_calls.fetch_add(1, Ordering::SeqCst);
        let feats0 = g.leaf(Self::patch_features(image, self.grid)?);

        let mut adapter_leaves = Vec::with_capacity(self.stage_count());
        let mut stage_features = Vec::with_capacity(self.stage_count());
        let embed = g.leaf(self.embed_w.clone());
        let embed_t = g.transpose(embed);
        let mut x = g.matmul(feats0, embed_t)?;
        x = g.relu(x);
        let mut orth: Option<NodeId> = None;
        for adapter in &self.stages {
            let (out, leaves) = adapter.forward_graph(g, x)?;
            let reg = adapter.orth_reg_graph(g, &leaves)?;
            orth = Some(match orth {
                Some(acc) => g.add(acc, reg)?,
                None => reg,
            });
            x = g.relu(out);
            stage_features.push(x);
            adapter_leaves.push(leaves);
        }

        let decoder_leaves: Vec<[NodeId; 4]> = self
            .decoders
            .iter()
            .map(|d| {
                [
                    g.leaf(d.up_w.clone()),
                    g.leaf(d.up_b.clone()),
                    g.leaf(d.head_w.clone()),
                    g.leaf(d.head_b.clone()),
                ]
            })
            .collect();
        let final_ids = [
            g.leaf(self.final_decoder.up_w.clone()),
            g.leaf(self.final_decoder.up_b.clone()),
            g.leaf(self.final_decoder.head_w.clone()),
            g.leaf(self.final_decoder.head_b.clone()),
        ];

        let mut stage_probs = Vec::with_capacity(self.stage_count());
        for (ids, &feat) in decoder_leaves.iter().zip(&stage_features) {
            stage_probs.push(Self::decode(g, ids, feat)?);
        }
        let concat = g.concat_cols(&stage_features)?;
        let final_probs = Self::decode(g, &final_ids, concat)?;

        Ok(TeacherForward {
            leaves: TeacherLeaves {
                adapters: adapter_leaves,
                decoders: decoder_leaves,
                final_decoder: final_ids,
            },
            stage_features,
            stage_probs,
            final_probs,
            orth: orth.expect("at least one stage"),
        })
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor2D> {
        let mut out = Vec::new();
        for a in &mut self.stages {
            out.push(&mut a.p);
            out.push(&mut a.lambda);
            out.push(&mut a.q);
        }
        for d in &mut self.decoders {
            out.push(&mut d.up_w);
            out.push(&mut d.up_b);
            out.push(&mut d.head_w);
            out.push(&mut d.head_b);
        }
        out.push(&mut self.final_decoder.up_w);
        out.push(&mut self.final_decoder.up_b);
        out.push(&mut self.final_decoder.head_w);
        out.push(&mut self.final_decoder.head_b);
        out
    }

    /// Per-trainable-tensor update masks, aligned with trainable_mut order;
    /// adapter lambdas only update their active ranks.
    pub fn grad_masks(&self) -> Vec<Option<Vec<f64>>> {
        let mut out = Vec::new();
        for a in &self.stages {
            out.push(None);
            out.push(Some(
                a.active.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect(),
            ));
            out.push(None);
        }
        for _ in 0..(self.decoders.len() * 4 + 4) {
            out.push(None);
        }
        out
    }

    pub fn param_counts(&self) -> (usize, usize) {
        let mut trainable = 0;
        for a in &self.stages {
            trainable += a.p.data.len() + a.lambda.data.len() + a.q.data.len();
        }
        for d in &self.decoders {
            trainable += d.param_count();
        }
        trainable += self.final_decoder.param_count();
        let mut frozen = self.embed_w.data.len();
        for a in &self.stages {
            frozen += a.w0.data.len();
        }
        (trainable, frozen)
    }
}

/// Per-correspondence rows of a G^2 x C patch score matrix: one row per
/// corresponded point, in correspondence order, with multiplicity kept.
pub fn gather_patch_rows(
    g: &mut Graph,
    teacher: &TeacherNet,
    patch_scores: NodeId,
    corrs: &[PixelCorrespondence],
    cam: &CameraModel,
) -> Result<NodeId> {
    let idx: Vec<usize> = corrs
        .iter()
        .map(|c| teacher.pixel_patch_index(c.v, c.u, cam.height, cam.width))
        .collect();
    g.gather_rows(patch_scores, &idx)
}

/// Labels and patch indices for every non-ignore pixel of a label image,
/// in row-major pixel order.
pub fn labeled_pixel_patches(
    teacher: &TeacherNet,
    semantic: &[u16],
    height: usize,
    width: usize,
) -> (Vec<u16>, Vec<usize>) {
    let mut labels = Vec::new();
    let mut patches = Vec::new();
    for v in 0..height {
        for u in 0..width {
            let y = semantic[v * width + u];
            if y != IGNORE_SEMANTIC {
                labels.push(y);
                patches.push(teacher.pixel_patch_index(v, u, height, width));
            }
        }
    }
    (labels, patches)
}

/// Class weights 1/sqrt(freq + 1), normalized to mean 1 over all classes.
pub fn class_weights(labels: &[&[u16]], class_count: usize) -> Result<Vec<f64>> {
    if class_count == 0 {
        return Err(Error::Contract("class_weights: zero classes".into()));
    }
    let mut freq = vec![0u64; class_count];
    for chunk in labels {
        for &y in *chunk {
            if y != IGNORE_SEMANTIC {
                if (y as usize) >= class_count {
                    return Err(Error::Index(format!("class_weights: label {y} out of {class_count}")));
                }
                freq[y as usize] += 1;
            }
        }
    }
    let mut w: Vec<f64> = freq.iter().map(|&f| 1.0 / ((f as f64 + 1.0).sqrt())).collect();
    let mean = w.iter().sum::<f64>() / class_count as f64;
    for x in &mut w {
        *x /= mean;
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, DEFAULT_FD_EPS};
    use crate::datasets::{synth_scene, SynthParams};
    use crate::geometry::{project_points, Point};
    use proptest::prelude::*;

    fn small_cloud(n: usize, seed: u64) -> PointCloud {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud {
            points: (0..n)
                .map(|_| Point {
                    x: rng.gen_range(-2.0..2.0),
                    y: rng.gen_range(-2.0..2.0),
                    z: rng.gen_range(0.5..4.0),
                    intensity: rng.gen_range(0.0..1.0),
                })
                .collect(),
        }
    }

    // ---- losses ----

    #[test]
    fn wce_hand_examples() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor2D::from_rows(&[vec![0.5, 0.5]]));
        let (loss, empty) = g.wce_loss(p, &[0], &[1.0, 1.0], IGNORE_SEMANTIC).unwrap();
        assert!(!empty);
        assert!((g.scalar_value(loss) - 2f64.ln()).abs() < 1e-12);

        let one_hot = g.leaf(Tensor2D::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let (loss, _) = g.wce_loss(one_hot, &[0, 1], &[1.0, 1.0], IGNORE_SEMANTIC).unwrap();
        assert!(g.scalar_value(loss).abs() < 1e-12);

        let (loss, empty) = g.wce_loss(p, &[IGNORE_SEMANTIC], &[1.0, 1.0], IGNORE_SEMANTIC).unwrap();
        assert!(empty);
        assert_eq!(g.scalar_value(loss), 0.0);
    }

    #[test]
    fn lovasz_hand_examples() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor2D::from_rows(&[vec![0.3, 0.7]]));
        let (loss, _) = g.lovasz_loss(p, &[0], IGNORE_SEMANTIC).unwrap();
        assert!((g.scalar_value(loss) - 0.7).abs() < 1e-12);

        let perfect = g.leaf(Tensor2D::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let (loss, _) = g.lovasz_loss(perfect, &[0, 1], IGNORE_SEMANTIC).unwrap();
        assert!(g.scalar_value(loss).abs() < 1e-12);
    }

    /// Tabulates the Jaccard loss of every misprediction subset from raw set
    /// arithmetic, then chains prefix deltas along the descending error sort.
    fn lovasz_brute_force(probs: &Tensor2D, labels: &[u16]) -> f64 {
        let n = probs.rows;
        let ncls = probs.cols;
        let mut present: Vec<u16> = labels.to_vec();
        present.sort_unstable();
        present.dedup();
        let delta = |cls: u16, subset: &[usize]| -> f64 {
            let gt: Vec<usize> = (0..n).filter(|&i| labels[i] == cls).collect();
            let inter = gt.iter().filter(|i| !subset.contains(i)).count() as f64;
            let union = gt.len() as f64 + subset.iter().filter(|i| !gt.contains(i)).count() as f64;
            1.0 - inter / union
        };
        let mut total = 0.0;
        for &cls in &present {
            let mut errs: Vec<(f64, usize)> = (0..n)
                .map(|i| {
                    let p = probs.data[i * ncls + cls as usize];
                    (if labels[i] == cls { 1.0 - p } else { p }, i)
                })
                .collect();
            errs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let mut prefix = Vec::new();
            let mut prev = 0.0;
            for (m, i) in errs {
                prefix.push(i);
                let d = delta(cls, &prefix);
                total += m * (d - prev);
                prev = d;
            }
        }
        total / present.len() as f64
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn lovasz_matches_brute_force(seed in 0u64..10_000) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1usize..=6);
            let ncls = rng.gen_range(2usize..=4);
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..n {
                let raw: Vec<f64> = (0..ncls).map(|_| rng.gen_range(0.05f64..1.0)).collect();
                let s: f64 = raw.iter().sum();
                rows.push(raw.into_iter().map(|x| x / s).collect::<Vec<_>>());
                labels.push(rng.gen_range(0..ncls) as u16);
            }
            let t = Tensor2D::from_rows(&rows);
            let mut g = Graph::new();
            let p = g.leaf(t.clone());
            let (loss, _) = g.lovasz_loss(p, &labels, IGNORE_SEMANTIC).unwrap();
            let expect = lovasz_brute_force(&t, &labels);
            prop_assert!((g.scalar_value(loss) - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_hand_examples() {
        let mut g = Graph::new();
        let t = Tensor2D::from_rows(&[vec![0.5, 0.5]]);
        let s = g.leaf(Tensor2D::from_rows(&[vec![0.9, 0.1]]));
        let (loss, empty) = g.kl_loss(&t, s).unwrap();
        assert!(!empty);
        let expect = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((g.scalar_value(loss) - expect).abs() < 1e-12);
        assert!((g.scalar_value(loss) - 0.5108).abs() < 1e-4);

        let eq = g.leaf(Tensor2D::from_rows(&[vec![0.5, 0.5]]));
        let (loss, _) = g.kl_loss(&t, eq).unwrap();
        assert!(g.scalar_value(loss).abs() < 1e-12);

        let none = g.leaf(Tensor2D::zeros(0, 2));
        let (loss, empty) = g.kl_loss(&Tensor2D::zeros(0, 2), none).unwrap();
        assert!(empty);
        assert_eq!(g.scalar_value(loss), 0.0);
    }

    #[test]
    fn kl_nonnegative_random() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let mk = |rng: &mut ChaCha8Rng| {
                let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.01f64..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / s).collect::<Vec<f64>>()
            };
            let t = Tensor2D::from_rows(&[mk(&mut rng)]);
            let mut g = Graph::new();
            let s = g.leaf(Tensor2D::from_rows(&[mk(&mut rng)]));
            let (loss, _) = g.kl_loss(&t, s).unwrap();
            assert!(g.scalar_value(loss) >= -1e-12);
        }
    }

    #[test]
    fn loss_grad_checks() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let logits = Tensor2D::fill_uniform(5, 3, -1.0, 1.0, &mut rng);
        let labels: Vec<u16> = (0..5).map(|_| rng.gen_range(0..3) as u16).collect();
        let weights = vec![1.0, 1.5, 0.5];

        let err = grad_check(
            |params| {
                let mut g = Graph::new();
                let x = g.leaf(params[0].clone());
                let p = g.softmax_rows(x);
                let (loss, _) = g.wce_loss(p, &labels, &weights, IGNORE_SEMANTIC)?;
                g.backward(loss)?;
                Ok((g.scalar_value(loss), vec![g.grad(x).clone()]))
            },
            &[logits.clone()],
            DEFAULT_FD_EPS,
            60,
            1,
        )
        .unwrap();
        assert!(err < 1e-4, "wce grad error {err}");

        let err = grad_check(
            |params| {
                let mut g = Graph::new();
                let x = g.leaf(params[0].clone());
                let p = g.softmax_rows(x);
                let (loss, _) = g.lovasz_loss(p, &labels, IGNORE_SEMANTIC)?;
                g.backward(loss)?;
                Ok((g.scalar_value(loss), vec![g.grad(x).clone()]))
            },
            &[logits.clone()],
            DEFAULT_FD_EPS,
            60,
            2,
        )
        .unwrap();
        assert!(err < 1e-4, "lovasz grad error {err}");

        let traw = Tensor2D::fill_uniform(5, 3, 0.1, 1.0, &mut rng);
        let teacher = {
            let mut t = traw.clone();
            for r in 0..t.rows {
                let s: f64 = t.row(r).iter().sum();
                for c in 0..t.cols {
                    t.data[r * t.cols + c] /= s;
                }
            }
            t
        };
        let err = grad_check(
            |params| {
                let mut g = Graph::new();
                let x = g.leaf(params[0].clone());
                let p = g.softmax_rows(x);
                let (loss, _) = g.kl_loss(&teacher, p)?;
                g.backward(loss)?;
                Ok((g.scalar_value(loss), vec![g.grad(x).clone()]))
            },
            &[logits],
            DEFAULT_FD_EPS,
            60,
            3,
        )
        .unwrap();
        assert!(err < 1e-4, "kl grad error {err}");
    }

    // ---- student ----

    #[test]
    fn student_shapes() {
        let net = StudentNet::new(2, 8, 3, 0.5, 7).unwrap();
        let cloud = small_cloud(10, 1);
        let mut g = Graph::new();
        let leaves = net.register_leaves(&mut g);
        let fwd = net.forward(&mut g, &leaves, &cloud).unwrap();
        assert_eq!(fwd.features.len(), 2);
        for &f in &fwd.features {
            let v = g.value(f);
            assert_eq!((v.rows, v.cols), (10, 8));
        }
        for &p in &fwd.stage_probs {
            let v = g.value(p);
            assert_eq!((v.rows, v.cols), (10, 3));
            for r in 0..v.rows {
                let s: f64 = v.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
        let v = g.value(fwd.final_probs);
        assert_eq!((v.rows, v.cols), (10, 3));
    }

    #[test]
    fn student_zero_weights_uniform_scores() {
        let mut net = StudentNet::new(1, 4, 3, 0.5, 7).unwrap();
        net.stages[0].w = Tensor2D::zeros(POINT_FEATURES, 4);
        let cloud = small_cloud(5, 2);
        let mut g = Graph::new();
        let leaves = net.register_leaves(&mut g);
        let fwd = net.forward(&mut g, &leaves, &cloud).unwrap();
        let v = g.value(fwd.stage_probs[0]);
        for x in &v.data {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        let fv = g.value(fwd.final_probs);
        for x in &fv.data {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn student_pooling_invariance() {
        // two points in the same voxel share stage features and scores
        let net = StudentNet::new(1, 6, 3, 10.0, 3).unwrap();
        let cloud = PointCloud {
            points: vec![
                Point { x: 0.1, y: 0.1, z: 1.0, intensity: 0.5 },
                Point { x: 0.2, y: 0.3, z: 1.1, intensity: 0.5 },
            ],
        };
        let mut g = Graph::new();
        let leaves = net.register_leaves(&mut g);
        let fwd = net.forward(&mut g, &leaves, &cloud).unwrap();
        let f = g.value(fwd.features[0]);
        assert_eq!(f.row(0), f.row(1));
        let p = g.value(fwd.stage_probs[0]);
        assert_eq!(p.row(0), p.row(1));
    }

    #[test]
    fn student_permutation_equivariance() {
        let net = StudentNet::new(2, 6, 3, 0.7, 5).unwrap();
        let cloud = small_cloud(12, 9);
        let perm: Vec<usize> = (0..12).rev().collect();
        let permuted = PointCloud {
            points: perm.iter().map(|&i| cloud.points[i]).collect(),
        };
        let run = |c: &PointCloud| {
            let mut g = Graph::new();
            let leaves = net.register_leaves(&mut g);
            let fwd = net.forward(&mut g, &leaves, c).unwrap();
            g.value(fwd.final_probs).clone()
        };
        let a = run(&cloud);
        let b = run(&permuted);
        for (new_row, &old) in perm.iter().enumerate() {
            for c in 0..3 {
                assert!((a.data[old * 3 + c] - b.data[new_row * 3 + c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn student_empty_cloud_rejected() {
        let net = StudentNet::new(1, 4, 3, 0.5, 7).unwrap();
        let mut g = Graph::new();
        let leaves = net.register_leaves(&mut g);
        assert!(net.forward(&mut g, &leaves, &PointCloud::default()).is_err());
    }

    #[test]
    fn student_forward_grad_check() {
        let net = StudentNet::new(1, 4, 3, 0.5, 13).unwrap();
        let cloud = small_cloud(6, 4);
        let labels: Vec<u16> = vec![0, 1, 2, 0, 1, 2];
        let weights = vec![1.0; 3];
        let base = net.clone();
        let err = grad_check(
            |params| {
                let mut net = base.clone();
                net.stages[0].w = params[0].clone();
                net.stages[0].head_w = params[1].clone();
                let mut g = Graph::new();
                let leaves = net.register_leaves(&mut g);
                let fwd = net.forward(&mut g, &leaves, &cloud)?;
                let (wce, _) = g.wce_loss(fwd.final_probs, &labels, &weights, IGNORE_SEMANTIC)?;
                let (stage, _) = g.wce_loss(fwd.stage_probs[0], &labels, &weights, IGNORE_SEMANTIC)?;
                let total = g.add(wce, stage)?;
                g.backward(total)?;
                Ok((
                    g.scalar_value(total),
                    vec![
                        g.grad(leaves.stages[0][0]).clone(),
                        g.grad(leaves.stages[0][2]).clone(),
                    ],
                ))
            },
            &[base.stages[0].w.clone(), base.stages[0].head_w.clone()],
            DEFAULT_FD_EPS,
            50,
            31,
        )
        .unwrap();
        assert!(err < 1e-4, "student grad error {err}");
    }

    // ---- teacher ----

    fn flat_image(w: usize, h: usize, rgb: [u8; 3]) -> RgbImage {
        let mut img = RgbImage::new(w, h);
        for r in 0..h {
            for c in 0..w {
                img.set_pixel(r, c, rgb);
            }
        }
        img
    }

    #[test]
    fn teacher_single_patch_uniform() {
        let net = TeacherNet::new(1, 2, 4, 3, 1, 17).unwrap();
        let scene = synth_scene(3, &SynthParams::default()).unwrap();
        let mut g = Graph::new();
        let fwd = net.forward(&mut g, &scene.image).unwrap();
        let probs = g.value(fwd.final_probs).clone();
        assert_eq!((probs.rows, probs.cols), (1, 3));
        let corrs = project_points(&scene.cloud, &scene.cam).unwrap();
        let gathered = gather_patch_rows(&mut g, &net, fwd.final_probs, &corrs, &scene.cam).unwrap();
        let gv = g.value(gathered);
        assert_eq!(gv.rows, corrs.len());
        for r in 0..gv.rows {
            assert_eq!(gv.row(r), probs.row(0), "single patch: all rows identical");
        }
    }

    #[test]
    fn teacher_patch_index_arithmetic() {
        let net = TeacherNet::new(2, 1, 4, 3, 1, 17).unwrap();
        // pixel (v=40, u=10) on a 64x64 image -> patch row 1, col 0 -> index 2
        assert_eq!(net.pixel_patch_index(40, 10, 64, 64), 2);
        assert_eq!(net.pixel_patch_index(0, 0, 64, 64), 0);
        assert_eq!(net.pixel_patch_index(63, 63, 64, 64), 3);
    }

    #[test]
    fn teacher_gather_empty_correspondences() {
        let net = TeacherNet::new(2, 1, 4, 3, 1, 17).unwrap();
        let img = flat_image(8, 8, [100, 50, 25]);
        let mut g = Graph::new();
        let fwd = net.forward(&mut g, &img).unwrap();
        let cam = CameraModel {
            fx: 8.0,
            fy: 8.0,
            cx: 4.0,
            cy: 4.0,
            extrinsic: crate::geometry::Transform4::identity(),
            width: 8,
            height: 8,
        };
        let gathered = gather_patch_rows(&mut g, &net, fwd.final_probs, &[], &cam).unwrap();
        assert_eq!(g.value(gathered).rows, 0);
    }

    #[test]
    fn teacher_rejects_indivisible_grid() {
        let net = TeacherNet::new(3, 1, 4, 3, 1, 17).unwrap();
        let img = flat_image(8, 8, [0, 0, 0]);
        let mut g = Graph::new();
        assert!(net.forward(&mut g, &img).is_err());
    }

    #[test]
    fn teacher_counts_forwards() {
        let net = TeacherNet::new(2, 1, 4, 3, 1, 17).unwrap();
        let img = flat_image(8, 8, [10, 20, 30]);
        assert_eq!(net.forward_count(), 0);
        for _ in 0..3 {
            let mut g = Graph::new();
            net.forward(&mut g, &img).unwrap();
        }
        assert_eq!(net.forward_count(), 3);
    }

    #[test]
    fn teacher_prob_rows_normalized() {
        let net = TeacherNet::new(4, 3, 6, 5, 1, 23).unwrap();
        let scene = synth_scene(8, &SynthParams::default()).unwrap();
        let mut g = Graph::new();
        let fwd = net.forward(&mut g, &scene.image).unwrap();
        for &p in fwd.stage_probs.iter().chain([&fwd.final_probs]) {
            let v = g.value(p);
            assert_eq!(v.rows, 16);
            for r in 0..v.rows {
                let s: f64 = v.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn teacher_zero_init_adapters_inert() {
        // fresh adapters have lambda = 0, so the teacher forward equals the
        // frozen-base forward bit for bit
        let net = TeacherNet::new(2, 2, 4, 3, 1, 29).unwrap();
        let img = flat_image(8, 8, [200, 100, 50]);
        let mut g = Graph::new();
        let fwd = net.forward(&mut g, &img).unwrap();

        let feats0 = TeacherNet::patch_features(&img, 2).unwrap();
        let mut x = feats0.matmul(&net.embed_w.transpose()).unwrap();
        for v in &mut x.data {
            *v = v.max(0.0);
        }
        for a in &net.stages {
            let mut y = x.matmul(&a.w0.transpose()).unwrap();
            for v in &mut y.data {
                *v = v.max(0.0);
            }
            x = y;
        }
        assert_eq!(g.value(*fwd.stage_features.last().unwrap()).data, x.data);
    }

    #[test]
    fn class_weight_normalization() {
        let a: Vec<u16> = vec![0, 0, 0, 1, IGNORE_SEMANTIC];
        let w = class_weights(&[&a], 3).unwrap();
        assert_eq!(w.len(), 3);
        let mean = w.iter().sum::<f64>() / 3.0;
        assert!((mean - 1.0).abs() < 1e-12);
        assert!(w[0] < w[1] && w[1] < w[2], "rarer classes weigh more");
    }
}
