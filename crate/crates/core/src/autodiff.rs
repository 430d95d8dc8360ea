//! Minimal reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Graph`] is a tape: nodes are appended in topological order, so the
//! backward pass is a single reverse sweep. Each op defines an exact adjoint.
//! Loss ops (weighted cross-entropy, Lovász-softmax, KL) precompute their
//! input gradient at forward time, since it is constant given the forward
//! state (sort order, clamping region).

use crate::tensor::Tensor2D;
use crate::{Error, Result};

pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Scale(usize, f64),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    GroupMeanRows {
        parent: usize,
        groups: Vec<usize>,
        sizes: Vec<usize>,
    },
    SoftmaxRows(usize),
    MulCols(usize, usize),
    FrobSqDiff(usize, Tensor2D),
    SumAll(usize),
    /// Any scalar loss whose input gradient was fixed at forward time.
    PrecomputedLoss { parent: usize, input_grad: Tensor2D },
}

#[derive(Debug)]
struct Node {
    value: Tensor2D,
    grad: Tensor2D,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor2D, op: Op) -> NodeId {
        let grad = Tensor2D::zeros(value.rows, value.cols);
        self.nodes.push(Node { value, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor2D) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor2D {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor2D {
        &self.nodes[id.0].grad
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert!(v.rows == 1 && v.cols == 1);
        v.data[0]
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::MatMul(a.0, b.0)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.transpose();
        self.push(v, Op::Transpose(a.0))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let src = &self.nodes[a.0].value;
        let v = Tensor2D {
            rows: src.rows,
            cols: src.cols,
            data: src.data.iter().map(|x| x.max(0.0)).collect(),
        };
        self.push(v, Op::Relu(a.0))
    }

    /// Adds a 1xC bias row to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        if bv.rows != 1 || bv.cols != av.cols {
            return Err(Error::Dimension(format!(
                "add_bias: bias {}x{} for input {}x{}",
                bv.rows, bv.cols, av.rows, av.cols
            )));
        }
        let mut v = av.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] += bv.data[c];
            }
        }
        Ok(self.push(v, Op::AddBias(a.0, bias.0)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.scale(c);
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols: empty list".into()));
        }
        let rows = self.nodes[parts[0].0].value.rows;
        let mut cols = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            if pv.rows != rows {
                return Err(Error::Dimension("concat_cols: row mismatch".into()));
            }
            cols += pv.cols;
        }
        let mut v = Tensor2D::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            for r in 0..rows {
                for c in 0..pv.cols {
                    v.data[r * cols + off + c] = pv.data[r * pv.cols + c];
                }
            }
            off += pv.cols;
        }
        Ok(self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect())))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        if let Some(bad) = indices.iter().find(|&&i| i >= av.rows) {
            return Err(Error::Index(format!(
                "gather_rows: index {} out of {} rows",
                bad, av.rows
            )));
        }
        let mut v = Tensor2D::zeros(indices.len(), av.cols);
        for (out_r, &src_r) in indices.iter().enumerate() {
            let cols = av.cols;
            v.data[out_r * cols..(out_r + 1) * cols]
                .copy_from_slice(&av.data[src_r * cols..(src_r + 1) * cols]);
        }
        Ok(self.push(v, Op::GatherRows(a.0, indices.to_vec())))
    }

    /// Mean-pools rows of `a` into `group_count` rows by assignment. The
    /// adjoint distributes g/|group| back to each member row.
    pub fn group_mean_rows(
        &mut self,
        a: NodeId,
        groups: &[usize],
        group_count: usize,
    ) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        if groups.len() != av.rows {
            return Err(Error::Dimension("group_mean_rows: assignment length".into()));
        }
        if let Some(bad) = groups.iter().find(|&&g| g >= group_count) {
            return Err(Error::Index(format!(
                "group_mean_rows: group {} out of {}",
                bad, group_count
            )));
        }
        let cols = av.cols;
        let mut sizes = vec![0usize; group_count];
        let mut v = Tensor2D::zeros(group_count, cols);
        for (r, &g) in groups.iter().enumerate() {
            sizes[g] += 1;
            for c in 0..cols {
                v.data[g * cols + c] += av.data[r * cols + c];
            }
        }
        for g in 0..group_count {
            if sizes[g] > 0 {
                let inv = 1.0 / sizes[g] as f64;
                for c in 0..cols {
                    v.data[g * cols + c] *= inv;
                }
            }
        }
        Ok(self.push(
            v,
            Op::GroupMeanRows { parent: a.0, groups: groups.to_vec(), sizes },
        ))
    }

    /// Row-wise softmax, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let mut v = Tensor2D::zeros(av.rows, av.cols);
        for r in 0..av.rows {
            let row = av.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (c, x) in row.iter().enumerate() {
                let e = (x - m).exp();
                v.data[r * av.cols + c] = e;
                sum += e;
            }
            for c in 0..av.cols {
                v.data[r * av.cols + c] /= sum;
            }
        }
        self.push(v, Op::SoftmaxRows(a.0))
    }

    /// Element-wise multiply each column of `a` by the matching entry of a
    /// 1xC row `s`; differentiable in both arguments.
    pub fn mul_cols(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let (av, sv) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
        if sv.rows != 1 || sv.cols != av.cols {
            return Err(Error::Dimension("mul_cols: scale must be 1xC".into()));
        }
        let mut v = av.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] *= sv.data[c];
            }
        }
        Ok(self.push(v, Op::MulCols(a.0, s.0)))
    }

    /// Squared Frobenius norm of (a - target), as a 1x1 node.
    pub fn frob_sq_diff(&mut self, a: NodeId, target: Tensor2D) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        if !av.same_shape(&target) {
            return Err(Error::Dimension("frob_sq_diff: shape mismatch".into()));
        }
        let val: f64 = av
            .data
            .iter()
            .zip(&target.data)
            .map(|(x, t)| (x - t) * (x - t))
            .sum();
        Ok(self.push(Tensor2D::scalar(val), Op::FrobSqDiff(a.0, target)))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let val: f64 = self.nodes[a.0].value.data.iter().sum();
        self.push(Tensor2D::scalar(val), Op::SumAll(a.0))
    }

    /// Weighted cross-entropy over probability rows; rows labeled `ignore`
    /// are excluded. Returns the loss node and whether the batch was empty.
    pub fn wce_loss(
        &mut self,
        probs: NodeId,
        labels: &[u16],
        class_weights: &[f64],
        ignore: u16,
    ) -> Result<(NodeId, bool)> {
        let pv = &self.nodes[probs.0].value;
        if labels.len() != pv.rows {
            return Err(Error::Dimension("wce: labels/rows mismatch".into()));
        }
        let c = pv.cols;
        if class_weights.len() != c {
            return Err(Error::Dimension("wce: class weight count".into()));
        }
        let mut valid = 0usize;
        for &y in labels {
            if y != ignore {
                if (y as usize) >= c {
                    return Err(Error::Index(format!("wce: label {} out of {}", y, c)));
                }
                valid += 1;
            }
        }
        let mut input_grad = Tensor2D::zeros(pv.rows, c);
        let mut loss = 0.0;
        if valid > 0 {
            let inv = 1.0 / valid as f64;
            for (r, &y) in labels.iter().enumerate() {
                if y == ignore {
                    continue;
                }
                let w = class_weights[y as usize];
                let p = pv.data[r * c + y as usize];
                loss -= w * p.max(LOG_CLAMP).ln() * inv;
                if p > LOG_CLAMP {
                    input_grad.data[r * c + y as usize] = -w * inv / p;
                }
            }
        }
        let id = self.push(
            Tensor2D::scalar(loss),
            Op::PrecomputedLoss { parent: probs.0, input_grad },
        );
        Ok((id, valid == 0))
    }

    /// Lovász-softmax: mean over classes present in the labels of the
    /// Lovász extension of the Jaccard loss, evaluated on the per-class
    /// error vector sorted descending.
    pub fn lovasz_loss(
        &mut self,
        probs: NodeId,
        labels: &[u16],
        ignore: u16,
    ) -> Result<(NodeId, bool)> {
        let pv = &self.nodes[probs.0].value;
        if labels.len() != pv.rows {
            return Err(Error::Dimension("lovasz: labels/rows mismatch".into()));
        }
        let ncls = pv.cols;
        let valid: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y != ignore)
            .map(|(i, _)| i)
            .collect();
        for &i in &valid {
            if (labels[i] as usize) >= ncls {
                return Err(Error::Index(format!("lovasz: label {} out of {}", labels[i], ncls)));
            }
        }
        let mut present: Vec<u16> = valid.iter().map(|&i| labels[i]).collect();
        present.sort_unstable();
        present.dedup();

        let mut loss = 0.0;
        let mut input_grad = Tensor2D::zeros(pv.rows, ncls);
        if !present.is_empty() {
            let inv_present = 1.0 / present.len() as f64;
            for &cls in &present {
                // errors: 1 - p for ground-truth rows, p otherwise
                let mut entries: Vec<(f64, usize, bool)> = valid
                    .iter()
                    .map(|&i| {
                        let is_gt = labels[i] == cls;
                        let p = pv.data[i * ncls + cls as usize];
                        let m = if is_gt { 1.0 - p } else { p };
                        (m, i, is_gt)
                    })
                    .collect();
                // descending by error, stable in row order for determinism
                entries.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
                let gts = entries.iter().filter(|e| e.2).count() as f64;
                let mut inter = gts;
                let mut union = gts;
                let mut prev_jac = 0.0;
                for (m, i, is_gt) in entries {
                    if is_gt {
                        inter -= 1.0;
                    } else {
                        union += 1.0;
                    }
                    let jac = 1.0 - inter / union;
                    let g = jac - prev_jac;
                    prev_jac = jac;
                    loss += m * g * inv_present;
                    let sign = if is_gt { -1.0 } else { 1.0 };
                    input_grad.data[i * ncls + cls as usize] += sign * g * inv_present;
                }
            }
        }
        let id = self.push(
            Tensor2D::scalar(loss),
            Op::PrecomputedLoss { parent: probs.0, input_grad },
        );
        Ok((id, present.is_empty()))
    }

    /// Mean KL divergence D(teacher || student) over matched rows. Teacher
    /// rows are constants: no gradient flows to the teacher through this.
    pub fn kl_loss(&mut self, teacher: &Tensor2D, student: NodeId) -> Result<(NodeId, bool)> {
        let sv = &self.nodes[student.0].value;
        if teacher.rows != sv.rows || teacher.cols != sv.cols {
            return Err(Error::Contract(format!(
                "kl: teacher {}x{} vs student {}x{}",
                teacher.rows, teacher.cols, sv.rows, sv.cols
            )));
        }
        let n = sv.rows;
        let mut loss = 0.0;
        let mut input_grad = Tensor2D::zeros(sv.rows, sv.cols);
        if n > 0 {
            let inv = 1.0 / n as f64;
            for i in 0..sv.data.len() {
                let t = teacher.data[i];
                let s = sv.data[i];
                if t > 0.0 {
                    loss += t * (t.max(LOG_CLAMP) / s.max(LOG_CLAMP)).ln() * inv;
                    if s > LOG_CLAMP {
                        input_grad.data[i] = -t * inv / s;
                    }
                }
            }
        }
        let id = self.push(
            Tensor2D::scalar(loss),
            Op::PrecomputedLoss { parent: student.0, input_grad },
        );
        Ok((id, n == 0))
    }

    /// Reverse sweep from a scalar root; every reachable node's grad ends up
    /// holding d(root)/d(node).
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        {
            let rv = &self.nodes[root.0].value;
            if rv.rows != 1 || rv.cols != 1 {
                return Err(Error::Contract(format!(
                    "backward root must be 1x1, got {}x{}",
                    rv.rows, rv.cols
                )));
            }
        }
        for n in &mut self.nodes {
            n.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[root.0].grad.data[0] = 1.0;
        for idx in (0..=root.0).rev() {
            let g = self.nodes[idx].grad.clone();
            if g.data.iter().all(|&x| x == 0.0) {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = g.matmul(&self.nodes[b].value.transpose()).unwrap();
                    let gb = self.nodes[a].value.transpose().matmul(&g).unwrap();
                    accumulate(&mut self.nodes[a].grad, &ga);
                    accumulate(&mut self.nodes[b].grad, &gb);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    let ga = g.transpose();
                    accumulate(&mut self.nodes[a].grad, &ga);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let mask: Vec<f64> = self.nodes[a]
                        .value
                        .data
                        .iter()
                        .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                        .collect();
                    for (i, gv) in g.data.iter().enumerate() {
                        self.nodes[a].grad.data[i] += gv * mask[i];
                    }
                }
                Op::AddBias(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut self.nodes[a].grad, &g);
                    let cols = g.cols;
                    for r in 0..g.rows {
                        for c in 0..cols {
                            self.nodes[b].grad.data[c] += g.data[r * cols + c];
                        }
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut self.nodes[a].grad, &g);
                    accumulate(&mut self.nodes[b].grad, &g);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    let ga = g.scale(c);
                    accumulate(&mut self.nodes[a].grad, &ga);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let pcols = self.nodes[p].value.cols;
                        for r in 0..g.rows {
                            for c in 0..pcols {
                                self.nodes[p].grad.data[r * pcols + c] +=
                                    g.data[r * g.cols + off + c];
                            }
                        }
                        off += pcols;
                    }
                }
                Op::GatherRows(a, indices) => {
                    let a = *a;
                    let indices = indices.clone();
                    let cols = g.cols;
                    for (out_r, src_r) in indices.into_iter().enumerate() {
                        for c in 0..cols {
                            self.nodes[a].grad.data[src_r * cols + c] +=
                                g.data[out_r * cols + c];
                        }
                    }
                }
                Op::GroupMeanRows { parent, groups, sizes } => {
                    let parent = *parent;
                    let groups = groups.clone();
                    let sizes = sizes.clone();
                    let cols = g.cols;
                    for (r, gidx) in groups.into_iter().enumerate() {
                        let inv = 1.0 / sizes[gidx] as f64;
                        for c in 0..cols {
                            self.nodes[parent].grad.data[r * cols + c] +=
                                g.data[gidx * cols + c] * inv;
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let a = *a;
                    let s = self.nodes[idx].value.clone();
                    let cols = s.cols;
                    for r in 0..s.rows {
                        let dot: f64 = (0..cols)
                            .map(|c| g.data[r * cols + c] * s.data[r * cols + c])
                            .sum();
                        for c in 0..cols {
                            self.nodes[a].grad.data[r * cols + c] +=
                                s.data[r * cols + c] * (g.data[r * cols + c] - dot);
                        }
                    }
                }
                Op::MulCols(a, sid) => {
                    let (a, sid) = (*a, *sid);
                    let s = self.nodes[sid].value.clone();
                    let av = self.nodes[a].value.clone();
                    let cols = g.cols;
                    for r in 0..g.rows {
                        for c in 0..cols {
                            self.nodes[a].grad.data[r * cols + c] += g.data[r * cols + c] * s.data[c];
                            self.nodes[sid].grad.data[c] += g.data[r * cols + c] * av.data[r * cols + c];
                        }
                    }
                }
                Op::FrobSqDiff(a, target) => {
                    let a = *a;
                    let target = target.clone();
                    let gs = g.data[0];
                    for i in 0..target.data.len() {
                        self.nodes[a].grad.data[i] +=
                            2.0 * (self.nodes[a].value.data[i] - target.data[i]) * gs;
                    }
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let gs = g.data[0];
                    for v in self.nodes[a].grad.data.iter_mut() {
                        *v += gs;
                    }
                }
                Op::PrecomputedLoss { parent, input_grad } => {
                    let parent = *parent;
                    let ig = input_grad.clone();
                    let gs = g.data[0];
                    for i in 0..ig.data.len() {
                        self.nodes[parent].grad.data[i] += ig.data[i] * gs;
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grad: &mut Tensor2D, delta: &Tensor2D) {
    debug_assert!(grad.same_shape(delta));
    for (g, d) in grad.data.iter_mut().zip(&delta.data) {
        *g += d;
    }
}

/// Central-finite-difference gradient check. `loss_fn` evaluates the loss at
/// the given parameters and returns the analytic gradients alongside; the
/// numeric side only ever uses the loss value. Samples up to `max_samples`
/// coordinates (seeded) and returns the max relative error
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn grad_check<F>(
    mut loss_fn: F,
    params: &[Tensor2D],
    eps: f64,
    max_samples: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&[Tensor2D]) -> Result<(f64, Vec<Tensor2D>)>,
{
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if eps <= 0.0 {
        return Err(Error::Contract("grad_check: eps must be > 0".into()));
    }
    let (base_loss, analytic) = loss_fn(params)?;
    if !base_loss.is_finite() {
        return Err(Error::Numeric("grad_check: non-finite loss".into()));
    }
    if analytic.len() != params.len() {
        return Err(Error::Contract("grad_check: gradient count mismatch".into()));
    }

    let mut coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.data.len()).map(move |ci| (pi, ci)))
        .collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);
    coords.truncate(max_samples);

    let mut work: Vec<Tensor2D> = params.to_vec();
    let mut max_rel = 0.0f64;
    for (pi, ci) in coords {
        let orig = work[pi].data[ci];
        work[pi].data[ci] = orig + eps;
        let (lp, _) = loss_fn(&work)?;
        work[pi].data[ci] = orig - eps;
        let (lm, _) = loss_fn(&work)?;
        work[pi].data[ci] = orig;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::Numeric("grad_check: non-finite loss".into()));
        }
        let numeric = (lp - lm) / (2.0 * eps);
        let a = analytic[pi].data[ci];
        let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

pub const DEFAULT_FD_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn t(rows: &[Vec<f64>]) -> Tensor2D {
        Tensor2D::from_rows(rows)
    }

    #[test]
    fn matmul_identity_case() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor2D::identity(2));
        let b = g.leaf(t(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data, vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[vec![1.0, 2.0]]));
        let b = g.leaf(t(&[vec![3.0], vec![4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data, vec![11.0]);
    }

    #[test]
    fn matmul_shape_contract() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor2D::zeros(2, 3));
        let b = g.leaf(Tensor2D::zeros(2, 3));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_adjoints() {
        // loss = sum(a.b); da = 1.b^T, db = a^T.1
        let mut g = Graph::new();
        let a = g.leaf(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.leaf(t(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let c = g.matmul(a, b).unwrap();
        let loss = g.sum_all(c);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).data, vec![11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g.grad(b).data, vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn gather_rows_permutation() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[vec![1.0], vec![2.0], vec![3.0]]));
        let out = g.gather_rows(a, &[2, 0]).unwrap();
        assert_eq!(g.value(out).data, vec![3.0, 1.0]);
    }

    #[test]
    fn gather_rows_out_of_range() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor2D::zeros(2, 1));
        assert!(matches!(g.gather_rows(a, &[2]), Err(Error::Index(_))));
    }

    #[test]
    fn group_mean_rows_hand() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[vec![2.0], vec![4.0], vec![6.0]]));
        let out = g.group_mean_rows(a, &[0, 0, 1], 2).unwrap();
        assert_eq!(g.value(out).data, vec![3.0, 6.0]);
    }

    #[test]
    fn concat_cols_shape_law() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor2D::zeros(2, 1));
        let b = g.leaf(Tensor2D::zeros(2, 2));
        let c = g.concat_cols(&[a, b]).unwrap();
        assert_eq!((g.value(c).rows, g.value(c).cols), (2, 3));
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[vec![0.0, 0.0]]));
        let s = g.softmax_rows(a);
        assert_eq!(g.value(s).data, vec![0.5, 0.5]);

        let b = g.leaf(t(&[vec![1000.0, 1000.0]]));
        let s2 = g.softmax_rows(b);
        assert_eq!(g.value(s2).data, vec![0.5, 0.5]);

        let c = g.leaf(t(&[vec![0.0, 3.0f64.ln()]]));
        let s3 = g.softmax_rows(c);
        assert!((g.value(s3).data[0] - 0.25).abs() < 1e-12);
        assert!((g.value(s3).data[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor2D::zeros(2, 2));
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn grad_check_linear_exact() {
        // loss = sum(W.x) is linear in W: central differences are exact.
        let x = t(&[vec![1.0], vec![2.0], vec![3.0]]);
        let w0 = t(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.0, -0.5]]);
        let err = grad_check(
            |params| {
                let mut g = Graph::new();
                let w = g.leaf(params[0].clone());
                let xn = g.leaf(x.clone());
                let y = g.matmul(w, xn)?;
                let loss = g.sum_all(y);
                g.backward(loss)?;
                Ok((g.scalar_value(loss), vec![g.grad(w).clone()]))
            },
            &[w0],
            DEFAULT_FD_EPS,
            50,
            7,
        )
        .unwrap();
        assert!(err < 1e-7, "linear grad check error {err}");
    }

    #[test]
    fn grad_check_two_layer_relu() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Tensor2D::fill_uniform(4, 3, -1.0, 1.0, &mut rng);
        // keep pre-activations away from the ReLU kink
        let w1 = Tensor2D::fill_uniform(3, 5, 0.3, 1.0, &mut rng);
        let b1 = Tensor2D::fill_uniform(1, 5, 0.3, 0.8, &mut rng);
        let w2 = Tensor2D::fill_uniform(5, 2, -1.0, 1.0, &mut rng);
        let err = grad_check(
            |params| {
                let mut g = Graph::new();
                let w1n = g.leaf(params[0].clone());
                let b1n = g.leaf(params[1].clone());
                let w2n = g.leaf(params[2].clone());
                let xn = g.leaf(x.clone());
                let h = g.matmul(xn, w1n)?;
                let h = g.add_bias(h, b1n)?;
                let h = g.relu(h);
                let y = g.matmul(h, w2n)?;
                let loss = g.sum_all(y);
                g.backward(loss)?;
                Ok((
                    g.scalar_value(loss),
                    vec![g.grad(w1n).clone(), g.grad(b1n).clone(), g.grad(w2n).clone()],
                ))
            },
            &[w1, b1, w2],
            DEFAULT_FD_EPS,
            50,
            13,
        )
        .unwrap();
        assert!(err < 1e-4, "relu net grad check error {err}");
    }

    #[test]
    fn grad_check_zero_eps_contract() {
        let err = grad_check(
            |_| Ok((0.0, vec![])),
            &[],
            0.0,
            10,
            0,
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn backward_linearity_of_adjoints() {
        // backward on (f + h) equals sum of separate gradients
        let a0 = t(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        let run = |with_f: bool, with_h: bool| {
            let mut g = Graph::new();
            let a = g.leaf(a0.clone());
            let mut terms = Vec::new();
            if with_f {
                let r = g.relu(a);
                terms.push(g.sum_all(r));
            }
            if with_h {
                let s = g.softmax_rows(a);
                let picked = g.gather_rows(s, &[0]).unwrap();
                terms.push(g.sum_all(picked));
            }
            let mut total = terms[0];
            for t in &terms[1..] {
                total = g.add(total, *t).unwrap();
            }
            g.backward(total).unwrap();
            g.grad(a).clone()
        };
        let both = run(true, true);
        let f_only = run(true, false);
        let h_only = run(false, true);
        let summed = f_only.add(&h_only).unwrap();
        assert!(both.max_abs_diff(&summed) < 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..6, seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor2D::fill_uniform(rows, cols, -5.0, 5.0, &mut rng);
            let mut g = Graph::new();
            let a = g.leaf(x);
            let s = g.softmax_rows(a);
            for r in 0..rows {
                let sum: f64 = g.value(s).row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                for &v in g.value(s).row(r) {
                    prop_assert!(v > 0.0 && v < 1.0 || cols == 1);
                }
            }
        }

        #[test]
        fn ops_match_finite_differences(seed in 0u64..40) {
            // composite graph exercising most ops at once
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor2D::fill_uniform(4, 3, 0.2, 1.0, &mut rng);
            let w = Tensor2D::fill_uniform(3, 4, 0.1, 1.0, &mut rng);
            let s = Tensor2D::fill_uniform(1, 4, 0.5, 1.5, &mut rng);
            let err = grad_check(
                |params| {
                    let mut g = Graph::new();
                    let xn = g.leaf(x.clone());
                    let wn = g.leaf(params[0].clone());
                    let sn = g.leaf(params[1].clone());
                    let h = g.matmul(xn, wn)?;
                    let h = g.mul_cols(h, sn)?;
                    let pooled = g.group_mean_rows(h, &[0, 0, 1, 1], 2)?;
                    let up = g.gather_rows(pooled, &[0, 1, 0])?;
                    let sm = g.softmax_rows(up);
                    let tr = g.transpose(sm);
                    let loss = g.frob_sq_diff(tr, Tensor2D::zeros(4, 3))?;
                    g.backward(loss)?;
                    Ok((g.scalar_value(loss), vec![g.grad(wn).clone(), g.grad(sn).clone()]))
                },
                &[w, s],
                DEFAULT_FD_EPS,
                30,
                seed,
            ).unwrap();
            prop_assert!(err < 1e-4, "composite grad error {}", err);
        }
    }
}
