//! Parameter-efficient fine-tuning: LoRA (frozen base plus B·A) and a
//! simplified SVD-form adapter with orthogonality regularization and
//! importance-driven rank budgeting.
//!
//! Checkpoint format: one tag byte, header (d1, d2, r as u32 LE), then the
//! factor payloads as f64 LE row-major. The frozen base travels with the
//! model checkpoint, not the adapter record.

use crate::autodiff::{Graph, NodeId};
use crate::tensor::Tensor2D;
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const INIT_RANGE: f64 = 0.02;
const IMPORTANCE_EMA: f64 = 0.85;

fn check_rank(d1: usize, d2: usize, r: usize) -> Result<()> {
    let cap = (d1.min(d2) / 4).max(1);
    if r == 0 || r > cap {
        return Err(Error::Contract(format!(
            "adapter rank {r} outside 1..={cap} for {d1}x{d2}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// LoRA
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// Frozen d1 x d2 base weight.
    pub w0: Tensor2D,
    /// Trainable r x d2 factor, seeded uniform init.
    pub a: Tensor2D,
    /// Trainable d1 x r factor, zero init so the fresh adapter is exact
    /// identity over the base.
    pub b: Tensor2D,
    /// alpha / r; alpha defaults to r so scaling is 1.
    pub scaling: f64,
}

pub struct LoraLeaves {
    pub a: NodeId,
    pub b: NodeId,
}

impl LoraAdapter {
    pub fn new(w0: Tensor2D, rank: usize, seed: u64) -> Result<Self> {
        let (d1, d2) = (w0.rows, w0.cols);
        check_rank(d1, d2, rank)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor2D::fill_uniform(rank, d2, -INIT_RANGE, INIT_RANGE, &mut rng);
        let b = Tensor2D::zeros(d1, rank);
        Ok(LoraAdapter { w0, a, b, scaling: 1.0 })
    }

    pub fn rank(&self) -> usize {
        self.a.rows
    }

    /// W0 + scaling * B.A
    pub fn merge(&self) -> Tensor2D {
        let delta = self.b.matmul(&self.a).unwrap().scale(self.scaling);
        self.w0.add(&delta).unwrap()
    }

    /// x.W0^T + scaling * (x.A^T).B^T, without building a graph.
    pub fn forward_plain(&self, x: &Tensor2D) -> Result<Tensor2D> {
        let base = x.matmul(&self.w0.transpose())?;
        let xa = x.matmul(&self.a.transpose())?;
        let delta = xa.matmul(&self.b.transpose())?.scale(self.scaling);
        base.add(&delta)
    }

    /// Differentiable forward; the base weight enters as a leaf whose
    /// gradient is simply never applied.
    pub fn forward_graph(&self, g: &mut Graph, x: NodeId) -> Result<(NodeId, LoraLeaves)> {
        let w0 = g.leaf(self.w0.clone());
        let a = g.leaf(self.a.clone());
        let b = g.leaf(self.b.clone());
        let w0t = g.transpose(w0);
        let base = g.matmul(x, w0t)?;
        let at = g.transpose(a);
        let xa = g.matmul(x, at)?;
        let bt = g.transpose(b);
        let delta = g.matmul(xa, bt)?;
        let delta = g.scale(delta, self.scaling);
        let out = g.add(base, delta)?;
        Ok((out, LoraLeaves { a, b }))
    }

    pub fn trainable_param_count(&self) -> usize {
        self.rank() * (self.w0.rows + self.w0.cols)
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = vec![0u8]; // tag
        push_header(&mut out, self.w0.rows, self.w0.cols, self.rank());
        push_f64s(&mut out, &self.a.data);
        push_f64s(&mut out, &self.b.data);
        push_f64s(&mut out, &[self.scaling]);
        out
    }

    pub fn deserialize(bytes: &[u8], w0: Tensor2D) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.u8()? != 0 {
            return Err(Error::Format("not a LoRA adapter record".into()));
        }
        let (d1, d2, r) = cur.header()?;
        if d1 != w0.rows || d2 != w0.cols {
            return Err(Error::Format("adapter shape does not match base".into()));
        }
        let a = Tensor2D::from_vec(r, d2, cur.f64s(r * d2)?)?;
        let b = Tensor2D::from_vec(d1, r, cur.f64s(d1 * r)?)?;
        let scaling = cur.f64s(1)?[0];
        Ok(LoraAdapter { w0, a, b, scaling })
    }
}

// ---------------------------------------------------------------------------
// SVD-form adapter with rank budgeting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AdaLoraAdapter {
    pub w0: Tensor2D,
    /// d1 x r left factor.
    pub p: Tensor2D,
    /// 1 x r diagonal, zero init.
    pub lambda: Tensor2D,
    /// r x d2 right factor.
    pub q: Tensor2D,
    /// Pruned ranks are masked out of the forward and excluded from updates.
    pub active: Vec<bool>,
    /// Stored EMA of |lambda_k * dL/dlambda_k|; kept while pruned so a rank
    /// can be revived later.
    pub importance_ema: Vec<f64>,
}

pub struct AdaLoraLeaves {
    pub p: NodeId,
    pub lambda: NodeId,
    pub q: NodeId,
}

impl AdaLoraAdapter {
    pub fn new(w0: Tensor2D, rank: usize, seed: u64) -> Result<Self> {
        let (d1, d2) = (w0.rows, w0.cols);
        check_rank(d1, d2, rank)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Tensor2D::fill_uniform(d1, rank, -INIT_RANGE, INIT_RANGE, &mut rng);
        let q = Tensor2D::fill_uniform(rank, d2, -INIT_RANGE, INIT_RANGE, &mut rng);
        Ok(AdaLoraAdapter {
            w0,
            p,
            lambda: Tensor2D::zeros(1, rank),
            q,
            active: vec![true; rank],
            importance_ema: vec![0.0; rank],
        })
    }

    pub fn rank(&self) -> usize {
        self.lambda.cols
    }

    fn masked_lambda(&self) -> Vec<f64> {
        self.lambda
            .data
            .iter()
            .zip(&self.active)
            .map(|(&l, &a)| if a { l } else { 0.0 })
            .collect()
    }

    /// W0 + P.diag(lambda).Q with pruned ranks zeroed.
    pub fn merge(&self) -> Tensor2D {
        let lam = Tensor2D::diag(&self.masked_lambda());
        let delta = self.p.matmul(&lam).unwrap().matmul(&self.q).unwrap();
        self.w0.add(&delta).unwrap()
    }

    pub fn forward_plain(&self, x: &Tensor2D) -> Result<Tensor2D> {
        x.matmul(&self.merge().transpose())
    }

    pub fn forward_graph(&self, g: &mut Graph, x: NodeId) -> Result<(NodeId, AdaLoraLeaves)> {
        let w0 = g.leaf(self.w0.clone());
        let p = g.leaf(self.p.clone());
        let lambda = g.leaf(self.lambda.clone());
        let q = g.leaf(self.q.clone());
        let mask_row = Tensor2D::from_vec(
            1,
            self.rank(),
            self.active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect(),
        )?;
        let mask = g.leaf(mask_row);

        let w0t = g.transpose(w0);
        let base = g.matmul(x, w0t)?;
        let qt = g.transpose(q);
        let xq = g.matmul(x, qt)?; // N x r
        let lam_masked = g.mul_cols(lambda, mask)?;
        let scaled = g.mul_cols(xq, lam_masked)?;
        let pt = g.transpose(p);
        let delta = g.matmul(scaled, pt)?;
        let out = g.add(base, delta)?;
        Ok((out, AdaLoraLeaves { p, lambda, q }))
    }

    /// ||P^T P - I||_F^2 + ||Q Q^T - I||_F^2 over active ranks.
    pub fn orth_reg_graph(&self, g: &mut Graph, leaves: &AdaLoraLeaves) -> Result<NodeId> {
        let mask: Vec<f64> = self.active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
        let mask_row = g.leaf(Tensor2D::from_vec(1, self.rank(), mask.clone())?);
        let target = Tensor2D::diag(&mask);

        let pm = g.mul_cols(leaves.p, mask_row)?;
        let pmt = g.transpose(pm);
        let ptp = g.matmul(pmt, pm)?;
        let p_term = g.frob_sq_diff(ptp, target.clone())?;

        let qt = g.transpose(leaves.q);
        let qm_t = g.mul_cols(qt, mask_row)?; // columns of Q^T = rows of Q
        let qm = g.transpose(qm_t);
        let qmt = g.transpose(qm);
        let qqt = g.matmul(qm, qmt)?;
        let q_term = g.frob_sq_diff(qqt, target)?;

        g.add(p_term, q_term)
    }

    pub fn orth_reg_value(&self) -> f64 {
        let mut g = Graph::new();
        let x = g.leaf(Tensor2D::zeros(1, self.w0.cols));
        let (_, leaves) = self.forward_graph(&mut g, x).unwrap();
        let node = self.orth_reg_graph(&mut g, &leaves).unwrap();
        g.scalar_value(node)
    }

    /// Folds the latest lambda gradient into the importance EMA; pruned
    /// ranks are left untouched.
    pub fn update_importance(&mut self, lambda_grad: &[f64]) {
        debug_assert_eq!(lambda_grad.len(), self.rank());
        for k in 0..self.rank() {
            if self.active[k] {
                let s = (self.lambda.data[k] * lambda_grad[k]).abs();
                self.importance_ema[k] =
                    IMPORTANCE_EMA * self.importance_ema[k] + (1.0 - IMPORTANCE_EMA) * s;
            }
        }
    }

    /// Reported sensitivity scores: stored EMA for active ranks, 0 otherwise.
    pub fn importance_scores(&self) -> Vec<f64> {
        (0..self.rank())
            .map(|k| if self.active[k] { self.importance_ema[k] } else { 0.0 })
            .collect()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.rank() * (self.w0.rows + self.w0.cols + 1)
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = vec![1u8];
        push_header(&mut out, self.w0.rows, self.w0.cols, self.rank());
        push_f64s(&mut out, &self.p.data);
        push_f64s(&mut out, &self.lambda.data);
        push_f64s(&mut out, &self.q.data);
        let mask: Vec<f64> = self.active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
        push_f64s(&mut out, &mask);
        push_f64s(&mut out, &self.importance_ema);
        out
    }

    pub fn deserialize(bytes: &[u8], w0: Tensor2D) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.u8()? != 1 {
            return Err(Error::Format("not an AdaLoRA adapter record".into()));
        }
        let (d1, d2, r) = cur.header()?;
        if d1 != w0.rows || d2 != w0.cols {
            return Err(Error::Format("adapter shape does not match base".into()));
        }
        let p = Tensor2D::from_vec(d1, r, cur.f64s(d1 * r)?)?;
        let lambda = Tensor2D::from_vec(1, r, cur.f64s(r)?)?;
        let q = Tensor2D::from_vec(r, d2, cur.f64s(r * d2)?)?;
        let active = cur.f64s(r)?.into_iter().map(|v| v != 0.0).collect();
        let importance_ema = cur.f64s(r)?;
        Ok(AdaLoraAdapter { w0, p, lambda, q, active, importance_ema })
    }
}

/// Globally ranks (adapter, rank) pairs by stored importance and keeps the
/// top `total_budget`; everything else is pruned (masked, lambda zeroed).
/// A pruned rank is revived when its stored importance re-enters the top set.
pub fn reallocate_budget(adapters: &mut [&mut AdaLoraAdapter], total_budget: usize) -> Result<()> {
    let total: usize = adapters.iter().map(|a| a.rank()).sum();
    if total_budget > total {
        return Err(Error::Contract(format!(
            "budget {total_budget} exceeds total ranks {total}"
        )));
    }
    let mut pairs: Vec<(usize, usize, f64)> = Vec::with_capacity(total);
    for (ai, adapter) in adapters.iter().enumerate() {
        for k in 0..adapter.rank() {
            pairs.push((ai, k, adapter.importance_ema[k]));
        }
    }
    pairs.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let keep: Vec<(usize, usize)> = pairs.iter().take(total_budget).map(|&(a, k, _)| (a, k)).collect();
    for (ai, adapter) in adapters.iter_mut().enumerate() {
        for k in 0..adapter.rank() {
            let on = keep.contains(&(ai, k));
            adapter.active[k] = on;
            if !on {
                adapter.lambda.data[k] = 0.0;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// byte helpers
// ---------------------------------------------------------------------------

fn push_header(out: &mut Vec<u8>, d1: usize, d2: usize, r: usize) {
    out.extend_from_slice(&(d1 as u32).to_le_bytes());
    out.extend_from_slice(&(d2 as u32).to_le_bytes());
    out.extend_from_slice(&(r as u32).to_le_bytes());
}

fn push_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u8(&mut self) -> Result<u8> {
        let v = *self
            .bytes
            .get(self.pos)
            .ok_or_else(|| Error::Format("truncated adapter record".into()))?;
        self.pos += 1;
        Ok(v)
    }

    fn header(&mut self) -> Result<(usize, usize, usize)> {
        let word = |s: &mut Self| -> Result<usize> {
            let end = s.pos + 4;
            let b = s
                .bytes
                .get(s.pos..end)
                .ok_or_else(|| Error::Format("truncated adapter header".into()))?;
            s.pos = end;
            Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
        };
        Ok((word(self)?, word(self)?, word(self)?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let end = self.pos + n * 8;
        let b = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Format("truncated adapter payload".into()))?;
        self.pos = end;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
