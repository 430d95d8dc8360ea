//! Binary model checkpoints: a fixed header describing the architecture,
//! then every tensor as (rows, cols as u32 LE, data as f64 LE row-major).
//! Adapter records reuse the peft wire format, length-prefixed.

use crate::distill::Models;
use crate::nets::{StudentNet, TeacherNet};
use crate::peft::AdaLoraAdapter;
use crate::tensor::Tensor2D;
use crate::{Error, Result};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ELTC";
const VERSION: u32 = 1;

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn push_tensor(out: &mut Vec<u8>, t: &Tensor2D) {
    push_u32(out, t.rows);
    push_u32(out, t.cols);
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        let b = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        self.pos = end;
        Ok(b)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor2D> {
        let rows = self.u32()?;
        let cols = self.u32()?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64()?);
        }
        Tensor2D::from_vec(rows, cols, data)
    }
}

pub fn models_to_bytes(models: &Models) -> Vec<u8> {
    let s = &models.student;
    let t = &models.teacher;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION as usize);
    push_u32(&mut out, s.stage_count());
    push_u32(&mut out, s.hidden);
    push_u32(&mut out, s.class_count);
    push_u32(&mut out, t.grid);
    out.extend_from_slice(&s.base_voxel_edge.to_le_bytes());

    for stage in &s.stages {
        push_tensor(&mut out, &stage.w);
        push_tensor(&mut out, &stage.b);
        push_tensor(&mut out, &stage.head_w);
        push_tensor(&mut out, &stage.head_b);
    }
    push_tensor(&mut out, &s.final_w);
    push_tensor(&mut out, &s.final_b);

    push_tensor(&mut out, &t.embed_w);
    for adapter in &t.stages {
        push_tensor(&mut out, &adapter.w0);
        let rec = adapter.serialize();
        push_u32(&mut out, rec.len());
        out.extend_from_slice(&rec);
    }
    for d in t.decoders.iter().chain([&t.final_decoder]) {
        push_tensor(&mut out, &d.up_w);
        push_tensor(&mut out, &d.up_b);
        push_tensor(&mut out, &d.head_w);
        push_tensor(&mut out, &d.head_b);
    }
    out
}

pub fn models_from_bytes(bytes: &[u8]) -> Result<Models> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    if r.u32()? != VERSION as usize {
        return Err(Error::Format("unsupported checkpoint version".into()));
    }
    let stage_count = r.u32()?;
    let hidden = r.u32()?;
    let class_count = r.u32()?;
    let grid = r.u32()?;
    let base_voxel_edge = r.f64()?;

    let mut student = StudentNet::new(stage_count, hidden, class_count, base_voxel_edge, 0)?;
    for stage in &mut student.stages {
        stage.w = r.tensor()?;
        stage.b = r.tensor()?;
        stage.head_w = r.tensor()?;
        stage.head_b = r.tensor()?;
    }
    student.final_w = r.tensor()?;
    student.final_b = r.tensor()?;

    // rank is recovered from the first adapter record; placeholder init is
    // fully overwritten below
    let mut teacher = TeacherNet::new(grid, stage_count, hidden, class_count, 1, 0)?;
    teacher.embed_w = r.tensor()?;
    let mut adapters = Vec::with_capacity(stage_count);
    for _ in 0..stage_count {
        let w0 = r.tensor()?;
        let len = r.u32()?;
        let rec = r.take(len)?.to_vec();
        adapters.push(AdaLoraAdapter::deserialize(&rec, w0)?);
    }
    teacher.stages = adapters;
    for d in teacher.decoders.iter_mut().chain([&mut teacher.final_decoder]) {
        d.up_w = r.tensor()?;
        d.up_b = r.tensor()?;
        d.head_w = r.tensor()?;
        d.head_b = r.tensor()?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    Ok(Models { student, teacher })
}

pub fn save_models(models: &Models, path: &Path) -> Result<()> {
    std::fs::write(path, models_to_bytes(models))?;
    Ok(())
}

pub fn load_models(path: &Path) -> Result<Models> {
    models_from_bytes(&std::fs::read(path)?)
}
