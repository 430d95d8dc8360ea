//! Pinhole camera model, LiDAR-to-pixel projection, and voxel partitioning
//! for the stage-wise point encoders.

use crate::{Error, Result};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Row-major 4x4 rigid transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Transform4 {
    pub m: [f64; 16],
}

impl Transform4 {
    pub fn identity() -> Self {
        let mut m = [0.0; 16];
        m[0] = 1.0;
        m[5] = 1.0;
        m[10] = 1.0;
        m[15] = 1.0;
        Transform4 { m }
    }

    pub fn apply(&self, x: f64, y: f64, z: f64) -> (f64, f64, f64) {
        let m = &self.m;
        (
            m[0] * x + m[1] * y + m[2] * z + m[3],
            m[4] * x + m[5] * y + m[6] * z + m[7],
            m[8] * x + m[9] * y + m[10] * z + m[11],
        )
    }

    /// Inverse of a rigid transform (R^T, -R^T t).
    pub fn inverse_rigid(&self) -> Transform4 {
        let m = &self.m;
        let r = [m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]];
        let t = [m[3], m[7], m[11]];
        let mut out = Transform4::identity();
        for i in 0..3 {
            for j in 0..3 {
                out.m[i * 4 + j] = r[j * 3 + i];
            }
        }
        for i in 0..3 {
            out.m[i * 4 + 3] = -(r[i] * t[0] + r[3 + i] * t[1] + r[6 + i] * t[2]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// LiDAR frame -> camera frame.
    pub extrinsic: Transform4,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Contract("camera: fx, fy must be > 0".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Contract("camera: zero-sized image".into()));
        }
        // rotation block orthonormality within 1e-6
        let m = &self.extrinsic.m;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += m[i * 4 + k] * m[j * 4 + k];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-6 {
                    return Err(Error::Contract("camera: rotation not orthonormal".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCorrespondence {
    pub point_index: usize,
    pub u: usize,
    pub v: usize,
    pub depth: f64,
}

/// Nearest-integer rounding with ties toward +inf.
#[inline]
pub fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Projects every point through the pinhole model; keeps a point iff its
/// camera-frame depth is positive and the rounded pixel is in bounds.
/// Output is ordered by point index.
pub fn project_points(cloud: &PointCloud, cam: &CameraModel) -> Result<Vec<PixelCorrespondence>> {
    cam.validate()?;
    let mut out = Vec::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let (xc, yc, zc) = cam.extrinsic.apply(p.x, p.y, p.z);
        if zc <= 0.0 {
            continue;
        }
        let u = round_half_up(cam.fx * xc / zc + cam.cx);
        let v = round_half_up(cam.fy * yc / zc + cam.cy);
        if u < 0 || v < 0 || u as usize >= cam.width || v as usize >= cam.height {
            continue;
        }
        out.push(PixelCorrespondence {
            point_index: i,
            u: u as usize,
            v: v as usize,
            depth: zc,
        });
    }
    Ok(out)
}

/// Camera-frame ray through pixel (u, v) at the given depth.
pub fn unproject(cam: &CameraModel, u: usize, v: usize, depth: f64) -> (f64, f64, f64) {
    (
        (u as f64 - cam.cx) * depth / cam.fx,
        (v as f64 - cam.cy) * depth / cam.fy,
        depth,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelPartition {
    pub voxel_edge: f64,
    /// Per point, a dense voxel id in first-occurrence order.
    pub assignment: Vec<usize>,
    pub voxel_count: usize,
}

pub fn voxelize(cloud: &PointCloud, edge: f64) -> Result<VoxelPartition> {
    if edge <= 0.0 {
        return Err(Error::Contract("voxelize: edge must be > 0".into()));
    }
    let mut ids: HashMap<(i64, i64, i64), usize> = HashMap::new();
    let mut assignment = Vec::with_capacity(cloud.len());
    for p in &cloud.points {
        let key = (
            (p.x / edge).floor() as i64,
            (p.y / edge).floor() as i64,
            (p.z / edge).floor() as i64,
        );
        let next = ids.len();
        let id = *ids.entry(key).or_insert(next);
        assignment.push(id);
    }
    Ok(VoxelPartition {
        voxel_edge: edge,
        assignment,
        voxel_count: ids.len(),
    })
}
