//! KITTI-format ingestion, PPM image I/O, and the deterministic synthetic
//! scene generator used for desk-scale experiments.
//!
//! Wire formats:
//! - velodyne `.bin`: little-endian f32 quadruples (x, y, z, intensity)
//! - `.label`: little-endian u32 words, low 16 bits semantic / high 16 instance
//! - `calib.txt`: "P2:" and "Tr:" keys followed by 12 whitespace-separated reals
//! - images: binary PPM (P6)

use crate::geometry::{
    unproject, CameraModel, Point, PointCloud, Transform4,
};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

/// Reserved semantic id excluded from every loss and metric.
pub const IGNORE_SEMANTIC: u16 = 0xFFFF;
/// Reserved instance id meaning "no instance".
pub const INVALID_INSTANCE: u16 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB bytes, 3 per pixel.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage { width, height, data: vec![0; width * height * 3] }
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    pub semantic: Vec<u16>,
    pub instance: Vec<u16>,
}

impl LabelImage {
    pub fn all_ignore(width: usize, height: usize) -> Self {
        LabelImage {
            width,
            height,
            semantic: vec![IGNORE_SEMANTIC; width * height],
            instance: vec![INVALID_INSTANCE; width * height],
        }
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn labeled_count(&self) -> usize {
        self.semantic.iter().filter(|&&s| s != IGNORE_SEMANTIC).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub cloud: PointCloud,
    pub point_semantic: Vec<u16>,
    pub point_instance: Vec<u16>,
    pub cam: CameraModel,
    pub class_count: u16,
}

// ---------------------------------------------------------------------------
// KITTI binary formats
// ---------------------------------------------------------------------------

pub fn read_kitti_points(path: &Path) -> Result<PointCloud> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_kitti_points(&bytes)
}

pub fn decode_kitti_points(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % 16 != 0 {
        return Err(Error::Format(format!(
            "velodyne file length {} not divisible by 16",
            bytes.len()
        )));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for chunk in bytes.chunks_exact(16) {
        let f = |i: usize| f32::from_le_bytes(chunk[i..i + 4].try_into().unwrap()) as f64;
        points.push(Point { x: f(0), y: f(4), z: f(8), intensity: f(12) });
    }
    Ok(PointCloud { points })
}

pub fn write_kitti_points(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        out.extend_from_slice(&(p.x as f32).to_le_bytes());
        out.extend_from_slice(&(p.y as f32).to_le_bytes());
        out.extend_from_slice(&(p.z as f32).to_le_bytes());
        out.extend_from_slice(&(p.intensity as f32).to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[inline]
pub fn encode_label_word(semantic: u16, instance: u16) -> u32 {
    semantic as u32 | ((instance as u32) << 16)
}

#[inline]
pub fn decode_label_word(word: u32) -> (u16, u16) {
    ((word & 0xFFFF) as u16, (word >> 16) as u16)
}

pub fn read_kitti_labels(path: &Path) -> Result<(Vec<u16>, Vec<u16>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_kitti_labels(&bytes)
}

pub fn decode_kitti_labels(bytes: &[u8]) -> Result<(Vec<u16>, Vec<u16>)> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "label file length {} not divisible by 4",
            bytes.len()
        )));
    }
    let mut semantic = Vec::with_capacity(bytes.len() / 4);
    let mut instance = Vec::with_capacity(bytes.len() / 4);
    for chunk in bytes.chunks_exact(4) {
        let word = u32::from_le_bytes(chunk.try_into().unwrap());
        let (s, i) = decode_label_word(word);
        semantic.push(s);
        instance.push(i);
    }
    Ok((semantic, instance))
}

pub fn write_kitti_labels(semantic: &[u16], instance: &[u16], path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(semantic.len() * 4);
    for (&s, &i) in semantic.iter().zip(instance) {
        out.extend_from_slice(&encode_label_word(s, i).to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Dense label image in the same word format, row-major.
pub fn write_label_image(img: &LabelImage, path: &Path) -> Result<()> {
    write_kitti_labels(&img.semantic, &img.instance, path)
}

pub fn read_label_image(path: &Path, width: usize, height: usize) -> Result<LabelImage> {
    let (semantic, instance) = read_kitti_labels(path)?;
    if semantic.len() != width * height {
        return Err(Error::Format(format!(
            "label image has {} words, expected {}x{}",
            semantic.len(),
            width,
            height
        )));
    }
    Ok(LabelImage { width, height, semantic, instance })
}

// ---------------------------------------------------------------------------
// KITTI calibration
// ---------------------------------------------------------------------------

/// Parses "P2:" and "Tr:" rows. Intrinsics come from P2; the residual
/// translation P2[:,3] is converted to a camera-frame offset and folded into
/// the extrinsic so projection only needs (fx, fy, cx, cy).
pub fn read_calib(path: &Path, width: usize, height: usize) -> Result<CameraModel> {
    let text = std::fs::read_to_string(path)?;
    parse_calib(&text, width, height)
}

pub fn parse_calib(text: &str, width: usize, height: usize) -> Result<CameraModel> {
    let mut p2: Option<Vec<f64>> = None;
    let mut tr: Option<Vec<f64>> = None;
    for line in text.lines() {
        let Some((key, rest)) = line.split_once(':') else { continue };
        let vals: std::result::Result<Vec<f64>, _> =
            rest.split_whitespace().map(|t| t.parse::<f64>()).collect();
        match key.trim() {
            "P2" => p2 = Some(vals.map_err(|e| Error::Format(format!("P2: {e}")))?),
            "Tr" => tr = Some(vals.map_err(|e| Error::Format(format!("Tr: {e}")))?),
            _ => {}
        }
    }
    let p2 = p2.ok_or_else(|| Error::Format("calib missing P2".into()))?;
    let tr = tr.ok_or_else(|| Error::Format("calib missing Tr".into()))?;
    if p2.len() != 12 || tr.len() != 12 {
        return Err(Error::Format("calib rows must hold 12 values".into()));
    }
    let (fx, fy, cx, cy) = (p2[0], p2[5], p2[2], p2[6]);
    if fx <= 0.0 || fy <= 0.0 {
        return Err(Error::Format("calib: non-positive focal length".into()));
    }
    // residual translation in camera frame: t = K^-1 . P2[:,3]
    let tz = p2[11];
    let t = [(p2[3] - cx * tz) / fx, (p2[7] - cy * tz) / fy, tz];
    let mut ext = Transform4::identity();
    for r in 0..3 {
        for c in 0..4 {
            ext.m[r * 4 + c] = tr[r * 4 + c];
        }
        ext.m[r * 4 + 3] += t[r];
    }
    let cam = CameraModel { fx, fy, cx, cy, extrinsic: ext, width, height };
    cam.validate()?;
    Ok(cam)
}

// ---------------------------------------------------------------------------
// PPM (P6)
// ---------------------------------------------------------------------------

pub fn write_ppm(img: &RgbImage, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", img.width, img.height)?;
    f.write_all(&img.data)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    // header: "P6" <ws> width <ws> height <ws> maxval <single ws> data
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("ppm: truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(Error::Format("ppm: not a P6 file".into()));
    }
    let width: usize = token(&bytes)?.parse().map_err(|_| Error::Format("ppm: bad width".into()))?;
    let height: usize = token(&bytes)?.parse().map_err(|_| Error::Format("ppm: bad height".into()))?;
    let maxval: usize = token(&bytes)?.parse().map_err(|_| Error::Format("ppm: bad maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Format("ppm: only maxval 255 supported".into()));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(Error::Format("ppm: truncated pixel data".into()));
    }
    Ok(RgbImage { width, height, data: bytes[pos..pos + need].to_vec() })
}

/// One fixed flat color per class id; channels are spaced 96 apart so any
/// two classes differ by at least 64 units in some channel (supports up to
/// 27 classes). Ignore renders black.
pub fn class_color(class: u16) -> [u8; 3] {
    if class == IGNORE_SEMANTIC {
        return [0, 0, 0];
    }
    let i = class as usize;
    [
        ((i % 3) * 96 + 16) as u8,
        (((i / 3) % 3) * 96 + 16) as u8,
        (((i / 9) % 3) * 96 + 16) as u8,
    ]
}

pub fn colorize_labels(labels: &LabelImage) -> RgbImage {
    let mut img = RgbImage::new(labels.width, labels.height);
    for r in 0..labels.height {
        for c in 0..labels.width {
            img.set_pixel(r, c, class_color(labels.semantic[labels.idx(r, c)]));
        }
    }
    img
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub width: usize,
    pub height: usize,
    pub class_count: u16,
    pub instances: usize,
    pub points_per_class: usize,
    pub sparsity: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            width: 64,
            height: 64,
            class_count: 4,
            instances: 3,
            points_per_class: 4,
            sparsity: 0.05,
        }
    }
}

/// Generator metadata: the exact extent of each painted rectangle, used by
/// tests as an oracle for segmenter output.
#[derive(Debug, Clone, PartialEq)]
pub struct RectMeta {
    /// Inclusive pixel bounds (row0, col0, row1, col1).
    pub bounds: (usize, usize, usize, usize),
    pub class: u16,
    pub instance: u16,
    pub depth: f64,
}

pub const BACKGROUND_CLASS: u16 = 0;

fn synth_camera(width: usize, height: usize) -> CameraModel {
    CameraModel {
        fx: width as f64,
        fy: width as f64,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        extrinsic: Transform4::identity(),
        width,
        height,
    }
}

/// Deterministic scene: non-overlapping flat-color rectangles over a
/// background class, and a point cloud back-projected from a seeded subset
/// of labeled pixels at per-instance depth planes (0.5 m apart), so every
/// point's projection lands on a pixel whose label matches the point's.
pub fn synth_scene(seed: u64, params: &SynthParams) -> Result<Scene> {
    synth_scene_with_meta(seed, params).map(|(s, _)| s)
}

pub fn synth_scene_with_meta(seed: u64, params: &SynthParams) -> Result<(Scene, Vec<RectMeta>)> {
    if params.class_count < 2 {
        return Err(Error::Contract("synth: class_count must be >= 2".into()));
    }
    if params.class_count as usize > 27 {
        return Err(Error::Contract("synth: at most 27 classes supported".into()));
    }
    let (w, h) = (params.width, params.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // place non-overlapping rectangles
    let mut rects: Vec<RectMeta> = Vec::new();
    for idx in 0..params.instances {
        let class = 1 + (idx as u16 % (params.class_count - 1));
        let depth = 4.0 + 0.5 * idx as f64;
        let mut placed = false;
        for _attempt in 0..200 {
            let rw = rng.gen_range(w / 8..=(w / 3).max(w / 8 + 1));
            let rh = rng.gen_range(h / 8..=(h / 3).max(h / 8 + 1));
            if rw == 0 || rh == 0 || rw >= w || rh >= h {
                continue;
            }
            let c0 = rng.gen_range(0..w - rw);
            let r0 = rng.gen_range(0..h - rh);
            let cand = (r0, c0, r0 + rh - 1, c0 + rw - 1);
            let overlaps = rects.iter().any(|r| {
                let (a0, b0, a1, b1) = r.bounds;
                !(cand.2 < a0 || cand.0 > a1 || cand.3 < b0 || cand.1 > b1)
            });
            if !overlaps {
                rects.push(RectMeta {
                    bounds: cand,
                    class,
                    instance: idx as u16 + 1,
                    depth,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place rectangle {idx} without overlap"
            )));
        }
    }

    // paint
    let mut image = RgbImage::new(w, h);
    let mut pixel_sem = vec![BACKGROUND_CLASS; w * h];
    let mut pixel_inst = vec![INVALID_INSTANCE; w * h];
    let bg_color = class_color(BACKGROUND_CLASS);
    for r in 0..h {
        for c in 0..w {
            image.set_pixel(r, c, bg_color);
        }
    }
    for rect in &rects {
        let (r0, c0, r1, c1) = rect.bounds;
        let color = class_color(rect.class);
        for r in r0..=r1 {
            for c in c0..=c1 {
                image.set_pixel(r, c, color);
                pixel_sem[r * w + c] = rect.class;
                pixel_inst[r * w + c] = rect.instance;
            }
        }
    }

    // sample labeled pixels per region and back-project
    let cam = synth_camera(w, h);
    let bg_depth = 4.0 + 0.5 * params.instances as f64 + 2.0;
    let mut points = Vec::new();
    let mut point_semantic = Vec::new();
    let mut point_instance = Vec::new();

    let sample_region = |pixels: Vec<(usize, usize)>,
                             depth: f64,
                             rng: &mut ChaCha8Rng,
                             points: &mut Vec<Point>,
                             sems: &mut Vec<u16>,
                             insts: &mut Vec<u16>,
                             sem_of: &dyn Fn(usize, usize) -> (u16, u16)| {
        let area = pixels.len();
        if area == 0 {
            return;
        }
        let want = ((params.sparsity * area as f64).round() as usize)
            .max(params.points_per_class)
            .min(area);
        let mut order = pixels;
        order.shuffle(rng);
        for &(r, c) in order.iter().take(want) {
            let (x, y, z) = unproject(&cam, c, r, depth);
            points.push(Point { x, y, z, intensity: rng.gen_range(0.0..1.0) });
            let (s, i) = sem_of(r, c);
            sems.push(s);
            insts.push(i);
        }
    };

    for rect in &rects {
        let (r0, c0, r1, c1) = rect.bounds;
        let pixels: Vec<(usize, usize)> = (r0..=r1)
            .flat_map(|r| (c0..=c1).map(move |c| (r, c)))
            .collect();
        let (class, inst) = (rect.class, rect.instance);
        sample_region(
            pixels,
            rect.depth,
            &mut rng,
            &mut points,
            &mut point_semantic,
            &mut point_instance,
            &|_, _| (class, inst),
        );
    }
    let bg_pixels: Vec<(usize, usize)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| pixel_sem[r * w + c] == BACKGROUND_CLASS)
        .collect();
    sample_region(
        bg_pixels,
        bg_depth,
        &mut rng,
        &mut points,
        &mut point_semantic,
        &mut point_instance,
        &|_, _| (BACKGROUND_CLASS, INVALID_INSTANCE),
    );

    let scene = Scene {
        image,
        cloud: PointCloud { points },
        point_semantic,
        point_instance,
        cam,
        class_count: params.class_count,
    };
    Ok((scene, rects))
}
