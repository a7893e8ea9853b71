//! Dataset layout, PNG IO, and the synthetic cuboid rendering pipeline.
//!
//! A dataset is a directory with a `manifest.json` describing every scene:
//! image path, optional depth path, a row-major 3x3 intrinsics matrix, and
//! the annotated 3D boxes with their projected 2D boxes and a visible
//! surface point for prompting. Depth maps are 16-bit grayscale PNGs in
//! millimeters with 0 marking invalid pixels.
//!
//! The synthesizer ray-casts floating cuboids of four shape categories over
//! a gradient background. Every random draw derives from one seed, pixels
//! are raster-order deterministic, and PNG encoding carries no metadata, so
//! regenerating a dataset with the same seed reproduces every byte.

use crate::encoders::ImageTensor;
use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{project_box, Box3D, Intrinsics};
use crate::interpreter::Prompt2D;
use crate::losses::BoxTarget;
use crate::seeding;
use crate::Mat;
use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

/// Shape categories the synthesizer emits, in their canonical order.
pub const CATEGORIES: [&str; 4] = ["cube", "slab", "pillar", "crate"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectMeta {
    pub category: String,
    pub center: [f64; 3],
    pub dims: [f64; 3],
    /// Row-major column-axis rotation.
    pub rotation: [f64; 9],
    /// Tight projected box, clamped to the image.
    pub box2d: [f64; 4],
    /// A pixel where the object is actually visible.
    pub point2d: [f64; 2],
}

impl ObjectMeta {
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.rotation)
    }

    pub fn to_target(&self) -> BoxTarget {
        BoxTarget {
            center: Vector3::from_column_slice(&self.center),
            dims: Vector3::from_column_slice(&self.dims),
            rotation: self.rotation_matrix(),
        }
    }

    pub fn to_box(&self, score: f64) -> Result<Box3D> {
        Box3D::new(
            Vector3::from_column_slice(&self.center),
            Vector3::from_column_slice(&self.dims),
            self.rotation_matrix(),
            score,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneMeta {
    pub id: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    /// Row-major 3x3 camera matrix.
    pub intrinsics: [f64; 9],
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ObjectMeta>,
}

impl SceneMeta {
    pub fn camera(&self) -> Result<Intrinsics> {
        Intrinsics::from_matrix(&self.intrinsics, self.width, self.height)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub scenes: Vec<SceneMeta>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported schema version {}, expected {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        for s in &self.scenes {
            let k = s.camera()?;
            for (j, o) in s.objects.iter().enumerate() {
                o.to_box(1.0).map_err(|e| {
                    Error::Manifest(format!("scene {} object {j}: {e}", s.id))
                })?;
                if o.center[2] <= 0.0 {
                    return Err(Error::Manifest(format!(
                        "scene {} object {j} behind the camera",
                        s.id
                    )));
                }
                let [x1, y1, x2, y2] = o.box2d;
                if !(x1 < x2 && y1 < y2 && x1 >= 0.0 && y1 >= 0.0) {
                    return Err(Error::Manifest(format!(
                        "scene {} object {j} has a degenerate 2d box",
                        s.id
                    )));
                }
                let _ = k;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// One scene pulled into memory: pixels in [0,1], depth in meters with its
/// 0/1 validity mask, both `(h*w, 1)` row-major.
pub struct LoadedScene {
    pub meta: SceneMeta,
    pub image: ImageTensor,
    pub depth: Option<(Mat, Mat)>,
}

pub fn load_scene(root: &Path, meta: &SceneMeta) -> Result<LoadedScene> {
    let img_path = root.join(&meta.image);
    let dyn_img = image::open(&img_path)
        .map_err(|e| Error::Image(format!("{}: {e}", img_path.display())))?;
    let rgb = dyn_img.to_rgb8();
    if rgb.width() as usize != meta.width || rgb.height() as usize != meta.height {
        return Err(Error::Image(format!(
            "{}: expected {}x{}, got {}x{}",
            img_path.display(),
            meta.width,
            meta.height,
            rgb.width(),
            rgb.height()
        )));
    }
    let image = ImageTensor::from_rgb8(meta.width, meta.height, rgb.as_raw())?;

    let depth = match &meta.depth {
        None => None,
        Some(rel) => {
            let dpath = root.join(rel);
            let d = image::open(&dpath)
                .map_err(|e| Error::Image(format!("{}: {e}", dpath.display())))?
                .to_luma16();
            if d.width() as usize != meta.width || d.height() as usize != meta.height {
                return Err(Error::Image(format!(
                    "{}: depth size does not match the image",
                    dpath.display()
                )));
            }
            let n = meta.width * meta.height;
            let mut meters = Mat::zeros((n, 1));
            let mut mask = Mat::zeros((n, 1));
            for (i, px) in d.as_raw().iter().enumerate() {
                if *px > 0 {
                    meters[[i, 0]] = *px as f64 / 1000.0;
                    mask[[i, 0]] = 1.0;
                }
            }
            Some((meters, mask))
        }
    };
    Ok(LoadedScene { meta: meta.clone(), image, depth })
}

pub fn save_image_png(path: &Path, img: &ImageTensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(img.rows * img.cols * 3);
    for i in 0..img.rows * img.cols {
        for c in 0..3 {
            bytes.push((img.data[[i, c]] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let buf = image::RgbImage::from_raw(img.cols as u32, img.rows as u32, bytes)
        .ok_or_else(|| Error::Image("pixel buffer does not fit its size".into()))?;
    buf.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Depth in meters, `(h*w, 1)`, non-positive entries are written as invalid.
pub fn save_depth_png(path: &Path, depth_m: &Mat, width: usize, height: usize) -> Result<()> {
    if depth_m.dim() != (width * height, 1) {
        return Err(Error::Shape(format!(
            "depth {:?} does not match {width}x{height}",
            depth_m.dim()
        )));
    }
    let mut px = Vec::with_capacity(width * height);
    for i in 0..width * height {
        let d = depth_m[[i, 0]];
        let mm = if d > 0.0 { (d * 1000.0).round().clamp(1.0, 65535.0) as u16 } else { 0 };
        px.push(mm);
    }
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
        width as u32,
        height as u32,
        px,
    )
    .ok_or_else(|| Error::Image("depth buffer does not fit its size".into()))?;
    buf.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub z_min: f64,
    pub z_max: f64,
    /// Focal length range as a multiple of the mean image side.
    pub focal_min: f64,
    pub focal_max: f64,
    /// Largest rotation angle in radians.
    pub max_tilt: f64,
    /// Smallest projected side of an accepted object, in pixels.
    pub min_pixels: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 64,
            height: 64,
            min_objects: 1,
            max_objects: 3,
            z_min: 2.0,
            z_max: 6.0,
            focal_min: 0.9,
            focal_max: 1.3,
            max_tilt: 0.6,
            min_pixels: 7.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config("synthetic images must be at least 16x16".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config("need 1 <= min_objects <= max_objects".into()));
        }
        if !(self.z_min > 0.0 && self.z_min < self.z_max) {
            return Err(Error::Config("need 0 < z_min < z_max".into()));
        }
        if !(self.focal_min > 0.0 && self.focal_min <= self.focal_max) {
            return Err(Error::Config("need 0 < focal_min <= focal_max".into()));
        }
        Ok(())
    }
}

/// Per-category albedo, fixed so colors identify shapes.
fn albedo(category: usize) -> [f64; 3] {
    match category {
        0 => [0.85, 0.30, 0.25],
        1 => [0.25, 0.65, 0.85],
        2 => [0.35, 0.80, 0.35],
        _ => [0.85, 0.70, 0.25],
    }
}

fn sample_dims(category: usize, rng: &mut impl Rng) -> Vector3<f64> {
    match category {
        0 => {
            let s = rng.random_range(0.3..0.6);
            let a = rng.random_range(0.9..1.1);
            let b = rng.random_range(0.9..1.1);
            Vector3::new(s, s * a, s * b)
        }
        1 => {
            let x = rng.random_range(0.5..0.8);
            let y = rng.random_range(0.2..0.3);
            let z = rng.random_range(0.5..0.8);
            Vector3::new(x, y, z)
        }
        2 => {
            let x = rng.random_range(0.2..0.35);
            let y = rng.random_range(0.55..0.8);
            let z = rng.random_range(0.2..0.35);
            Vector3::new(x, y, z)
        }
        _ => {
            let x = rng.random_range(0.25..0.75);
            let y = rng.random_range(0.25..0.75);
            let z = rng.random_range(0.25..0.75);
            Vector3::new(x, y, z)
        }
    }
}

fn sample_rotation(max_tilt: f64, rng: &mut impl Rng) -> Matrix3<f64> {
    let axis = loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 {
            break v / n;
        }
    };
    let angle = rng.random_range(-max_tilt..max_tilt);
    *Rotation3::from_axis_angle(&Unit::new_unchecked(axis), angle).matrix()
}

/// Slab intersection of the ray `t * dir` with a box, in the box frame.
/// Returns the entry distance and the face axis it crosses.
fn ray_box_hit(box3d: &Box3D, dir: &Vector3<f64>) -> Option<(f64, usize, f64)> {
    let rt = box3d.rotation.transpose();
    let o = rt * (-box3d.center);
    let d = rt * dir;
    let half = 0.5 * box3d.dims;
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0usize;
    let mut side = 0.0f64;
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if o[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let mut t0 = (-half[a] - o[a]) * inv;
        let mut t1 = (half[a] - o[a]) * inv;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_near {
            t_near = t0;
            axis = a;
            // The entry face always opposes the ray along this axis.
            side = -d[a].signum();
        }
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_near <= 1e-9 || !t_near.is_finite() {
        return None;
    }
    Some((t_near, axis, side))
}

fn background(row: usize, col: usize, rows: usize, pixel_tag: u64) -> [f64; 3] {
    let t = row as f64 / (rows.max(2) - 1) as f64;
    let top = [0.88, 0.91, 0.96];
    let bot = [0.34, 0.38, 0.47];
    let h = seeding::splitmix64(pixel_tag ^ ((row as u64) << 32 | col as u64));
    let mut out = [0.0; 3];
    for c in 0..3 {
        let noise = ((h >> (c * 16)) & 0xffff) as f64 / 65535.0 - 0.5;
        out[c] = (top[c] * (1.0 - t) + bot[c] * t + 0.05 * noise).clamp(0.0, 1.0);
    }
    out
}

struct Rendered {
    image: ImageTensor,
    /// Z-depth in meters, 0 where no object covers the pixel.
    depth: Mat,
    /// Index of the nearest object per pixel.
    ids: Vec<Option<usize>>,
}

fn render(k: &Intrinsics, boxes: &[(usize, Box3D)], noise_tag: u64) -> Result<Rendered> {
    let (w, h) = (k.width, k.height);
    let light = Vector3::new(0.45, -0.75, -0.5).normalize();
    let px = exec::map_indexed(w * h, |i| {
        let (row, col) = (i / w, i % w);
        let dir = Vector3::new(
            (col as f64 + 0.5 - k.cx) / k.fx,
            (row as f64 + 0.5 - k.cy) / k.fy,
            1.0,
        );
        let mut best: Option<(f64, usize, Vector3<f64>)> = None;
        for (idx, (_, b)) in boxes.iter().enumerate() {
            if let Some((t, axis, side)) = ray_box_hit(b, &dir) {
                if best.is_none_or(|(bt, _, _)| t < bt) {
                    best = Some((t, idx, side * b.rotation.column(axis)));
                }
            }
        }
        match best {
            Some((t, idx, normal)) => {
                let base = albedo(boxes[idx].0);
                let lit = 0.55 + 0.45 * normal.dot(&light).abs();
                let rgb = [
                    (base[0] * lit).clamp(0.0, 1.0),
                    (base[1] * lit).clamp(0.0, 1.0),
                    (base[2] * lit).clamp(0.0, 1.0),
                ];
                (rgb, t, Some(idx))
            }
            None => (background(row, col, h, noise_tag), 0.0, None),
        }
    });

    let mut data = Mat::zeros((w * h, 3));
    let mut depth = Mat::zeros((w * h, 1));
    let mut ids = Vec::with_capacity(w * h);
    for (i, (rgb, t, id)) in px.into_iter().enumerate() {
        for c in 0..3 {
            data[[i, c]] = rgb[c];
        }
        depth[[i, 0]] = t;
        ids.push(id);
    }
    Ok(Rendered { image: ImageTensor::new(h, w, data)?, depth, ids })
}

/// Tight projected 2D box, clamped to the image. `None` when every corner
/// lands outside or the box degenerates.
fn projected_box2d(k: &Intrinsics, b: &Box3D) -> Option<[f64; 4]> {
    let corners = project_box(b, k).ok()?;
    let (mut x1, mut y1) = (f64::INFINITY, f64::INFINITY);
    let (mut x2, mut y2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (u, v) in corners {
        x1 = x1.min(u);
        y1 = y1.min(v);
        x2 = x2.max(u);
        y2 = y2.max(v);
    }
    let x1 = x1.clamp(0.0, k.width as f64);
    let y1 = y1.clamp(0.0, k.height as f64);
    let x2 = x2.clamp(0.0, k.width as f64);
    let y2 = y2.clamp(0.0, k.height as f64);
    (x2 - x1 > 1.0 && y2 - y1 > 1.0).then_some([x1, y1, x2, y2])
}

fn iou2d(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if ua <= 0.0 {
        0.0
    } else {
        inter / ua
    }
}

struct PlacedScene {
    k: Intrinsics,
    boxes: Vec<(usize, Box3D)>,
    box2ds: Vec<[f64; 4]>,
}

fn place_objects(cfg: &SynthConfig, attempt_seed: u64) -> Option<PlacedScene> {
    let mut rng = seeding::rng(attempt_seed);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let f_base = 0.5 * (w + h);
    let fx = f_base * rng.random_range(cfg.focal_min..cfg.focal_max);
    let fy = fx * rng.random_range(0.97..1.03);
    let cx = w * rng.random_range(0.45..0.55);
    let cy = h * rng.random_range(0.45..0.55);
    let k = Intrinsics::new(fx, fy, cx, cy, cfg.width, cfg.height).ok()?;

    let n_objects = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut boxes: Vec<(usize, Box3D)> = Vec::new();
    let mut box2ds: Vec<[f64; 4]> = Vec::new();
    for _ in 0..n_objects {
        let mut placed = false;
        for _ in 0..40 {
            let cat = rng.random_range(0..CATEGORIES.len());
            let dims = sample_dims(cat, &mut rng);
            let z = rng.random_range(cfg.z_min..cfg.z_max);
            if fx.min(fy) * dims.min() / z < cfg.min_pixels {
                continue;
            }
            let u = rng.random_range(0.2 * w..0.8 * w);
            let v = rng.random_range(0.2 * h..0.8 * h);
            let center = Vector3::new((u - cx) * z / fx, (v - cy) * z / fy, z);
            let rot = sample_rotation(cfg.max_tilt, &mut rng);
            let Ok(b) = Box3D::new(center, dims, rot, 1.0) else { continue };
            let Some(b2) = projected_box2d(&k, &b) else { continue };
            let margin = 2.0;
            if b2[0] < margin || b2[1] < margin || b2[2] > w - margin || b2[3] > h - margin {
                continue;
            }
            if box2ds.iter().any(|prev| iou2d(prev, &b2) > 0.3) {
                continue;
            }
            boxes.push((cat, b));
            box2ds.push(b2);
            placed = true;
            break;
        }
        if !placed {
            break;
        }
    }
    (boxes.len() >= cfg.min_objects).then_some(PlacedScene { k, boxes, box2ds })
}

/// Minimum visible pixels for an object to count as present.
const MIN_VISIBLE: usize = 12;

fn synth_scene(cfg: &SynthConfig, scene_seed: u64) -> Result<(Rendered, PlacedScene, Vec<[f64; 2]>)> {
    for attempt in 0..20u64 {
        let Some(placed) = place_objects(cfg, seeding::derive(scene_seed, attempt)) else {
            continue;
        };
        let rendered = render(&placed.k, &placed.boxes, seeding::derive(scene_seed, 1000 + attempt))?;
        let mut counts = vec![0usize; placed.boxes.len()];
        for id in rendered.ids.iter().flatten() {
            counts[*id] += 1;
        }
        if counts.iter().any(|c| *c < MIN_VISIBLE) {
            continue;
        }
        // Visible anchor point: the object pixel nearest its 2D box center.
        let mut points = vec![[0.0f64; 2]; placed.boxes.len()];
        let mut best = vec![f64::INFINITY; placed.boxes.len()];
        for (i, id) in rendered.ids.iter().enumerate() {
            let Some(idx) = id else { continue };
            let (row, col) = (i / cfg.width, i % cfg.width);
            let (u, v) = (col as f64 + 0.5, row as f64 + 0.5);
            let b2 = &placed.box2ds[*idx];
            let (mu, mv) = (0.5 * (b2[0] + b2[2]), 0.5 * (b2[1] + b2[3]));
            let d2 = (u - mu).powi(2) + (v - mv).powi(2);
            if d2 < best[*idx] {
                best[*idx] = d2;
                points[*idx] = [u, v];
            }
        }
        return Ok((rendered, placed, points));
    }
    Err(Error::Manifest(format!(
        "could not synthesize a scene for seed {scene_seed} after 20 attempts"
    )))
}

/// Generates `n_scenes` scenes under `root` (images/, depth/, manifest.json).
/// Fully determined by `seed`.
pub fn synth_dataset(root: &Path, n_scenes: usize, cfg: &SynthConfig, seed: u64) -> Result<Manifest> {
    cfg.validate()?;
    let images_dir = root.join("images");
    let depth_dir = root.join("depth");
    std::fs::create_dir_all(&images_dir)
        .map_err(|e| Error::io(images_dir.display().to_string(), e))?;
    std::fs::create_dir_all(&depth_dir)
        .map_err(|e| Error::io(depth_dir.display().to_string(), e))?;

    let mut scenes = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let scene_seed = seeding::derive(seed, i as u64);
        let (rendered, placed, points) = synth_scene(cfg, scene_seed)?;
        let id = format!("scene_{i:05}");
        let image_rel = format!("images/{id}.png");
        let depth_rel = format!("depth/{id}.png");
        save_image_png(&root.join(&image_rel), &rendered.image)?;
        save_depth_png(&root.join(&depth_rel), &rendered.depth, cfg.width, cfg.height)?;

        let k = placed.k;
        let objects = placed
            .boxes
            .iter()
            .zip(&placed.box2ds)
            .zip(&points)
            .map(|(((cat, b), b2), pt)| ObjectMeta {
                category: CATEGORIES[*cat].to_string(),
                center: [b.center.x, b.center.y, b.center.z],
                dims: [b.dims.x, b.dims.y, b.dims.z],
                rotation: {
                    let mut r = [0.0; 9];
                    for i in 0..3 {
                        for j in 0..3 {
                            r[i * 3 + j] = b.rotation[(i, j)];
                        }
                    }
                    r
                },
                box2d: *b2,
                point2d: *pt,
            })
            .collect();
        scenes.push(SceneMeta {
            id,
            image: image_rel,
            depth: Some(depth_rel),
            intrinsics: k.to_matrix(),
            width: cfg.width,
            height: cfg.height,
            objects,
        });
    }
    let manifest = Manifest { schema_version: SCHEMA_VERSION, scenes };
    manifest.save(&root.join("manifest.json"))?;
    Ok(manifest)
}

/// Box prompt jittered by up to `frac` of the box size per edge, clamped to
/// the image and kept non-degenerate.
pub fn perturbed_box_prompt(
    obj: &ObjectMeta,
    width: usize,
    height: usize,
    frac: f64,
    rng: &mut impl Rng,
) -> Prompt2D {
    let [x1, y1, x2, y2] = obj.box2d;
    if frac <= 0.0 {
        return Prompt2D::Box { x1, y1, x2, y2 };
    }
    let (bw, bh) = (x2 - x1, y2 - y1);
    let mut j = |extent: f64| extent * rng.random_range(-frac..frac);
    let nx1 = (x1 + j(bw)).clamp(0.0, width as f64 - 1.0);
    let ny1 = (y1 + j(bh)).clamp(0.0, height as f64 - 1.0);
    let nx2 = (x2 + j(bw)).clamp(nx1 + 1.0, width as f64);
    let ny2 = (y2 + j(bh)).clamp(ny1 + 1.0, height as f64);
    Prompt2D::Box { x1: nx1, y1: ny1, x2: nx2, y2: ny2 }
}

pub fn point_prompt(obj: &ObjectMeta) -> Prompt2D {
    Prompt2D::Point { u: obj.point2d[0], v: obj.point2d[1] }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn tiny_cfg() -> SynthConfig {
        SynthConfig { width: 48, height: 48, max_objects: 2, ..SynthConfig::default() }
    }

    #[test]
    fn synthesis_is_byte_reproducible() {
        let cfg = tiny_cfg();
        let a = TempDir::new().unwrap();
        let b = TempDir::new().unwrap();
        let ma = synth_dataset(a.path(), 2, &cfg, 77).unwrap();
        let mb = synth_dataset(b.path(), 2, &cfg, 77).unwrap();
        assert_eq!(serde_json::to_string(&ma).unwrap(), serde_json::to_string(&mb).unwrap());
        for s in &ma.scenes {
            for rel in [Some(&s.image), s.depth.as_ref()].into_iter().flatten() {
                let ba = std::fs::read(a.path().join(rel)).unwrap();
                let bb = std::fs::read(b.path().join(rel)).unwrap();
                assert_eq!(ba, bb, "{rel} differs between identical runs");
            }
        }
        let mc = synth_dataset(b.path(), 2, &cfg, 78).unwrap();
        assert_ne!(
            serde_json::to_string(&ma).unwrap(),
            serde_json::to_string(&mc).unwrap(),
            "different seeds must differ"
        );
    }

    #[test]
    fn saved_scenes_load_back_consistently() {
        let cfg = tiny_cfg();
        let dir = TempDir::new().unwrap();
        let m = synth_dataset(dir.path(), 2, &cfg, 5).unwrap();
        let loaded = Manifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(m.scenes.len(), loaded.scenes.len());

        for meta in &loaded.scenes {
            let scene = load_scene(dir.path(), meta).unwrap();
            assert_eq!(scene.image.rows, cfg.height);
            assert_eq!(scene.image.cols, cfg.width);
            let (depth, mask) = scene.depth.as_ref().unwrap();
            let valid = mask.iter().filter(|v| **v == 1.0).count();
            assert!(valid >= MIN_VISIBLE * meta.objects.len());
            for i in 0..depth.nrows() {
                if mask[[i, 0]] == 1.0 {
                    assert!(depth[[i, 0]] > 0.5 && depth[[i, 0]] < 10.0);
                }
            }
        }
    }

    #[test]
    fn depth_pixels_match_analytic_ray_hits() {
        let cfg = tiny_cfg();
        let dir = TempDir::new().unwrap();
        let m = synth_dataset(dir.path(), 1, &cfg, 11).unwrap();
        let meta = &m.scenes[0];
        let scene = load_scene(dir.path(), meta).unwrap();
        let k = meta.camera().unwrap();
        let (depth, mask) = scene.depth.as_ref().unwrap();
        let boxes: Vec<Box3D> =
            meta.objects.iter().map(|o| o.to_box(1.0).unwrap()).collect();

        let mut checked = 0usize;
        for i in 0..depth.nrows() {
            if mask[[i, 0]] != 1.0 {
                continue;
            }
            let (row, col) = (i / cfg.width, i % cfg.width);
            let dir3 = Vector3::new(
                (col as f64 + 0.5 - k.cx) / k.fx,
                (row as f64 + 0.5 - k.cy) / k.fy,
                1.0,
            );
            let analytic = boxes
                .iter()
                .filter_map(|b| ray_box_hit(b, &dir3).map(|(t, _, _)| t))
                .fold(f64::INFINITY, f64::min);
            assert!(analytic.is_finite(), "valid depth pixel with no hit");
            // Millimeter quantization.
            assert!(
                (depth[[i, 0]] - analytic).abs() <= 6e-4,
                "pixel {i}: {} vs {analytic}",
                depth[[i, 0]]
            );
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn hit_points_lie_on_the_reported_box() {
        let cfg = tiny_cfg();
        let dir = TempDir::new().unwrap();
        let m = synth_dataset(dir.path(), 1, &cfg, 13).unwrap();
        let meta = &m.scenes[0];
        let k = meta.camera().unwrap();
        for obj in &meta.objects {
            let b = obj.to_box(1.0).unwrap();
            // The prompt point must ray-cast back onto this object's box.
            let dir3 = Vector3::new(
                (obj.point2d[0] - k.cx) / k.fx,
                (obj.point2d[1] - k.cy) / k.fy,
                1.0,
            );
            let (t, _, _) = ray_box_hit(&b, &dir3).expect("prompt point misses its box");
            let p = t * dir3;
            assert!(b.contains(&p, 1e-6), "hit point off the box surface");
        }
    }

    #[test]
    fn projected_boxes_bound_the_visible_pixels() {
        let cfg = tiny_cfg();
        let dir = TempDir::new().unwrap();
        let m = synth_dataset(dir.path(), 2, &cfg, 17).unwrap();
        for meta in &m.scenes {
            let scene = load_scene(dir.path(), meta).unwrap();
            let k = meta.camera().unwrap();
            let boxes: Vec<Box3D> =
                meta.objects.iter().map(|o| o.to_box(1.0).unwrap()).collect();
            let (_, mask) = scene.depth.as_ref().unwrap();
            for i in 0..mask.nrows() {
                if mask[[i, 0]] != 1.0 {
                    continue;
                }
                let (row, col) = (i / cfg.width, i % cfg.width);
                let dir3 = Vector3::new(
                    (col as f64 + 0.5 - k.cx) / k.fx,
                    (row as f64 + 0.5 - k.cy) / k.fy,
                    1.0,
                );
                let (idx, _) = boxes
                    .iter()
                    .enumerate()
                    .filter_map(|(j, b)| ray_box_hit(b, &dir3).map(|(t, _, _)| (j, t)))
                    .fold((usize::MAX, f64::INFINITY), |acc, (j, t)| {
                        if t < acc.1 {
                            (j, t)
                        } else {
                            acc
                        }
                    });
                let b2 = meta.objects[idx].box2d;
                let (u, v) = (col as f64 + 0.5, row as f64 + 0.5);
                assert!(
                    u >= b2[0] - 1.0 && u <= b2[2] + 1.0 && v >= b2[1] - 1.0 && v <= b2[3] + 1.0,
                    "visible pixel outside its object's 2d box"
                );
            }
        }
    }

    #[test]
    fn manifest_rejects_bad_content() {
        let cfg = tiny_cfg();
        let dir = TempDir::new().unwrap();
        let mut m = synth_dataset(dir.path(), 1, &cfg, 19).unwrap();
        m.schema_version = 2;
        assert!(m.validate().is_err());
        m.schema_version = SCHEMA_VERSION;
        m.scenes[0].objects[0].dims = [0.0, 0.5, 0.5];
        assert!(m.validate().is_err());
    }

    #[test]
    fn prompts_stay_inside_the_image() {
        let cfg = tiny_cfg();
        let dir = TempDir::new().unwrap();
        let m = synth_dataset(dir.path(), 3, &cfg, 23).unwrap();
        let mut rng = crate::seeding::rng(99);
        for meta in &m.scenes {
            for obj in &meta.objects {
                for _ in 0..20 {
                    let p = perturbed_box_prompt(obj, meta.width, meta.height, 0.1, &mut rng);
                    p.validate(meta.width, meta.height).unwrap();
                }
                point_prompt(obj).validate(meta.width, meta.height).unwrap();
            }
        }
    }
}
