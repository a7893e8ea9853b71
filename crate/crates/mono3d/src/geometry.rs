//! Camera intrinsics, viewing rays, oriented 3D boxes, and box IoU.
//!
//! Conventions, used everywhere downstream:
//! - Camera coordinates: x right, y down, z forward; units are meters.
//! - Pixel coordinates are continuous; the center of the top-left pixel of a
//!   `width x height` image is (0.5, 0.5).
//! - A grid cell (i, j) of a `rows x cols` feature grid covers an aligned
//!   image tile and samples the ray through its center pixel.
//! - `Box3D` dimensions (w, h, l) lie along the local x, y, z axes.
//!
//! The exact IoU clips one box's polyhedron by the other's six face planes
//! and measures the remaining volume; the Monte Carlo IoU estimates the same
//! quantity by sampling and is bit-deterministic for a given seed regardless
//! of thread count.

use crate::error::{Error, Result};
use crate::exec;
use crate::seeding;
use crate::Mat;
use nalgebra::{Matrix3, Vector3};
use rand::Rng;

/// Pinhole camera intrinsics plus the image size they refer to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.fx, self.fy, self.cx, self.cy];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Intrinsics("non-finite entries".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Intrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Intrinsics("image size must be nonzero".into()));
        }
        if self.cx < 0.0
            || self.cx > self.width as f64
            || self.cy < 0.0
            || self.cy > self.height as f64
        {
            return Err(Error::Intrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Direction of the viewing ray through pixel (u, v), as the (x, y)
    /// components of the unnormalized ray (x, y, 1).
    pub fn ray_at(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.cx) / self.fx, (v - self.cy) / self.fy)
    }

    /// Projects a camera-space point to pixels. `None` when z is not positive.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Intrinsics of the same camera after uniformly resampling the image by
    /// `s` (s=2 doubles the resolution).
    pub fn scaled(&self, s: f64) -> Intrinsics {
        Intrinsics {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
            width: (self.width as f64 * s).round() as usize,
            height: (self.height as f64 * s).round() as usize,
        }
    }

    /// Row-major 3x3 matrix form.
    pub fn to_matrix(&self) -> [f64; 9] {
        [self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0]
    }

    pub fn from_matrix(m: &[f64; 9], width: usize, height: usize) -> Result<Self> {
        Intrinsics::new(m[0], m[4], m[2], m[5], width, height)
    }
}

/// Per-cell viewing rays for a feature grid, stored as a `(rows*cols, 2)`
/// row-major matrix of (x, y) ray components.
#[derive(Debug, Clone)]
pub struct RayMap {
    pub rows: usize,
    pub cols: usize,
    pub rays: Mat,
}

impl RayMap {
    pub fn at(&self, i: usize, j: usize) -> (f64, f64) {
        let r = i * self.cols + j;
        (self.rays[[r, 0]], self.rays[[r, 1]])
    }
}

/// Rays through the tile centers of a `rows x cols` grid over the image.
pub fn make_rays(k: &Intrinsics, rows: usize, cols: usize) -> Result<RayMap> {
    k.validate()?;
    if rows == 0 || cols == 0 {
        return Err(Error::Intrinsics("ray grid must be nonzero".into()));
    }
    let mut rays = Mat::zeros((rows * cols, 2));
    for i in 0..rows {
        let v = (i as f64 + 0.5) * k.height as f64 / rows as f64;
        for j in 0..cols {
            let u = (j as f64 + 0.5) * k.width as f64 / cols as f64;
            let (x, y) = k.ray_at(u, v);
            rays[[i * cols + j, 0]] = x;
            rays[[i * cols + j, 1]] = y;
        }
    }
    Ok(RayMap { rows, cols, rays })
}

/// Oriented 3D box in camera coordinates with a confidence score.
#[derive(Debug, Clone, PartialEq)]
pub struct Box3D {
    pub center: Vector3<f64>,
    /// (w, h, l) along the local x, y, z axes; strictly positive.
    pub dims: Vector3<f64>,
    /// Columns are the local axes; orthonormal with determinant +1.
    pub rotation: Matrix3<f64>,
    /// Confidence in [0, 1].
    pub score: f64,
}

const ROTATION_TOL: f64 = 1e-6;

impl Box3D {
    pub fn new(
        center: Vector3<f64>,
        dims: Vector3<f64>,
        rotation: Matrix3<f64>,
        score: f64,
    ) -> Result<Self> {
        if center.iter().any(|v| !v.is_finite()) || dims.iter().any(|v| !v.is_finite()) {
            return Err(Error::Box3d("non-finite center or dims".into()));
        }
        if dims.x <= 0.0 || dims.y <= 0.0 || dims.z <= 0.0 {
            return Err(Error::Box3d(format!("dims must be positive, got {:?}", dims)));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Box3d(format!("score {} outside [0, 1]", score)));
        }
        validate_rotation(&rotation)?;
        Ok(Box3D { center, dims, rotation, score })
    }

    /// Corner k has local sign (bit0 -> x, bit1 -> y, bit2 -> z; 0 is the
    /// negative half), so corner 0 is (-w/2, -h/2, -l/2) and corner 7 is
    /// (+w/2, +h/2, +l/2) before rotation.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let h = self.dims * 0.5;
        let mut out = [Vector3::zeros(); 8];
        for (k, slot) in out.iter_mut().enumerate() {
            let s = Vector3::new(
                if k & 1 == 0 { -h.x } else { h.x },
                if k & 2 == 0 { -h.y } else { h.y },
                if k & 4 == 0 { -h.z } else { h.z },
            );
            *slot = self.center + self.rotation * s;
        }
        out
    }

    pub fn volume(&self) -> f64 {
        self.dims.x * self.dims.y * self.dims.z
    }

    /// Whether a point lies inside (with `slack` of boundary leeway).
    pub fn contains(&self, p: &Vector3<f64>, slack: f64) -> bool {
        let local = self.rotation.transpose() * (p - self.center);
        let h = self.dims * 0.5;
        local.x.abs() <= h.x + slack * (1.0 + h.x)
            && local.y.abs() <= h.y + slack * (1.0 + h.y)
            && local.z.abs() <= h.z + slack * (1.0 + h.z)
    }

    /// The same box after a rigid transform p -> rot * p + t.
    pub fn transformed(&self, rot: &Matrix3<f64>, t: &Vector3<f64>) -> Box3D {
        Box3D {
            center: rot * self.center + t,
            dims: self.dims,
            rotation: rot * self.rotation,
            score: self.score,
        }
    }
}

pub fn validate_rotation(r: &Matrix3<f64>) -> Result<()> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::Rotation("non-finite entries".into()));
    }
    let gram = r.transpose() * r;
    let mut max_dev: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { 1.0 } else { 0.0 };
            max_dev = max_dev.max((gram[(i, j)] - want).abs());
        }
    }
    if max_dev > ROTATION_TOL {
        return Err(Error::Rotation(format!("not orthonormal, max deviation {max_dev:.3e}")));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ROTATION_TOL {
        return Err(Error::Rotation(format!("determinant {det}, expected +1")));
    }
    Ok(())
}

/// Gram-Schmidt decoding of a 6D rotation representation: the first triple is
/// normalized into column 1, the second is orthogonalized against it for
/// column 2, and column 3 is their cross product.
pub fn rot6d_to_matrix(v: &[f64; 6]) -> Result<Matrix3<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Rotation("non-finite 6d input".into()));
    }
    let a = Vector3::new(v[0], v[1], v[2]);
    let b = Vector3::new(v[3], v[4], v[5]);
    let na = a.norm();
    if na < 1e-9 {
        return Err(Error::Rotation("first 6d triple has near-zero norm".into()));
    }
    let r1 = a / na;
    let u = b - r1 * r1.dot(&b);
    let nu = u.norm();
    if nu < 1e-9 {
        return Err(Error::Rotation("6d triples are near-collinear".into()));
    }
    let r2 = u / nu;
    let r3 = r1.cross(&r2);
    Ok(Matrix3::from_columns(&[r1, r2, r3]))
}

/// Projects all eight corners to pixels; errors if any corner is at or
/// behind the camera plane.
pub fn project_box(b: &Box3D, k: &Intrinsics) -> Result<[(f64, f64); 8]> {
    let mut out = [(0.0, 0.0); 8];
    for (i, c) in b.corners().iter().enumerate() {
        match k.project(c) {
            Some(uv) => out[i] = uv,
            None => {
                return Err(Error::Projection(format!(
                    "corner {} at z={:.4} is not in front of the camera",
                    i, c.z
                )))
            }
        }
    }
    Ok(out)
}

// Faces of the corner lattice above, wound so normals point outward.
const BOX_FACES: [[usize; 4]; 6] = [
    [1, 3, 7, 5], // +x
    [0, 4, 6, 2], // -x
    [2, 6, 7, 3], // +y
    [0, 1, 5, 4], // -y
    [4, 5, 7, 6], // +z
    [0, 2, 3, 1], // -z
];

const CLIP_EPS: f64 = 1e-9;
const DEGENERATE_DIM: f64 = 1e-6;

#[derive(Clone)]
struct ConvexPoly {
    faces: Vec<Vec<Vector3<f64>>>,
}

fn box_poly(b: &Box3D) -> ConvexPoly {
    let corners = b.corners();
    let faces = BOX_FACES
        .iter()
        .map(|f| f.iter().map(|i| corners[*i]).collect())
        .collect();
    ConvexPoly { faces }
}

/// Outward half-space planes (n, d) with the interior satisfying n.x <= d.
fn box_planes(b: &Box3D) -> [(Vector3<f64>, f64); 6] {
    let h = b.dims * 0.5;
    let mut out = [(Vector3::zeros(), 0.0); 6];
    for axis in 0..3 {
        let n = b.rotation.column(axis).into_owned();
        let half = h[axis];
        out[2 * axis] = (n, n.dot(&b.center) + half);
        out[2 * axis + 1] = (-n, -n.dot(&b.center) + half);
    }
    out
}

/// Signed volume via the divergence theorem over outward-wound faces.
fn poly_volume(p: &ConvexPoly) -> f64 {
    let mut six_v = 0.0;
    for f in &p.faces {
        for i in 1..f.len() - 1 {
            six_v += f[0].dot(&f[i].cross(&f[i + 1]));
        }
    }
    (six_v / 6.0).max(0.0)
}

/// Clips to the half-space n.x <= d. Returns the input unchanged when no
/// vertex is strictly outside (so a no-op clip is bitwise a no-op), `None`
/// when nothing is strictly inside.
fn clip_poly(poly: &ConvexPoly, n: &Vector3<f64>, d: f64) -> Option<ConvexPoly> {
    let mut any_out = false;
    let mut any_in = false;
    for f in &poly.faces {
        for v in f {
            let s = n.dot(v) - d;
            if s > CLIP_EPS {
                any_out = true;
            } else if s < -CLIP_EPS {
                any_in = true;
            }
        }
    }
    if !any_out {
        return Some(poly.clone());
    }
    if !any_in {
        return None;
    }

    let mut faces = Vec::with_capacity(poly.faces.len() + 1);
    let mut cap: Vec<Vector3<f64>> = Vec::new();
    let push_cap = |cap: &mut Vec<Vector3<f64>>, p: Vector3<f64>| {
        if cap.iter().all(|q| (q - p).norm() > CLIP_EPS) {
            cap.push(p);
        }
    };
    for f in &poly.faces {
        let m = f.len();
        let mut nf = Vec::with_capacity(m + 1);
        for i in 0..m {
            let a = f[i];
            let b = f[(i + 1) % m];
            let sa = n.dot(&a) - d;
            let sb = n.dot(&b) - d;
            if sa <= CLIP_EPS {
                nf.push(a);
                if sa.abs() <= CLIP_EPS {
                    push_cap(&mut cap, a);
                }
            }
            if (sa < -CLIP_EPS && sb > CLIP_EPS) || (sa > CLIP_EPS && sb < -CLIP_EPS) {
                let t = sa / (sa - sb);
                let p = a + (b - a) * t;
                nf.push(p);
                push_cap(&mut cap, p);
            }
        }
        if nf.len() >= 3 {
            faces.push(nf);
        }
    }
    if cap.len() >= 3 {
        // Order the cap counterclockwise around n so its normal points out
        // of the kept half-space.
        let centroid = cap.iter().sum::<Vector3<f64>>() / cap.len() as f64;
        let mut e1 = cap[0] - centroid;
        let n1 = e1.norm();
        if n1 > CLIP_EPS {
            e1 /= n1;
            let e2 = n.cross(&e1);
            let mut keyed: Vec<(f64, Vector3<f64>)> = cap
                .into_iter()
                .map(|p| {
                    let r = p - centroid;
                    (r.dot(&e2).atan2(r.dot(&e1)), p)
                })
                .collect();
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
            faces.push(keyed.into_iter().map(|(_, p)| p).collect());
        }
    }
    if faces.is_empty() {
        None
    } else {
        Some(ConvexPoly { faces })
    }
}

fn intersection_volume(a: &Box3D, b: &Box3D) -> f64 {
    let mut poly = box_poly(a);
    for (n, d) in box_planes(b) {
        match clip_poly(&poly, &n, d) {
            Some(p) => poly = p,
            None => return 0.0,
        }
    }
    poly_volume(&poly)
}

/// Lexicographic key so IoU sees its two arguments in a fixed order and is
/// bitwise symmetric.
fn box_key(b: &Box3D) -> [u64; 15] {
    let mut k = [0u64; 15];
    let mut at = 0;
    for v in b.center.iter().chain(b.dims.iter()).chain(b.rotation.iter()) {
        // Order-preserving map from f64 to u64.
        let bits = v.to_bits();
        k[at] = if bits >> 63 == 0 { bits ^ (1 << 63) } else { !bits };
        at += 1;
    }
    k
}

fn degenerate(b: &Box3D) -> bool {
    b.dims.x <= DEGENERATE_DIM || b.dims.y <= DEGENERATE_DIM || b.dims.z <= DEGENERATE_DIM
}

/// Exact intersection-over-union of two oriented boxes.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    if degenerate(a) || degenerate(b) {
        return 0.0;
    }
    let (first, second) = if box_key(a) <= box_key(b) { (a, b) } else { (b, a) };
    let va = poly_volume(&box_poly(first));
    let vb = poly_volume(&box_poly(second));
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    let inter = intersection_volume(first, second).min(va).min(vb);
    inter / (va + vb - inter)
}

const MC_CHUNK: usize = 8192;
/// Boundary leeway for the Monte Carlo membership test; keeps a box's own
/// samples inside it despite rotation round-trip error.
const MC_SLACK: f64 = 1e-12;

/// Monte Carlo IoU: samples uniformly inside each box, tests membership in
/// the other, and symmetrizes the two intersection estimates. Deterministic
/// for a given seed at any thread count.
pub fn iou3d_mc(a: &Box3D, b: &Box3D, samples: usize, seed: u64) -> f64 {
    if degenerate(a) || degenerate(b) || samples == 0 {
        return 0.0;
    }
    let chunks = samples.div_ceil(MC_CHUNK);
    let counts = exec::map_indexed(chunks, |c| {
        let mut rng = seeding::rng(seeding::derive(seed, c as u64));
        let lo = c * MC_CHUNK;
        let n = MC_CHUNK.min(samples - lo);
        let mut in_b = 0u64;
        let mut in_a = 0u64;
        for _ in 0..n {
            let pa = sample_in_box(a, &mut rng);
            if b.contains(&pa, MC_SLACK) {
                in_b += 1;
            }
            let pb = sample_in_box(b, &mut rng);
            if a.contains(&pb, MC_SLACK) {
                in_a += 1;
            }
        }
        (in_b, in_a)
    });
    let (hits_ab, hits_ba) = counts
        .into_iter()
        .fold((0u64, 0u64), |acc, c| (acc.0 + c.0, acc.1 + c.1));
    let pa = hits_ab as f64 / samples as f64;
    let pb = hits_ba as f64 / samples as f64;
    let (va, vb) = (a.volume(), b.volume());
    let inter = 0.5 * (pa * va + pb * vb);
    inter / (va + vb - inter)
}

fn sample_in_box(b: &Box3D, rng: &mut impl Rng) -> Vector3<f64> {
    let h = b.dims * 0.5;
    let local = Vector3::new(
        (rng.random::<f64>() * 2.0 - 1.0) * h.x,
        (rng.random::<f64>() * 2.0 - 1.0) * h.y,
        (rng.random::<f64>() * 2.0 - 1.0) * h.z,
    );
    b.center + b.rotation * local
}
