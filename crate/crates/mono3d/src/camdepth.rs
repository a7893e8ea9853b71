//! Camera intrinsics prediction, ray embedding, and camera-aware depth.
//!
//! The camera module reads the deepest fused level through four learned
//! query tokens (fx, fy, cx, cy) and decodes each into a positive focal
//! length or an in-image principal point. Viewing rays, either from a
//! prompted camera or from the predicted one, are lifted to the sphere and
//! expanded in a real spherical-harmonics basis, then projected into a
//! camera embedding. The depth module conditions the fused features on that
//! embedding and emits per-pixel log depth; the concatenation of the
//! conditioned depth stream and the camera embedding is the geometric prior
//! handed to the 3D decoder.
//!
//! Rays are always built on the tape from four scalar nodes, so the
//! prompted and predicted paths run the exact same float operations and
//! coincide bit for bit whenever the two cameras match.

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::graph::{Graph, Var};
use crate::nn::{Fwd, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore};
use crate::Mat;

// Real spherical-harmonics constants, degrees 0..3 in the graphics layout.
const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_SH_DEGREE: usize = 3;

/// Spherical-harmonics expansion of rays (rx, ry, 1), built on the tape so
/// gradients reach predicted intrinsics. `rx`, `ry` are (n,1); the result is
/// `(n, (degree+1)^2)`.
pub fn sh_basis(g: &mut Graph, rx: Var, ry: Var, degree: usize) -> Var {
    assert!(degree <= MAX_SH_DEGREE, "sh degree {degree} > {MAX_SH_DEGREE}");
    let rx2 = g.mul(rx, rx);
    let ry2 = g.mul(ry, ry);
    let sum = g.add(rx2, ry2);
    let sq = g.offset(sum, 1.0);
    let norm = g.sqrt(sq);
    let inv = g.recip(norm);

    let x = g.mul(rx, inv);
    let y = g.mul(ry, inv);
    let z = inv; // rz = 1 before normalization

    let ones = Mat::from_elem(g.value(rx).dim(), 1.0);
    let one = g.constant(ones);
    let mut cols = vec![g.scale(one, SH_C0)];
    if degree >= 1 {
        cols.push(g.scale(y, -SH_C1));
        cols.push(g.scale(z, SH_C1));
        cols.push(g.scale(x, -SH_C1));
    }
    if degree >= 2 {
        let xy = g.mul(x, y);
        let yz = g.mul(y, z);
        let xz = g.mul(x, z);
        let xx = g.mul(x, x);
        let yy = g.mul(y, y);
        let zz = g.mul(z, z);
        cols.push(g.scale(xy, SH_C2[0]));
        cols.push(g.scale(yz, SH_C2[1]));
        let zz2 = g.scale(zz, 2.0);
        let zz2mxx = g.sub(zz2, xx);
        let q20 = g.sub(zz2mxx, yy);
        cols.push(g.scale(q20, SH_C2[2]));
        cols.push(g.scale(xz, SH_C2[3]));
        let xxmyy = g.sub(xx, yy);
        cols.push(g.scale(xxmyy, SH_C2[4]));
    }
    if degree >= 3 {
        let xx = g.mul(x, x);
        let yy = g.mul(y, y);
        let zz = g.mul(z, z);
        let xy = g.mul(x, y);

        let xx3 = g.scale(xx, 3.0);
        let t0 = g.sub(xx3, yy);
        let t0 = g.mul(y, t0);
        cols.push(g.scale(t0, SH_C3[0]));

        let xyz = g.mul(xy, z);
        cols.push(g.scale(xyz, SH_C3[1]));

        let zz4 = g.scale(zz, 4.0);
        let zz4mxx = g.sub(zz4, xx);
        let t2 = g.sub(zz4mxx, yy);
        let t2 = g.mul(y, t2);
        cols.push(g.scale(t2, SH_C3[2]));

        let zz2 = g.scale(zz, 2.0);
        let xx3b = g.scale(xx, 3.0);
        let yy3 = g.scale(yy, 3.0);
        let t3 = g.sub(zz2, xx3b);
        let t3 = g.sub(t3, yy3);
        let t3 = g.mul(z, t3);
        cols.push(g.scale(t3, SH_C3[3]));

        let t4 = g.sub(zz4, xx);
        let t4 = g.sub(t4, yy);
        let t4 = g.mul(x, t4);
        cols.push(g.scale(t4, SH_C3[4]));

        let xxmyy = g.sub(xx, yy);
        let t5 = g.mul(z, xxmyy);
        cols.push(g.scale(t5, SH_C3[5]));

        let yy3b = g.scale(yy, 3.0);
        let t6 = g.sub(xx, yy3b);
        let t6 = g.mul(x, t6);
        cols.push(g.scale(t6, SH_C3[6]));
    }
    g.concat_cols(&cols)
}

/// Plain-matrix spherical-harmonics expansion of a ray map.
pub fn sh_basis_for_rays(rays: &Mat, degree: usize) -> Mat {
    let mut g = Graph::new();
    let rx = g.constant(rays.column(0).to_owned().insert_axis(ndarray::Axis(1)).to_owned());
    let ry = g.constant(rays.column(1).to_owned().insert_axis(ndarray::Axis(1)).to_owned());
    let b = sh_basis(&mut g, rx, ry, degree);
    g.value(b).clone()
}

/// Intrinsics as four scalar nodes, constant (prompted) or predicted.
#[derive(Clone, Copy)]
pub struct KVars {
    pub fx: Var,
    pub fy: Var,
    pub cx: Var,
    pub cy: Var,
}

impl KVars {
    pub fn constant(g: &mut Graph, k: &Intrinsics) -> KVars {
        KVars {
            fx: g.scalar_constant(k.fx),
            fy: g.scalar_constant(k.fy),
            cx: g.scalar_constant(k.cx),
            cy: g.scalar_constant(k.cy),
        }
    }

    pub fn to_intrinsics(&self, g: &Graph, width: usize, height: usize) -> Result<Intrinsics> {
        Intrinsics::new(
            g.scalar(self.fx),
            g.scalar(self.fy),
            g.scalar(self.cx),
            g.scalar(self.cy),
            width,
            height,
        )
    }
}

/// Pixel centers of a feature grid over a `width x height` image, as (n,1)
/// u and v columns in grid row-major order.
pub fn grid_pixel_centers(rows: usize, cols: usize, width: usize, height: usize) -> (Mat, Mat) {
    let mut u = Mat::zeros((rows * cols, 1));
    let mut v = Mat::zeros((rows * cols, 1));
    for i in 0..rows {
        let vv = (i as f64 + 0.5) * height as f64 / rows as f64;
        for j in 0..cols {
            let uu = (j as f64 + 0.5) * width as f64 / cols as f64;
            u[[i * cols + j, 0]] = uu;
            v[[i * cols + j, 0]] = vv;
        }
    }
    (u, v)
}

/// Grid rays on the tape: rx = (u - cx)/fx, ry = (v - cy)/fy.
pub fn rays_from_kvars(
    g: &mut Graph,
    kv: &KVars,
    rows: usize,
    cols: usize,
    width: usize,
    height: usize,
) -> (Var, Var) {
    let (u, v) = grid_pixel_centers(rows, cols, width, height);
    let uv = g.constant(u);
    let vv = g.constant(v);
    let neg_cx = g.scale(kv.cx, -1.0);
    let neg_cy = g.scale(kv.cy, -1.0);
    let inv_fx = g.recip(kv.fx);
    let inv_fy = g.recip(kv.fy);
    let du = g.add_scalar(uv, neg_cx);
    let dv = g.add_scalar(vv, neg_cy);
    let rx = g.mul_scalar(du, inv_fx);
    let ry = g.mul_scalar(dv, inv_fy);
    (rx, ry)
}

/// Intrinsics head: four query tokens cross-attend to the deepest fused
/// level and decode into (fx, fy, cx, cy).
pub struct CameraModule {
    queries: ParamId,
    attn: MultiHeadAttention,
    head: Mlp,
    she_proj: Linear,
    pub degree: usize,
}

impl CameraModule {
    pub fn new(
        ps: &mut ParamStore,
        scope: &str,
        c_model: usize,
        c_cam: usize,
        heads: usize,
        degree: usize,
        seed: u64,
    ) -> Result<Self> {
        if degree > MAX_SH_DEGREE {
            return Err(Error::Config(format!(
                "sh degree {degree} exceeds the maximum {MAX_SH_DEGREE}"
            )));
        }
        Ok(CameraModule {
            queries: ps.add_randn(&format!("{scope}.queries"), 4, c_model, 0.02, seed),
            attn: MultiHeadAttention::new(ps, &format!("{scope}.attn"), c_model, heads, seed),
            head: Mlp::new(ps, &format!("{scope}.head"), c_model, c_model / 2, 1, seed),
            she_proj: Linear::new(ps, &format!("{scope}.she_proj"), (degree + 1) * (degree + 1), c_cam, true, seed),
            degree,
        })
    }

    /// Predicted intrinsics: focal lengths are exp-decoded around the mean
    /// image side, the principal point is sigmoid-bounded inside the image.
    pub fn predict(&self, f: &mut Fwd, fused_final: Var, width: usize, height: usize) -> KVars {
        let q = f.p(self.queries);
        let read = self.attn.fwd(f, q, fused_final);
        let raw = self.head.fwd(f, read); // (4, 1)
        let f_base = 0.5 * (width + height) as f64;

        let raw_fx = f.g.slice_rows(raw, 0, 1);
        let raw_fy = f.g.slice_rows(raw, 1, 2);
        let raw_cx = f.g.slice_rows(raw, 2, 3);
        let raw_cy = f.g.slice_rows(raw, 3, 4);

        let efx = f.g.exp(raw_fx);
        let efy = f.g.exp(raw_fy);
        let fx = f.g.scale(efx, f_base);
        let fy = f.g.scale(efy, f_base);
        let scx = f.g.sigmoid(raw_cx);
        let scy = f.g.sigmoid(raw_cy);
        let cx = f.g.scale(scx, width as f64);
        let cy = f.g.scale(scy, height as f64);
        KVars { fx, fy, cx, cy }
    }

    /// Camera embedding: learnable projection of the ray harmonics.
    pub fn embed_rays(&self, f: &mut Fwd, rx: Var, ry: Var) -> Var {
        let basis = sh_basis(f.g, rx, ry, self.degree);
        self.she_proj.fwd(f, basis)
    }
}

/// Depth stream conditioned on the camera embedding.
pub struct DepthModule {
    d_proj: Linear,
    attn: MultiHeadAttention,
    mlp: Mlp,
    head: Mlp,
}

impl DepthModule {
    pub fn new(
        ps: &mut ParamStore,
        scope: &str,
        c_model: usize,
        c_cam: usize,
        heads: usize,
        seed: u64,
    ) -> Self {
        DepthModule {
            d_proj: Linear::new(ps, &format!("{scope}.d_proj"), c_model, c_cam, true, seed),
            attn: MultiHeadAttention::new(ps, &format!("{scope}.attn"), c_cam, heads, seed),
            mlp: Mlp::new(ps, &format!("{scope}.mlp"), c_cam, c_cam * 2, c_cam, seed),
            head: Mlp::new(ps, &format!("{scope}.head"), c_cam, c_cam / 2, 1, seed),
        }
    }

    /// Camera-conditioned depth features: MLP(CrossAttn(D, C)) where D is
    /// projected from the fused features and C is the camera embedding.
    pub fn condition(&self, f: &mut Fwd, fused_final: Var, cam_embed: Var) -> Var {
        let d = self.d_proj.fwd(f, fused_final);
        let a = self.attn.fwd(f, d, cam_embed);
        self.mlp.fwd(f, a)
    }

    /// Per-pixel log depth: grid prediction upsampled to the image.
    pub fn log_depth(
        &self,
        f: &mut Fwd,
        conditioned: Var,
        grid: (usize, usize),
        image: (usize, usize),
    ) -> Var {
        let raw = self.head.fwd(f, conditioned); // (grid_n, 1)
        f.g.bilinear_resize(raw, grid.0, grid.1, image.0, image.1)
    }
}

/// Geometric prior for the 3D decoder: conditioned depth stream next to the
/// camera embedding, `(n, 2 * c_cam)`.
pub fn geometry_embedding(g: &mut Graph, conditioned: Var, cam_embed: Var) -> Var {
    g.concat_cols(&[conditioned, cam_embed])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_rays;
    use crate::seeding;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = seeding::rng(seed);
        Mat::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn sh_bands_satisfy_the_addition_theorem() {
        // For an orthonormal real basis (up to per-term sign flips), the
        // squared sum within degree band l is (2l+1)/(4pi) for any unit
        // direction.
        let mut rng = seeding::rng(5);
        let n = 64;
        let rays = Mat::from_shape_fn((n, 2), |_| rng.random::<f64>() * 2.0 - 1.0);
        let b = sh_basis_for_rays(&rays, 3);
        assert_eq!(b.dim(), (n, 16));
        let bands: [(usize, usize, f64); 4] =
            [(0, 1, 1.0), (1, 4, 3.0), (4, 9, 5.0), (9, 16, 7.0)];
        for row in b.rows() {
            for (lo, hi, mult) in bands {
                let s: f64 = row.slice(ndarray::s![lo..hi]).iter().map(|v| v * v).sum();
                let want = mult / (4.0 * std::f64::consts::PI);
                assert!(
                    (s - want).abs() < 1e-12,
                    "band [{lo},{hi}) sums to {s}, want {want}"
                );
            }
        }
    }

    #[test]
    fn sh_degree_controls_width() {
        let rays = randn(6, 2, 6);
        for d in 0..=3 {
            assert_eq!(sh_basis_for_rays(&rays, d).ncols(), (d + 1) * (d + 1));
        }
    }

    #[test]
    fn sh_basis_is_differentiable_in_the_rays() {
        let rx0 = randn(5, 1, 7);
        let ry0 = randn(5, 1, 8);
        let eval = |rx: &Mat| {
            let mut g = Graph::new();
            let rxv = g.param(0, rx, true);
            let ryv = g.constant(ry0.clone());
            let b = sh_basis(&mut g, rxv, ryv, 3);
            let b2 = g.mul(b, b);
            let l = g.mean_all(b2);
            g.scalar(l)
        };
        let mut g = Graph::new();
        let rxv = g.param(0, &rx0, true);
        let ryv = g.constant(ry0.clone());
        let b = sh_basis(&mut g, rxv, ryv, 3);
        let b2 = g.mul(b, b);
        let l = g.mean_all(b2);
        let grads = g.backward(l);
        let analytic = grads.for_param(&g, 0).unwrap().clone();
        let h = 1e-6;
        for i in 0..rx0.nrows() {
            let mut p = rx0.clone();
            p[[i, 0]] += h;
            let mut m = rx0.clone();
            m[[i, 0]] -= h;
            let num = (eval(&p) - eval(&m)) / (2.0 * h);
            let a = analytic[[i, 0]];
            assert!(
                (num - a).abs() < 1e-7 + 1e-5 * num.abs().max(a.abs()),
                "d basis / d rx mismatch at {i}: {num} vs {a}"
            );
        }
    }

    #[test]
    fn grid_rays_match_the_geometry_path() {
        let k = Intrinsics::new(110.0, 95.0, 33.0, 29.0, 64, 56).unwrap();
        let rm = make_rays(&k, 7, 8).unwrap();
        let mut g = Graph::new();
        let kv = KVars::constant(&mut g, &k);
        let (rx, ry) = rays_from_kvars(&mut g, &kv, 7, 8, 64, 56);
        for i in 0..56 {
            assert!((g.value(rx)[[i, 0]] - rm.rays[[i, 0]]).abs() < 1e-12);
            assert!((g.value(ry)[[i, 0]] - rm.rays[[i, 1]]).abs() < 1e-12);
        }
    }

    #[test]
    fn predicted_intrinsics_are_always_valid() {
        let mut ps = ParamStore::new();
        let cam = CameraModule::new(&mut ps, "cam", 16, 8, 2, 3, 9).unwrap();
        for s in 0..5 {
            let fused = randn(12, 16, 100 + s);
            let mut g = Graph::new();
            let fv = g.constant(fused);
            let mut f = Fwd::new(&mut g, &ps);
            let kv = cam.predict(&mut f, fv, 64, 48);
            let k = kv.to_intrinsics(&g, 64, 48).unwrap();
            assert!(k.fx > 0.0 && k.fy > 0.0);
            assert!(k.cx > 0.0 && k.cx < 64.0 && k.cy > 0.0 && k.cy < 48.0);
        }
    }

    #[test]
    fn depth_stream_shapes_line_up() {
        let mut ps = ParamStore::new();
        let cam = CameraModule::new(&mut ps, "cam", 16, 8, 2, 2, 10).unwrap();
        let dep = DepthModule::new(&mut ps, "depth", 16, 8, 2, 10);
        let fused = randn(12, 16, 11);
        let mut g = Graph::new();
        let fv = g.constant(fused);
        let k = Intrinsics::new(80.0, 80.0, 16.0, 12.0, 32, 24).unwrap();
        let kv = KVars::constant(&mut g, &k);
        let (rx, ry) = rays_from_kvars(&mut g, &kv, 3, 4, 32, 24);
        let mut f = Fwd::new(&mut g, &ps);
        let c = cam.embed_rays(&mut f, rx, ry);
        assert_eq!(f.g.value(c).dim(), (12, 8));
        let dc = dep.condition(&mut f, fv, c);
        assert_eq!(f.g.value(dc).dim(), (12, 8));
        let geo = geometry_embedding(f.g, dc, c);
        assert_eq!(f.g.value(geo).dim(), (12, 16));
        let logd = dep.log_depth(&mut f, dc, (3, 4), (24, 32));
        assert_eq!(f.g.value(logd).dim(), (24 * 32, 1));
    }

    #[test]
    fn camera_module_rejects_oversized_degree() {
        let mut ps = ParamStore::new();
        assert!(CameraModule::new(&mut ps, "cam", 16, 8, 2, 4, 1).is_err());
    }
}
