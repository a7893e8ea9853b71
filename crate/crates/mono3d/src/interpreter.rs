//! Prompt encoding and the promptable 3D decoder.
//!
//! Each 2D prompt (box or point) becomes one or two tokens; a learned 3D
//! token is prepended and the stack is refined against the fused image
//! features by two-way transformer blocks. Between them, the geometric prior
//! G enters through a zero-initialized sandwich,
//!     feats' = feats + zem_out(GeoRead(feats + zem_in(G), tokens)),
//! so at initialization the geometric branch is bitwise absent and training
//! grows its influence from zero. The decoded 3D token drives small MLP
//! heads for the projected center, log depth, log dimensions, a 6D rotation,
//! and a confidence score; depth and center back-project through whichever
//! camera (prompted or predicted) is in use.

use crate::camdepth::KVars;
use crate::error::{Error, Result};
use crate::geometry::{rot6d_to_matrix, Box3D, Intrinsics};
use crate::graph::{Graph, Var};
use nalgebra::Vector3;
use crate::nn::{Fwd, LayerNorm, Mlp, MultiHeadAttention, ParamId, ParamStore};
use crate::Mat;
use serde::{Deserialize, Serialize};

/// A single-object 2D prompt in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prompt2D {
    Box { x1: f64, y1: f64, x2: f64, y2: f64 },
    Point { u: f64, v: f64 },
}

impl Prompt2D {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let (w, h) = (width as f64, height as f64);
        match *self {
            Prompt2D::Box { x1, y1, x2, y2 } => {
                if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
                    return Err(Error::Prompt("non-finite box prompt".into()));
                }
                if x1 >= x2 || y1 >= y2 {
                    return Err(Error::Prompt(format!(
                        "box prompt has non-positive extent: ({x1},{y1})-({x2},{y2})"
                    )));
                }
                if x1 < 0.0 || y1 < 0.0 || x2 > w || y2 > h {
                    return Err(Error::Prompt(format!(
                        "box prompt ({x1},{y1})-({x2},{y2}) outside {width}x{height} image"
                    )));
                }
            }
            Prompt2D::Point { u, v } => {
                if !u.is_finite() || !v.is_finite() {
                    return Err(Error::Prompt("non-finite point prompt".into()));
                }
                if u < 0.0 || v < 0.0 || u > w || v > h {
                    return Err(Error::Prompt(format!(
                        "point prompt ({u},{v}) outside {width}x{height} image"
                    )));
                }
            }
        }
        Ok(())
    }

    /// 2D anchor the center offset head is relative to.
    pub fn anchor(&self) -> (f64, f64) {
        match *self {
            Prompt2D::Box { x1, y1, x2, y2 } => (0.5 * (x1 + x2), 0.5 * (y1 + y2)),
            Prompt2D::Point { u, v } => (u, v),
        }
    }
}

/// Everything promptable about one image: per-object 2D prompts and an
/// optional camera that grounds the metric scale.
#[derive(Debug, Clone, Default)]
pub struct PromptSet {
    pub prompts: Vec<Prompt2D>,
    pub intrinsics: Option<Intrinsics>,
}

impl PromptSet {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        for p in &self.prompts {
            p.validate(width, height)?;
        }
        if let Some(k) = &self.intrinsics {
            k.validate()?;
            if k.width != width || k.height != height {
                return Err(Error::Prompt(format!(
                    "intrinsics prompt is for a {}x{} image, got {}x{}",
                    k.width, k.height, width, height
                )));
            }
        }
        Ok(())
    }
}

/// Fixed random Fourier features of a normalized pixel position.
fn fourier_features(b: &Mat, u: f64, v: f64, width: usize, height: usize) -> Mat {
    let p = [u / width as f64, v / height as f64];
    let k = b.ncols();
    let mut out = Mat::zeros((1, 2 * k));
    for j in 0..k {
        let phase = std::f64::consts::TAU * (p[0] * b[[0, j]] + p[1] * b[[1, j]]);
        out[[0, j]] = phase.sin();
        out[[0, k + j]] = phase.cos();
    }
    out
}

/// Turns prompts into tokens: position features plus a learned type
/// embedding per token role (box corners get two tokens, points one).
pub struct PromptEncoder {
    fourier: ParamId,
    box_tl: ParamId,
    box_br: ParamId,
    point: ParamId,
}

impl PromptEncoder {
    pub fn new(ps: &mut ParamStore, scope: &str, channels: usize, seed: u64) -> Result<Self> {
        if channels % 2 != 0 {
            return Err(Error::Config("prompt channels must be even".into()));
        }
        let enc = PromptEncoder {
            fourier: ps.add_randn(&format!("{scope}.fourier"), 2, channels / 2, 1.0, seed),
            box_tl: ps.add_randn(&format!("{scope}.box_tl"), 1, channels, 0.02, seed),
            box_br: ps.add_randn(&format!("{scope}.box_br"), 1, channels, 0.02, seed),
            point: ps.add_randn(&format!("{scope}.point"), 1, channels, 0.02, seed),
        };
        // The Fourier projection is a fixed random basis, never trained.
        ps.set_trainable_by_prefix(&format!("{scope}.fourier"), false);
        Ok(enc)
    }

    pub fn encode(&self, f: &mut Fwd, prompt: &Prompt2D, width: usize, height: usize) -> Var {
        let b = f.ps.value(self.fourier).clone();
        match *prompt {
            Prompt2D::Box { x1, y1, x2, y2 } => {
                let tl = fourier_features(&b, x1, y1, width, height);
                let br = fourier_features(&b, x2, y2, width, height);
                let tlc = f.g.constant(tl);
                let brc = f.g.constant(br);
                let tl_emb = f.p(self.box_tl);
                let br_emb = f.p(self.box_br);
                let t1 = f.g.add(tlc, tl_emb);
                let t2 = f.g.add(brc, br_emb);
                f.g.concat_rows(&[t1, t2])
            }
            Prompt2D::Point { u, v } => {
                let pt = fourier_features(&b, u, v, width, height);
                let ptc = f.g.constant(pt);
                let emb = f.p(self.point);
                f.g.add(ptc, emb)
            }
        }
    }
}

/// Token/feature co-refinement block: token self-attention, tokens reading
/// the image, a token MLP, then the image reading the tokens back.
pub struct TwoWayBlock {
    self_attn: MultiHeadAttention,
    ln1: LayerNorm,
    cross_t2i: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
    ln3: LayerNorm,
    cross_i2t: MultiHeadAttention,
    ln4: LayerNorm,
}

impl TwoWayBlock {
    pub fn new(ps: &mut ParamStore, scope: &str, channels: usize, heads: usize, seed: u64) -> Self {
        TwoWayBlock {
            self_attn: MultiHeadAttention::new(ps, &format!("{scope}.self_attn"), channels, heads, seed),
            ln1: LayerNorm::new(ps, &format!("{scope}.ln1"), channels),
            cross_t2i: MultiHeadAttention::new(ps, &format!("{scope}.cross_t2i"), channels, heads, seed),
            ln2: LayerNorm::new(ps, &format!("{scope}.ln2"), channels),
            mlp: Mlp::new(ps, &format!("{scope}.mlp"), channels, channels * 2, channels, seed),
            ln3: LayerNorm::new(ps, &format!("{scope}.ln3"), channels),
            cross_i2t: MultiHeadAttention::new(ps, &format!("{scope}.cross_i2t"), channels, heads, seed),
            ln4: LayerNorm::new(ps, &format!("{scope}.ln4"), channels),
        }
    }

    pub fn fwd(&self, f: &mut Fwd, tokens: Var, feats: Var) -> (Var, Var) {
        let sa = self.self_attn.fwd(f, tokens, tokens);
        let t = f.g.add(tokens, sa);
        let t = self.ln1.fwd(f, t);

        let ca = self.cross_t2i.fwd(f, t, feats);
        let t = f.g.add(t, ca);
        let t = self.ln2.fwd(f, t);

        let m = self.mlp.fwd(f, t);
        let t = f.g.add(t, m);
        let t = self.ln3.fwd(f, t);

        let fa = self.cross_i2t.fwd(f, feats, t);
        let fe = f.g.add(feats, fa);
        let fe = self.ln4.fwd(f, fe);
        (t, fe)
    }
}

/// Zero-initialized 1x1 projection: exactly the zero map until trained.
pub struct Zem {
    pub w: ParamId,
    pub b: ParamId,
}

impl Zem {
    pub fn new(ps: &mut ParamStore, scope: &str, cin: usize, cout: usize) -> Self {
        Zem {
            w: ps.add_zeros(&format!("{scope}.w"), cin, cout),
            b: ps.add_zeros(&format!("{scope}.b"), 1, cout),
        }
    }

    pub fn fwd(&self, f: &mut Fwd, x: Var) -> Var {
        let w = f.p(self.w);
        let y = f.g.matmul(x, w);
        let b = f.p(self.b);
        f.g.add_row(y, b)
    }
}

/// Geometry read: the feature map attends to the token stack, then an MLP,
/// both with residuals.
pub struct GeoBlock {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    mlp: Mlp,
    ln2: LayerNorm,
}

impl GeoBlock {
    pub fn new(ps: &mut ParamStore, scope: &str, channels: usize, heads: usize, seed: u64) -> Self {
        GeoBlock {
            attn: MultiHeadAttention::new(ps, &format!("{scope}.attn"), channels, heads, seed),
            ln1: LayerNorm::new(ps, &format!("{scope}.ln1"), channels),
            mlp: Mlp::new(ps, &format!("{scope}.mlp"), channels, channels * 2, channels, seed),
            ln2: LayerNorm::new(ps, &format!("{scope}.ln2"), channels),
        }
    }

    pub fn fwd(&self, f: &mut Fwd, feats: Var, tokens: Var) -> Var {
        let a = self.attn.fwd(f, feats, tokens);
        let x = f.g.add(feats, a);
        let x = self.ln1.fwd(f, x);
        let m = self.mlp.fwd(f, x);
        let y = f.g.add(x, m);
        self.ln2.fwd(f, y)
    }
}

/// Metric priors the raw head outputs are decoded around.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct BoxPriors {
    /// Depth is z_ref * exp(raw).
    pub z_ref: f64,
    /// Dimensions are dim_ref * exp(raw).
    pub dim_ref: f64,
}

impl Default for BoxPriors {
    fn default() -> Self {
        BoxPriors { z_ref: 4.0, dim_ref: 0.5 }
    }
}

/// Decoded box quantities as graph nodes. The rotation is carried as an
/// axes matrix (rows are the box axes), the transpose of the column-axis
/// rotation used by `Box3D`.
pub struct RawBoxVars {
    pub u: Var,
    pub v: Var,
    pub z: Var,
    pub x: Var,
    pub y: Var,
    pub dims: Var,
    pub rot6: Var,
    pub axes: Var,
    pub score: Var,
}

/// Orthonormalizes a (1,6) rotation parameterization into a (3,3) axes
/// matrix with rows r1, r2, r1 x r2. Mirrors `geometry::rot6d_to_matrix`
/// (which produces the column form) up to a 1e-12 stabilizer.
pub fn rot6d_graph(g: &mut Graph, rot6: Var) -> Var {
    let a = g.slice_cols(rot6, 0, 3);
    let b = g.slice_cols(rot6, 3, 6);
    let norm_of = |g: &mut Graph, v: Var| {
        let sq = g.mul(v, v);
        let s = g.row_sums(sq);
        let s = g.offset(s, 1e-12);
        g.sqrt(s)
    };
    let na = norm_of(g, a);
    let ia = g.recip(na);
    let r1 = g.mul_scalar(a, ia);
    let prod = g.mul(r1, b);
    let dot = g.row_sums(prod);
    let proj = g.mul_scalar(r1, dot);
    let u = g.sub(b, proj);
    let nu = norm_of(g, u);
    let iu = g.recip(nu);
    let r2 = g.mul_scalar(u, iu);
    let r3 = g.cross3(r1, r2);
    g.concat_rows(&[r1, r2, r3])
}

/// Reads one decoded object off the graph as a `Box3D`. The axes matrix is
/// carried row-wise on the tape, so the box rotation is its transpose.
pub fn decoded_box(g: &Graph, raw: &RawBoxVars) -> Result<Box3D> {
    let center = Vector3::new(g.scalar(raw.x), g.scalar(raw.y), g.scalar(raw.z));
    let d = g.value(raw.dims);
    let dims = Vector3::new(d[[0, 0]], d[[0, 1]], d[[0, 2]]);
    let r6 = g.value(raw.rot6);
    let rot = rot6d_to_matrix(&std::array::from_fn(|i| r6[[0, i]]))?;
    let score = g.scalar(raw.score).clamp(0.0, 1.0);
    Box3D::new(center, dims, rot, score)
}

/// The five MLP heads reading the decoded 3D token.
pub struct BoxHeads {
    offset: Mlp,
    depth: Mlp,
    dims: Mlp,
    rot: Mlp,
    score: Mlp,
    pub priors: BoxPriors,
}

impl BoxHeads {
    pub fn new(ps: &mut ParamStore, scope: &str, channels: usize, priors: BoxPriors, seed: u64) -> Self {
        let hidden = channels;
        BoxHeads {
            offset: Mlp::new(ps, &format!("{scope}.offset"), channels, hidden, 2, seed),
            depth: Mlp::new(ps, &format!("{scope}.depth"), channels, hidden, 1, seed),
            dims: Mlp::new(ps, &format!("{scope}.dims"), channels, hidden, 3, seed),
            rot: Mlp::new(ps, &format!("{scope}.rot"), channels, hidden, 6, seed),
            score: Mlp::new(ps, &format!("{scope}.score"), channels, hidden, 1, seed),
            priors,
        }
    }

    /// Decodes one object token into box quantities, back-projecting the
    /// center through the active camera.
    pub fn decode(
        &self,
        f: &mut Fwd,
        o3d: Var,
        anchor: (f64, f64),
        image: (usize, usize),
        kv: &KVars,
    ) -> RawBoxVars {
        let (width, height) = image;
        let off = self.offset.fwd(f, o3d); // (1,2) in image fractions
        let du = f.g.slice_cols(off, 0, 1);
        let dv = f.g.slice_cols(off, 1, 2);
        let du = f.g.scale(du, width as f64);
        let dv = f.g.scale(dv, height as f64);
        let u = f.g.offset(du, anchor.0);
        let v = f.g.offset(dv, anchor.1);

        let zraw = self.depth.fwd(f, o3d);
        let ez = f.g.exp(zraw);
        let z = f.g.scale(ez, self.priors.z_ref);

        // Back-project: x = (u - cx) z / fx, y = (v - cy) z / fy.
        let ucx = f.g.sub(u, kv.cx);
        let vcy = f.g.sub(v, kv.cy);
        let ifx = f.g.recip(kv.fx);
        let ify = f.g.recip(kv.fy);
        let xz = f.g.mul(ucx, z);
        let yz = f.g.mul(vcy, z);
        let x = f.g.mul(xz, ifx);
        let y = f.g.mul(yz, ify);

        let draw = self.dims.fwd(f, o3d);
        let ed = f.g.exp(draw);
        let dims = f.g.scale(ed, self.priors.dim_ref);

        let rot6 = self.rot.fwd(f, o3d);
        let axes = rot6d_graph(f.g, rot6);

        let sraw = self.score.fwd(f, o3d);
        let score = f.g.sigmoid(sraw);

        RawBoxVars { u, v, z, x, y, dims, rot6, axes, score }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = seeding::rng(seed);
        Mat::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn prompt_validation_catches_bad_geometry() {
        assert!(Prompt2D::Box { x1: 5.0, y1: 5.0, x2: 20.0, y2: 18.0 }.validate(64, 64).is_ok());
        assert!(Prompt2D::Box { x1: 20.0, y1: 5.0, x2: 5.0, y2: 18.0 }.validate(64, 64).is_err());
        assert!(Prompt2D::Box { x1: -1.0, y1: 0.0, x2: 5.0, y2: 5.0 }.validate(64, 64).is_err());
        assert!(Prompt2D::Box { x1: 0.0, y1: 0.0, x2: 65.0, y2: 5.0 }.validate(64, 64).is_err());
        assert!(Prompt2D::Point { u: 64.0, v: 64.0 }.validate(64, 64).is_ok());
        assert!(Prompt2D::Point { u: 64.5, v: 2.0 }.validate(64, 64).is_err());
        let ps = PromptSet {
            prompts: vec![Prompt2D::Point { u: 1.0, v: 1.0 }],
            intrinsics: Some(Intrinsics::new(50.0, 50.0, 16.0, 16.0, 32, 32).unwrap()),
        };
        assert!(ps.validate(32, 32).is_ok());
        assert!(ps.validate(64, 64).is_err(), "intrinsics for the wrong image size");
    }

    #[test]
    fn prompt_tokens_have_expected_arity() {
        let mut store = ParamStore::new();
        let enc = PromptEncoder::new(&mut store, "prompt", 16, 3).unwrap();
        let mut g = Graph::new();
        let mut f = Fwd::new(&mut g, &store);
        let b = enc.encode(&mut f, &Prompt2D::Box { x1: 2.0, y1: 3.0, x2: 20.0, y2: 21.0 }, 64, 64);
        let p = enc.encode(&mut f, &Prompt2D::Point { u: 9.0, v: 9.0 }, 64, 64);
        assert_eq!(g.value(b).dim(), (2, 16));
        assert_eq!(g.value(p).dim(), (1, 16));
    }

    #[test]
    fn fourier_projection_is_frozen() {
        let mut store = ParamStore::new();
        let enc = PromptEncoder::new(&mut store, "prompt", 16, 3).unwrap();
        assert!(!store.get(enc.fourier).trainable);
        assert!(store.get(enc.point).trainable);
    }

    #[test]
    fn two_way_block_preserves_shapes() {
        let mut store = ParamStore::new();
        let blk = TwoWayBlock::new(&mut store, "tw", 16, 2, 4);
        let mut g = Graph::new();
        let t = g.constant(randn(3, 16, 1));
        let fe = g.constant(randn(12, 16, 2));
        let mut f = Fwd::new(&mut g, &store);
        let (t2, f2) = blk.fwd(&mut f, t, fe);
        assert_eq!(g.value(t2).dim(), (3, 16));
        assert_eq!(g.value(f2).dim(), (12, 16));
    }

    #[test]
    fn zem_is_exactly_zero_at_init() {
        let mut store = ParamStore::new();
        let zem = Zem::new(&mut store, "zem", 8, 16);
        let mut g = Graph::new();
        let x = g.constant(randn(5, 8, 3));
        let mut f = Fwd::new(&mut g, &store);
        let y = zem.fwd(&mut f, x);
        assert!(g.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zem_sandwich_is_bitwise_identity_at_init() {
        // feats + zem_out(GeoRead(feats + zem_in(G), tokens)) == feats, bit
        // for bit, when both projections are zero-initialized.
        let mut store = ParamStore::new();
        let zem_in = Zem::new(&mut store, "zem_in", 6, 16);
        let zem_out = Zem::new(&mut store, "zem_out", 16, 16);
        let geo = GeoBlock::new(&mut store, "geo", 16, 2, 5);
        let feats0 = randn(10, 16, 6);
        let gprior = randn(10, 6, 7);
        let tokens = randn(3, 16, 8);

        let mut g = Graph::new();
        let fv = g.constant(feats0.clone());
        let gv = g.constant(gprior);
        let tv = g.constant(tokens);
        let mut f = Fwd::new(&mut g, &store);
        let inj = zem_in.fwd(&mut f, gv);
        let fin = f.g.add(fv, inj);
        let read = geo.fwd(&mut f, fin, tv);
        let merged = zem_out.fwd(&mut f, read);
        let out = f.g.add(fv, merged);
        for (a, b) in g.value(out).iter().zip(feats0.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rot6d_graph_matches_plain_decoding() {
        for s in 0..10 {
            let rot6 = randn(1, 6, 100 + s);
            let mut g = Graph::new();
            let rv = g.constant(rot6.clone());
            let axes = rot6d_graph(&mut g, rv);
            let vals: [f64; 6] = std::array::from_fn(|i| rot6[[0, i]]);
            let r = rot6d_to_matrix(&vals).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    // Graph rows are plain columns.
                    assert!(
                        (g.value(axes)[[i, j]] - r[(j, i)]).abs() < 1e-9,
                        "axes[{i},{j}] mismatch"
                    );
                }
            }
        }
    }

    #[test]
    fn rot6d_graph_is_differentiable() {
        let rot6 = randn(1, 6, 42);
        let eval = |x: &Mat| {
            let mut g = Graph::new();
            let rv = g.param(0, x, true);
            let axes = rot6d_graph(&mut g, rv);
            let sq = g.mul(axes, axes);
            let weights = g.constant(Mat::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64 * 0.1));
            let wsq = g.mul(sq, weights);
            let l = g.mean_all(wsq);
            g.scalar(l)
        };
        let mut g = Graph::new();
        let rv = g.param(0, &rot6, true);
        let axes = rot6d_graph(&mut g, rv);
        let sq = g.mul(axes, axes);
        let weights = g.constant(Mat::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64 * 0.1));
        let wsq = g.mul(sq, weights);
        let l = g.mean_all(wsq);
        let grads = g.backward(l);
        let analytic = grads.for_param(&g, 0).unwrap().clone();
        for i in 0..6 {
            let h = 1e-6;
            let mut p = rot6.clone();
            p[[0, i]] += h;
            let mut m = rot6.clone();
            m[[0, i]] -= h;
            let num = (eval(&p) - eval(&m)) / (2.0 * h);
            let a = analytic[[0, i]];
            assert!(
                (num - a).abs() < 1e-6 + 1e-4 * num.abs().max(a.abs()),
                "rot6d grad {i}: {num} vs {a}"
            );
        }
    }

    #[test]
    fn decoded_center_back_projects_onto_itself() {
        let mut store = ParamStore::new();
        let heads = BoxHeads::new(&mut store, "heads", 16, BoxPriors::default(), 6);
        let o3d = randn(1, 16, 9);
        let k = Intrinsics::new(90.0, 85.0, 31.0, 33.0, 64, 64).unwrap();
        let mut g = Graph::new();
        let ov = g.constant(o3d);
        let kv = KVars::constant(&mut g, &k);
        let mut f = Fwd::new(&mut g, &store);
        let raw = heads.decode(&mut f, ov, (20.0, 24.0), (64, 64), &kv);
        let (u, v) = (g.scalar(raw.u), g.scalar(raw.v));
        let (x, y, z) = (g.scalar(raw.x), g.scalar(raw.y), g.scalar(raw.z));
        assert!(z > 0.0);
        let (pu, pv) = k.project(&nalgebra::Vector3::new(x, y, z)).unwrap();
        assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
        // Axes rows are orthonormal.
        let a = g.value(raw.axes);
        for i in 0..3 {
            let n: f64 = (0..3).map(|j| a[[i, j]] * a[[i, j]]).sum();
            assert!((n - 1.0).abs() < 1e-9);
        }
        let s = g.scalar(raw.score);
        assert!((0.0..=1.0).contains(&s));
    }
}
