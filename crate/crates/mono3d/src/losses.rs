//! Training losses, built on the tape so every term is differentiable.
//!
//! Depth and camera use variance-penalized log/ray residuals: for residuals
//! d the loss is sqrt(mean(d^2) - lambda * mean(d)^2). With lambda = 1 the
//! term is invariant to a uniform residual shift, which is how the camera
//! ray loss tolerates a global ray offset; depth uses lambda = 0.15 so
//! absolute scale still matters. Boxes combine a smooth-L1 over normalized
//! center/depth/size residuals, a corner chamfer that compares rotations
//! through the corner sets they generate (so symmetry flips cost nothing),
//! and a squared-error confidence loss against the actual 3D overlap.

use crate::error::{Error, Result};
use crate::geometry::{iou3d, make_rays, Box3D, Intrinsics, RayMap};
use crate::graph::{Graph, Var};
use crate::interpreter::{decoded_box, RawBoxVars};
use crate::model::ForwardOut;
use crate::Mat;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Variance penalty of the scale-invariant log-depth loss.
pub const SILOG_LAMBDA: f64 = 0.15;
/// Variance penalty of the camera ray loss; 1 makes it shift-invariant.
pub const RAY_LAMBDA: f64 = 1.0;

/// sqrt(mean(d^2) - lambda * mean(d)^2) for a residual column already
/// multiplied by its 0/1 mask; `count` is the number of valid entries.
fn variance_penalized(g: &mut Graph, masked: Var, count: f64, lambda: f64) -> Var {
    let sq = g.mul(masked, masked);
    let s2 = g.sum_all(sq);
    let m2 = g.scale(s2, 1.0 / count);
    let s1 = g.sum_all(masked);
    let m1 = g.scale(s1, 1.0 / count);
    let m1sq = g.mul(m1, m1);
    let pen = g.scale(m1sq, lambda);
    let v = g.sub(m2, pen);
    g.sqrt(v)
}

/// Scale-invariant log loss between predicted log depth `(n,1)` and a metric
/// depth target with a 0/1 validity mask. `None` when nothing is valid.
///
/// The gradient of sqrt blows up as the loss approaches exactly zero; that
/// point is never reached on real residuals.
pub fn silog_graph(
    g: &mut Graph,
    pred_log: Var,
    gt_depth: &Mat,
    mask: &Mat,
) -> Result<Option<Var>> {
    let dim = g.value(pred_log).dim();
    if gt_depth.dim() != dim || mask.dim() != dim || dim.1 != 1 {
        return Err(Error::Shape(format!(
            "depth target {:?} / mask {:?} do not match prediction {:?}",
            gt_depth.dim(),
            mask.dim(),
            dim
        )));
    }
    let mut count = 0usize;
    let mut ln_gt = Mat::zeros(dim);
    for i in 0..dim.0 {
        let m = mask[[i, 0]];
        if m == 1.0 {
            let d = gt_depth[[i, 0]];
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Shape(format!("non-positive depth target {d} at valid pixel {i}")));
            }
            ln_gt[[i, 0]] = d.ln();
            count += 1;
        } else if m != 0.0 {
            return Err(Error::Shape(format!("depth mask entry {m} at {i} is not 0 or 1")));
        }
    }
    if count == 0 {
        return Ok(None);
    }
    let target = g.constant(ln_gt);
    let maskc = g.constant(mask.clone());
    let d = g.sub(pred_log, target);
    let dm = g.mul(d, maskc);
    Ok(Some(variance_penalized(g, dm, count as f64, SILOG_LAMBDA)))
}

/// Camera ray loss: the shift-invariant residual penalty summed over both
/// ray slope components.
pub fn ray_loss_graph(g: &mut Graph, pred_rx: Var, pred_ry: Var, gt: &RayMap) -> Result<Var> {
    let n = gt.rays.nrows();
    if g.value(pred_rx).dim() != (n, 1) || g.value(pred_ry).dim() != (n, 1) {
        return Err(Error::Shape(format!(
            "predicted rays {:?}/{:?} do not match the {n}-ray target",
            g.value(pred_rx).dim(),
            g.value(pred_ry).dim()
        )));
    }
    let mut total = None;
    for (pred, comp) in [(pred_rx, 0), (pred_ry, 1)] {
        let col = Mat::from_shape_fn((n, 1), |(i, _)| gt.rays[[i, comp]]);
        let target = g.constant(col);
        let d = g.sub(pred, target);
        let term = variance_penalized(g, d, n as f64, RAY_LAMBDA);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term),
        });
    }
    Ok(total.unwrap())
}

/// Ground-truth box for one prompted object.
#[derive(Debug, Clone)]
pub struct BoxTarget {
    pub center: Vector3<f64>,
    pub dims: Vector3<f64>,
    /// Column-axis rotation, as in [`Box3D`].
    pub rotation: Matrix3<f64>,
}

impl BoxTarget {
    pub fn from_box(b: &Box3D) -> Self {
        BoxTarget { center: b.center, dims: b.dims, rotation: b.rotation }
    }

    pub fn to_box(&self) -> Result<Box3D> {
        Box3D::new(self.center, self.dims, self.rotation, 1.0)
    }
}

/// Smooth-L1 over the normalized box residual vector: projected-center
/// offsets in image fractions, log-depth, and log-dimension errors.
pub fn box_residual_graph(
    g: &mut Graph,
    raw: &RawBoxVars,
    gt: &BoxTarget,
    k: &Intrinsics,
) -> Result<Var> {
    let (u_gt, v_gt) = k.project(&gt.center).ok_or_else(|| {
        Error::Projection(format!("target center {:?} does not project", gt.center))
    })?;
    let du = g.offset(raw.u, -u_gt);
    let du = g.scale(du, 1.0 / k.width as f64);
    let dv = g.offset(raw.v, -v_gt);
    let dv = g.scale(dv, 1.0 / k.height as f64);

    let lz = g.ln(raw.z);
    let dz = g.offset(lz, -gt.center.z.ln());

    let ld = g.ln(raw.dims);
    let ln_dims = Mat::from_shape_fn((1, 3), |(_, j)| gt.dims[j].ln());
    let ldc = g.constant(ln_dims);
    let dd = g.sub(ld, ldc);

    let r = g.concat_cols(&[du, dv, dz, dd]);
    let h = g.smooth_l1(r);
    Ok(g.mean_all(h))
}

/// Mean squared nearest-corner distance between two same-size cuboids at the
/// origin, averaged over both directions. Purely a rotation discrepancy:
/// rotations whose corner sets coincide (half-turn symmetries) cost zero.
///
/// `axes` is the `(3,3)` row-axis matrix on the tape; the target rotation is
/// the column form.
pub fn rotation_chamfer_graph(
    g: &mut Graph,
    axes: Var,
    gt_rotation: &Matrix3<f64>,
    dims: &Vector3<f64>,
) -> Var {
    let mut s = Mat::zeros((8, 3));
    for k in 0..8 {
        s[[k, 0]] = if k & 1 == 0 { -0.5 * dims.x } else { 0.5 * dims.x };
        s[[k, 1]] = if k & 2 == 0 { -0.5 * dims.y } else { 0.5 * dims.y };
        s[[k, 2]] = if k & 4 == 0 { -0.5 * dims.z } else { 0.5 * dims.z };
    }
    // Target corners go through the same matmul kernel as the predicted
    // ones, and distances are built from direct coordinate differences, so
    // coinciding corner sets cancel to exact zeros.
    let agt = Mat::from_shape_fn((3, 3), |(i, j)| gt_rotation[(j, i)]);
    let gc = s.dot(&agt);

    let sc = g.constant(s);
    let p = g.matmul(sc, axes);
    let mut d2 = None;
    for c in 0..3 {
        let pc = g.slice_cols(p, c, c + 1);
        let zeros = g.constant(Mat::zeros((8, 8)));
        let pcol = g.add_col(zeros, pc);
        let grow = g.constant(Mat::from_shape_fn((1, 8), |(_, j)| gc[[j, c]]));
        let negg = g.scale(grow, -1.0);
        let diff = g.add_row(pcol, negg);
        let sq = g.mul(diff, diff);
        d2 = Some(match d2 {
            None => sq,
            Some(acc) => g.add(acc, sq),
        });
    }
    let d2 = d2.unwrap();

    let fwd = g.min_cols(d2);
    let fm = g.mean_all(fwd);
    let d2t = g.transpose(d2);
    let bwd = g.min_cols(d2t);
    let bm = g.mean_all(bwd);
    let both = g.add(fm, bm);
    g.scale(both, 0.5)
}

/// Squared error between the predicted confidence and a target overlap.
pub fn score_loss_graph(g: &mut Graph, score: Var, target: f64) -> Var {
    let d = g.offset(score, -target);
    g.mul(d, d)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub box_l1: f64,
    pub rotation: f64,
    pub score: f64,
    pub camera: f64,
    pub depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { box_l1: 1.0, rotation: 1.0, score: 1.0, camera: 1.0, depth: 1.0 }
    }
}

/// Supervision for one image: the true camera, an optional metric depth map
/// with validity mask (image resolution, row-major `(h*w,1)`), and one box
/// per prompt.
pub struct SceneTargets<'a> {
    pub intrinsics: &'a Intrinsics,
    pub depth: Option<(&'a Mat, &'a Mat)>,
    pub boxes: &'a [BoxTarget],
}

/// Loss terms of one scene; absent terms had nothing to supervise.
pub struct SceneLoss {
    pub total: Var,
    pub camera: Var,
    pub depth: Option<Var>,
    pub box_l1: Option<Var>,
    pub rotation: Option<Var>,
    pub score: Option<Var>,
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = g.add(acc, *t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// Assembles the weighted scene loss from a forward pass. Box targets must
/// be aligned with the prompts that produced `out.per_object`. The camera
/// term always supervises the predicted intrinsics, even when the forward
/// pass ran with a prompted camera.
pub fn scene_loss(
    g: &mut Graph,
    out: &ForwardOut,
    targets: &SceneTargets,
    w: &LossWeights,
) -> Result<SceneLoss> {
    if targets.boxes.len() != out.per_object.len() {
        return Err(Error::Shape(format!(
            "{} box targets for {} prompted objects",
            targets.boxes.len(),
            out.per_object.len()
        )));
    }
    let gt_rays = make_rays(targets.intrinsics, out.grid.0, out.grid.1)?;
    let camera = ray_loss_graph(g, out.rays_pred.0, out.rays_pred.1, &gt_rays)?;

    let depth = match (out.log_depth, targets.depth) {
        (Some(pred), Some((gt, mask))) => silog_graph(g, pred, gt, mask)?,
        _ => None,
    };

    let mut l1s = Vec::new();
    let mut rots = Vec::new();
    let mut scores = Vec::new();
    for (raw, gt) in out.per_object.iter().zip(targets.boxes) {
        l1s.push(box_residual_graph(g, raw, gt, targets.intrinsics)?);
        rots.push(rotation_chamfer_graph(g, raw.axes, &gt.rotation, &gt.dims));
        let pred = decoded_box(g, raw)?;
        let overlap = iou3d(&pred, &gt.to_box()?);
        scores.push(score_loss_graph(g, raw.score, overlap));
    }
    let (box_l1, rotation, score) = if l1s.is_empty() {
        (None, None, None)
    } else {
        (Some(mean_of(g, &l1s)), Some(mean_of(g, &rots)), Some(mean_of(g, &scores)))
    };

    let mut total = g.scale(camera, w.camera);
    for (term, weight) in [
        (depth, w.depth),
        (box_l1, w.box_l1),
        (rotation, w.rotation),
        (score, w.score),
    ] {
        if let Some(t) = term {
            let wt = g.scale(t, weight);
            total = g.add(total, wt);
        }
    }
    Ok(SceneLoss { total, camera, depth, box_l1, rotation, score })
}

/// Convenience: the ray-loss value for already-materialized ray maps.
pub fn ray_loss_value(pred: &RayMap, gt: &RayMap) -> Result<f64> {
    let mut g = Graph::new();
    let rx = g.constant(Mat::from_shape_fn((pred.rays.nrows(), 1), |(i, _)| pred.rays[[i, 0]]));
    let ry = g.constant(Mat::from_shape_fn((pred.rays.nrows(), 1), |(i, _)| pred.rays[[i, 1]]));
    let v = ray_loss_graph(&mut g, rx, ry, gt)?;
    Ok(g.scalar(v))
}

/// Convenience: the masked scale-invariant log-depth value.
pub fn silog_value(pred_log: &Mat, gt_depth: &Mat, mask: &Mat) -> Result<Option<f64>> {
    let mut g = Graph::new();
    let p = g.constant(pred_log.clone());
    Ok(silog_graph(&mut g, p, gt_depth, mask)?.map(|v| g.scalar(v)))
}

/// Detached rays of the predicted camera, for validation reporting.
pub fn predicted_ray_map(g: &Graph, out: &ForwardOut) -> RayMap {
    let rx = g.value(out.rays_pred.0);
    let ry = g.value(out.rays_pred.1);
    let n = rx.nrows();
    let rays = Mat::from_shape_fn((n, 2), |(i, j)| if j == 0 { rx[[i, 0]] } else { ry[[i, 0]] });
    RayMap { rows: out.grid.0, cols: out.grid.1, rays }
}
