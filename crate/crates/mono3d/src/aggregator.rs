//! Gated fusion of the two encoder pyramids into one feature stream.
//!
//! Per pyramid level i, a learnable scalar gate blends the two encoders,
//!     fused_i = alpha_i * fs_i + (1 - alpha_i) * fd_i,
//! then a query stream started by the conv stem reads the blend through
//! cross attention (no residual on the queries),
//!     fq_i = CrossAttn(fq_{i-1}, fused_i),
//! and the level output re-centers the blend around what was read,
//!     fhat_i = LayerNorm(fused_i + fq_i).
//!
//! Gates start at exactly 0.5; at 0 or 1 the blend reproduces one encoder's
//! map bit for bit, which keeps ablations trustworthy.

use crate::encoders::StageVars;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Fwd, LayerNorm, MultiHeadAttention, ParamId, ParamStore};
use crate::Mat;

/// Scalar-gated blend of two equally shaped feature maps.
pub fn gate_fuse(fs: &Mat, fd: &Mat, alpha: f64) -> Result<Mat> {
    if fs.dim() != fd.dim() {
        return Err(Error::Shape(format!(
            "gate_fuse inputs {:?} vs {:?}",
            fs.dim(),
            fd.dim()
        )));
    }
    if !alpha.is_finite() {
        return Err(Error::Config("gate alpha must be finite".into()));
    }
    let mut out = fs.clone();
    out.zip_mut_with(fd, |a, b| *a = alpha * *a + (1.0 - alpha) * *b);
    Ok(out)
}

/// One fusion level: cross attention into the blend, then the normalized sum.
pub struct AlignUnit {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl AlignUnit {
    pub fn new(ps: &mut ParamStore, scope: &str, channels: usize, heads: usize, seed: u64) -> Self {
        AlignUnit {
            attn: MultiHeadAttention::new(ps, &format!("{scope}.attn"), channels, heads, seed),
            norm: LayerNorm::new(ps, &format!("{scope}.norm"), channels),
        }
    }

    /// Returns (fq_i, fhat_i). The query update carries no residual: with a
    /// zeroed value projection fq_i is exactly zero.
    pub fn fwd(&self, f: &mut Fwd, fq_prev: Var, fused: Var) -> (Var, Var) {
        let fq = self.attn.fwd(f, fq_prev, fused);
        let sum = f.g.add(fused, fq);
        let fhat = self.norm.fwd(f, sum);
        (fq, fhat)
    }
}

pub struct AggregateOut {
    pub fused_hat: [Var; 4],
    pub fq_final: Var,
}

/// The four-level gated fusion stack.
pub struct Aggregator {
    pub units: [AlignUnit; 4],
    pub gates: [ParamId; 4],
}

impl Aggregator {
    pub fn new(ps: &mut ParamStore, scope: &str, channels: usize, heads: usize, seed: u64) -> Self {
        let units = std::array::from_fn(|i| {
            AlignUnit::new(ps, &format!("{scope}.unit{i}"), channels, heads, seed)
        });
        let gates = std::array::from_fn(|i| ps.add_const(&format!("{scope}.gate{i}"), 1, 1, 0.5));
        Aggregator { units, gates }
    }

    /// Fuses the two pyramids level by level. The second pyramid is
    /// resampled onto the first one's grid when the grids differ.
    pub fn fwd(&self, f: &mut Fwd, fs: &StageVars, fd: &StageVars, fq0: Var) -> AggregateOut {
        let mut fq = fq0;
        let mut fused_hat = Vec::with_capacity(4);
        for i in 0..4 {
            let fs_i = fs.stages[i];
            let mut fd_i = fd.stages[i];
            if (fd.grid_h, fd.grid_w) != (fs.grid_h, fs.grid_w) {
                fd_i = f.g.bilinear_resize(fd_i, fd.grid_h, fd.grid_w, fs.grid_h, fs.grid_w);
            }
            let alpha = f.p(self.gates[i]);
            let one_minus = {
                let neg = f.g.scale(alpha, -1.0);
                f.g.offset(neg, 1.0)
            };
            let a_part = f.g.mul_scalar(fs_i, alpha);
            let b_part = f.g.mul_scalar(fd_i, one_minus);
            let fused = f.g.add(a_part, b_part);
            let (fq_i, fhat_i) = self.units[i].fwd(f, fq, fused);
            fq = fq_i;
            fused_hat.push(fhat_i);
        }
        AggregateOut {
            fused_hat: [fused_hat[0], fused_hat[1], fused_hat[2], fused_hat[3]],
            fq_final: fq,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::seeding;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = seeding::rng(seed);
        Mat::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    fn stage_vars(g: &mut Graph, seed: u64) -> StageVars {
        let stages = std::array::from_fn(|i| g.constant(randn(6, 16, seed + i as u64)));
        StageVars { grid_h: 2, grid_w: 3, stages }
    }

    #[test]
    fn gate_extremes_reproduce_inputs_bitwise() {
        let fs = randn(12, 8, 1);
        let fd = randn(12, 8, 2);
        let at_one = gate_fuse(&fs, &fd, 1.0).unwrap();
        let at_zero = gate_fuse(&fs, &fd, 0.0).unwrap();
        for ((a, s), d) in at_one.iter().zip(fs.iter()).zip(fd.iter()) {
            assert_eq!(a.to_bits(), s.to_bits());
            let _ = d;
        }
        for (a, d) in at_zero.iter().zip(fd.iter()) {
            assert_eq!(a.to_bits(), d.to_bits());
        }
    }

    #[test]
    fn gate_midpoint_is_the_mean() {
        let fs = Mat::from_elem((2, 2), 3.0);
        let fd = Mat::from_elem((2, 2), 5.0);
        let out = gate_fuse(&fs, &fd, 0.5).unwrap();
        assert!(out.iter().all(|v| (*v - 4.0).abs() < 1e-15));
    }

    #[test]
    fn gate_rejects_shape_mismatch() {
        assert!(gate_fuse(&Mat::zeros((2, 2)), &Mat::zeros((2, 3)), 0.5).is_err());
    }

    #[test]
    fn gates_initialize_to_exactly_half() {
        let mut ps = ParamStore::new();
        let agg = Aggregator::new(&mut ps, "agg", 16, 2, 3);
        for gate in agg.gates {
            assert_eq!(ps.value(gate)[[0, 0]].to_bits(), 0.5f64.to_bits());
        }
    }

    #[test]
    fn graph_blend_matches_plain_blend_bitwise_at_extremes() {
        let mut ps = ParamStore::new();
        let agg = Aggregator::new(&mut ps, "agg", 16, 2, 4);
        for (which, alpha) in [(0usize, 0.0f64), (1, 1.0)] {
            ps.value_mut(agg.gates[0])[[0, 0]] = alpha;
            let fs = randn(6, 16, 10 + which as u64);
            let fd = randn(6, 16, 20 + which as u64);
            let mut g = Graph::new();
            let fsv = g.constant(fs.clone());
            let fdv = g.constant(fd.clone());
            let mut f = Fwd::new(&mut g, &ps);
            let av = f.p(agg.gates[0]);
            let one_minus = {
                let neg = f.g.scale(av, -1.0);
                f.g.offset(neg, 1.0)
            };
            let a_part = f.g.mul_scalar(fsv, av);
            let b_part = f.g.mul_scalar(fdv, one_minus);
            let fused = f.g.add(a_part, b_part);
            let want = if alpha == 1.0 { &fs } else { &fd };
            for (got, w) in g.value(fused).iter().zip(want.iter()) {
                assert_eq!(got.to_bits(), w.to_bits());
            }
        }
    }

    #[test]
    fn zeroed_value_projection_reduces_unit_to_normalized_blend() {
        let mut ps = ParamStore::new();
        let agg = Aggregator::new(&mut ps, "agg", 16, 2, 5);
        ps.value_mut(agg.units[2].attn.wv.w).fill(0.0);
        let fused = randn(6, 16, 30);
        let fq_prev = randn(6, 16, 31);

        let mut g = Graph::new();
        let fusedv = g.constant(fused.clone());
        let fqv = g.constant(fq_prev);
        let mut f = Fwd::new(&mut g, &ps);
        let (fq_i, fhat) = agg.units[2].fwd(&mut f, fqv, fusedv);
        assert!(g.value(fq_i).iter().all(|v| *v == 0.0), "query update must vanish");

        let mut g2 = Graph::new();
        let fusedv2 = g2.constant(fused);
        let mut f2 = Fwd::new(&mut g2, &ps);
        let want = agg.units[2].norm.fwd(&mut f2, fusedv2);
        for (a, b) in g.value(fhat).iter().zip(g2.value(want).iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn aggregator_runs_and_routes_gradients_to_gates() {
        let mut ps = ParamStore::new();
        let agg = Aggregator::new(&mut ps, "agg", 16, 2, 6);
        let mut g = Graph::new();
        let fs = stage_vars(&mut g, 100);
        let fd = stage_vars(&mut g, 200);
        let fq0 = g.constant(randn(6, 16, 300));
        let mut f = Fwd::new(&mut g, &ps);
        let out = agg.fwd(&mut f, &fs, &fd, fq0);
        for v in out.fused_hat {
            assert_eq!(g.value(v).dim(), (6, 16));
        }
        let cat = g.concat_rows(&out.fused_hat.to_vec());
        let sq = g.mul(cat, cat);
        let loss = g.mean_all(sq);
        let grads = g.backward(loss);
        for gate in agg.gates {
            let gv = grads.for_param(&g, gate.0).expect("gate got no gradient");
            assert!(gv[[0, 0]].abs() > 0.0);
        }
    }

    #[test]
    fn mismatched_grids_are_resampled_onto_the_first_pyramid() {
        let mut ps = ParamStore::new();
        let agg = Aggregator::new(&mut ps, "agg", 16, 2, 7);
        let mut g = Graph::new();
        let fs = stage_vars(&mut g, 400);
        let fd_stages = std::array::from_fn(|i| g.constant(randn(24, 16, 500 + i as u64)));
        let fd = StageVars { grid_h: 4, grid_w: 6, stages: fd_stages };
        let fq0 = g.constant(randn(6, 16, 600));
        let mut f = Fwd::new(&mut g, &ps);
        let out = agg.fwd(&mut f, &fs, &fd, fq0);
        assert_eq!(g.value(out.fused_hat[0]).dim(), (6, 16));
    }
}
