//! Parameter storage and transformer building blocks.
//!
//! All parameters live in a flat [`ParamStore`]; modules hold [`ParamId`]s
//! and build their forward pass on a [`Graph`] through the [`Fwd`] context.
//! Initialization is derived per parameter name from one model seed, so
//! construction order never changes the weights a name receives.

use crate::graph::{Graph, Var};
use crate::seeding;
use crate::Mat;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry {
    pub name: String,
    pub value: Mat,
    pub trainable: bool,
}

#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, value: Mat, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), value, trainable });
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Xavier-normal weight: std = sqrt(2 / (fan_in + fan_out)), seeded by name.
    pub fn add_xavier(&mut self, name: &str, rows: usize, cols: usize, seed: u64) -> ParamId {
        let std = (2.0 / (rows + cols) as f64).sqrt();
        self.add_randn(name, rows, cols, std, seed)
    }

    pub fn add_randn(&mut self, name: &str, rows: usize, cols: usize, std: f64, seed: u64) -> ParamId {
        let mut rng = seeding::rng(seeding::derive_named(seed, name));
        let value = Mat::from_shape_fn((rows, cols), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        });
        self.add(name, value, true)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros((rows, cols)), true)
    }

    pub fn add_const(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Mat::from_elem((rows, cols), v), true)
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Marks every parameter whose name starts with `prefix` (non-)trainable.
    /// Returns how many parameters matched.
    pub fn set_trainable_by_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    /// Order-independent digest of names, shapes, and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut acc = 0u64;
        for e in &self.entries {
            let mut h = seeding::fnv1a(e.name.as_bytes());
            h = seeding::splitmix64(h ^ e.value.nrows() as u64);
            h = seeding::splitmix64(h ^ e.value.ncols() as u64);
            for v in e.value.iter() {
                h = seeding::splitmix64(h ^ v.to_bits());
            }
            acc ^= h;
        }
        acc
    }

    /// Registers the parameter on the graph (cached per id) and returns its node.
    pub fn var(&self, g: &mut Graph, id: ParamId) -> Var {
        let e = &self.entries[id.0];
        g.param(id.0, &e.value, e.trainable)
    }
}

/// Forward-pass context: the tape plus the weights it reads from.
pub struct Fwd<'a> {
    pub g: &'a mut Graph,
    pub ps: &'a ParamStore,
}

impl<'a> Fwd<'a> {
    pub fn new(g: &'a mut Graph, ps: &'a ParamStore) -> Self {
        Fwd { g, ps }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.ps.var(self.g, id)
    }
}

/// Affine map x -> x W + b over row vectors.
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, bias: bool, seed: u64) -> Self {
        let w = ps.add_xavier(&format!("{name}.w"), cin, cout, seed);
        let b = bias.then(|| ps.add_zeros(&format!("{name}.b"), 1, cout));
        Linear { w, b }
    }

    pub fn fwd(&self, f: &mut Fwd, x: Var) -> Var {
        let w = f.p(self.w);
        let y = f.g.matmul(x, w);
        match self.b {
            Some(b) => {
                let bv = f.p(b);
                f.g.add_row(y, bv)
            }
            None => y,
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row standardization with learned scale and shift.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: ps.add_const(&format!("{name}.gamma"), 1, dim, 1.0),
            beta: ps.add_zeros(&format!("{name}.beta"), 1, dim),
        }
    }

    pub fn fwd(&self, f: &mut Fwd, x: Var) -> Var {
        let n = f.g.layer_norm_rows(x, LAYER_NORM_EPS);
        let gv = f.p(self.gamma);
        let scaled = f.g.mul_row(n, gv);
        let bv = f.p(self.beta);
        f.g.add_row(scaled, bv)
    }
}

/// Two-layer GELU MLP.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize, out: usize, seed: u64) -> Self {
        Mlp {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden, true, seed),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, out, true, seed),
        }
    }

    pub fn fwd(&self, f: &mut Fwd, x: Var) -> Var {
        let h = self.fc1.fwd(f, x);
        let h = f.g.gelu(h);
        self.fc2.fwd(f, h)
    }
}

/// Softmax multi-head attention over row-token matrices. Queries and the
/// key/value source may differ (cross attention) or coincide (self attention).
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, seed: u64) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by heads {heads}");
        MultiHeadAttention {
            wq: Linear::new(ps, &format!("{name}.q"), dim, dim, true, seed),
            wk: Linear::new(ps, &format!("{name}.k"), dim, dim, true, seed),
            wv: Linear::new(ps, &format!("{name}.v"), dim, dim, true, seed),
            wo: Linear::new(ps, &format!("{name}.o"), dim, dim, true, seed),
            heads,
            dim,
        }
    }

    pub fn fwd(&self, f: &mut Fwd, queries: Var, keys_values: Var) -> Var {
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.wq.fwd(f, queries);
        let k = self.wk.fwd(f, keys_values);
        let v = self.wv.fwd(f, keys_values);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = f.g.slice_cols(q, lo, hi);
            let kh = f.g.slice_cols(k, lo, hi);
            let vh = f.g.slice_cols(v, lo, hi);
            let kt = f.g.transpose(kh);
            let scores = f.g.matmul(qh, kt);
            let scores = f.g.scale(scores, scale);
            let attn = f.g.softmax_rows(scores);
            outs.push(f.g.matmul(attn, vh));
        }
        let cat = f.g.concat_cols(&outs);
        self.wo.fwd(f, cat)
    }
}
