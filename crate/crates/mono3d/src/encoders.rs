//! The two toy image encoders and the prompt-stream conv stem.
//!
//! Both encoders are small pre-norm ViTs over non-overlapping patches; they
//! differ only in their parameter scopes (and optionally their configs),
//! standing in for a promptable segmentation backbone and a self-supervised
//! backbone. Each emits a four-level pyramid of `(positions, channels)` maps
//! on its patch grid, level i being the running token state after the i-th
//! quarter of the blocks (the last level gets the final layer norm).

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Fwd, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore};
use crate::Mat;
use serde::{Deserialize, Serialize};

/// RGB image as a `(rows*cols, 3)` row-major matrix with values in [0, 1].
#[derive(Debug, Clone)]
pub struct ImageTensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Mat,
}

impl ImageTensor {
    pub fn new(rows: usize, cols: usize, data: Mat) -> Result<Self> {
        if rows == 0 || cols == 0 || data.dim() != (rows * cols, 3) {
            return Err(Error::Image(format!(
                "expected ({}, 3) pixel matrix for a {}x{} image, got {:?}",
                rows * cols,
                cols,
                rows,
                data.dim()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Image("pixel values must be finite and in [0, 1]".into()));
        }
        Ok(ImageTensor { rows, cols, data })
    }

    /// Builds from interleaved 8-bit RGB rows (top to bottom).
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::Image(format!(
                "expected {} bytes for {}x{} rgb8, got {}",
                width * height * 3,
                width,
                height,
                bytes.len()
            )));
        }
        let data = Mat::from_shape_fn((width * height, 3), |(i, c)| bytes[i * 3 + c] as f64 / 255.0);
        ImageTensor::new(height, width, data)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Patch side in pixels; the token grid is (rows/patch, cols/patch).
    pub patch: usize,
    pub channels: usize,
    /// Total transformer blocks, split evenly into the four pyramid levels.
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { patch: 8, channels: 64, blocks: 4, heads: 4, mlp_ratio: 2 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return Err(Error::Config("encoder patch must be positive".into()));
        }
        if self.blocks < 4 || self.blocks % 4 != 0 {
            return Err(Error::Config(format!(
                "encoder blocks must be a positive multiple of 4, got {}",
                self.blocks
            )));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Token grid plus the four pyramid levels as graph nodes.
pub struct StageVars {
    pub grid_h: usize,
    pub grid_w: usize,
    pub stages: [Var; 4],
}

/// The four pyramid levels as plain matrices.
#[derive(Debug, Clone)]
pub struct StageFeatures {
    pub grid_h: usize,
    pub grid_w: usize,
    pub stages: [Mat; 4],
}

struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

/// Pre-norm ViT over fixed-size patches with a learned position embedding.
pub struct ToyEncoder {
    pub cfg: EncoderConfig,
    patch_embed: Linear,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    scope: String,
}

impl ToyEncoder {
    pub fn new(ps: &mut ParamStore, scope: &str, cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let patch_embed = Linear::new(
            ps,
            &format!("{scope}.patch_embed"),
            cfg.patch * cfg.patch * 3,
            c,
            true,
            seed,
        );
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let b = format!("{scope}.block{i}");
                Block {
                    ln1: LayerNorm::new(ps, &format!("{b}.ln1"), c),
                    attn: MultiHeadAttention::new(ps, &format!("{b}.attn"), c, cfg.heads, seed),
                    ln2: LayerNorm::new(ps, &format!("{b}.ln2"), c),
                    mlp: Mlp::new(ps, &format!("{b}.mlp"), c, c * cfg.mlp_ratio, c, seed),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(ps, &format!("{scope}.final_ln"), c);
        Ok(ToyEncoder { cfg, patch_embed, blocks, final_ln, scope: scope.to_string() })
    }

    /// Position embedding is created lazily against the first grid size seen;
    /// afterwards the encoder is fixed to that grid.
    pub fn ensure_pos_embed(&self, ps: &mut ParamStore, grid_h: usize, grid_w: usize, seed: u64) {
        let name = format!("{}.pos_embed", self.scope);
        if ps.lookup(&name).is_none() {
            ps.add_randn(&name, grid_h * grid_w, self.cfg.channels, 0.02, seed);
        }
    }

    pub fn grid_for(&self, img: &ImageTensor) -> Result<(usize, usize)> {
        if img.rows % self.cfg.patch != 0 || img.cols % self.cfg.patch != 0 {
            return Err(Error::Image(format!(
                "{}x{} image not divisible by patch {}",
                img.cols, img.rows, self.cfg.patch
            )));
        }
        Ok((img.rows / self.cfg.patch, img.cols / self.cfg.patch))
    }

    /// Builds the encoder forward pass on the tape.
    pub fn build(&self, f: &mut Fwd, img_var: Var, img: &ImageTensor) -> Result<StageVars> {
        let (gh, gw) = self.grid_for(img)?;
        let pos_id = f
            .ps
            .lookup(&format!("{}.pos_embed", self.scope))
            .expect("position embedding not initialized for this grid");
        let pos = f.ps.value(pos_id);
        if pos.nrows() != gh * gw {
            return Err(Error::Image(format!(
                "encoder {} is bound to a {} token grid, image gives {}",
                self.scope,
                pos.nrows(),
                gh * gw
            )));
        }

        let patches = f.g.patchify(img_var, img.rows, img.cols, self.cfg.patch);
        let mut x = self.patch_embed.fwd(f, patches);
        let posv = f.p(pos_id);
        x = f.g.add(x, posv);

        let per_stage = self.cfg.blocks / 4;
        let mut stages = Vec::with_capacity(4);
        for (i, b) in self.blocks.iter().enumerate() {
            let n1 = b.ln1.fwd(f, x);
            let a = b.attn.fwd(f, n1, n1);
            x = f.g.add(x, a);
            let n2 = b.ln2.fwd(f, x);
            let m = b.mlp.fwd(f, n2);
            x = f.g.add(x, m);
            if (i + 1) % per_stage == 0 && stages.len() < 4 {
                if stages.len() == 3 {
                    stages.push(self.final_ln.fwd(f, x));
                } else {
                    stages.push(x);
                }
            }
        }
        Ok(StageVars { grid_h: gh, grid_w: gw, stages: [stages[0], stages[1], stages[2], stages[3]] })
    }

    /// Convenience evaluation outside a training graph.
    pub fn encode(&self, ps: &ParamStore, img: &ImageTensor) -> Result<StageFeatures> {
        let mut g = Graph::new();
        let img_var = g.constant(img.data.clone());
        let mut f = Fwd::new(&mut g, ps);
        let sv = self.build(&mut f, img_var, img)?;
        Ok(StageFeatures {
            grid_h: sv.grid_h,
            grid_w: sv.grid_w,
            stages: [
                g.value(sv.stages[0]).clone(),
                g.value(sv.stages[1]).clone(),
                g.value(sv.stages[2]).clone(),
                g.value(sv.stages[3]).clone(),
            ],
        })
    }
}

/// Two strided patch-merge stages producing the initial query stream on the
/// encoder grid.
pub struct ConvStem {
    pub strides: [usize; 2],
    conv1: Linear,
    conv2: Linear,
}

impl ConvStem {
    pub fn new(ps: &mut ParamStore, scope: &str, strides: [usize; 2], channels: usize, seed: u64) -> Result<Self> {
        if strides[0] == 0 || strides[1] == 0 {
            return Err(Error::Config("stem strides must be positive".into()));
        }
        let mid = channels / 2;
        Ok(ConvStem {
            strides,
            conv1: Linear::new(ps, &format!("{scope}.conv1"), strides[0] * strides[0] * 3, mid, true, seed),
            conv2: Linear::new(ps, &format!("{scope}.conv2"), strides[1] * strides[1] * mid, channels, true, seed),
        })
    }

    pub fn build(&self, f: &mut Fwd, img_var: Var, img: &ImageTensor) -> Result<Var> {
        let (s1, s2) = (self.strides[0], self.strides[1]);
        if img.rows % (s1 * s2) != 0 || img.cols % (s1 * s2) != 0 {
            return Err(Error::Image(format!(
                "{}x{} image not divisible by stem stride {}",
                img.cols,
                img.rows,
                s1 * s2
            )));
        }
        let p1 = f.g.patchify(img_var, img.rows, img.cols, s1);
        let h1 = self.conv1.fwd(f, p1);
        let h1 = f.g.relu(h1);
        let (r1, c1) = (img.rows / s1, img.cols / s1);
        let p2 = f.g.patchify(h1, r1, c1, s2);
        let h2 = self.conv2.fwd(f, p2);
        Ok(f.g.relu(h2))
    }
}
