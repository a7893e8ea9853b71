//! The full promptable monocular 3D detector.
//!
//! One forward pass: both encoders read the image, the aggregator blends
//! their pyramids under learned gates, the camera module predicts
//! intrinsics, and rays from whichever camera is active (prompted if given,
//! predicted otherwise) drive the camera embedding, the conditioned depth
//! stream, and the geometric prior. Each 2D prompt is then decoded
//! independently into an oriented 3D box by the two-way decoder with the
//! zero-initialized geometry sandwich between its blocks.
//!
//! Everything runs on one tape, so `detect` is bit-deterministic and
//! training reuses the same construction. Because prompted intrinsics enter
//! as constants through the same nodes the predicted ones would feed,
//! prompting the model with its own prediction reproduces the unprompted
//! output exactly.

use crate::aggregator::Aggregator;
use crate::camdepth::{geometry_embedding, rays_from_kvars, CameraModule, DepthModule, KVars};
use crate::encoders::{ConvStem, EncoderConfig, ImageTensor, ToyEncoder};
use crate::error::{Error, Result};
use crate::geometry::{Box3D, Intrinsics};
use crate::graph::{Graph, Var};
use crate::interpreter::{
    decoded_box, BoxHeads, BoxPriors, GeoBlock, PromptEncoder, PromptSet, RawBoxVars, TwoWayBlock,
    Zem,
};
use crate::nn::{Fwd, ParamId, ParamStore};
use crate::Mat;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Fixed input size (height, width); encoders bind their position
    /// embeddings to it.
    pub image_height: usize,
    pub image_width: usize,
    pub enc_s: EncoderConfig,
    pub enc_d: EncoderConfig,
    /// Stem stage strides; their product must equal the first encoder patch.
    pub stem_strides: [usize; 2],
    pub cam_channels: usize,
    pub sh_degree: usize,
    pub decoder_heads: usize,
    pub priors: BoxPriors,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 64,
            image_width: 64,
            enc_s: EncoderConfig::default(),
            enc_d: EncoderConfig::default(),
            stem_strides: [4, 2],
            cam_channels: 32,
            sh_degree: 3,
            decoder_heads: 4,
            priors: BoxPriors::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.enc_s.validate()?;
        self.enc_d.validate()?;
        if self.enc_s.channels != self.enc_d.channels {
            return Err(Error::Config(format!(
                "encoder channel widths must match for gating, got {} vs {}",
                self.enc_s.channels, self.enc_d.channels
            )));
        }
        if self.stem_strides[0] * self.stem_strides[1] != self.enc_s.patch {
            return Err(Error::Config(format!(
                "stem strides {:?} do not multiply to the encoder patch {}",
                self.stem_strides, self.enc_s.patch
            )));
        }
        if self.image_height % self.enc_s.patch != 0
            || self.image_width % self.enc_s.patch != 0
            || self.image_height % self.enc_d.patch != 0
            || self.image_width % self.enc_d.patch != 0
        {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by encoder patches",
                self.image_width, self.image_height
            )));
        }
        let c = self.enc_s.channels;
        if self.decoder_heads == 0
            || c % self.decoder_heads != 0
            || self.cam_channels % self.decoder_heads != 0
        {
            return Err(Error::Config(format!(
                "decoder heads {} must divide channels {} and cam channels {}",
                self.decoder_heads, c, self.cam_channels
            )));
        }
        if self.cam_channels < 4 || self.cam_channels % 2 != 0 {
            return Err(Error::Config("cam_channels must be an even number >= 4".into()));
        }
        if self.priors.z_ref <= 0.0 || self.priors.dim_ref <= 0.0 {
            return Err(Error::Config("box priors must be positive".into()));
        }
        Ok(())
    }

    /// Token grid of the first encoder (the decoder's working resolution).
    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.enc_s.patch, self.image_width / self.enc_s.patch)
    }
}

/// Whether the geometric prior reaches the decoder. `Ablated` feeds zeros in
/// its place and skips depth prediction entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeometryMode {
    Attached,
    Ablated,
}

/// Boxes in prompt order plus the cameras involved.
#[derive(Debug, Clone)]
pub struct Detections {
    pub boxes: Vec<Box3D>,
    pub k_used: Intrinsics,
    pub k_predicted: Intrinsics,
}

/// Graph-level outputs of one forward pass.
pub struct ForwardOut {
    pub grid: (usize, usize),
    pub kvars_pred: KVars,
    pub kvars_used: KVars,
    /// Rays of the predicted camera, for camera supervision.
    pub rays_pred: (Var, Var),
    /// Full-resolution log depth, absent in ablated mode.
    pub log_depth: Option<Var>,
    pub per_object: Vec<RawBoxVars>,
}

pub struct DetectorModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub enc_s: ToyEncoder,
    pub enc_d: ToyEncoder,
    stem: ConvStem,
    agg: Aggregator,
    cam: CameraModule,
    depth: DepthModule,
    prompt_enc: PromptEncoder,
    t3d: ParamId,
    tw1: TwoWayBlock,
    tw2: TwoWayBlock,
    zem_in: Zem,
    zem_out: Zem,
    geo: GeoBlock,
    heads: BoxHeads,
}

impl DetectorModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let c = cfg.enc_s.channels;
        let enc_s = ToyEncoder::new(&mut ps, "enc_s", cfg.enc_s.clone(), seed)?;
        let enc_d = ToyEncoder::new(&mut ps, "enc_d", cfg.enc_d.clone(), seed)?;
        enc_s.ensure_pos_embed(
            &mut ps,
            cfg.image_height / cfg.enc_s.patch,
            cfg.image_width / cfg.enc_s.patch,
            seed,
        );
        enc_d.ensure_pos_embed(
            &mut ps,
            cfg.image_height / cfg.enc_d.patch,
            cfg.image_width / cfg.enc_d.patch,
            seed,
        );
        let stem = ConvStem::new(&mut ps, "stem", cfg.stem_strides, c, seed)?;
        let agg = Aggregator::new(&mut ps, "agg", c, cfg.decoder_heads, seed);
        let cam = CameraModule::new(
            &mut ps,
            "cam",
            c,
            cfg.cam_channels,
            cfg.decoder_heads,
            cfg.sh_degree,
            seed,
        )?;
        let depth = DepthModule::new(&mut ps, "depth", c, cfg.cam_channels, cfg.decoder_heads, seed);
        let prompt_enc = PromptEncoder::new(&mut ps, "prompt", c, seed)?;
        let t3d = ps.add_randn("decoder.t3d", 1, c, 0.02, seed);
        let tw1 = TwoWayBlock::new(&mut ps, "decoder.tw1", c, cfg.decoder_heads, seed);
        let tw2 = TwoWayBlock::new(&mut ps, "decoder.tw2", c, cfg.decoder_heads, seed);
        let zem_in = Zem::new(&mut ps, "decoder.zem_in", 2 * cfg.cam_channels, c);
        let zem_out = Zem::new(&mut ps, "decoder.zem_out", c, c);
        let geo = GeoBlock::new(&mut ps, "decoder.geo", c, cfg.decoder_heads, seed);
        let heads = BoxHeads::new(&mut ps, "heads", c, cfg.priors, seed);
        Ok(DetectorModel {
            cfg,
            params: ps,
            enc_s,
            enc_d,
            stem,
            agg,
            cam,
            depth,
            prompt_enc,
            t3d,
            tw1,
            tw2,
            zem_in,
            zem_out,
            geo,
            heads,
        })
    }

    fn check_image(&self, img: &ImageTensor) -> Result<()> {
        if img.rows != self.cfg.image_height || img.cols != self.cfg.image_width {
            return Err(Error::Image(format!(
                "model is built for {}x{} images, got {}x{}",
                self.cfg.image_width, self.cfg.image_height, img.cols, img.rows
            )));
        }
        Ok(())
    }

    /// Builds the complete forward pass on `g`.
    pub fn forward(
        &self,
        g: &mut Graph,
        img: &ImageTensor,
        prompts: &PromptSet,
        mode: GeometryMode,
    ) -> Result<ForwardOut> {
        self.check_image(img)?;
        prompts.validate(img.cols, img.rows)?;
        let (width, height) = (self.cfg.image_width, self.cfg.image_height);
        let grid = self.cfg.grid();

        let img_var = g.constant(img.data.clone());
        let mut f = Fwd::new(g, &self.params);
        let fs = self.enc_s.build(&mut f, img_var, img)?;
        let fd = self.enc_d.build(&mut f, img_var, img)?;
        let fq0 = self.stem.build(&mut f, img_var, img)?;
        let fused = self.agg.fwd(&mut f, &fs, &fd, fq0);
        let top = fused.fused_hat[3];

        let kvars_pred = self.cam.predict(&mut f, top, width, height);
        let kvars_used = match &prompts.intrinsics {
            Some(k) => KVars::constant(f.g, k),
            None => kvars_pred,
        };
        let rays_pred = rays_from_kvars(f.g, &kvars_pred, grid.0, grid.1, width, height);

        let (gprior, log_depth) = match mode {
            GeometryMode::Attached => {
                let rays_used = rays_from_kvars(f.g, &kvars_used, grid.0, grid.1, width, height);
                let cam_embed = self.cam.embed_rays(&mut f, rays_used.0, rays_used.1);
                let conditioned = self.depth.condition(&mut f, top, cam_embed);
                let gprior = geometry_embedding(f.g, conditioned, cam_embed);
                let logd = self.depth.log_depth(&mut f, conditioned, grid, (height, width));
                (gprior, Some(logd))
            }
            GeometryMode::Ablated => {
                let zeros = Mat::zeros((grid.0 * grid.1, 2 * self.cfg.cam_channels));
                (f.g.constant(zeros), None)
            }
        };

        let mut per_object = Vec::with_capacity(prompts.prompts.len());
        for prompt in &prompts.prompts {
            let ptoks = self.prompt_enc.encode(&mut f, prompt, width, height);
            let t3d = f.p(self.t3d);
            let tokens = f.g.concat_rows(&[t3d, ptoks]);

            let (t1, f1) = self.tw1.fwd(&mut f, tokens, top);
            let inj = self.zem_in.fwd(&mut f, gprior);
            let fin = f.g.add(f1, inj);
            let read = self.geo.fwd(&mut f, fin, t1);
            let merged = self.zem_out.fwd(&mut f, read);
            let f2 = f.g.add(f1, merged);
            let (t2, _) = self.tw2.fwd(&mut f, t1, f2);

            let o3d = f.g.slice_rows(t2, 0, 1);
            let raw = self.heads.decode(&mut f, o3d, prompt.anchor(), (width, height), &kvars_used);
            per_object.push(raw);
        }

        Ok(ForwardOut { grid, kvars_pred, kvars_used, rays_pred, log_depth, per_object })
    }

    pub fn detect(&self, img: &ImageTensor, prompts: &PromptSet) -> Result<Detections> {
        self.detect_with_mode(img, prompts, GeometryMode::Attached)
    }

    pub fn detect_with_mode(
        &self,
        img: &ImageTensor,
        prompts: &PromptSet,
        mode: GeometryMode,
    ) -> Result<Detections> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, img, prompts, mode)?;
        let boxes = out
            .per_object
            .iter()
            .map(|raw| decoded_box(&g, raw))
            .collect::<Result<Vec<_>>>()?;
        let k_predicted =
            out.kvars_pred.to_intrinsics(&g, self.cfg.image_width, self.cfg.image_height)?;
        let k_used = match &prompts.intrinsics {
            Some(k) => *k,
            None => k_predicted,
        };
        Ok(Detections { boxes, k_used, k_predicted })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::interpreter::Prompt2D;
    use crate::seeding;
    use rand::Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_height: 32,
            image_width: 32,
            enc_s: EncoderConfig { patch: 8, channels: 16, blocks: 4, heads: 2, mlp_ratio: 2 },
            enc_d: EncoderConfig { patch: 8, channels: 16, blocks: 4, heads: 2, mlp_ratio: 2 },
            stem_strides: [4, 2],
            cam_channels: 8,
            sh_degree: 2,
            decoder_heads: 2,
            priors: BoxPriors::default(),
        }
    }

    fn test_image(cfg: &ModelConfig, seed: u64) -> ImageTensor {
        let mut rng = seeding::rng(seed);
        let data = Mat::from_shape_fn((cfg.image_height * cfg.image_width, 3), |_| rng.random());
        ImageTensor::new(cfg.image_height, cfg.image_width, data).unwrap()
    }

    fn test_prompts() -> PromptSet {
        PromptSet {
            prompts: vec![
                Prompt2D::Box { x1: 4.0, y1: 6.0, x2: 20.0, y2: 22.0 },
                Prompt2D::Point { u: 25.0, v: 12.0 },
            ],
            intrinsics: None,
        }
    }

    #[test]
    fn config_validation_catches_mismatches() {
        let mut cfg = tiny_config();
        cfg.stem_strides = [4, 4];
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.enc_d.channels = 32;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.image_height = 30;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn detect_returns_valid_boxes_per_prompt() {
        let model = DetectorModel::new(tiny_config(), 11).unwrap();
        let img = test_image(&model.cfg, 1);
        let det = model.detect(&img, &test_prompts()).unwrap();
        assert_eq!(det.boxes.len(), 2);
        for b in &det.boxes {
            assert!(b.center.z > 0.0);
            assert!(b.dims.iter().all(|d| *d > 0.0));
        }
        assert_eq!(det.k_used, det.k_predicted, "no prompt camera: used must be predicted");
    }

    #[test]
    fn detect_is_bit_deterministic() {
        let model = DetectorModel::new(tiny_config(), 12).unwrap();
        let img = test_image(&model.cfg, 2);
        let a = model.detect(&img, &test_prompts()).unwrap();
        let b = model.detect(&img, &test_prompts()).unwrap();
        for (x, y) in a.boxes.iter().zip(b.boxes.iter()) {
            assert_eq!(x.center, y.center);
            assert_eq!(x.dims, y.dims);
            assert_eq!(x.rotation, y.rotation);
            assert_eq!(x.score.to_bits(), y.score.to_bits());
        }
    }

    #[test]
    fn geometry_branch_is_inert_at_initialization() {
        let model = DetectorModel::new(tiny_config(), 13).unwrap();
        let img = test_image(&model.cfg, 3);
        let with = model.detect_with_mode(&img, &test_prompts(), GeometryMode::Attached).unwrap();
        let without = model.detect_with_mode(&img, &test_prompts(), GeometryMode::Ablated).unwrap();
        for (a, b) in with.boxes.iter().zip(without.boxes.iter()) {
            assert_eq!(a.center, b.center);
            assert_eq!(a.dims, b.dims);
            assert_eq!(a.rotation, b.rotation);
        }
    }

    #[test]
    fn prompting_with_own_prediction_changes_nothing() {
        let model = DetectorModel::new(tiny_config(), 14).unwrap();
        let img = test_image(&model.cfg, 4);
        let free = model.detect(&img, &test_prompts()).unwrap();
        let mut prompted = test_prompts();
        prompted.intrinsics = Some(free.k_predicted);
        let pinned = model.detect(&img, &prompted).unwrap();
        for (a, b) in free.boxes.iter().zip(pinned.boxes.iter()) {
            assert_eq!(a.center.x.to_bits(), b.center.x.to_bits());
            assert_eq!(a.center.y.to_bits(), b.center.y.to_bits());
            assert_eq!(a.center.z.to_bits(), b.center.z.to_bits());
            assert_eq!(a.dims, b.dims);
            assert_eq!(a.rotation, b.rotation);
            assert_eq!(a.score.to_bits(), b.score.to_bits());
        }
    }

    #[test]
    fn objects_decode_independently() {
        let model = DetectorModel::new(tiny_config(), 15).unwrap();
        let img = test_image(&model.cfg, 5);
        let fwd_order = model.detect(&img, &test_prompts()).unwrap();
        let mut reversed = test_prompts();
        reversed.prompts.reverse();
        let rev_order = model.detect(&img, &reversed).unwrap();
        assert_eq!(fwd_order.boxes[0].center, rev_order.boxes[1].center);
        assert_eq!(fwd_order.boxes[1].center, rev_order.boxes[0].center);
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let model = DetectorModel::new(tiny_config(), 16).unwrap();
        let mut rng = seeding::rng(6);
        let data = Mat::from_shape_fn((16 * 16, 3), |_| rng.random());
        let img = ImageTensor::new(16, 16, data).unwrap();
        assert!(model.detect(&img, &test_prompts()).is_err());
    }
}
