//! Optimization loop and evaluation driver.
//!
//! Training walks scenes one at a time in a fixed order, builds a fresh
//! graph per step, and updates parameters with decoupled-weight-decay Adam
//! under a warmup-then-cosine learning-rate schedule. Parameters whose
//! gradient is absent from a step (branches the loss never touched) are
//! skipped, not zeroed. A non-finite loss or gradient stops the run with a
//! description of the offending step. Everything is deterministic for a
//! fixed seed.

use crate::datakit::{perturbed_box_prompt, point_prompt, LoadedScene, SceneMeta};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, filter_target_aware, EvalReport, EvalScene, LabeledBox};
use crate::graph::{Grads, Graph};
use crate::interpreter::PromptSet;
use crate::losses::{scene_loss, LossWeights, SceneLoss, SceneTargets};
use crate::model::{DetectorModel, GeometryMode};
use crate::nn::{ParamId, ParamStore};
use crate::seeding;
use crate::Mat;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps of linear warmup before the cosine decay begins.
    pub warmup_steps: usize,
    /// The cosine floor, as a fraction of `lr`.
    pub min_lr_factor: f64,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 10,
            min_lr_factor: 0.1,
            grad_clip: 0.0,
        }
    }
}

/// Learning rate at `step` of a `total`-step run: linear warmup, then a
/// cosine from `lr` down to `lr * min_lr_factor`.
pub fn lr_at(cfg: &OptimConfig, step: usize, total: usize) -> f64 {
    let warm = cfg.warmup_steps.min(total);
    if step < warm {
        return cfg.lr * (step + 1) as f64 / warm as f64;
    }
    let span = (total.saturating_sub(warm)).max(1);
    let t = (step - warm) as f64 / span as f64;
    let floor = cfg.lr * cfg.min_lr_factor;
    floor + (cfg.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Decoupled-weight-decay Adam over a parameter store. Moments live here,
/// keyed per parameter; a parameter missing from a step's gradients keeps
/// its moments untouched.
pub struct AdamW {
    cfg: OptimConfig,
    step: usize,
    m: HashMap<usize, Mat>,
    v: HashMap<usize, Mat>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW { cfg, step: 0, m: HashMap::new(), v: HashMap::new() }
    }

    /// Applies one update at learning rate `lr`; returns how many parameters
    /// moved. Non-finite gradients abort.
    pub fn apply(
        &mut self,
        ps: &mut ParamStore,
        g: &Graph,
        grads: &Grads,
        lr: f64,
    ) -> Result<usize> {
        self.step += 1;
        let ids: Vec<ParamId> =
            ps.iter().filter(|(_, e)| e.trainable).map(|(id, _)| id).collect();

        let mut scale = 1.0;
        if self.cfg.grad_clip > 0.0 {
            let mut sq = 0.0;
            for id in &ids {
                if let Some(gr) = grads.for_param(g, id.0) {
                    sq += gr.iter().map(|x| x * x).sum::<f64>();
                }
            }
            let norm = sq.sqrt();
            if norm > self.cfg.grad_clip {
                scale = self.cfg.grad_clip / norm;
            }
        }

        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        let mut updated = 0;
        for id in ids {
            let Some(grad) = grads.for_param(g, id.0) else { continue };
            if !grad.iter().all(|x| x.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite gradient for {}",
                    ps.get(id).name
                )));
            }
            let grad = grad * scale;
            let m = self
                .m
                .entry(id.0)
                .or_insert_with(|| Mat::zeros(grad.raw_dim()));
            *m = &*m * self.cfg.beta1 + &grad * (1.0 - self.cfg.beta1);
            let v = self
                .v
                .entry(id.0)
                .or_insert_with(|| Mat::zeros(grad.raw_dim()));
            *v = &*v * self.cfg.beta2 + &(&grad * &grad) * (1.0 - self.cfg.beta2);

            let mhat = &*m / bc1;
            let vhat = &*v / bc2;
            let denom = vhat.mapv(f64::sqrt) + self.cfg.eps;
            let w = ps.value_mut(id);
            let delta = (mhat / denom + &*w * self.cfg.weight_decay) * lr;
            *w -= &delta;
            updated += 1;
        }
        Ok(updated)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Stream seed for prompt jitter.
    pub seed: u64,
    /// Box-prompt jitter as a fraction of box extent; 0 trains on exact
    /// boxes.
    pub box_jitter: f64,
    /// Feed the true camera as a prompt while training. The camera head is
    /// supervised either way.
    pub intrinsic_prompt: bool,
    pub weights: LossWeights,
    /// Print a progress line every this many steps; 0 is silent.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            seed: 0,
            box_jitter: 0.05,
            intrinsic_prompt: true,
            weights: LossWeights::default(),
            log_every: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainStats {
    pub steps: usize,
    /// Total loss per step, in step order.
    pub history: Vec<f64>,
}

fn loss_dump(g: &Graph, l: &SceneLoss) -> String {
    let read = |v| g.value(v)[[0, 0]];
    let mut parts = vec![
        format!("total={:.6e}", read(l.total)),
        format!("camera={:.6e}", read(l.camera)),
    ];
    if let Some(v) = l.depth {
        parts.push(format!("depth={:.6e}", read(v)));
    }
    if let Some(v) = l.box_l1 {
        parts.push(format!("box_l1={:.6e}", read(v)));
    }
    if let Some(v) = l.rotation {
        parts.push(format!("rotation={:.6e}", read(v)));
    }
    if let Some(v) = l.score {
        parts.push(format!("score={:.6e}", read(v)));
    }
    parts.join(" ")
}

/// Trains in place over `scenes`, one scene per step, cycling in order.
pub fn train(
    model: &mut DetectorModel,
    scenes: &[LoadedScene],
    optim: &OptimConfig,
    tcfg: &TrainConfig,
) -> Result<TrainStats> {
    if scenes.is_empty() {
        return Err(Error::Config("no training scenes".into()));
    }
    let mut opt = AdamW::new(optim.clone());
    let mut jitter = seeding::rng(seeding::derive_named(tcfg.seed, "prompt-jitter"));
    let mut history = Vec::with_capacity(tcfg.steps);

    for step in 0..tcfg.steps {
        let scene = &scenes[step % scenes.len()];
        let meta = &scene.meta;
        let k = meta.camera()?;
        let (w, h) = (meta.width, meta.height);

        let prompts: Vec<_> = meta
            .objects
            .iter()
            .map(|o| perturbed_box_prompt(o, w, h, tcfg.box_jitter, &mut jitter))
            .collect();
        let pset = PromptSet {
            prompts,
            intrinsics: tcfg.intrinsic_prompt.then_some(k),
        };
        let boxes: Vec<_> = meta.objects.iter().map(|o| o.to_target()).collect();

        let mut g = Graph::new();
        let out = model.forward(&mut g, &scene.image, &pset, GeometryMode::Attached)?;
        let targets = SceneTargets {
            intrinsics: &k,
            depth: scene.depth.as_ref().map(|(d, m)| (d, m)),
            boxes: &boxes,
        };
        let loss = scene_loss(&mut g, &out, &targets, &tcfg.weights)?;
        let lv = g.value(loss.total)[[0, 0]];
        if !lv.is_finite() {
            return Err(Error::Diverged(format!(
                "step {step} scene {}: {}",
                meta.id,
                loss_dump(&g, &loss)
            )));
        }

        let grads = g.backward(loss.total);
        let lr = lr_at(optim, step, tcfg.steps);
        opt.apply(&mut model.params, &g, &grads, lr)
            .map_err(|e| Error::Diverged(format!("step {step} scene {}: {e}", meta.id)))?;

        if tcfg.log_every > 0 && (step % tcfg.log_every == 0 || step + 1 == tcfg.steps) {
            eprintln!("step {step:>5}  loss {lv:.6}  lr {lr:.3e}");
        }
        history.push(lv);
    }
    Ok(TrainStats { steps: tcfg.steps, history })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Box,
    Point,
}

impl std::str::FromStr for PromptMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box" => Ok(PromptMode::Box),
            "point" => Ok(PromptMode::Point),
            other => Err(Error::Config(format!("unknown prompt mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for PromptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PromptMode::Box => "box",
            PromptMode::Point => "point",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub prompt_mode: PromptMode,
    /// Prompt with the annotated camera instead of the predicted one.
    pub intrinsic_prompt: bool,
    /// Drop predictions whose category has no ground truth in the scene.
    pub target_aware: bool,
    pub thresholds: Vec<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            prompt_mode: PromptMode::Box,
            intrinsic_prompt: true,
            target_aware: false,
            thresholds: crate::evalkit::default_thresholds(),
        }
    }
}

/// Runs the model over annotated scenes, prompting once per object. Each
/// prediction carries the category of the annotation that prompted it.
pub fn predict_scenes(
    model: &DetectorModel,
    scenes: &[LoadedScene],
    opts: &EvalOptions,
) -> Result<Vec<EvalScene>> {
    let mut out = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let meta = &scene.meta;
        let prompts: Vec<_> = meta
            .objects
            .iter()
            .map(|o| match opts.prompt_mode {
                PromptMode::Box => {
                    let [x1, y1, x2, y2] = o.box2d;
                    crate::interpreter::Prompt2D::Box { x1, y1, x2, y2 }
                }
                PromptMode::Point => point_prompt(o),
            })
            .collect();
        let pset = PromptSet {
            prompts,
            intrinsics: opts.intrinsic_prompt.then(|| meta.camera()).transpose()?,
        };
        let det = model.detect(&scene.image, &pset)?;
        let predictions = meta
            .objects
            .iter()
            .zip(&det.boxes)
            .map(|(o, b)| LabeledBox { category: o.category.clone(), b: b.clone() })
            .collect();
        let truths = meta
            .objects
            .iter()
            .map(|o| Ok(LabeledBox { category: o.category.clone(), b: o.to_box(1.0)? }))
            .collect::<Result<Vec<_>>>()?;
        out.push(EvalScene { predictions, truths });
    }
    if opts.target_aware {
        out = filter_target_aware(&out);
    }
    Ok(out)
}

/// Predicts and scores in one call.
pub fn evaluate_model(
    model: &DetectorModel,
    scenes: &[LoadedScene],
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<EvalScene>)> {
    let eval_scenes = predict_scenes(model, scenes, opts)?;
    let report = evaluate(&eval_scenes, &opts.thresholds);
    Ok((report, eval_scenes))
}

/// Ground truth replayed as predictions with score 1, for sanity-checking
/// the scoring path end to end.
pub fn ground_truth_scenes(metas: &[SceneMeta]) -> Result<Vec<EvalScene>> {
    metas
        .iter()
        .map(|m| {
            let truths = m
                .objects
                .iter()
                .map(|o| Ok(LabeledBox { category: o.category.clone(), b: o.to_box(1.0)? }))
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalScene { predictions: truths.clone(), truths })
        })
        .collect()
}
