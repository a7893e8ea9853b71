//! Detection evaluation: greedy 3D-overlap matching and interpolated
//! average precision.
//!
//! Predictions are ranked by descending confidence across all scenes of a
//! category. Each one matches the highest-overlap unmatched ground truth of
//! its own scene and category at or above the overlap threshold; everything
//! else is a false positive. Average precision interpolates the resulting
//! precision envelope on a 101-point recall grid. Scores average over
//! categories first (categories with no ground truth anywhere are skipped),
//! then over thresholds. Every tie-break is deterministic: ranking ties keep
//! (scene, index) order, overlap ties take the earliest ground truth.

use crate::geometry::{iou3d, Box3D};
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};

/// A category-tagged box; the box score is the ranking confidence.
#[derive(Debug, Clone)]
pub struct LabeledBox {
    pub category: String,
    pub b: Box3D,
}

/// One scene's predictions and ground truths.
#[derive(Debug, Clone, Default)]
pub struct EvalScene {
    pub predictions: Vec<LabeledBox>,
    pub truths: Vec<LabeledBox>,
}

/// Overlap thresholds the summary score averages over: 0.05 to 0.50.
pub fn default_thresholds() -> Vec<f64> {
    (1..=10).map(|i| i as f64 * 0.05).collect()
}

/// Categories with at least one ground truth in `scene`.
pub fn target_categories(scene: &EvalScene) -> BTreeSet<String> {
    scene.truths.iter().map(|t| t.category.clone()).collect()
}

/// Drops predictions whose category has no ground truth in their own scene.
pub fn filter_target_aware(scenes: &[EvalScene]) -> Vec<EvalScene> {
    scenes
        .iter()
        .map(|s| {
            let cats = target_categories(s);
            EvalScene {
                predictions: s
                    .predictions
                    .iter()
                    .filter(|p| cats.contains(&p.category))
                    .cloned()
                    .collect(),
                truths: s.truths.clone(),
            }
        })
        .collect()
}

/// The ranked true/false-positive outcomes for one category at one
/// threshold, already in descending-score order, plus the ground-truth count.
fn match_category(scenes: &[EvalScene], category: &str, tau: f64) -> (Vec<bool>, usize) {
    let mut gt_count = 0usize;
    for s in scenes {
        gt_count += s.truths.iter().filter(|t| t.category == category).count();
    }

    // (scene, prediction index), ranked by score descending, stable.
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for (si, s) in scenes.iter().enumerate() {
        for (pi, p) in s.predictions.iter().enumerate() {
            if p.category == category {
                ranked.push((si, pi));
            }
        }
    }
    ranked.sort_by(|a, b| {
        let sa = scenes[a.0].predictions[a.1].b.score;
        let sb = scenes[b.0].predictions[b.1].b.score;
        sb.partial_cmp(&sa).unwrap().then(a.cmp(b))
    });

    let mut taken: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.truths.len()]).collect();
    let mut outcomes = Vec::with_capacity(ranked.len());
    for (si, pi) in ranked {
        let pred = &scenes[si].predictions[pi];
        let mut best: Option<(usize, f64)> = None;
        for (ti, t) in scenes[si].truths.iter().enumerate() {
            if t.category != category || taken[si][ti] {
                continue;
            }
            let ov = iou3d(&pred.b, &t.b);
            if ov >= tau && best.is_none_or(|(_, b)| ov > b) {
                best = Some((ti, ov));
            }
        }
        match best {
            Some((ti, _)) => {
                taken[si][ti] = true;
                outcomes.push(true);
            }
            None => outcomes.push(false),
        }
    }
    (outcomes, gt_count)
}

/// 101-point interpolated average precision from ranked outcomes.
fn interpolated_ap(outcomes: &[bool], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let mut curve = Vec::with_capacity(outcomes.len());
    let mut tp = 0usize;
    for (i, hit) in outcomes.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        let precision = tp as f64 / (i + 1) as f64;
        let recall = tp as f64 / gt_count as f64;
        curve.push((recall, precision));
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let p = curve
            .iter()
            .filter(|(rec, _)| *rec >= level)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        total += p;
    }
    total / 101.0
}

/// Average precision for one category at one threshold. `None` when the
/// category has no ground truth anywhere.
pub fn ap3d(scenes: &[EvalScene], category: &str, tau: f64) -> Option<f64> {
    let (outcomes, gt_count) = match_category(scenes, category, tau);
    (gt_count > 0).then(|| interpolated_ap(&outcomes, gt_count))
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    /// Mean over categories, then over thresholds.
    pub mean_ap: f64,
    /// Per category: mean over thresholds.
    pub per_category: BTreeMap<String, f64>,
    /// Per threshold: mean over categories.
    pub per_threshold: Vec<(f64, f64)>,
    pub scenes: usize,
    pub predictions: usize,
    pub truths: usize,
}

/// Evaluates over every category present in the ground truth, at each of the
/// given thresholds.
pub fn evaluate(scenes: &[EvalScene], thresholds: &[f64]) -> EvalReport {
    let mut categories = BTreeSet::new();
    for s in scenes {
        for t in &s.truths {
            categories.insert(t.category.clone());
        }
    }
    let mut per_category: BTreeMap<String, f64> = BTreeMap::new();
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for tau in thresholds {
        let mut sum = 0.0;
        for cat in &categories {
            let ap = ap3d(scenes, cat, *tau).unwrap_or(0.0);
            sum += ap;
            *per_category.entry(cat.clone()).or_insert(0.0) += ap;
        }
        let mean = if categories.is_empty() { 0.0 } else { sum / categories.len() as f64 };
        per_threshold.push((*tau, mean));
    }
    for v in per_category.values_mut() {
        *v /= thresholds.len().max(1) as f64;
    }
    let mean_ap = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().map(|(_, v)| v).sum::<f64>() / per_threshold.len() as f64
    };
    EvalReport {
        mean_ap,
        per_category,
        per_threshold,
        scenes: scenes.len(),
        predictions: scenes.iter().map(|s| s.predictions.len()).sum(),
        truths: scenes.iter().map(|s| s.truths.len()).sum(),
    }
}
