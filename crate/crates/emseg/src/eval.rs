//! Pixel classification metrics, label-distance measures, and EM
//! hyper-parameter sweeps.

use std::path::Path;

use rayon::prelude::*;

use crate::em::{em_run_from, EmParams, EmScene};
use crate::error::{Error, Result};
use crate::geom::Polyline;
use crate::model::SegModel;
use crate::raster::{LabelGrid, Region, Window};

/// Pixel counts with class 1 (stream) positive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.true_neg += other.true_neg;
    }
}

/// Counts the confusion matrix of a predicted mask against truth.
pub fn confusion(pred: &LabelGrid, truth: &LabelGrid) -> Result<ConfusionMatrix> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(Error::domain(format!(
            "confusion dims differ: pred {}x{}, truth {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let mut m = ConfusionMatrix::default();
    for (&p, &t) in pred.values().iter().zip(truth.values()) {
        match (p, t) {
            (1, 1) => m.true_pos += 1,
            (1, 0) => m.false_pos += 1,
            (0, 1) => m.false_neg += 1,
            _ => m.true_neg += 1,
        }
    }
    Ok(m)
}

/// Precision/recall/F1 for the stream class. When a denominator is zero the
/// corresponding metric reports 0 and `degenerate` is set instead of erroring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: bool,
}

pub fn prf(m: &ConfusionMatrix) -> Prf {
    let mut degenerate = false;
    let precision = if m.true_pos + m.false_pos > 0 {
        m.true_pos as f64 / (m.true_pos + m.false_pos) as f64
    } else {
        degenerate = true;
        0.0
    };
    let recall = if m.true_pos + m.false_neg > 0 {
        m.true_pos as f64 / (m.true_pos + m.false_neg) as f64
    } else {
        degenerate = true;
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Prf {
        precision,
        recall,
        f1,
        degenerate,
    }
}

/// Mean, over the vertices of the inferred lines, of the distance to the
/// nearest point on any truth line.
pub fn mean_label_distance(inferred: &[Polyline], truth: &[Polyline]) -> Result<f64> {
    if inferred.is_empty() || truth.is_empty() {
        return Err(Error::domain(
            "mean_label_distance requires non-empty line sets".to_string(),
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for line in inferred {
        for &v in line.vertices() {
            let d = truth
                .iter()
                .map(|t| t.distance_to(v))
                .fold(f64::INFINITY, f64::min);
            total += d;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Accumulated confusion of a model's thresholded predictions over a set of
/// windows, against the given reference raster.
pub fn windows_confusion(
    model: &SegModel,
    features: &crate::raster::FeatureGrid,
    reference: &LabelGrid,
    windows: &[Window],
) -> Result<ConfusionMatrix> {
    let mut total = ConfusionMatrix::default();
    for w in windows {
        let probs = model.predict(&w.features(features))?;
        let pred = probs.threshold(0.5);
        total.merge(&confusion(&pred, &w.labels(reference))?);
    }
    Ok(total)
}

/// One sweep setting and its outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub epsilon: f64,
    pub top_k: usize,
    pub test_precision: f64,
    pub test_recall: f64,
    pub test_f1: f64,
    pub iterations: usize,
}

/// Evaluation context shared by all sweep settings: where the held-out test
/// windows live and what truth to score against.
#[derive(Debug, Clone)]
pub struct SweepContext {
    pub test_region: Region,
    pub n_test_windows: usize,
    pub truth_raster: LabelGrid,
}

/// Runs the EM loop once per `(epsilon, top_k)` grid cell, all from the same
/// pretrained model and seed, and scores each final model on held-out test
/// windows against true labels. Settings run on parallel workers with
/// per-setting derived seeds.
pub fn sensitivity_sweep(
    pretrained: &SegModel,
    scene: &EmScene,
    params: &EmParams,
    ctx: &SweepContext,
    eps_values: &[f64],
    k_values: &[usize],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let test_windows = crate::em::plan_test_windows(scene, params, ctx, seed)?;
    let grid: Vec<(f64, usize)> = eps_values
        .iter()
        .flat_map(|&e| k_values.iter().map(move |&k| (e, k)))
        .collect();
    grid.par_iter()
        .map(|&(epsilon, top_k)| {
            let mut p = params.clone();
            p.config.epsilon = epsilon;
            p.config.top_k = top_k;
            let (model, history) = em_run_from(pretrained.clone(), scene, &p, seed)?;
            let conf = windows_confusion(&model, scene.features, &ctx.truth_raster, &test_windows)?;
            let scores = prf(&conf);
            Ok(SweepRow {
                epsilon,
                top_k,
                test_precision: scores.precision,
                test_recall: scores.recall,
                test_f1: scores.f1,
                iterations: history.iterations.len(),
            })
        })
        .collect()
}

/// Writes sweep rows as CSV: epsilon, top_k, precision, recall, f1, iterations.
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "epsilon,top_k,test_precision,test_recall,test_f1,iterations")
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.epsilon, r.top_k, r.test_precision, r.test_recall, r.test_f1, r.iterations
        )
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.to_path_buf(), e))
}
