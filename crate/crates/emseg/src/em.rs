//! The EM loop over hidden true label locations.
//!
//! The model is pre-trained on the observed (misregistered) labels. Candidate
//! true placements are generated once per chunk. Each iteration then scores
//! every candidate under the current model (E-step: prior x likelihood,
//! normalized per chunk), selects one placement per chunk — greedily, with an
//! epsilon chance of drawing uniformly from the top-K — rasterizes the
//! selection, and retrains the model from scratch on the re-labeled windows
//! (M-step). The loop stops when the greedy selection stops changing or the
//! iteration cap is reached.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{mean_label_distance, prf, windows_confusion};
use crate::geom::{chunk_lines, generate_candidates, CandidateSet, PolarErrorModel, Polyline};
use crate::model::{train, ModelSpec, ProbMap, SegModel, TrainCurve, TrainSchedule};
use crate::raster::{
    augment_window, extract_windows, rasterize_buffer, FeatureGrid, LabelGrid, Region, Sample,
    Window,
};
use crate::synth::SceneSpec;

/// Per-pixel probability clamp applied before taking logs in the candidate
/// likelihood.
const LIKELIHOOD_CLAMP: f64 = 1e-6;

/// EM loop configuration. Defaults: epsilon 0.05, top-K 5, at most 8
/// iterations, retraining from scratch each iteration with the sampling
/// (single configuration) E-step.
#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    /// Probability of exploring: drawing uniformly from the top-K candidates
    /// instead of taking the posterior argmax.
    pub epsilon: f64,
    /// Size of the exploration pool.
    pub top_k: usize,
    pub max_iterations: usize,
    /// Reinitialize the model each iteration (fresh parameters) rather than
    /// continuing from the previous iteration's weights.
    pub retrain_from_scratch: bool,
    /// Train on the full posterior-weighted candidate mixture (the
    /// decomposed expected loss) instead of the sampled configuration.
    /// Intended for small instances.
    pub use_expected_loss: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            epsilon: 0.05,
            top_k: 5,
            max_iterations: 8,
            retrain_from_scratch: true,
            use_expected_loss: false,
        }
    }
}

impl EmConfig {
    pub fn validate(&self, n_candidates: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::domain(format!(
                "epsilon must be in [0, 1], got {}",
                self.epsilon
            )));
        }
        if self.top_k == 0 || self.top_k > n_candidates {
            return Err(Error::domain(format!(
                "top_k must be in 1..={n_candidates}, got {}",
                self.top_k
            )));
        }
        Ok(())
    }
}

/// Bayes table row for one chunk.
#[derive(Debug, Clone)]
pub struct PosteriorRow {
    pub chunk_id: usize,
    /// Signed perpendicular offset of each candidate.
    pub offsets: Vec<f64>,
    pub priors: Vec<f64>,
    pub likelihoods: Vec<f64>,
    pub posteriors: Vec<f64>,
}

/// Per-chunk posterior rows, in chunk order.
#[derive(Debug, Clone, Default)]
pub struct PosteriorTable {
    pub rows: Vec<PosteriorRow>,
}

/// Inputs to the EM loop.
#[derive(Debug, Clone, Copy)]
pub struct EmScene<'a> {
    pub features: &'a FeatureGrid,
    pub noisy: &'a [Polyline],
    /// True lines, when known (synthetic mode); enables the label-distance
    /// history column.
    pub truth: Option<&'a [Polyline]>,
}

/// Everything the loop needs besides the scene: candidate generation,
/// rasterization, window sampling, the model architecture, and schedules.
#[derive(Debug, Clone)]
pub struct EmParams {
    pub error_model: PolarErrorModel,
    pub chunk_len: f64,
    pub n_side: usize,
    pub step: f64,
    pub buffer: f64,
    pub resolution: f64,
    pub window_size: usize,
    pub n_train_windows: usize,
    pub n_val_windows: usize,
    /// Region from which train/validation windows are sampled.
    pub train_region: Region,
    pub model_spec: ModelSpec,
    pub schedule: TrainSchedule,
    pub config: EmConfig,
}

impl EmParams {
    /// Desk-scale defaults for a synthetic scene: train/validation windows in
    /// the lower half, 24 px windows, the compact model, 19 candidates at
    /// 1 px spacing, and the default schedule.
    pub fn for_scene(spec: &SceneSpec) -> EmParams {
        EmParams {
            error_model: PolarErrorModel::new(1.0, std::f64::consts::FRAC_PI_4, 9.0)
                .expect("valid model"),
            chunk_len: 20.0,
            n_side: 9,
            step: 1.0,
            buffer: 2.0,
            resolution: 1.0,
            window_size: 24,
            n_train_windows: 16,
            n_val_windows: 6,
            train_region: Region {
                row0: spec.height / 2,
                col0: 0,
                height: spec.height - spec.height / 2,
                width: spec.width,
            },
            model_spec: ModelSpec::compact(spec.channels()),
            schedule: TrainSchedule::default(),
            config: EmConfig::default(),
        }
    }

    pub fn n_candidates(&self) -> usize {
        2 * self.n_side + 1
    }
}

/// One completed EM iteration.
#[derive(Debug, Clone)]
pub struct EmIteration {
    pub iteration: usize,
    /// Chunk ids in table order.
    pub chunk_ids: Vec<usize>,
    /// Selected candidate index per chunk.
    pub selected: Vec<usize>,
    /// Selected signed offset per chunk.
    pub selected_offsets: Vec<f64>,
    /// Selected candidate geometry per chunk.
    pub inferred: Vec<Polyline>,
    /// F1 of the retrained model against the inferred labels on the train
    /// and validation windows.
    pub train_f1: f64,
    pub val_f1: f64,
    pub curve: TrainCurve,
    /// Mean distance of inferred labels to truth (synthetic mode only).
    pub mean_label_dist: Option<f64>,
}

/// Full EM run record.
#[derive(Debug, Clone, Default)]
pub struct EmHistory {
    pub iterations: Vec<EmIteration>,
}

pub(crate) fn subseed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Geometric mean of the predicted stream probability over the candidate's
/// buffered raster pixels (per-pixel probabilities clamped to
/// `[1e-6, 1 - 1e-6]` before the log). A value in (0, 1); errors if the
/// candidate rasterizes to no pixel inside the map.
pub fn candidate_likelihood(
    map: &ProbMap,
    candidate: &Polyline,
    buffer: f64,
    resolution: f64,
) -> Result<f64> {
    candidate_likelihood_clipped(map, candidate, buffer, resolution)?.ok_or_else(|| {
        Error::domain("candidate rasterizes to no pixel inside the map".to_string())
    })
}

/// Like [`candidate_likelihood`], but reports a candidate without any pixel
/// support inside the map as `None` instead of an error. The EM loop treats
/// such candidates as impossible placements (zero likelihood).
fn candidate_likelihood_clipped(
    map: &ProbMap,
    candidate: &Polyline,
    buffer: f64,
    resolution: f64,
) -> Result<Option<f64>> {
    let r_px = buffer / resolution;
    let (h, w) = (map.height(), map.width());
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for v in candidate.vertices() {
        min_x = min_x.min(v.x);
        max_x = max_x.max(v.x);
        min_y = min_y.min(v.y);
        max_y = max_y.max(v.y);
    }
    if max_x + r_px < 0.0 || max_y + r_px < 0.0 || min_x - r_px > w as f64 || min_y - r_px > h as f64
    {
        return Ok(None);
    }
    let col0 = ((min_x - r_px - 1.0).floor().max(0.0)) as usize;
    let row0 = ((min_y - r_px - 1.0).floor().max(0.0)) as usize;
    let col1 = (((max_x + r_px + 1.0).ceil()).min(w as f64).max(0.0)) as usize;
    let row1 = (((max_y + r_px + 1.0).ceil()).min(h as f64).max(0.0)) as usize;
    if col0 >= col1 || row0 >= row1 {
        return Ok(None);
    }
    let local = candidate.translate(-(col0 as f64), -(row0 as f64));
    let raster = rasterize_buffer(&[local], buffer, row1 - row0, col1 - col0, resolution)?;
    let mut log_sum = 0.0;
    let mut count = 0usize;
    for r in 0..raster.height() {
        for c in 0..raster.width() {
            if raster.get(r, c) == 1 {
                let p = map
                    .get(row0 + r, col0 + c)
                    .clamp(LIKELIHOOD_CLAMP, 1.0 - LIKELIHOOD_CLAMP);
                log_sum += p.ln();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(None);
    }
    Ok(Some((log_sum / count as f64).exp()))
}

/// Bayes update of one chunk: `posterior_i = prior_i * like_i / sum_j ...`.
pub fn candidate_posterior(likelihoods: &[f64], priors: &[f64]) -> Result<Vec<f64>> {
    if likelihoods.is_empty() || likelihoods.len() != priors.len() {
        return Err(Error::domain(format!(
            "likelihoods ({}) and priors ({}) must have equal non-zero length",
            likelihoods.len(),
            priors.len()
        )));
    }
    let prior_sum: f64 = priors.iter().sum();
    if (prior_sum - 1.0).abs() > 1e-6 {
        return Err(Error::domain(format!(
            "priors must sum to 1, got {prior_sum}"
        )));
    }
    if let Some(bad) = likelihoods.iter().find(|l| !l.is_finite() || **l < 0.0) {
        return Err(Error::domain(format!("invalid likelihood {bad}")));
    }
    let products: Vec<f64> = likelihoods
        .iter()
        .zip(priors)
        .map(|(l, p)| l * p)
        .collect();
    let total: f64 = products.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate(
            "all prior-likelihood products are zero".to_string(),
        ));
    }
    Ok(products.into_iter().map(|p| p / total).collect())
}

/// Builds the posterior table for all chunks from the current prediction
/// map; candidate likelihoods are computed on parallel workers.
pub fn posterior_table(
    map: &ProbMap,
    sets: &[CandidateSet],
    buffer: f64,
    resolution: f64,
) -> Result<PosteriorTable> {
    let rows = sets
        .par_iter()
        .map(|set| {
            let likelihoods = set
                .candidates
                .iter()
                .map(|c| {
                    // Candidates without pixel support are impossible labels.
                    Ok(candidate_likelihood_clipped(map, c, buffer, resolution)?.unwrap_or(0.0))
                })
                .collect::<Result<Vec<_>>>()?;
            let posteriors = candidate_posterior(&likelihoods, &set.priors)?;
            Ok(PosteriorRow {
                chunk_id: set.chunk_id,
                offsets: set.offsets.clone(),
                priors: set.priors.clone(),
                likelihoods,
                posteriors,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorTable { rows })
}

fn argmax_candidate(row: &PosteriorRow) -> usize {
    let max = row
        .posteriors
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let tol = max.abs() * 1e-12;
    let mut best = 0;
    let mut best_key = (f64::INFINITY, f64::INFINITY);
    for (i, &p) in row.posteriors.iter().enumerate() {
        if (max - p) <= tol {
            // Ties break toward smaller |offset|, then the negative offset.
            let key = (row.offsets[i].abs(), row.offsets[i]);
            if key < best_key {
                best_key = key;
                best = i;
            }
        }
    }
    best
}

/// Selects one candidate per chunk: the posterior argmax with probability
/// `1 - epsilon`, otherwise uniform among the top-K candidates by posterior.
/// With `epsilon = 0` the selection is a pure function of the table and the
/// rng is never touched; otherwise one seed is drawn and split per chunk by
/// index, so parallel evaluation stays reproducible.
pub fn select_labels(
    table: &PosteriorTable,
    cfg: &EmConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if table.rows.is_empty() {
        return Ok(Vec::new());
    }
    cfg.validate(table.rows[0].posteriors.len())?;
    if cfg.epsilon == 0.0 {
        return Ok(table.rows.iter().map(argmax_candidate).collect());
    }
    let base: u64 = rng.gen();
    Ok(table
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut chunk_rng = ChaCha8Rng::seed_from_u64(subseed(base, i as u64));
            if chunk_rng.gen::<f64>() < cfg.epsilon {
                let mut order: Vec<usize> = (0..row.posteriors.len()).collect();
                order.sort_by(|&a, &b| {
                    row.posteriors[b]
                        .partial_cmp(&row.posteriors[a])
                        .expect("finite posteriors")
                        .then(
                            row.offsets[a]
                                .abs()
                                .partial_cmp(&row.offsets[b].abs())
                                .expect("finite offsets"),
                        )
                        .then(
                            row.offsets[a]
                                .partial_cmp(&row.offsets[b])
                                .expect("finite offsets"),
                        )
                });
                let k = cfg.top_k.min(order.len());
                order[chunk_rng.gen_range(0..k)]
            } else {
                argmax_candidate(row)
            }
        })
        .collect())
}

/// Integer pixel rectangle, used for the local windows of the decomposed
/// expected loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl PixelRect {
    fn intersects(&self, other: &PixelRect) -> bool {
        self.row0 < other.row1
            && other.row0 < self.row1
            && self.col0 < other.col1
            && other.col0 < self.col1
    }
}

/// Local window of one chunk: the union of its candidates' buffered
/// bounding boxes, clipped to the grid.
pub fn chunk_window(
    set: &CandidateSet,
    buffer: f64,
    resolution: f64,
    height: usize,
    width: usize,
) -> Result<PixelRect> {
    let r_px = buffer / resolution;
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for cand in &set.candidates {
        for v in cand.vertices() {
            min_x = min_x.min(v.x);
            max_x = max_x.max(v.x);
            min_y = min_y.min(v.y);
            max_y = max_y.max(v.y);
        }
    }
    let rect = PixelRect {
        row0: ((min_y - r_px - 1.0).floor().max(0.0)) as usize,
        col0: ((min_x - r_px - 1.0).floor().max(0.0)) as usize,
        row1: ((max_y + r_px + 1.0).ceil()).min(height as f64) as usize,
        col1: ((max_x + r_px + 1.0).ceil()).min(width as f64) as usize,
    };
    if rect.row0 >= rect.row1 || rect.col0 >= rect.col1 {
        return Err(Error::domain(format!(
            "chunk {} candidates lie entirely outside the grid",
            set.chunk_id
        )));
    }
    Ok(rect)
}

fn rasterize_into_rect(
    candidate: &Polyline,
    rect: &PixelRect,
    buffer: f64,
    resolution: f64,
) -> Result<LabelGrid> {
    let local = candidate.translate(-(rect.col0 as f64), -(rect.row0 as f64));
    rasterize_buffer(
        &[local],
        buffer,
        rect.row1 - rect.row0,
        rect.col1 - rect.col0,
        resolution,
    )
}

/// Posterior-weighted expected negative dice, decomposed over chunks:
/// `sum_c sum_i posterior_ci * negdice(pred | window_c, raster(candidate_ci))`.
/// Requires the chunk windows to be pairwise disjoint; equals full joint
/// enumeration under that precondition.
pub fn expected_loss(
    table: &PosteriorTable,
    sets: &[CandidateSet],
    model: &SegModel,
    x: &FeatureGrid,
    buffer: f64,
    resolution: f64,
) -> Result<f64> {
    if table.rows.len() != sets.len() {
        return Err(Error::domain(format!(
            "table has {} rows but {} candidate sets were given",
            table.rows.len(),
            sets.len()
        )));
    }
    let rects = sets
        .iter()
        .map(|s| chunk_window(s, buffer, resolution, x.height(), x.width()))
        .collect::<Result<Vec<_>>>()?;
    let mut offending = Vec::new();
    for i in 0..rects.len() {
        for j in i + 1..rects.len() {
            if rects[i].intersects(&rects[j]) {
                offending.push((sets[i].chunk_id, sets[j].chunk_id));
            }
        }
    }
    if !offending.is_empty() {
        return Err(Error::OverlappingChunks(offending));
    }
    let map = model.predict(x)?;
    let mut total = 0.0;
    for (row, (set, rect)) in table.rows.iter().zip(sets.iter().zip(&rects)) {
        let map_ref = &map;
        let pred: Vec<f64> = (rect.row0..rect.row1)
            .flat_map(|r| (rect.col0..rect.col1).map(move |c| map_ref.get(r, c)))
            .collect();
        for (i, candidate) in set.candidates.iter().enumerate() {
            let raster = rasterize_into_rect(candidate, rect, buffer, resolution)?;
            let dice = crate::model::dice_from_slices(&pred, raster.values());
            total += row.posteriors[i] * (-dice);
        }
    }
    Ok(total)
}

fn window_samples(
    features: &FeatureGrid,
    raster: &LabelGrid,
    windows: &[Window],
) -> Result<Vec<Sample>> {
    let mut samples = Vec::with_capacity(windows.len() * 4);
    for w in windows {
        for (f, l) in augment_window(&w.features(features), &w.labels(raster))? {
            samples.push(Sample::new(f, l));
        }
    }
    Ok(samples)
}

/// Expands a chunk rect to a square whose side is a multiple of the model's
/// dimension requirement, shifted to stay inside the grid.
fn training_rect(rect: &PixelRect, multiple: usize, height: usize, width: usize) -> PixelRect {
    let h = rect.row1 - rect.row0;
    let w = rect.col1 - rect.col0;
    let side = h.max(w).div_ceil(multiple) * multiple;
    let side = side.min(height - height % multiple).min(width - width % multiple);
    let row0 = rect.row0.min(height - side);
    let col0 = rect.col0.min(width - side);
    PixelRect {
        row0,
        col0,
        row1: row0 + side,
        col1: col0 + side,
    }
}

/// Training samples for the expected-loss M-step: for every chunk, one
/// sample per candidate over the chunk's standardized window, weighted by
/// the candidate's posterior.
fn expected_loss_samples(
    features: &FeatureGrid,
    table: &PosteriorTable,
    sets: &[CandidateSet],
    params: &EmParams,
) -> Result<Vec<Sample>> {
    let multiple = params.model_spec.dim_multiple();
    let mut samples = Vec::new();
    for (row, set) in table.rows.iter().zip(sets) {
        let rect = chunk_window(
            set,
            params.buffer,
            params.resolution,
            features.height(),
            features.width(),
        )?;
        let rect = training_rect(&rect, multiple, features.height(), features.width());
        let window = Window {
            row: rect.row0,
            col: rect.col0,
            size: rect.row1 - rect.row0,
        };
        let f = window.features(features);
        for (i, candidate) in set.candidates.iter().enumerate() {
            if row.posteriors[i] <= 1e-12 {
                continue;
            }
            let raster = rasterize_into_rect(candidate, &rect, params.buffer, params.resolution)?;
            let mut sample = Sample::new(f.clone(), raster);
            sample.weight = row.posteriors[i];
            samples.push(sample);
        }
    }
    Ok(samples)
}

/// Samples the train/validation window split. Windows depend only on the
/// grid dims, region, and seed, so every stage of a run (and separate
/// processes working on the same scene) derive identical windows.
pub fn plan_windows(
    features: &FeatureGrid,
    params: &EmParams,
    seed: u64,
) -> Result<(Vec<Window>, Vec<Window>)> {
    let dims_only = LabelGrid::zeros(features.height(), features.width())?;
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, 1));
    let mut windows = extract_windows(
        features,
        &dims_only,
        params.window_size,
        params.n_train_windows + params.n_val_windows,
        params.train_region,
        &mut rng,
    )?;
    let val = windows.split_off(params.n_train_windows);
    Ok((windows, val))
}

/// Samples held-out test windows from the sweep context's test region.
pub fn plan_test_windows(
    scene: &EmScene,
    params: &EmParams,
    ctx: &crate::eval::SweepContext,
    seed: u64,
) -> Result<Vec<Window>> {
    let dims_only = LabelGrid::zeros(scene.features.height(), scene.features.width())?;
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, 2));
    extract_windows(
        scene.features,
        &dims_only,
        params.window_size,
        ctx.n_test_windows,
        ctx.test_region,
        &mut rng,
    )
}

/// Pre-trains a freshly initialized model on the rasterized noisy labels.
pub fn pretrain(scene: &EmScene, params: &EmParams, seed: u64) -> Result<(SegModel, TrainCurve)> {
    let noisy_raster = rasterize_buffer(
        scene.noisy,
        params.buffer,
        scene.features.height(),
        scene.features.width(),
        params.resolution,
    )?;
    let (train_windows, val_windows) = plan_windows(scene.features, params, seed)?;
    let train_set = window_samples(scene.features, &noisy_raster, &train_windows)?;
    let val_set = window_samples(scene.features, &noisy_raster, &val_windows)?;
    let model = SegModel::init(params.model_spec.clone(), subseed(seed, 10));
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, 11));
    train(model, &train_set, &val_set, &params.schedule, &mut rng)
}

/// Runs the full loop: pre-train on noisy labels, then iterate E/M steps.
pub fn em_run(scene: &EmScene, params: &EmParams, seed: u64) -> Result<(SegModel, EmHistory)> {
    let (model, _curve) = pretrain(scene, params, seed)?;
    em_run_from(model, scene, params, seed)
}

/// Runs the EM iterations starting from an already pre-trained model.
pub fn em_run_from(
    pretrained: SegModel,
    scene: &EmScene,
    params: &EmParams,
    seed: u64,
) -> Result<(SegModel, EmHistory)> {
    em_run_with(pretrained, scene, params, seed, |_| Ok(()))
}

/// Like [`em_run_from`], invoking `on_iteration` after each completed
/// iteration so callers can flush partial artifacts.
pub fn em_run_with(
    pretrained: SegModel,
    scene: &EmScene,
    params: &EmParams,
    seed: u64,
    mut on_iteration: impl FnMut(&EmIteration) -> Result<()>,
) -> Result<(SegModel, EmHistory)> {
    params.config.validate(params.n_candidates())?;
    params.schedule.validate()?;
    let (h, w) = (scene.features.height(), scene.features.width());

    let chunks = chunk_lines(scene.noisy, params.chunk_len)?;
    let sets = chunks
        .iter()
        .map(|c| generate_candidates(c, params.n_side, params.step, &params.error_model))
        .collect::<Result<Vec<_>>>()?;
    if sets.is_empty() {
        return Err(Error::domain("no chunks to infer".to_string()));
    }

    let (train_windows, val_windows) = plan_windows(scene.features, params, seed)?;

    let mut model = pretrained;
    let mut history = EmHistory::default();
    let mut prev_greedy: Option<Vec<usize>> = None;
    let greedy_cfg = EmConfig {
        epsilon: 0.0,
        ..params.config.clone()
    };
    let mut unused_rng = ChaCha8Rng::seed_from_u64(0);

    for t in 1..=params.config.max_iterations {
        let map = model.predict(scene.features)?;
        let table = posterior_table(&map, &sets, params.buffer, params.resolution)
            .map_err(|e| Error::domain(format!("iteration {t}: {e}")))?;

        // Stop when the greedy selection is stable between iterations.
        let greedy = select_labels(&table, &greedy_cfg, &mut unused_rng)?;
        if prev_greedy.as_ref() == Some(&greedy) {
            break;
        }
        prev_greedy = Some(greedy);

        let mut select_rng = ChaCha8Rng::seed_from_u64(subseed(seed, 100 + t as u64));
        let selected = select_labels(&table, &params.config, &mut select_rng)?;
        let inferred: Vec<Polyline> = selected
            .iter()
            .zip(&sets)
            .map(|(&i, set)| set.candidates[i].clone())
            .collect();
        let inferred_raster =
            rasterize_buffer(&inferred, params.buffer, h, w, params.resolution)?;

        let fresh = if params.config.retrain_from_scratch {
            SegModel::init(params.model_spec.clone(), subseed(seed, 200 + t as u64))
        } else {
            model.clone()
        };
        let train_set = if params.config.use_expected_loss {
            expected_loss_samples(scene.features, &table, &sets, params)?
        } else {
            window_samples(scene.features, &inferred_raster, &train_windows)?
        };
        let val_set = window_samples(scene.features, &inferred_raster, &val_windows)?;
        let mut train_rng = ChaCha8Rng::seed_from_u64(subseed(seed, 300 + t as u64));
        let (retrained, curve) = train(fresh, &train_set, &val_set, &params.schedule, &mut train_rng)
            .map_err(|e| Error::domain(format!("iteration {t}: {e}")))?;

        let train_conf =
            windows_confusion(&retrained, scene.features, &inferred_raster, &train_windows)?;
        let val_conf =
            windows_confusion(&retrained, scene.features, &inferred_raster, &val_windows)?;
        let mean_label_dist = match scene.truth {
            Some(truth) => Some(mean_label_distance(&inferred, truth)?),
            None => None,
        };

        let selected_offsets = selected
            .iter()
            .zip(&table.rows)
            .map(|(&i, row)| row.offsets[i])
            .collect();
        let iteration = EmIteration {
            iteration: t,
            chunk_ids: table.rows.iter().map(|r| r.chunk_id).collect(),
            selected,
            selected_offsets,
            inferred,
            train_f1: prf(&train_conf).f1,
            val_f1: prf(&val_conf).f1,
            curve,
            mean_label_dist,
        };
        on_iteration(&iteration)?;
        history.iterations.push(iteration);
        model = retrained;
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{chunk_polyline, Point};
    use approx::assert_relative_eq;

    fn line(coords: &[(f64, f64)]) -> Polyline {
        Polyline::new(
            coords
                .iter()
                .map(|&(x, y)| Point { x, y })
                .collect::<Vec<_>>(),
        )
        .unwrap()
    }

    fn uniform_model(rho_max: f64) -> PolarErrorModel {
        PolarErrorModel::new(1.0, std::f64::consts::FRAC_PI_4, rho_max).unwrap()
    }

    #[test]
    fn likelihood_on_constant_map_is_the_constant() {
        let map = ProbMap::constant(32, 32, 0.5).unwrap();
        let chunk = &chunk_polyline(&line(&[(8.0, 16.0), (24.0, 16.0)]), 20.0).unwrap()[0];
        let set = generate_candidates(chunk, 3, 1.0, &uniform_model(9.0)).unwrap();
        for cand in &set.candidates {
            let l = candidate_likelihood(&map, cand, 2.0, 1.0).unwrap();
            assert_relative_eq!(l, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn likelihood_separates_high_from_low_probability_bands() {
        // p = 0.9 on rows 0..16, p = 0.1 on rows 16..32.
        let mut values = vec![0.1; 32 * 32];
        for r in 0..16 {
            for c in 0..32 {
                values[r * 32 + c] = 0.9;
            }
        }
        let map = ProbMap::from_values(32, 32, values).unwrap();
        let cand_high = line(&[(6.0, 8.0), (26.0, 8.0)]);
        let cand_low = line(&[(6.0, 24.0), (26.0, 24.0)]);
        assert_relative_eq!(
            candidate_likelihood(&map, &cand_high, 2.0, 1.0).unwrap(),
            0.9,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            candidate_likelihood(&map, &cand_low, 2.0, 1.0).unwrap(),
            0.1,
            epsilon = 1e-12
        );
    }

    #[test]
    fn likelihood_of_single_pixel_raster_is_that_pixel() {
        let mut values = vec![0.2; 16 * 16];
        values[5 * 16 + 5] = 0.7;
        let map = ProbMap::from_values(16, 16, values).unwrap();
        // A tiny segment inside pixel (5,5) with a sub-pixel buffer touches
        // exactly that pixel center.
        let cand = line(&[(5.45, 5.5), (5.55, 5.5)]);
        let l = candidate_likelihood(&map, &cand, 0.1, 1.0).unwrap();
        assert_relative_eq!(l, 0.7, epsilon = 1e-12);
    }

    #[test]
    fn likelihood_rejects_candidate_outside_grid() {
        let map = ProbMap::constant(16, 16, 0.5).unwrap();
        let cand = line(&[(100.0, 100.0), (120.0, 100.0)]);
        assert!(candidate_likelihood(&map, &cand, 2.0, 1.0).is_err());
    }

    #[test]
    fn posterior_symmetry_and_bayes_arithmetic() {
        let n = 5;
        let uniform = vec![1.0 / n as f64; n];
        let equal_likes = vec![0.4; n];
        let post = candidate_posterior(&equal_likes, &uniform).unwrap();
        for p in &post {
            assert_relative_eq!(*p, 1.0 / n as f64, epsilon = 1e-12);
        }

        let post = candidate_posterior(&[0.8, 0.2], &[0.5, 0.5]).unwrap();
        assert_relative_eq!(post[0], 0.8, epsilon = 1e-12);
        assert_relative_eq!(post[1], 0.2, epsilon = 1e-12);

        let post = candidate_posterior(&[0.1, 0.9], &[0.9, 0.1]).unwrap();
        assert_relative_eq!(post[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(post[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn posterior_scale_invariance_and_degeneracy() {
        let priors = [0.25, 0.25, 0.5];
        let likes = [0.3, 0.5, 0.2];
        let a = candidate_posterior(&likes, &priors).unwrap();
        let scaled: Vec<f64> = likes.iter().map(|l| l * 37.5).collect();
        let b = candidate_posterior(&scaled, &priors).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
        let sum: f64 = a.iter().sum();
        assert_relative_eq!(sum, 1.0, epsilon = 1e-12);

        assert!(matches!(
            candidate_posterior(&[0.0, 0.0], &[0.5, 0.5]),
            Err(Error::Degenerate(_))
        ));
        assert!(candidate_posterior(&[0.5], &[0.7]).is_err());
    }

    fn toy_table(posteriors: Vec<Vec<f64>>) -> PosteriorTable {
        PosteriorTable {
            rows: posteriors
                .into_iter()
                .enumerate()
                .map(|(i, post)| {
                    let n = post.len();
                    let offsets: Vec<f64> =
                        (0..n).map(|k| k as f64 - (n as f64 - 1.0) / 2.0).collect();
                    PosteriorRow {
                        chunk_id: i,
                        offsets,
                        priors: vec![1.0 / n as f64; n],
                        likelihoods: post.clone(),
                        posteriors: post,
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn select_greedy_takes_argmax_and_skips_rng() {
        let table = toy_table(vec![
            vec![0.1, 0.2, 0.4, 0.2, 0.1],
            vec![0.5, 0.2, 0.1, 0.1, 0.1],
        ]);
        let cfg = EmConfig {
            epsilon: 0.0,
            top_k: 5,
            ..EmConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut untouched = rng.clone();
        let sel = select_labels(&table, &cfg, &mut rng).unwrap();
        assert_eq!(sel, vec![2, 0]);
        assert_eq!(rng.gen::<u64>(), untouched.gen::<u64>());
    }

    #[test]
    fn select_ties_break_toward_small_then_negative_offset() {
        // Uniform posterior: candidate at offset 0 wins.
        let table = toy_table(vec![vec![0.2; 5]]);
        let cfg = EmConfig {
            epsilon: 0.0,
            ..EmConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sel = select_labels(&table, &cfg, &mut rng).unwrap();
        assert_eq!(table.rows[0].offsets[sel[0]], 0.0);

        // Two-way tie off-center: the negative offset wins.
        let table = toy_table(vec![vec![0.1, 0.3, 0.2, 0.3, 0.1]]);
        let sel = select_labels(&table, &cfg, &mut rng).unwrap();
        assert_eq!(table.rows[0].offsets[sel[0]], -1.0);
    }

    #[test]
    fn select_exploration_is_uniform_over_top_k() {
        let table = toy_table(vec![vec![0.05, 0.1, 0.3, 0.25, 0.2, 0.06, 0.04]]);
        let cfg = EmConfig {
            epsilon: 1.0,
            top_k: 5,
            ..EmConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut counts = vec![0usize; 7];
        let draws = 20_000;
        for _ in 0..draws {
            let sel = select_labels(&table, &cfg, &mut rng).unwrap();
            counts[sel[0]] += 1;
        }
        // Top-5 by posterior excludes indices 0 and 6.
        assert_eq!(counts[0], 0);
        assert_eq!(counts[6], 0);
        for i in 1..=5 {
            let freq = counts[i] as f64 / draws as f64;
            assert!((freq - 0.2).abs() < 0.02, "index {i} freq {freq}");
        }
    }

    #[test]
    fn select_is_deterministic_per_seed() {
        let table = toy_table(vec![vec![0.2; 5]; 8]);
        let cfg = EmConfig {
            epsilon: 0.5,
            top_k: 3,
            ..EmConfig::default()
        };
        let a = select_labels(&table, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = select_labels(&table, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn select_rejects_bad_config() {
        let table = toy_table(vec![vec![0.2; 5]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad_k = EmConfig {
            top_k: 6,
            ..EmConfig::default()
        };
        assert!(select_labels(&table, &bad_k, &mut rng).is_err());
        let bad_eps = EmConfig {
            epsilon: 1.5,
            ..EmConfig::default()
        };
        assert!(select_labels(&table, &bad_eps, &mut rng).is_err());
    }

    /// Brute-force joint enumeration of the expected loss over all candidate
    /// configurations, using the same per-chunk windows.
    fn expected_loss_bruteforce(
        table: &PosteriorTable,
        sets: &[CandidateSet],
        model: &SegModel,
        x: &FeatureGrid,
        buffer: f64,
        resolution: f64,
    ) -> f64 {
        let map = model.predict(x).unwrap();
        let rects: Vec<PixelRect> = sets
            .iter()
            .map(|s| chunk_window(s, buffer, resolution, x.height(), x.width()).unwrap())
            .collect();
        let preds: Vec<Vec<f64>> = rects
            .iter()
            .map(|rect| {
                (rect.row0..rect.row1)
                    .flat_map(|r| (rect.col0..rect.col1).map(|c| map.get(r, c)).collect::<Vec<_>>())
                    .collect()
            })
            .collect();
        let counts: Vec<usize> = sets.iter().map(|s| s.candidates.len()).collect();
        let mut total = 0.0;
        let mut config = vec![0usize; sets.len()];
        loop {
            let mut weight = 1.0;
            let mut loss = 0.0;
            for (c, &i) in config.iter().enumerate() {
                weight *= table.rows[c].posteriors[i];
                let raster =
                    rasterize_into_rect(&sets[c].candidates[i], &rects[c], buffer, resolution)
                        .unwrap();
                loss += -crate::model::dice_from_slices(&preds[c], raster.values());
            }
            total += weight * loss;
            // Next configuration in mixed radix.
            let mut k = 0;
            loop {
                config[k] += 1;
                if config[k] < counts[k] {
                    break;
                }
                config[k] = 0;
                k += 1;
                if k == config.len() {
                    return total;
                }
            }
        }
    }

    fn toy_scene_for_loss() -> (FeatureGrid, Vec<CandidateSet>, SegModel) {
        let mut features = FeatureGrid::zeros(32, 32, 1, 1.0).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                features.set(r, c, 0, ((r * 13 + c * 7) % 17) as f64 / 17.0 - 0.5);
            }
        }
        // Two well-separated horizontal chunks.
        let la = &chunk_polyline(&line(&[(4.0, 6.0), (14.0, 6.0)]), 20.0).unwrap()[0];
        let lb = &chunk_polyline(&line(&[(18.0, 24.0), (28.0, 24.0)]), 20.0).unwrap()[0];
        let model = uniform_model(9.0);
        let sets = vec![
            generate_candidates(la, 1, 1.0, &model).unwrap(),
            generate_candidates(lb, 1, 1.0, &model).unwrap(),
        ];
        let seg = SegModel::init(ModelSpec::linear(1), 31);
        (features, sets, seg)
    }

    #[test]
    fn expected_loss_degenerate_mixture_is_plain_loss() {
        let (features, sets, seg) = toy_scene_for_loss();
        let one = vec![sets[0].clone()];
        let table = PosteriorTable {
            rows: vec![PosteriorRow {
                chunk_id: 0,
                offsets: vec![0.0],
                priors: vec![1.0],
                likelihoods: vec![1.0],
                posteriors: vec![1.0],
            }],
        };
        let mut single = one.clone();
        single[0].candidates = vec![single[0].candidates[1].clone()];
        single[0].offsets = vec![0.0];
        single[0].priors = vec![1.0];
        let by_formula = expected_loss(&table, &single, &seg, &features, 1.0, 1.0).unwrap();
        let brute = expected_loss_bruteforce(&table, &single, &seg, &features, 1.0, 1.0);
        assert_relative_eq!(by_formula, brute, epsilon = 1e-12);
    }

    #[test]
    fn expected_loss_matches_bruteforce_enumeration() {
        let (features, sets, seg) = toy_scene_for_loss();
        let table = PosteriorTable {
            rows: vec![
                PosteriorRow {
                    chunk_id: 0,
                    offsets: sets[0].offsets.clone(),
                    priors: sets[0].priors.clone(),
                    likelihoods: vec![0.4, 0.5, 0.1],
                    posteriors: vec![0.4, 0.5, 0.1],
                },
                PosteriorRow {
                    chunk_id: 1,
                    offsets: sets[1].offsets.clone(),
                    priors: sets[1].priors.clone(),
                    likelihoods: vec![0.2, 0.3, 0.5],
                    posteriors: vec![0.2, 0.3, 0.5],
                },
            ],
        };
        let fast = expected_loss(&table, &sets, &seg, &features, 1.0, 1.0).unwrap();
        let brute = expected_loss_bruteforce(&table, &sets, &seg, &features, 1.0, 1.0);
        assert_relative_eq!(fast, brute, epsilon = 1e-9);
    }

    #[test]
    fn expected_loss_point_mass_equals_selected_configuration() {
        let (features, sets, seg) = toy_scene_for_loss();
        let table = PosteriorTable {
            rows: vec![
                PosteriorRow {
                    chunk_id: 0,
                    offsets: sets[0].offsets.clone(),
                    priors: sets[0].priors.clone(),
                    likelihoods: vec![1.0, 0.0, 0.0],
                    posteriors: vec![1.0, 0.0, 0.0],
                },
                PosteriorRow {
                    chunk_id: 1,
                    offsets: sets[1].offsets.clone(),
                    priors: sets[1].priors.clone(),
                    likelihoods: vec![0.0, 0.0, 1.0],
                    posteriors: vec![0.0, 0.0, 1.0],
                },
            ],
        };
        let fast = expected_loss(&table, &sets, &seg, &features, 1.0, 1.0).unwrap();
        let brute = expected_loss_bruteforce(&table, &sets, &seg, &features, 1.0, 1.0);
        assert_relative_eq!(fast, brute, epsilon = 1e-12);
    }

    #[test]
    fn expected_loss_rejects_overlapping_chunks() {
        let (features, _, seg) = toy_scene_for_loss();
        let la = &chunk_polyline(&line(&[(4.0, 6.0), (14.0, 6.0)]), 20.0).unwrap()[0];
        let lb = &chunk_polyline(&line(&[(6.0, 8.0), (16.0, 8.0)]), 20.0).unwrap()[0];
        let model = uniform_model(9.0);
        let sets = vec![
            generate_candidates(la, 1, 1.0, &model).unwrap(),
            generate_candidates(lb, 1, 1.0, &model).unwrap(),
        ];
        let table = toy_table(vec![vec![1.0 / 3.0; 3]; 2]);
        let err = expected_loss(&table, &sets, &seg, &features, 2.0, 1.0).unwrap_err();
        match err {
            Error::OverlappingChunks(pairs) => assert!(!pairs.is_empty()),
            other => panic!("expected overlap error, got {other}"),
        }
    }
}
