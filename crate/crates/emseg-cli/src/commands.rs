//! Subcommand implementations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use emseg::em::{self, EmIteration, EmScene};
use emseg::error::{Error, Result};
use emseg::eval::{self, SweepContext};
use emseg::geom::Polyline;
use emseg::io as fio;
use emseg::model::SegModel;
use emseg::raster::{rasterize_buffer, FeatureGrid};
use emseg::synth;

use crate::config::RunConfig;

pub const FEATURES_FILE: &str = "features.grid1";
pub const TRUTH_FILE: &str = "truth.json";
pub const NOISY_FILE: &str = "noisy.json";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

struct SceneFiles {
    features: FeatureGrid,
    truth: Option<Vec<Polyline>>,
    noisy: Vec<Polyline>,
}

fn load_scene(dir: &Path, cfg: &RunConfig) -> Result<SceneFiles> {
    let features = fio::read_grid(&dir.join(FEATURES_FILE), cfg.resolution)?;
    let noisy = fio::read_polylines(&dir.join(NOISY_FILE))?.0;
    let truth_path = dir.join(TRUTH_FILE);
    let truth = if truth_path.exists() {
        Some(fio::read_polylines(&truth_path)?.0)
    } else {
        None
    };
    Ok(SceneFiles {
        features,
        truth,
        noisy,
    })
}

/// `synth`: generates the scene and writes features (GRID1) plus truth and
/// noisy polylines (JSON). The scene spec is echoed to stdout as key=value
/// text along with a summary.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    let spec = cfg.scene_spec();
    let scene = synth::generate_scene(&spec)?;
    fio::write_grid(&scene.features, &out_dir.join(FEATURES_FILE))?;
    fio::write_polylines(&scene.truth, cfg.resolution, &out_dir.join(TRUTH_FILE))?;
    fio::write_polylines(&scene.noisy, cfg.resolution, &out_dir.join(NOISY_FILE))?;
    let truth_len: f64 = scene.truth.iter().map(|l| l.arc_length()).sum();
    println!("scene written to {}", out_dir.display());
    println!(
        "  {} lines, total arc length {:.1} px, {} channels, {}x{} px",
        scene.truth.len(),
        truth_len,
        spec.channels(),
        spec.height,
        spec.width
    );
    println!("spec echo:");
    for line in spec.echo().lines() {
        println!("  {line}");
    }
    Ok(())
}

/// `pretrain`: trains a fresh model on the rasterized noisy labels and
/// writes the SEGM1 checkpoint plus the training-curve CSV.
pub fn cmd_pretrain(scene_dir: &Path, cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    let files = load_scene(scene_dir, cfg)?;
    let params = cfg.em_params()?;
    let scene = EmScene {
        features: &files.features,
        noisy: &files.noisy,
        truth: files.truth.as_deref(),
    };
    let (model, curve) = em::pretrain(&scene, &params, cfg.seed)?;
    fio::write_checkpoint(&model, &out_dir.join("pretrained.segm1"))?;
    fio::write_train_curve_csv(&curve, &out_dir.join("pretrain_curve.csv"))?;
    let best = curve.best_val_loss().unwrap_or(f64::NAN);
    println!(
        "pretrained on noisy labels: {} epochs, best validation dice {:.4}",
        curve.epochs.len(),
        -best
    );
    println!("checkpoint: {}", out_dir.join("pretrained.segm1").display());
    Ok(())
}

fn history_header() -> &'static str {
    "iteration,chunk_id,selected_offset,train_f1,val_f1,mean_label_dist"
}

fn append_history_rows(writer: &mut impl Write, it: &EmIteration, path: &Path) -> Result<()> {
    for (chunk_id, offset) in it.chunk_ids.iter().zip(&it.selected_offsets) {
        writeln!(
            writer,
            "{},{},{},{},{},{}",
            it.iteration,
            chunk_id,
            offset,
            it.train_f1,
            it.val_f1,
            it.mean_label_dist.map_or(String::new(), |d| d.to_string())
        )
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

/// `em`: runs the EM iterations from a pretrained checkpoint. History rows,
/// inferred-label JSON, and per-iteration curves are flushed after every
/// completed iteration.
pub fn cmd_em(
    scene_dir: &Path,
    pretrained: &Path,
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<()> {
    ensure_dir(out_dir)?;
    let files = load_scene(scene_dir, cfg)?;
    let params = cfg.em_params()?;
    let scene = EmScene {
        features: &files.features,
        noisy: &files.noisy,
        truth: files.truth.as_deref(),
    };
    let model = fio::read_checkpoint(pretrained)?;

    let history_path = out_dir.join("history.csv");
    let mut history_file = BufWriter::new(File::create(&history_path).map_err(|e| Error::Io {
        path: history_path.clone(),
        source: e,
    })?);
    writeln!(history_file, "{}", history_header()).map_err(|e| Error::Io {
        path: history_path.clone(),
        source: e,
    })?;
    history_file.flush().map_err(|e| Error::Io {
        path: history_path.clone(),
        source: e,
    })?;

    let resolution = cfg.resolution;
    let out = out_dir.to_path_buf();
    let hp = history_path.clone();
    let (final_model, history) = em::em_run_with(model, &scene, &params, cfg.seed, |it| {
        append_history_rows(&mut history_file, it, &hp)?;
        history_file.flush().map_err(|e| Error::Io {
            path: hp.clone(),
            source: e,
        })?;
        fio::write_polylines(
            &it.inferred,
            resolution,
            &out.join(format!("labels_iter_{}.json", it.iteration)),
        )?;
        fio::write_train_curve_csv(&it.curve, &out.join(format!("curve_iter_{}.csv", it.iteration)))?;
        println!(
            "iteration {}: train F1 {:.3}, val F1 {:.3}{}",
            it.iteration,
            it.train_f1,
            it.val_f1,
            it.mean_label_dist
                .map_or(String::new(), |d| format!(", label dist {d:.2} px")),
        );
        Ok(())
    })?;

    fio::write_checkpoint(&final_model, &out_dir.join("em_model.segm1"))?;
    if let (Some(truth), Some(last)) = (files.truth.as_deref(), history.iterations.last()) {
        let h = files.features.height();
        let w = files.features.width();
        let truth_raster = rasterize_buffer(truth, cfg.buffer, h, w, resolution)?;
        let noisy_raster = rasterize_buffer(&files.noisy, cfg.buffer, h, w, resolution)?;
        let inferred_raster = rasterize_buffer(&last.inferred, cfg.buffer, h, w, resolution)?;
        fio::write_overlay_pgm(
            &truth_raster,
            &noisy_raster,
            Some(&inferred_raster),
            &out_dir.join("overlay.pgm"),
        )?;
    }
    println!(
        "em finished after {} iterations; checkpoint: {}",
        history.iterations.len(),
        out_dir.join("em_model.segm1").display()
    );
    Ok(())
}

/// `eval`: scores one or more checkpoints on held-out test windows against
/// TRUE labels and writes a metrics CSV plus a full-grid prediction PGM per
/// model.
pub fn cmd_eval(
    scene_dir: &Path,
    model_paths: &[PathBuf],
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<()> {
    ensure_dir(out_dir)?;
    if cfg.test_windows == 0 {
        return Err(Error::Config(
            "test_windows must be >= 1 for eval".to_string(),
        ));
    }
    let files = load_scene(scene_dir, cfg)?;
    let truth = files.truth.as_deref().ok_or_else(|| {
        Error::Config(format!(
            "eval requires {TRUTH_FILE} in the scene directory"
        ))
    })?;
    let params = cfg.em_params()?;
    let scene = EmScene {
        features: &files.features,
        noisy: &files.noisy,
        truth: Some(truth),
    };
    let truth_raster = rasterize_buffer(
        truth,
        cfg.buffer,
        files.features.height(),
        files.features.width(),
        cfg.resolution,
    )?;
    let ctx = SweepContext {
        test_region: cfg.test_region(),
        n_test_windows: cfg.test_windows,
        truth_raster,
    };
    let windows = em::plan_test_windows(&scene, &params, &ctx, cfg.seed)?;

    let csv_path = out_dir.join("metrics.csv");
    let mut csv = BufWriter::new(File::create(&csv_path).map_err(|e| Error::Io {
        path: csv_path.clone(),
        source: e,
    })?);
    writeln!(csv, "model,tp,fp,fn,tn,precision,recall,f1").map_err(|e| Error::Io {
        path: csv_path.clone(),
        source: e,
    })?;
    for path in model_paths {
        let model: SegModel = fio::read_checkpoint(path)?;
        let conf = eval::windows_confusion(&model, &files.features, &ctx.truth_raster, &windows)?;
        let scores = eval::prf(&conf);
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        writeln!(
            csv,
            "{},{},{},{},{},{:.6},{:.6},{:.6}",
            name,
            conf.true_pos,
            conf.false_pos,
            conf.false_neg,
            conf.true_neg,
            scores.precision,
            scores.recall,
            scores.f1
        )
        .map_err(|e| Error::Io {
            path: csv_path.clone(),
            source: e,
        })?;
        let map = model.predict(&files.features)?;
        fio::write_pgm_probmap(&map, &out_dir.join(format!("prediction_{name}.pgm")))?;
        println!(
            "{name}: precision {:.3}, recall {:.3}, F1 {:.3} ({} test windows)",
            scores.precision,
            scores.recall,
            scores.f1,
            windows.len()
        );
    }
    csv.flush().map_err(|e| Error::Io {
        path: csv_path,
        source: e,
    })
}

/// `sweep`: pretrains once, then runs the EM loop for every epsilon x top-K
/// grid cell and writes one CSV row per setting.
pub fn cmd_sweep(scene_dir: &Path, cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    let files = load_scene(scene_dir, cfg)?;
    let truth = files.truth.as_deref().ok_or_else(|| {
        Error::Config(format!(
            "sweep requires {TRUTH_FILE} in the scene directory"
        ))
    })?;
    let params = cfg.em_params()?;
    let scene = EmScene {
        features: &files.features,
        noisy: &files.noisy,
        truth: Some(truth),
    };
    let truth_raster = rasterize_buffer(
        truth,
        cfg.buffer,
        files.features.height(),
        files.features.width(),
        cfg.resolution,
    )?;
    let ctx = SweepContext {
        test_region: cfg.test_region(),
        n_test_windows: cfg.test_windows,
        truth_raster,
    };
    println!(
        "sweeping {} settings ({} eps x {} k)",
        cfg.sweep_eps.len() * cfg.sweep_k.len(),
        cfg.sweep_eps.len(),
        cfg.sweep_k.len()
    );
    let (pretrained, _) = em::pretrain(&scene, &params, cfg.seed)?;
    let rows = eval::sensitivity_sweep(
        &pretrained,
        &scene,
        &params,
        &ctx,
        &cfg.sweep_eps,
        &cfg.sweep_k,
        cfg.seed,
    )?;
    let csv_path = out_dir.join("sweep.csv");
    eval::write_sweep_csv(&rows, &csv_path)?;
    for r in &rows {
        println!(
            "eps {:.3} k {:>2}: test F1 {:.3} ({} iterations)",
            r.epsilon, r.top_k, r.test_f1, r.iterations
        );
    }
    println!("sweep table: {}", csv_path.display());
    Ok(())
}
