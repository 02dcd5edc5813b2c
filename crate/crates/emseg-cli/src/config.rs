//! Run configuration: `key = value` lines with `#` comments. Unknown keys
//! are rejected and every value is range-checked against the module
//! invariants it feeds.

use std::collections::BTreeMap;
use std::path::Path;

use emseg::em::{EmConfig, EmParams};
use emseg::error::{Error, Result};
use emseg::geom::PolarErrorModel;
use emseg::model::{ModelSpec, TrainSchedule};
use emseg::raster::Region;
use emseg::synth::SceneSpec;

/// All tunables of a run, with the hyper-parameter defaults: 20 m chunks,
/// 2 m buffer at 1 m resolution, 19 perpendicular candidates at 1 px
/// spacing, epsilon 0.05 / top-K 5, and the standard training schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scene_height: usize,
    pub scene_width: usize,
    pub scene_lines: usize,
    pub scene_turn_std: f64,
    pub scene_amplitude: f64,
    pub scene_noise_std: f64,
    pub scene_distractors: usize,
    pub corruption_rho_max: f64,
    pub corruption_phi: f64,

    pub chunk_len: f64,
    pub buffer: f64,
    pub resolution: f64,
    pub delta_rho: f64,
    pub delta_theta: f64,
    pub rho_max: f64,
    pub n_side: usize,
    pub step: f64,

    pub epsilon: f64,
    pub top_k: usize,
    pub max_iterations: usize,
    pub retrain_from_scratch: bool,
    pub use_expected_loss: bool,

    pub initial_lr: f64,
    pub lr_halving_patience: usize,
    pub min_lr: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub dropout_rate: f64,

    /// Encoder/decoder stage widths. The desk-scale default keeps runs in
    /// the minutes range on a laptop CPU; set `16,32,64` for the reference
    /// width or `32,64,128,256,512,1024` for the full-scale preset.
    pub model_widths: Vec<usize>,
    pub window_size: usize,
    pub train_windows: usize,
    pub val_windows: usize,
    pub test_windows: usize,

    pub sweep_eps: Vec<f64>,
    pub sweep_k: Vec<usize>,

    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene_height: 256,
            scene_width: 256,
            scene_lines: 2,
            scene_turn_std: 0.12,
            scene_amplitude: 3.0,
            scene_noise_std: 1.0,
            scene_distractors: 2,
            corruption_rho_max: 6.0,
            corruption_phi: 0.7,
            chunk_len: 20.0,
            buffer: 2.0,
            resolution: 1.0,
            delta_rho: 1.0,
            delta_theta: std::f64::consts::FRAC_PI_4,
            rho_max: 9.0,
            n_side: 9,
            step: 1.0,
            epsilon: 0.05,
            top_k: 5,
            max_iterations: 8,
            retrain_from_scratch: true,
            use_expected_loss: false,
            initial_lr: 0.1,
            lr_halving_patience: 5,
            min_lr: 1e-5,
            early_stop_patience: 20,
            max_epochs: 50,
            batch_size: 16,
            dropout_rate: 0.2,
            model_widths: vec![4, 8, 16],
            window_size: 24,
            train_windows: 16,
            val_windows: 6,
            test_windows: 12,
            sweep_eps: vec![0.01, 0.05, 0.1, 0.2],
            sweep_k: vec![5, 19],
            seed: 17,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| parse_value::<T>(key, v))
        .collect()
}

impl RunConfig {
    /// Parses `key = value` text. Later lines override earlier ones; unknown
    /// keys are an error.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            seen.insert(key.to_string(), lineno + 1);
            match key {
                "scene_height" => cfg.scene_height = parse_value(key, value)?,
                "scene_width" => cfg.scene_width = parse_value(key, value)?,
                "scene_lines" => cfg.scene_lines = parse_value(key, value)?,
                "scene_turn_std" => cfg.scene_turn_std = parse_value(key, value)?,
                "scene_amplitude" => cfg.scene_amplitude = parse_value(key, value)?,
                "scene_noise_std" => cfg.scene_noise_std = parse_value(key, value)?,
                "scene_distractors" => cfg.scene_distractors = parse_value(key, value)?,
                "corruption_rho_max" => cfg.corruption_rho_max = parse_value(key, value)?,
                "corruption_phi" => cfg.corruption_phi = parse_value(key, value)?,
                "chunk_len" => cfg.chunk_len = parse_value(key, value)?,
                "buffer" => cfg.buffer = parse_value(key, value)?,
                "resolution" => cfg.resolution = parse_value(key, value)?,
                "delta_rho" => cfg.delta_rho = parse_value(key, value)?,
                "delta_theta" => cfg.delta_theta = parse_value(key, value)?,
                "rho_max" => cfg.rho_max = parse_value(key, value)?,
                "n_side" => cfg.n_side = parse_value(key, value)?,
                "step" => cfg.step = parse_value(key, value)?,
                "epsilon" => cfg.epsilon = parse_value(key, value)?,
                "top_k" => cfg.top_k = parse_value(key, value)?,
                "max_iterations" => cfg.max_iterations = parse_value(key, value)?,
                "retrain_from_scratch" => cfg.retrain_from_scratch = parse_value(key, value)?,
                "use_expected_loss" => cfg.use_expected_loss = parse_value(key, value)?,
                "initial_lr" => cfg.initial_lr = parse_value(key, value)?,
                "lr_halving_patience" => cfg.lr_halving_patience = parse_value(key, value)?,
                "min_lr" => cfg.min_lr = parse_value(key, value)?,
                "early_stop_patience" => cfg.early_stop_patience = parse_value(key, value)?,
                "max_epochs" => cfg.max_epochs = parse_value(key, value)?,
                "batch_size" => cfg.batch_size = parse_value(key, value)?,
                "dropout_rate" => cfg.dropout_rate = parse_value(key, value)?,
                "model_widths" => cfg.model_widths = parse_list(key, value)?,
                "window_size" => cfg.window_size = parse_value(key, value)?,
                "train_windows" => cfg.train_windows = parse_value(key, value)?,
                "val_windows" => cfg.val_windows = parse_value(key, value)?,
                "test_windows" => cfg.test_windows = parse_value(key, value)?,
                "sweep_eps" => cfg.sweep_eps = parse_list(key, value)?,
                "sweep_k" => cfg.sweep_k = parse_list(key, value)?,
                "seed" => cfg.seed = parse_value(key, value)?,
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Range checks, routed through the same constructors the modules use.
    pub fn validate(&self) -> Result<()> {
        self.scene_spec()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.error_model().map_err(|e| Error::Config(e.to_string()))?;
        self.schedule()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.em_config()
            .validate(2 * self.n_side + 1)
            .map_err(|e| Error::Config(e.to_string()))?;
        ModelSpec::new(1 + self.scene_distractors, self.model_widths.clone())
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(self.step > 0.0) {
            return Err(Error::Config(format!(
                "step must be > 0, got {}",
                self.step
            )));
        }
        if self.n_side as f64 * self.step > self.rho_max {
            return Err(Error::Config(format!(
                "n_side * step = {} exceeds rho_max {}",
                self.n_side as f64 * self.step,
                self.rho_max
            )));
        }
        if self.window_size == 0 || self.train_windows == 0 || self.val_windows == 0 {
            return Err(Error::Config(
                "window_size, train_windows, and val_windows must be >= 1".to_string(),
            ));
        }
        if self.sweep_eps.is_empty() || self.sweep_k.is_empty() {
            return Err(Error::Config("sweep grids must be non-empty".to_string()));
        }
        Ok(())
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            height: self.scene_height,
            width: self.scene_width,
            n_lines: self.scene_lines,
            turn_std: self.scene_turn_std,
            amplitude: self.scene_amplitude,
            noise_std: self.scene_noise_std,
            n_distractors: self.scene_distractors,
            buffer: self.buffer,
            corruption: PolarErrorModel::new(
                self.delta_rho,
                self.delta_theta,
                self.corruption_rho_max,
            )
            .unwrap_or_else(|_| PolarErrorModel::new(1.0, std::f64::consts::FRAC_PI_4, 0.0).unwrap()),
            phi: self.corruption_phi,
            chunk_len: self.chunk_len,
            seed: self.seed,
        }
    }

    pub fn error_model(&self) -> Result<PolarErrorModel> {
        PolarErrorModel::new(self.delta_rho, self.delta_theta, self.rho_max)
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            initial_lr: self.initial_lr,
            lr_halving_patience: self.lr_halving_patience,
            min_lr: self.min_lr,
            early_stop_patience: self.early_stop_patience,
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            dropout_rate: self.dropout_rate,
        }
    }

    pub fn em_config(&self) -> EmConfig {
        EmConfig {
            epsilon: self.epsilon,
            top_k: self.top_k,
            max_iterations: self.max_iterations,
            retrain_from_scratch: self.retrain_from_scratch,
            use_expected_loss: self.use_expected_loss,
        }
    }

    /// Train/validation windows come from the lower half of the scene; the
    /// upper half is held out for testing.
    pub fn train_region(&self) -> Region {
        Region {
            row0: self.scene_height / 2,
            col0: 0,
            height: self.scene_height - self.scene_height / 2,
            width: self.scene_width,
        }
    }

    pub fn test_region(&self) -> Region {
        Region {
            row0: 0,
            col0: 0,
            height: self.scene_height / 2,
            width: self.scene_width,
        }
    }

    pub fn em_params(&self) -> Result<EmParams> {
        Ok(EmParams {
            error_model: self.error_model()?,
            chunk_len: self.chunk_len,
            n_side: self.n_side,
            step: self.step,
            buffer: self.buffer,
            resolution: self.resolution,
            window_size: self.window_size,
            n_train_windows: self.train_windows,
            n_val_windows: self.val_windows,
            train_region: self.train_region(),
            model_spec: ModelSpec::new(1 + self.scene_distractors, self.model_widths.clone())?,
            schedule: self.schedule(),
            config: self.em_config(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn parse_overrides_and_comments() {
        let cfg = RunConfig::parse(
            "# comment\nseed = 99\nepsilon = 0.1  # trailing comment\nmodel_widths = 8,16\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.epsilon, 0.1);
        assert_eq!(cfg.model_widths, vec![8, 16]);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = RunConfig::parse("not_a_key = 3\n").unwrap_err();
        assert!(err.to_string().contains("not_a_key"), "{err}");
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        assert!(RunConfig::parse("epsilon = 1.5\n").is_err());
        assert!(RunConfig::parse("corruption_phi = 1.0\n").is_err());
        assert!(RunConfig::parse("scene_height = 32\n").is_err());
        assert!(RunConfig::parse("n_side = 12\n").is_err(), "exceeds rho_max");
        assert!(RunConfig::parse("batch_size = 0\n").is_err());
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(RunConfig::parse("seed 12\n").is_err());
        assert!(RunConfig::parse("seed = twelve\n").is_err());
    }
}
