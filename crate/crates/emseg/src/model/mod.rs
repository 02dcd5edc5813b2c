//! A pluggable differentiable pixel classifier with soft-dice loss and a
//! plateau learning-rate schedule.
//!
//! The reference architecture is a fully-convolutional encoder-decoder:
//! per stage one 3x3 convolution with batch normalization and ReLU, 2x2
//! max-pooling on the way down, nearest-neighbor upsampling plus skip
//! concatenation on the way up, and a 1x1 convolution with sigmoid head.
//! All math runs in f64; checkpoints store f32.

mod gradcheck;
mod net;
mod train;

pub use gradcheck::{gradient_check, GradCheckReport};
pub(crate) use train::dice_from_slices;
pub use train::{
    dice_coeff, train, EpochRecord, PlateauScheduler, SchedulerStep, TrainCurve, TrainSchedule,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::{FeatureGrid, LabelGrid};
use net::{Mode, NetDef, Tensor};

/// Architecture hyper-parameters: input channel count and per-stage channel
/// widths. `widths.len() - 1` is the number of 2x downsampling stages; an
/// empty list degenerates to a single 1x1 convolution with sigmoid (a linear
/// per-pixel classifier), which is useful for exact gradient tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub widths: Vec<usize>,
}

impl ModelSpec {
    pub fn new(in_channels: usize, widths: Vec<usize>) -> Result<Self> {
        if in_channels == 0 {
            return Err(Error::domain("in_channels must be >= 1".to_string()));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::domain("stage widths must be >= 1".to_string()));
        }
        Ok(ModelSpec {
            in_channels,
            widths,
        })
    }

    /// Reference configuration: two downsampling stages at widths 16/32/64.
    pub fn reference(in_channels: usize) -> Self {
        ModelSpec {
            in_channels,
            widths: vec![16, 32, 64],
        }
    }

    /// Width-reduced configuration (under 10^4 parameters for 3 input
    /// channels); the preset for desk-scale experiments and for exhaustive
    /// gradient verification.
    pub fn compact(in_channels: usize) -> Self {
        ModelSpec {
            in_channels,
            widths: vec![4, 8, 16],
        }
    }

    /// Single 1x1 convolution + sigmoid. A linear per-pixel classifier.
    pub fn linear(in_channels: usize) -> Self {
        ModelSpec {
            in_channels,
            widths: Vec::new(),
        }
    }

    /// Five-stage configuration echoing a full-size U-Net. Documented as a
    /// preset only; at tens of millions of parameters it is not practical on
    /// a desktop CPU and is not exercised by the test suites.
    pub fn full_scale(in_channels: usize) -> Self {
        ModelSpec {
            in_channels,
            widths: vec![32, 64, 128, 256, 512, 1024],
        }
    }

    /// Number of 2x downsampling stages.
    pub fn n_down(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    /// Input dimensions must be divisible by this factor.
    pub fn dim_multiple(&self) -> usize {
        1 << self.n_down()
    }

    /// Compact textual form used in checkpoint headers, e.g.
    /// `fcn:in=3:widths=4,8,16`.
    pub fn spec_string(&self) -> String {
        let widths = if self.widths.is_empty() {
            "none".to_string()
        } else {
            self.widths
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!("fcn:in={}:widths={}", self.in_channels, widths)
    }

    pub fn parse_spec_string(s: &str) -> Result<Self> {
        let err = || Error::domain(format!("malformed model spec string {s:?}"));
        let mut parts = s.split(':');
        if parts.next() != Some("fcn") {
            return Err(err());
        }
        let in_part = parts
            .next()
            .and_then(|p| p.strip_prefix("in="))
            .ok_or_else(err)?;
        let widths_part = parts
            .next()
            .and_then(|p| p.strip_prefix("widths="))
            .ok_or_else(err)?;
        if parts.next().is_some() {
            return Err(err());
        }
        let in_channels: usize = in_part.parse().map_err(|_| err())?;
        let widths = if widths_part == "none" {
            Vec::new()
        } else {
            widths_part
                .split(',')
                .map(|w| w.parse::<usize>().map_err(|_| err()))
                .collect::<Result<Vec<_>>>()?
        };
        ModelSpec::new(in_channels, widths)
    }
}

/// Per-pixel stream probabilities in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ProbMap {
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::domain(format!(
                "expected {} probabilities for {height}x{width}, got {}",
                height * width,
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite() && *v > 0.0 && *v < 1.0) {
            return Err(Error::domain(
                "probabilities must lie strictly inside (0, 1)".to_string(),
            ));
        }
        Ok(ProbMap {
            height,
            width,
            values,
        })
    }

    pub fn constant(height: usize, width: usize, p: f64) -> Result<Self> {
        Self::from_values(height, width, vec![p; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Hard mask at the given probability threshold (`p >= threshold` is 1).
    pub fn threshold(&self, threshold: f64) -> LabelGrid {
        let values = self
            .values
            .iter()
            .map(|&p| u8::from(p >= threshold))
            .collect();
        LabelGrid::from_values(self.height, self.width, values).expect("0/1 values by construction")
    }
}

/// The pixel classifier: an architecture spec plus one flat arena of values
/// (weights, biases, batch-norm affine terms and running statistics).
#[derive(Debug, Clone)]
pub struct SegModel {
    spec: ModelSpec,
    seed: u64,
    pub(crate) def: NetDef,
    pub(crate) values: Vec<f64>,
}

impl SegModel {
    /// Initializes parameters from the seed: He-normal convolution weights,
    /// zero biases, unit batch-norm scale.
    pub fn init(spec: ModelSpec, seed: u64) -> SegModel {
        let def = NetDef::build(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = def.init_values(&mut rng);
        SegModel {
            spec,
            seed,
            def,
            values,
        }
    }

    /// Rebuilds a model from a previously serialized value arena.
    pub fn from_values(spec: ModelSpec, seed: u64, values: Vec<f64>) -> Result<SegModel> {
        let def = NetDef::build(&spec);
        if values.len() != def.len {
            return Err(Error::domain(format!(
                "value arena length {} does not match spec {} (expected {})",
                values.len(),
                spec.spec_string(),
                def.len
            )));
        }
        Ok(SegModel {
            spec,
            seed,
            def,
            values,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of trainable parameters.
    pub fn param_count(&self) -> usize {
        self.def.trainable_count()
    }

    /// The full value arena (trainable parameters plus batch-norm running
    /// statistics) in declaration order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Flat indices of trainable values within the arena.
    pub fn trainable_indices(&self) -> Vec<usize> {
        self.def.trainable.iter().flat_map(|r| r.clone()).collect()
    }

    pub fn get_value(&self, index: usize) -> f64 {
        self.values[index]
    }

    pub fn set_value(&mut self, index: usize, value: f64) {
        self.values[index] = value;
    }

    fn check_input(&self, height: usize, width: usize, channels: usize) -> Result<()> {
        if channels != self.spec.in_channels {
            return Err(Error::domain(format!(
                "input has {channels} channels but the model expects {}",
                self.spec.in_channels
            )));
        }
        let m = self.spec.dim_multiple();
        if height % m != 0 || width % m != 0 {
            return Err(Error::domain(format!(
                "input dims {height}x{width} must be divisible by {m} for {} downsampling stages",
                self.spec.n_down()
            )));
        }
        Ok(())
    }

    /// Deterministic inference: frozen batch-norm statistics, no dropout.
    /// Output has the same spatial dims as the input with values strictly
    /// inside (0, 1).
    pub fn predict(&self, x: &FeatureGrid) -> Result<ProbMap> {
        self.check_input(x.height(), x.width(), x.channels())?;
        let input = batch_from_features(&[x]);
        // Eval mode never mutates the arena, but forward's signature is
        // shared with training; clone to keep predict &self.
        let mut values = self.values.clone();
        let trace = self.def.forward(&mut values, input, &mut Mode::Eval);
        let probs = trace
            .probs
            .data
            .iter()
            .map(|&p| p.clamp(1e-12, 1.0 - 1e-12))
            .collect();
        ProbMap::from_values(x.height(), x.width(), probs)
    }
}

pub(crate) fn batch_from_features(samples: &[&FeatureGrid]) -> Tensor {
    let (h, w, c) = (
        samples[0].height(),
        samples[0].width(),
        samples[0].channels(),
    );
    let mut t = Tensor::zeros(samples.len(), c, h, w);
    for (n, g) in samples.iter().enumerate() {
        for ch in 0..c {
            let plane = t.plane_mut(n, ch);
            for r in 0..h {
                for col in 0..w {
                    plane[r * w + col] = g.get(r, col, ch);
                }
            }
        }
    }
    t
}
